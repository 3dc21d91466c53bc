use cobnet_core::backbone::{Backbone, BackboneConfig};
use cobnet_core::episodes::{sample_episode, DatasetConfig, FoldSplit, Role};
use cobnet_core::model::{episode_align_mask, prepare_episode};
use cobnet_core::proto::resize_binary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let backbone = Backbone::new(BackboneConfig::default()).unwrap();
    let data = DatasetConfig::default();
    let split = FoldSplit::new(12, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    let mut mean_fg = 0.0;
    let mut mean_bg = 0.0;
    let mut best_iou = 0.0;
    let mut n = 0.0;
    for _ in 0..40 {
        let ep = sample_episode(&data, &split, 0, Role::Test, 1, &mut rng).unwrap();
        let p = prepare_episode(&backbone, &ep).unwrap();
        let align = episode_align_mask(&p.query, &p.shots).unwrap();
        let gt = resize_binary(&ep.query_mask, 16, 16).unwrap();
        let a = align.tensor().to_vec();
        let (mut fg_sum, mut fg_n, mut bg_sum, mut bg_n) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..256 {
            if gt.values()[i] == 1 {
                fg_sum += a[i];
                fg_n += 1.0;
            } else {
                bg_sum += a[i];
                bg_n += 1.0;
            }
        }
        if fg_n == 0.0 { continue; }
        mean_fg += fg_sum / fg_n;
        mean_bg += bg_sum / bg_n;
        // IoU of thresholded align vs gt at best fixed threshold 0.7
        let (mut i_, mut u_) = (0u32, 0u32);
        for i in 0..256 {
            let pred = (a[i] >= 0.7) as u8;
            if pred == 1 && gt.values()[i] == 1 { i_ += 1; }
            if pred == 1 || gt.values()[i] == 1 { u_ += 1; }
        }
        if u_ > 0 { best_iou += i_ as f64 / u_ as f64; }
        n += 1.0;
    }
    println!("mean align over fg pixels: {:.4}", mean_fg / n);
    println!("mean align over bg pixels: {:.4}", mean_bg / n);
    println!("mean IoU of (align>=0.7): {:.4}", best_iou / n);
}
