use std::time::Instant;

use cobnet_core::backbone::{Backbone, BackboneConfig};
use cobnet_core::episodes::{DatasetConfig, FoldSplit};
use cobnet_core::metrics::{evaluate_specs, fb_iou, miou, sample_fold_specs, EvalProtocol};
use cobnet_core::model::CobNet;
use cobnet_core::trainer::{model_config_for, train_fold, TrainConfig};

fn main() {
    let backbone = Backbone::new(BackboneConfig::default()).unwrap();
    let data = DatasetConfig::default();
    let split = FoldSplit::new(12, 4).unwrap();
    let cfg = TrainConfig::default();
    let fold = 0;

    let t0 = Instant::now();
    let outcome = train_fold(&backbone, &data, &split, fold, &cfg, None).unwrap();
    println!("trained fold {fold} in {:?} ({} iterations)", t0.elapsed(), outcome.log.len());
    let first10: f64 = outcome.log[..10].iter().map(|e| e.loss).sum::<f64>() / 10.0;
    let last10: f64 = outcome.log[outcome.log.len() - 10..].iter().map(|e| e.loss).sum::<f64>() / 10.0;
    println!("first-10 mean loss {:.4}, last-10 mean loss {:.4}", first10, last10);

    let protocol = EvalProtocol { episodes_per_fold: 150, k: 1, weak: false, seed: 900, threads: 2 };
    let specs = sample_fold_specs(&data, &split, fold, &protocol).unwrap();
    let t0 = Instant::now();
    let tally = evaluate_specs(&outcome.model, &backbone, &data, &specs, false, 2).unwrap();
    println!("eval 150 eps in {:?}: trained miou={:.4} fb={:.4}", t0.elapsed(), miou(&tally), fb_iou(&tally));

    let untrained = CobNet::new(model_config_for(&cfg, fold)).unwrap();
    let tally0 = evaluate_specs(&untrained, &backbone, &data, &specs, false, 2).unwrap();
    println!("untrained miou={:.4} fb={:.4}", miou(&tally0), fb_iou(&tally0));
}
