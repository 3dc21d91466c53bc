use std::time::Instant;

use cobnet_core::backbone::{Backbone, BackboneConfig};
use cobnet_core::episodes::{sample_episode, DatasetConfig, FoldSplit, Role};
use cobnet_core::model::{prepare_episode, CobNet, ModelConfig};
use cobnet_core::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let backbone = Backbone::new(BackboneConfig::default()).unwrap();
    let data = DatasetConfig::default();
    let split = FoldSplit::new(12, 4).unwrap();
    let model = CobNet::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let t0 = Instant::now();
    let eps: Vec<_> = (0..8)
        .map(|_| sample_episode(&data, &split, 0, Role::Train, 1, &mut rng).unwrap())
        .collect();
    println!("sample+render 8 episodes: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let prepared: Vec<_> = eps.iter().map(|e| prepare_episode(&backbone, e).unwrap()).collect();
    println!("backbone features 8 episodes (16 images): {:?}", t0.elapsed());

    let t0 = Instant::now();
    for p in &prepared {
        let mut g = Graph::inference();
        let out = model.forward(&mut g, &p.shots, &p.query, false).unwrap();
        let _ = model.predict(&out, 64, 64).unwrap();
    }
    println!("inference forward+predict x8: {:?}", t0.elapsed());

    let t0 = Instant::now();
    for p in &prepared {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &p.shots, &p.query, false).unwrap();
        let loss = model.loss(&mut g, &out, &p.query_mask).unwrap();
        g.backward(&loss).unwrap();
    }
    println!("train forward+backward x8: {:?}", t0.elapsed());
}
