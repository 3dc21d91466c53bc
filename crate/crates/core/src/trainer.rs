//! Meta-training: SGD with momentum under a poly learning-rate schedule.
//! Each batch averages the losses of independently sampled training
//! episodes; the frozen backbone never enters the optimizer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::episodes::{
    augment, derive_seed, sample_episode, DatasetConfig, FoldSplit, Role,
};
use crate::error::{Error, Result};
use crate::model::{self, prepare_episode, Ablation, CobNet, ModelConfig};
use crate::proto::resize_binary;
use crate::tensor::{Graph, Tensor};

/// Training hyperparameters and model/dataset knobs that affect training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Evaluation-time flag carried alongside for provenance.
    pub weak: bool,
    pub grid: usize,
    pub scales: Vec<usize>,
    pub channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.001,
            momentum: 0.9,
            epochs: 40,
            batches_per_epoch: 5,
            batch_size: 4,
            poly_power: 0.9,
            seed: 0,
            ablation: Ablation::Full,
            weak: false,
            grid: 4,
            scales: vec![16, 8, 4, 2],
            channels: 64,
        }
    }
}

impl TrainConfig {
    pub fn total_iterations(&self) -> usize {
        self.epochs * self.batches_per_epoch
    }

    /// Provenance lines stored in checkpoint manifests.
    pub fn manifest_lines(&self) -> Vec<String> {
        let scales: Vec<String> = self.scales.iter().map(|s| s.to_string()).collect();
        vec![
            format!("base_lr={}", self.base_lr),
            format!("momentum={}", self.momentum),
            format!("epochs={}", self.epochs),
            format!("batches_per_epoch={}", self.batches_per_epoch),
            format!("batch_size={}", self.batch_size),
            format!("poly_power={}", self.poly_power),
            format!("train_seed={}", self.seed),
            format!("ablation={}", self.ablation.name()),
            format!("weak={}", self.weak),
            format!("grid={}", self.grid),
            format!("train_scales={}", scales.join(",")),
            format!("channels={}", self.channels),
        ]
    }
}

/// Model configuration used when training the given fold; the untrained
/// baseline for a fold is `CobNet::new(model_config_for(cfg, fold))`.
pub fn model_config_for(cfg: &TrainConfig, fold: usize) -> ModelConfig {
    ModelConfig {
        channels: cfg.channels,
        scales: cfg.scales.clone(),
        grid: cfg.grid,
        ablation: cfg.ablation,
        seed: derive_seed(cfg.seed, &[fold as u64, 0x10de1]),
    }
}

/// base_lr · (1 − iter/max_iter)^power.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> f64 {
    let frac = 1.0 - iter as f64 / max_iter as f64;
    base_lr * frac.powf(power)
}

/// SGD with momentum: v ← momentum·v + g; p ← p − lr·v.
pub struct SgdMomentum {
    entries: Vec<(String, Tensor, Vec<f64>)>,
    momentum: f64,
}

impl SgdMomentum {
    /// Fails if any tensor does not track gradients, which structurally
    /// excludes frozen backbone weights from the registry.
    pub fn new(params: Vec<(String, Tensor)>, momentum: f64) -> Result<Self> {
        let mut entries = Vec::with_capacity(params.len());
        for (name, p) in params {
            if !p.requires_grad() {
                return Err(Error::Usage(format!(
                    "parameter {name} is frozen and cannot be optimized"
                )));
            }
            let velocity = vec![0.0; p.numel()];
            entries.push((name, p, velocity));
        }
        Ok(SgdMomentum { entries, momentum })
    }

    pub fn step(&mut self, lr: f64) {
        for (_, p, velocity) in &mut self.entries {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            p.overwrite_data(|data| {
                for ((d, v), g) in data.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                    *v = self.momentum * *v + g;
                    *d -= lr * *v;
                }
            });
        }
    }

    pub fn zero_grads(&self) {
        for (_, p, _) in &self.entries {
            p.zero_grad();
        }
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _, _)| n.as_str()).collect()
    }
}

/// One loss-log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub model: CobNet,
    pub log: Vec<LogEntry>,
}

/// Train one fold on episodes drawn from the three non-test folds. When
/// `out_dir` is given, writes the checkpoint bundle plus `loss.log`
/// (one `iteration lr loss` line per iteration).
pub fn train_fold(
    backbone: &Backbone,
    data: &DatasetConfig,
    split: &FoldSplit,
    fold: usize,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || cfg.total_iterations() == 0 {
        return Err(Error::Config(
            "batch size and iteration count must be positive".to_string(),
        ));
    }
    let model = CobNet::new(model_config_for(cfg, fold))?;
    let mut optimizer = SgdMomentum::new(model.named_params(), cfg.momentum)?;
    let mut sampler_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[fold as u64, 0x5a3]));
    let mut augment_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[fold as u64, 0xa46]));

    let total = cfg.total_iterations();
    let mut log = Vec::with_capacity(total);
    for iteration in 0..total {
        let lr = poly_lr(iteration, total, cfg.base_lr, cfg.poly_power);
        optimizer.zero_grads();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let episode = sample_episode(data, split, fold, Role::Train, 1, &mut sampler_rng)?;
            let episode = augment_episode(&episode, data, &mut augment_rng);
            let prepared = prepare_episode(backbone, &episode)?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, &prepared.shots, &prepared.query, false)?;
            let loss = model.loss(&mut g, &out, &prepared.query_mask)?;
            let value = loss.scalar_value()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    manifest: episode.spec.to_line(),
                });
            }
            batch_loss += value;
            let scaled = g.scale(&loss, 1.0 / cfg.batch_size as f64);
            g.backward(&scaled)?;
        }
        optimizer.step(lr);
        log.push(LogEntry {
            iteration,
            lr,
            loss: batch_loss / cfg.batch_size as f64,
        });
    }

    if let Some(dir) = out_dir {
        model::save_checkpoint(dir, &model, &cfg.manifest_lines())?;
        let mut text = String::new();
        for entry in &log {
            text.push_str(&format!("{} {} {}\n", entry.iteration, entry.lr, entry.loss));
        }
        std::fs::write(dir.join("loss.log"), text)?;
    }
    Ok(TrainOutcome { model, log })
}

/// Flip/rotate every image/mask pair of the episode. A support pair whose
/// augmented mask becomes empty at feature resolution is kept unaugmented;
/// the sampler guarantees the original is valid.
fn augment_episode(
    episode: &crate::episodes::Episode,
    data: &DatasetConfig,
    rng: &mut ChaCha8Rng,
) -> crate::episodes::Episode {
    let mut support = Vec::with_capacity(episode.support.len());
    for (img, mask) in &episode.support {
        let (aug_img, aug_mask) = augment(img, mask, rng);
        let valid = resize_binary(&aug_mask, data.feature_side, data.feature_side)
            .map(|m| m.count_ones() > 0)
            .unwrap_or(false);
        if valid {
            support.push((aug_img, aug_mask));
        } else {
            support.push((img.clone(), mask.clone()));
        }
    }
    let (query, query_mask) = augment(&episode.query, &episode.query_mask, rng);
    crate::episodes::Episode {
        spec: episode.spec.clone(),
        support,
        query,
        query_mask,
        weak: episode.weak,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    #[test]
    fn poly_schedule_endpoints_and_midpoint() {
        assert_eq!(poly_lr(0, 100, 0.001, 0.9), 0.001);
        assert_eq!(poly_lr(100, 100, 0.001, 0.9), 0.0);
        let mid = poly_lr(50, 100, 0.001, 0.9);
        assert!((mid - 0.001 * 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((mid - 5.359e-4).abs() < 1e-6);
    }

    #[test]
    fn poly_schedule_is_non_increasing() {
        let mut last = f64::INFINITY;
        for i in 0..=200 {
            let lr = poly_lr(i, 200, 0.001, 0.9);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn sgd_plain_step_decrements_by_gradient() {
        let p = Tensor::param(vec![1], vec![0.0]).unwrap();
        p.accumulate_grad(&[1.0]);
        let mut opt = SgdMomentum::new(vec![("p".into(), p.clone())], 0.0).unwrap();
        opt.step(1.0);
        assert_eq!(p.to_vec(), vec![-1.0]);
    }

    #[test]
    fn sgd_two_momentum_steps_match_hand_computation() {
        // g1 = g2 = 1, momentum 0.9, lr 0.1, p0 = 0:
        // v1 = 1, p1 = -0.1; v2 = 1.9, p2 = -0.29
        let p = Tensor::param(vec![1], vec![0.0]).unwrap();
        let mut opt = SgdMomentum::new(vec![("p".into(), p.clone())], 0.9).unwrap();
        p.accumulate_grad(&[1.0]);
        opt.step(0.1);
        opt.zero_grads();
        p.accumulate_grad(&[1.0]);
        opt.step(0.1);
        assert!((p.to_vec()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn velocity_decays_once_gradient_stops() {
        let p = Tensor::param(vec![1], vec![0.0]).unwrap();
        let mut opt = SgdMomentum::new(vec![("p".into(), p.clone())], 0.9).unwrap();
        p.accumulate_grad(&[1.0]);
        opt.step(1.0);
        opt.zero_grads();
        let mut last = p.to_vec()[0];
        let mut deltas = Vec::new();
        for _ in 0..5 {
            opt.step(1.0);
            let now = p.to_vec()[0];
            deltas.push(last - now);
            last = now;
        }
        for pair in deltas.windows(2) {
            assert!((pair[1] / pair[0] - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_tensors_are_rejected_by_the_optimizer() {
        let frozen = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            SgdMomentum::new(vec![("backbone.w".into(), frozen)], 0.9),
            Err(Error::Usage(_))
        ));
    }

    fn tiny_train_config() -> (Backbone, DatasetConfig, FoldSplit, TrainConfig) {
        let backbone = Backbone::new(BackboneConfig {
            channels: 8,
            downsample: 4,
            seed: 2,
            layers: 3,
        })
        .unwrap();
        let data = DatasetConfig {
            side: 32,
            feature_side: 8,
            ..DatasetConfig::default()
        };
        let split = FoldSplit::new(12, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batches_per_epoch: 2,
            batch_size: 2,
            channels: 8,
            scales: vec![8, 4, 2],
            grid: 2,
            seed: 31,
            ..TrainConfig::default()
        };
        (backbone, data, split, cfg)
    }

    #[test]
    fn identical_seeds_give_identical_loss_curves() {
        let (backbone, data, split, cfg) = tiny_train_config();
        let a = train_fold(&backbone, &data, &split, 0, &cfg, None).unwrap();
        let b = train_fold(&backbone, &data, &split, 0, &cfg, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), cfg.total_iterations());
    }

    #[test]
    fn checkpoint_written_with_loss_log() {
        let (backbone, data, split, cfg) = tiny_train_config();
        let dir = tempfile::tempdir().unwrap();
        let outcome = train_fold(&backbone, &data, &split, 1, &cfg, Some(dir.path())).unwrap();
        let log_text = std::fs::read_to_string(dir.path().join("loss.log")).unwrap();
        assert_eq!(log_text.lines().count(), cfg.total_iterations());
        let reloaded = crate::model::load_checkpoint(dir.path()).unwrap();
        for ((na, pa), (nb, pb)) in outcome
            .model
            .named_params()
            .iter()
            .zip(reloaded.named_params().iter())
        {
            assert_eq!(na, nb);
            let (va, vb) = (pa.to_vec(), pb.to_vec());
            for (x, y) in va.iter().zip(vb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
