//! Full-model gradient verification: central finite differences over every
//! trainable parameter of a small fixed episode, compared against the
//! analytic gradients from the reverse pass.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::episodes::{derive_seed, sample_episode, DatasetConfig, FoldSplit, Role};
use crate::error::Result;
use crate::model::{prepare_episode, Ablation, CobNet, ModelConfig, PreparedEpisode};
use crate::tensor::Graph;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub channels: usize,
    pub feature_side: usize,
    pub scales: Vec<usize>,
    pub grid: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            channels: 4,
            feature_side: 8,
            scales: vec![4, 2],
            grid: 2,
            seed: 0,
            step: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

/// Relative error with a small floor so that near-zero gradient pairs
/// (e.g. inactive relu paths) compare on an absolute scale.
fn rel_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-5)
}

/// Check every trainable parameter of the full model on one fixed episode.
///
/// `corrupt` is a test hook: the named parameter's analytic gradient is
/// shifted before comparison, so the check must fail.
pub fn run(cfg: &GradcheckConfig, corrupt: Option<&str>) -> Result<GradcheckReport> {
    let start = Instant::now();
    let backbone = Backbone::new(BackboneConfig {
        channels: cfg.channels,
        downsample: 4,
        seed: derive_seed(cfg.seed, &[0xbb]),
        layers: 3,
    })?;
    let data = DatasetConfig {
        side: cfg.feature_side * 4,
        feature_side: cfg.feature_side,
        ..DatasetConfig::default()
    };
    let split = FoldSplit::new(data.classes, data.folds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xe9]));
    let episode = sample_episode(&data, &split, 0, Role::Test, 1, &mut rng)?;
    let prepared = prepare_episode(&backbone, &episode)?;

    let model = CobNet::new(ModelConfig {
        channels: cfg.channels,
        scales: cfg.scales.clone(),
        grid: cfg.grid,
        ablation: Ablation::Full,
        seed: derive_seed(cfg.seed, &[0x30d]),
    })?;

    // Analytic gradients from one recorded forward/backward.
    model.zero_grads();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &prepared.shots, &prepared.query, false)?;
    let loss = model.loss(&mut g, &out, &prepared.query_mask)?;
    g.backward(&loss)?;

    let eval_loss = |prepared: &PreparedEpisode| -> Result<f64> {
        let mut g = Graph::inference();
        let out = model.forward(&mut g, &prepared.shots, &prepared.query, false)?;
        model.loss(&mut g, &out, &prepared.query_mask)?.scalar_value()
    };

    let mut params = Vec::new();
    let mut overall: f64 = 0.0;
    for (name, tensor) in model.named_params() {
        let mut analytic = tensor.grad().expect("trainable parameter gradient");
        if corrupt == Some(name.as_str()) {
            analytic[0] += 0.1;
        }
        let mut worst: f64 = 0.0;
        for idx in 0..tensor.numel() {
            let original = tensor.to_vec()[idx];
            tensor.overwrite_data(|d| d[idx] = original + cfg.step);
            let plus = eval_loss(&prepared)?;
            tensor.overwrite_data(|d| d[idx] = original - cfg.step);
            let minus = eval_loss(&prepared)?;
            tensor.overwrite_data(|d| d[idx] = original);
            let fd = (plus - minus) / (2.0 * cfg.step);
            worst = worst.max(rel_error(analytic[idx], fd));
        }
        overall = overall.max(worst);
        params.push(ParamCheck {
            name,
            max_rel_error: worst,
        });
    }
    Ok(GradcheckReport {
        params,
        max_rel_error: overall,
        elapsed: start.elapsed(),
    })
}
