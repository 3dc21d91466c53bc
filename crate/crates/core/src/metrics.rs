//! Segmentation metrics and the 4-fold episodic evaluation protocol.
//!
//! mIoU accumulates intersection and union counts per class across all of a
//! fold's episodes before dividing; FB-IoU averages the class-agnostic
//! foreground IoU with the background IoU.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::episodes::{
    derive_seed, make_weak, render_episode, sample_episode, DatasetConfig, EpisodeSpec,
    FoldSplit, Role,
};
use crate::error::{Error, Result};
use crate::model::{prepare_episode, CobNet};
use crate::tensor::{Graph, Mask};

/// Intersection/union pixel counts for one episode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IoUCounts {
    pub fg_intersection: u64,
    pub fg_union: u64,
    pub bg_intersection: u64,
    pub bg_union: u64,
}

/// Foreground and background intersection/union counts between a predicted
/// and a ground-truth mask.
pub fn episode_counts(pred: &Mask, truth: &Mask) -> Result<IoUCounts> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::Dimension(format!(
            "prediction {}x{} does not match ground truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let mut c = IoUCounts::default();
    for (&p, &t) in pred.values().iter().zip(truth.values()) {
        match (p, t) {
            (1, 1) => {
                c.fg_intersection += 1;
                c.fg_union += 1;
            }
            (1, 0) | (0, 1) => c.fg_union += 1,
            _ => {}
        }
        match (p, t) {
            (0, 0) => {
                c.bg_intersection += 1;
                c.bg_union += 1;
            }
            (0, 1) | (1, 0) => c.bg_union += 1,
            _ => {}
        }
    }
    Ok(c)
}

/// Per-class and class-agnostic tallies accumulated over episodes.
/// Merging is associative and commutative.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tally {
    per_class: BTreeMap<usize, (u64, u64)>,
    fg: (u64, u64),
    bg: (u64, u64),
}

impl Tally {
    pub fn new() -> Self {
        Tally::default()
    }

    pub fn add(&mut self, class_id: usize, counts: IoUCounts) {
        let entry = self.per_class.entry(class_id).or_insert((0, 0));
        entry.0 += counts.fg_intersection;
        entry.1 += counts.fg_union;
        self.fg.0 += counts.fg_intersection;
        self.fg.1 += counts.fg_union;
        self.bg.0 += counts.bg_intersection;
        self.bg.1 += counts.bg_union;
    }

    pub fn merge(&mut self, other: &Tally) {
        for (&class, &(i, u)) in &other.per_class {
            let entry = self.per_class.entry(class).or_insert((0, 0));
            entry.0 += i;
            entry.1 += u;
        }
        self.fg.0 += other.fg.0;
        self.fg.1 += other.fg.1;
        self.bg.0 += other.bg.0;
        self.bg.1 += other.bg.1;
    }

    pub fn classes(&self) -> impl Iterator<Item = (usize, (u64, u64))> + '_ {
        self.per_class.iter().map(|(&c, &t)| (c, t))
    }
}

/// Mean over classes of accumulated intersection / accumulated union.
/// Classes with zero union are excluded with a warning on stderr.
pub fn miou(tally: &Tally) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (class, (i, u)) in tally.classes() {
        if u == 0 {
            eprintln!("warning: class {class} has zero union; excluded from mIoU");
            continue;
        }
        sum += i as f64 / u as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean of the class-agnostic foreground IoU and the background IoU.
pub fn fb_iou(tally: &Tally) -> f64 {
    let fg = if tally.fg.1 == 0 {
        1.0
    } else {
        tally.fg.0 as f64 / tally.fg.1 as f64
    };
    let bg = if tally.bg.1 == 0 {
        1.0
    } else {
        tally.bg.0 as f64 / tally.bg.1 as f64
    };
    (fg + bg) / 2.0
}

/// Per-episode loss components.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    pub seg: f64,
    pub aux_mean: f64,
}

/// Outcome of evaluating one episode.
pub struct EpisodeResult {
    pub pred: Mask,
    pub counts: IoUCounts,
    pub class_id: usize,
    pub loss: LossBreakdown,
}

/// Run one episode through the model and score the prediction.
pub fn evaluate_episode(
    model: &CobNet,
    backbone: &Backbone,
    episode: &crate::episodes::Episode,
) -> Result<EpisodeResult> {
    let prepared = prepare_episode(backbone, episode)?;
    let mut g = Graph::inference();
    let out = model.forward(&mut g, &prepared.shots, &prepared.query, prepared.weak)?;
    let (h, w) = (prepared.query_mask.height(), prepared.query_mask.width());
    let pred = model.predict(&out, h, w)?;
    let counts = episode_counts(&pred, &prepared.query_mask)?;

    let total = model.loss(&mut g, &out, &prepared.query_mask)?.scalar_value()?;
    let final_up = g.bilinear_resize(&out.logits, h, w)?;
    let seg = g
        .softmax_cross_entropy(&final_up, &prepared.query_mask)?
        .scalar_value()?;
    Ok(EpisodeResult {
        pred,
        counts,
        class_id: prepared.class_id,
        loss: LossBreakdown {
            total,
            seg,
            aux_mean: total - seg,
        },
    })
}

/// Evaluation protocol parameters.
#[derive(Clone, Debug)]
pub struct EvalProtocol {
    pub episodes_per_fold: usize,
    pub k: usize,
    pub weak: bool,
    pub seed: u64,
    pub threads: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            episodes_per_fold: 1000,
            k: 1,
            weak: false,
            seed: 0,
            threads: 1,
        }
    }
}

/// Draw the held-out episode specs for one fold. Sampling is reproducible
/// from (seed, fold, k).
pub fn sample_fold_specs(
    data: &DatasetConfig,
    split: &FoldSplit,
    fold: usize,
    protocol: &EvalProtocol,
) -> Result<Vec<EpisodeSpec>> {
    let stream = derive_seed(protocol.seed, &[fold as u64, protocol.k as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    (0..protocol.episodes_per_fold)
        .map(|_| sample_episode(data, split, fold, Role::Test, protocol.k, &mut rng))
        .map(|ep| ep.map(|e| e.spec))
        .collect()
}

/// Evaluate a fixed list of episode specs, optionally across worker threads.
/// The merged tally is deterministic regardless of thread count: per-episode
/// results are combined in episode order.
pub fn evaluate_specs(
    model: &CobNet,
    backbone: &Backbone,
    data: &DatasetConfig,
    specs: &[EpisodeSpec],
    weak: bool,
    threads: usize,
) -> Result<Tally> {
    let threads = threads.max(1);
    let results: Mutex<Vec<Option<Result<(usize, IoUCounts)>>>> =
        Mutex::new((0..specs.len()).map(|_| None).collect());
    let run_one = |spec: &EpisodeSpec| -> Result<(usize, IoUCounts)> {
        let episode = render_episode(data, spec)?;
        let episode = if weak { make_weak(&episode) } else { episode };
        let outcome = evaluate_episode(model, backbone, &episode)?;
        Ok((outcome.class_id, outcome.counts))
    };
    if threads == 1 {
        let mut tally = Tally::new();
        for spec in specs {
            let (class_id, counts) = run_one(spec)?;
            tally.add(class_id, counts);
        }
        return Ok(tally);
    }
    std::thread::scope(|scope| {
        for worker in 0..threads {
            let results = &results;
            let run_one = &run_one;
            scope.spawn(move || {
                for (i, spec) in specs.iter().enumerate() {
                    if i % threads != worker {
                        continue;
                    }
                    let outcome = run_one(spec);
                    results.lock().unwrap()[i] = Some(outcome);
                }
            });
        }
    });
    let mut tally = Tally::new();
    for slot in results.into_inner().unwrap() {
        let (class_id, counts) = slot.expect("every episode evaluated")?;
        tally.add(class_id, counts);
    }
    Ok(tally)
}

/// Tally of a predictor that always outputs background, over the same
/// episode specs.
pub fn all_background_baseline(
    data: &DatasetConfig,
    specs: &[EpisodeSpec],
) -> Result<Tally> {
    let mut tally = Tally::new();
    for spec in specs {
        let episode = render_episode(data, spec)?;
        let zeros = Mask::zeros(episode.query_mask.height(), episode.query_mask.width());
        tally.add(spec.class_id, episode_counts(&zeros, &episode.query_mask)?);
    }
    Ok(tally)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub miou: f64,
    pub fb_iou: f64,
}

/// Per-fold metrics plus across-fold means.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub k: usize,
    pub weak: bool,
    pub folds: Vec<FoldReport>,
    pub mean_miou: f64,
    pub mean_fb_iou: f64,
}

impl Report {
    pub fn from_folds(k: usize, weak: bool, folds: Vec<FoldReport>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean_miou = folds.iter().map(|f| f.miou).sum::<f64>() / n;
        let mean_fb_iou = folds.iter().map(|f| f.fb_iou).sum::<f64>() / n;
        Report {
            k,
            weak,
            folds,
            mean_miou,
            mean_fb_iou,
        }
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{}-shot{} evaluation\n",
            self.k,
            if self.weak { " (weak)" } else { "" }
        ));
        s.push_str("fold    mIoU     FB-IoU\n");
        for f in &self.folds {
            s.push_str(&format!("{:<7} {:<8.4} {:<8.4}\n", f.fold, f.miou, f.fb_iou));
        }
        s.push_str(&format!(
            "{:<7} {:<8.4} {:<8.4}\n",
            "mean", self.mean_miou, self.mean_fb_iou
        ));
        s
    }

    /// Line-oriented key=value records for machine parsing. Floats print in
    /// shortest round-trip form, so identical reports produce identical text.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for f in &self.folds {
            s.push_str(&format!(
                "fold={} k={} weak={} miou={} fbiou={}\n",
                f.fold, self.k, self.weak, f.miou, f.fb_iou
            ));
        }
        s.push_str(&format!(
            "fold=mean k={} weak={} miou={} fbiou={}\n",
            self.k, self.weak, self.mean_miou, self.mean_fb_iou
        ));
        s
    }
}

/// Full cross-validation: evaluate each fold's model on that fold's held-out
/// episodes and average the per-fold metrics.
pub fn cross_validate(
    load_model: &dyn Fn(usize) -> Result<CobNet>,
    backbone: &Backbone,
    data: &DatasetConfig,
    split: &FoldSplit,
    protocol: &EvalProtocol,
) -> Result<Report> {
    let mut folds = Vec::with_capacity(split.num_folds());
    for fold in 0..split.num_folds() {
        let model = load_model(fold)?;
        let specs = sample_fold_specs(data, split, fold, protocol)?;
        let tally = evaluate_specs(
            &model,
            backbone,
            data,
            &specs,
            protocol.weak,
            protocol.threads,
        )?;
        folds.push(FoldReport {
            fold,
            miou: miou(&tally),
            fb_iou: fb_iou(&tally),
        });
    }
    Ok(Report::from_folds(protocol.k, protocol.weak, folds))
}
