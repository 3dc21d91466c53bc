//! Synthetic episodic dataset: 12 shape classes split into 4 folds, rendered
//! over 6 background styles. Support and query backgrounds are drawn
//! independently by default, so the background usually differs between the
//! annotated examples and the image being segmented.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::ImageTensor;
use crate::error::{Error, Result};
use crate::proto::resize_binary;
use crate::tensor::{io, Mask, Tensor};

/// Generator configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    /// Image side in pixels (square images).
    pub side: usize,
    pub classes: usize,
    pub folds: usize,
    pub background_styles: usize,
    /// Force the query background style to match the first support style.
    pub match_backgrounds: bool,
    /// Feature-map side used to validate that resized support masks stay
    /// non-empty when sampling.
    pub feature_side: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            side: 64,
            classes: 12,
            folds: 4,
            background_styles: 6,
            match_backgrounds: false,
            feature_side: 16,
        }
    }
}

/// Disjoint partition of the class set into folds.
#[derive(Clone, Debug)]
pub struct FoldSplit {
    folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn new(classes: usize, folds: usize) -> Result<Self> {
        if folds == 0 || classes == 0 || classes % folds != 0 {
            return Err(Error::Config(format!(
                "{classes} classes cannot be split into {folds} equal folds"
            )));
        }
        let per = classes / folds;
        let folds = (0..folds)
            .map(|f| (f * per..(f + 1) * per).collect())
            .collect();
        Ok(FoldSplit { folds })
    }

    pub fn num_folds(&self) -> usize {
        self.folds.len()
    }

    /// Classes held out for testing in the given fold.
    pub fn test_classes(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Classes available for training when the given fold is held out.
    pub fn train_classes(&self, fold: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, cs)| cs.iter().copied())
            .collect()
    }

    pub fn fold_of(&self, class_id: usize) -> Option<usize> {
        self.folds.iter().position(|cs| cs.contains(&class_id))
    }
}

/// Whether an episode draws its class from the held-out fold or from the
/// training folds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Train,
    Test,
}

/// Everything needed to re-render an episode exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub class_id: usize,
    pub fold_id: usize,
    pub support_seeds: Vec<u64>,
    pub support_bgs: Vec<usize>,
    pub query_seed: u64,
    pub query_bg: usize,
}

impl EpisodeSpec {
    /// One replayable manifest line.
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.support_seeds.iter().map(|v| v.to_string()).collect();
        let bgs: Vec<String> = self.support_bgs.iter().map(|v| v.to_string()).collect();
        write!(
            s,
            "class={} fold={} sseeds={} sbgs={} qseed={} qbg={}",
            self.class_id,
            self.fold_id,
            seeds.join(":"),
            bgs.join(":"),
            self.query_seed,
            self.query_bg
        )
        .expect("write to string");
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut class_id = None;
        let mut fold_id = None;
        let mut support_seeds = None;
        let mut support_bgs = None;
        let mut query_seed = None;
        let mut query_bg = None;
        for field in line.split_whitespace() {
            let (key, value) = field.split_once('=').ok_or_else(|| {
                Error::Format(format!("manifest field without '=': {field}"))
            })?;
            match key {
                "class" => class_id = Some(parse_num(value)?),
                "fold" => fold_id = Some(parse_num(value)?),
                "sseeds" => {
                    support_seeds = Some(
                        value
                            .split(':')
                            .map(parse_num::<u64>)
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "sbgs" => {
                    support_bgs = Some(
                        value
                            .split(':')
                            .map(parse_num::<usize>)
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "qseed" => query_seed = Some(parse_num(value)?),
                "qbg" => query_bg = Some(parse_num(value)?),
                other => {
                    return Err(Error::Format(format!(
                        "unknown manifest field: {other}"
                    )))
                }
            }
        }
        Ok(EpisodeSpec {
            class_id: class_id.ok_or_else(|| missing("class"))?,
            fold_id: fold_id.ok_or_else(|| missing("fold"))?,
            support_seeds: support_seeds.ok_or_else(|| missing("sseeds"))?,
            support_bgs: support_bgs.ok_or_else(|| missing("sbgs"))?,
            query_seed: query_seed.ok_or_else(|| missing("qseed"))?,
            query_bg: query_bg.ok_or_else(|| missing("qbg"))?,
        })
    }
}

fn missing(key: &str) -> Error {
    Error::Format(format!("manifest line missing field {key}"))
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad number in manifest: {s}")))
}

/// One few-shot task: k annotated support pairs, a query image, and the
/// query's ground-truth mask (used for evaluation only).
#[derive(Clone, Debug)]
pub struct Episode {
    pub spec: EpisodeSpec,
    pub support: Vec<(ImageTensor, Mask)>,
    pub query: ImageTensor,
    pub query_mask: Mask,
    /// When set, support annotations are all-ones and prototypes fall back
    /// to global average pooling.
    pub weak: bool,
}

// ── Scene rendering ──────────────────────────────────────────────────

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Independent seed stream derived from a base seed and a tag path.
pub(crate) fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix(base);
    for (i, &p) in parts.iter().enumerate() {
        acc ^= splitmix(p.wrapping_add((i as u64 + 1) << 32).wrapping_add(acc));
    }
    acc
}

fn scene_rng(class_id: usize, background_id: usize, seed: u64) -> ChaCha8Rng {
    let mixed = splitmix(seed)
        ^ splitmix(class_id as u64 ^ 0xc1a55)
        ^ splitmix(background_id as u64 ^ 0xb6_0000);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Golden-ratio spaced class hue, jittered per instance.
fn class_color(class_id: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let hue = (class_id as f64 * 0.618033988749895).fract();
    let hue = hue + rng.gen_range(-0.04..0.04);
    let sat: f64 = 0.85 + rng.gen_range(-0.08..0.08);
    let val: f64 = 0.9 + rng.gen_range(-0.08..0.05);
    hsv_to_rgb(hue, sat.clamp(0.0, 1.0), val.clamp(0.0, 1.0))
}

fn muted_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let hue = rng.gen_range(0.0..1.0);
    let sat = rng.gen_range(0.05..0.35);
    let val = rng.gen_range(0.25..0.8);
    hsv_to_rgb(hue, sat, val)
}

fn vivid_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let hue = rng.gen_range(0.0..1.0);
    let sat = rng.gen_range(0.6..0.9);
    let val = rng.gen_range(0.6..0.95);
    hsv_to_rgb(hue, sat, val)
}

/// Second pattern color: sometimes a saturated distractor that can resemble
/// an object hue.
fn pattern_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    if rng.gen_bool(0.5) {
        vivid_color(rng)
    } else {
        muted_color(rng)
    }
}

fn paint(buf: &mut [f64], side: usize, y: usize, x: usize, color: [f64; 3]) {
    let plane = side * side;
    for (ch, &v) in color.iter().enumerate() {
        buf[ch * plane + y * side + x] = v;
    }
}

fn render_background(buf: &mut [f64], side: usize, style: usize, rng: &mut ChaCha8Rng) {
    match style {
        0 => {
            let c = muted_color(rng);
            for y in 0..side {
                for x in 0..side {
                    paint(buf, side, y, x, c);
                }
            }
        }
        1 => {
            let a = muted_color(rng);
            let b = muted_color(rng);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = (theta.sin(), theta.cos());
            let n = side as f64;
            for y in 0..side {
                for x in 0..side {
                    let t = ((y as f64 * dy + x as f64 * dx) / (n * 1.5) + 0.5).clamp(0.0, 1.0);
                    let c = [
                        a[0] * (1.0 - t) + b[0] * t,
                        a[1] * (1.0 - t) + b[1] * t,
                        a[2] * (1.0 - t) + b[2] * t,
                    ];
                    paint(buf, side, y, x, c);
                }
            }
        }
        2 => {
            let base = muted_color(rng);
            for y in 0..side {
                for x in 0..side {
                    let c = [
                        base[0] + rng.gen_range(-0.15..0.15),
                        base[1] + rng.gen_range(-0.15..0.15),
                        base[2] + rng.gen_range(-0.15..0.15),
                    ];
                    paint(buf, side, y, x, c);
                }
            }
        }
        3 => {
            let a = muted_color(rng);
            let b = pattern_color(rng);
            let cell = *[4usize, 8, 16][..].get(rng.gen_range(0..3)).unwrap();
            for y in 0..side {
                for x in 0..side {
                    let c = if ((y / cell) + (x / cell)) % 2 == 0 { a } else { b };
                    paint(buf, side, y, x, c);
                }
            }
        }
        4 => {
            let a = muted_color(rng);
            let b = pattern_color(rng);
            let width = rng.gen_range(4..13) as f64;
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let (dy, dx) = (theta.sin(), theta.cos());
            for y in 0..side {
                for x in 0..side {
                    let t = (y as f64 * dy + x as f64 * dx) / width;
                    let c = if (t.floor() as i64).rem_euclid(2) == 0 { a } else { b };
                    paint(buf, side, y, x, c);
                }
            }
        }
        _ => {
            let base = muted_color(rng);
            for y in 0..side {
                for x in 0..side {
                    paint(buf, side, y, x, base);
                }
            }
            let blobs = rng.gen_range(3..7);
            for _ in 0..blobs {
                let c = pattern_color(rng);
                let r = rng.gen_range(4.0..12.0);
                let cy = rng.gen_range(0.0..side as f64);
                let cx = rng.gen_range(0.0..side as f64);
                let r2 = r * r;
                for y in 0..side {
                    for x in 0..side {
                        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                        if dy * dy + dx * dx <= r2 {
                            paint(buf, side, y, x, c);
                        }
                    }
                }
            }
        }
    }
}

/// Shape membership predicate; offsets are pixel-center minus shape center,
/// `r` the nominal radius. Every shape fits inside the |dy|,|dx| ≤ r box.
fn inside_shape(kind: usize, dy: f64, dx: f64, r: f64) -> bool {
    match kind % 12 {
        0 => dy * dy + dx * dx <= r * r,
        1 => dy.abs().max(dx.abs()) <= 0.9 * r,
        2 => dy >= -r && dy <= 0.85 * r && dx.abs() <= 0.95 * r * (dy + r) / (1.85 * r),
        3 => dy.abs() + dx.abs() <= r,
        4 => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        5 => (dx.abs() <= 0.35 * r && dy.abs() <= r) || (dy.abs() <= 0.35 * r && dx.abs() <= r),
        6 => dy * dy + dx * dx <= r * r && dy >= 0.1 * r,
        7 => dy.abs() <= 0.45 * r && dx.abs() <= r,
        8 => dx.abs() <= 0.45 * r && dy.abs() <= r,
        9 => dy.abs().max(dx.abs()) <= r && !(dx > -0.1 * r && dy < 0.1 * r),
        10 => {
            (dy <= -0.3 * r && dy >= -r && dx.abs() <= r)
                || (dx.abs() <= 0.3 * r && (-0.3 * r..=r).contains(&dy))
        }
        _ => {
            let a = dx / r;
            let b = dy / (0.55 * r);
            a * a + b * b <= 1.0
        }
    }
}

/// Deterministic scene: one class shape over one background style. The mask
/// marks shape pixels exactly: it is derived from the same predicate that
/// paints them.
pub fn render_scene(
    cfg: &DatasetConfig,
    class_id: usize,
    background_id: usize,
    seed: u64,
) -> Result<(ImageTensor, Mask)> {
    let side = cfg.side;
    if side < 32 {
        return Err(Error::Config(format!("image side {side} too small")));
    }
    let mut rng = scene_rng(class_id, background_id, seed);
    let scale = side as f64 / 64.0;
    // Placement keeps every shape pixel at least 10*scale from the border,
    // so a ±15 degree rotation about the image center never clips it.
    let r = rng.gen_range(9.0 * scale..16.0 * scale);
    let margin = r + 10.0 * scale;
    let cy = rng.gen_range(margin..side as f64 - 1.0 - margin);
    let cx = rng.gen_range(margin..side as f64 - 1.0 - margin);
    let color = class_color(class_id, &mut rng);

    let mut buf = vec![0.0; 3 * side * side];
    render_background(&mut buf, side, background_id % cfg.background_styles, &mut rng);

    let mut mask = Mask::zeros(side, side);
    for y in 0..side {
        for x in 0..side {
            if inside_shape(class_id, y as f64 - cy, x as f64 - cx, r) {
                paint(&mut buf, side, y, x, color);
                mask.set(y, x, 1);
            }
        }
    }
    Ok((ImageTensor::from_vec(side, side, buf)?, mask))
}

/// Re-render every scene of a recorded episode.
pub fn render_episode(cfg: &DatasetConfig, spec: &EpisodeSpec) -> Result<Episode> {
    let mut support = Vec::with_capacity(spec.support_seeds.len());
    for (&seed, &bg) in spec.support_seeds.iter().zip(&spec.support_bgs) {
        support.push(render_scene(cfg, spec.class_id, bg, seed)?);
    }
    let (query, query_mask) = render_scene(cfg, spec.class_id, spec.query_bg, spec.query_seed)?;
    Ok(Episode {
        spec: spec.clone(),
        support,
        query,
        query_mask,
        weak: false,
    })
}

const MAX_SAMPLE_ATTEMPTS: usize = 100;

/// Draw one episode. The class comes from the held-out fold (`Role::Test`)
/// or from the other folds (`Role::Train`). Episodes whose support masks
/// become empty at feature resolution are rejected and resampled.
pub fn sample_episode(
    cfg: &DatasetConfig,
    split: &FoldSplit,
    fold: usize,
    role: Role,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".to_string()));
    }
    let classes: Vec<usize> = match role {
        Role::Test => split.test_classes(fold).to_vec(),
        Role::Train => split.train_classes(fold),
    };
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let class_id = classes[rng.gen_range(0..classes.len())];
        let support_seeds: Vec<u64> = (0..k).map(|_| rng.gen()).collect();
        let support_bgs: Vec<usize> = (0..k)
            .map(|_| rng.gen_range(0..cfg.background_styles))
            .collect();
        let query_seed: u64 = rng.gen();
        let query_bg = if cfg.match_backgrounds {
            support_bgs[0]
        } else {
            rng.gen_range(0..cfg.background_styles)
        };
        let spec = EpisodeSpec {
            class_id,
            fold_id: split.fold_of(class_id).expect("class in split"),
            support_seeds,
            support_bgs,
            query_seed,
            query_bg,
        };
        let episode = render_episode(cfg, &spec)?;
        let ok = episode.support.iter().all(|(_, mask)| {
            resize_binary(mask, cfg.feature_side, cfg.feature_side)
                .map(|m| m.count_ones() > 0)
                .unwrap_or(false)
        });
        if ok {
            return Ok(episode);
        }
    }
    Err(Error::Validation(format!(
        "no valid episode after {MAX_SAMPLE_ATTEMPTS} attempts"
    )))
}

// ── Augmentation ─────────────────────────────────────────────────────

/// Horizontal mirror of an image/mask pair.
pub fn hflip_pair(image: &ImageTensor, mask: &Mask) -> (ImageTensor, Mask) {
    let (h, w) = (image.height(), image.width());
    let src = image.tensor().to_vec();
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[ch * plane + y * w + x] = src[ch * plane + y * w + (w - 1 - x)];
            }
        }
    }
    let mut m = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            m.set(y, x, mask.get(y, w - 1 - x));
        }
    }
    (
        ImageTensor::from_vec(h, w, out).expect("shape consistent"),
        m,
    )
}

/// Rotation about the image center with nearest-neighbor resampling; image
/// and mask are transformed identically. Pixels sampling outside the frame
/// become 0.
pub fn rotate_pair(image: &ImageTensor, mask: &Mask, angle_deg: f64) -> (ImageTensor, Mask) {
    let (h, w) = (image.height(), image.width());
    let src = image.tensor().to_vec();
    let plane = h * w;
    let theta = angle_deg.to_radians();
    let (sin, cos) = (theta.sin(), theta.cos());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; 3 * plane];
    let mut m = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = (cy + cos * dy + sin * dx).round();
            let sx = (cx - sin * dy + cos * dx).round();
            if sy >= 0.0 && sx >= 0.0 && (sy as usize) < h && (sx as usize) < w {
                let (sy, sx) = (sy as usize, sx as usize);
                for ch in 0..3 {
                    out[ch * plane + y * w + x] = src[ch * plane + sy * w + sx];
                }
                m.set(y, x, mask.get(sy, sx));
            }
        }
    }
    (
        ImageTensor::from_vec(h, w, out).expect("shape consistent"),
        m,
    )
}

/// Training augmentation: horizontal flip with probability 0.5 and rotation
/// by a uniform angle in [−15°, +15°].
pub fn augment(image: &ImageTensor, mask: &Mask, rng: &mut ChaCha8Rng) -> (ImageTensor, Mask) {
    let flip = rng.gen_bool(0.5);
    let angle = rng.gen_range(-15.0..=15.0);
    let (img, m) = if flip {
        hflip_pair(image, mask)
    } else {
        (image.clone(), mask.clone())
    };
    rotate_pair(&img, &m, angle)
}

/// Weakly-supervised episode: support masks become all ones and prototypes
/// switch to global average pooling. The query ground truth is untouched.
pub fn make_weak(episode: &Episode) -> Episode {
    let support = episode
        .support
        .iter()
        .map(|(img, mask)| {
            (
                img.clone(),
                Mask::ones(mask.height(), mask.width()),
            )
        })
        .collect();
    Episode {
        spec: episode.spec.clone(),
        support,
        query: episode.query.clone(),
        query_mask: episode.query_mask.clone(),
        weak: true,
    }
}

// ── Export ───────────────────────────────────────────────────────────

/// Write the episode's tensors as CBT1 files under `dir` with an index
/// prefix, and return its manifest line.
pub fn export_episode(dir: &Path, index: usize, episode: &Episode) -> Result<String> {
    std::fs::create_dir_all(dir)?;
    for (i, (img, mask)) in episode.support.iter().enumerate() {
        io::write_tensor(&dir.join(format!("ep{index}_support{i}.cbt")), img.tensor())?;
        io::write_tensor(
            &dir.join(format!("ep{index}_support{i}_mask.cbt")),
            &mask.to_tensor(),
        )?;
    }
    io::write_tensor(&dir.join(format!("ep{index}_query.cbt")), episode.query.tensor())?;
    io::write_tensor(
        &dir.join(format!("ep{index}_query_mask.cbt")),
        &episode.query_mask.to_tensor(),
    )?;
    Ok(episode.spec.to_line())
}

/// Convenience conversion used by loss computation.
pub fn mask_to_tensor(mask: &Mask) -> Tensor {
    mask.to_tensor()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DatasetConfig {
        DatasetConfig::default()
    }

    #[test]
    fn folds_are_disjoint_and_cover_all_classes() {
        let split = FoldSplit::new(12, 4).unwrap();
        let mut seen = vec![false; 12];
        for f in 0..4 {
            for &c in split.test_classes(f) {
                assert!(!seen[c]);
                seen[c] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        for f in 0..4 {
            let train = split.train_classes(f);
            assert_eq!(train.len(), 9);
            for c in split.test_classes(f) {
                assert!(!train.contains(c));
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let (img_a, mask_a) = render_scene(&cfg(), 3, 2, 42).unwrap();
        let (img_b, mask_b) = render_scene(&cfg(), 3, 2, 42).unwrap();
        assert_eq!(img_a.tensor().to_vec(), img_b.tensor().to_vec());
        assert_eq!(mask_a, mask_b);
        let (img_c, _) = render_scene(&cfg(), 3, 2, 43).unwrap();
        assert_ne!(img_a.tensor().to_vec(), img_c.tensor().to_vec());
    }

    #[test]
    fn mask_fraction_stays_in_bounds() {
        let c = cfg();
        let total = (c.side * c.side) as f64;
        for class in 0..12 {
            for seed in 0..20u64 {
                let (_, mask) = render_scene(&c, class, (seed % 6) as usize, seed * 977 + 13).unwrap();
                let frac = mask.count_ones() as f64 / total;
                assert!(
                    (0.02..=0.6).contains(&frac),
                    "class {class} seed {seed}: fraction {frac}"
                );
            }
        }
    }

    #[test]
    fn shape_pixels_match_mask_popcount() {
        // The object is painted in one uniform color; counting pixels of
        // that exact color recovers the mask popcount.
        let c = cfg();
        for seed in 0..8u64 {
            let (img, mask) = render_scene(&c, (seed % 12) as usize, (seed % 6) as usize, seed).unwrap();
            let v = img.tensor().to_vec();
            let plane = c.side * c.side;
            let first = (0..plane)
                .find(|&i| mask.values()[i] == 1)
                .expect("non-empty mask");
            let color = [v[first], v[plane + first], v[2 * plane + first]];
            let painted = (0..plane)
                .filter(|&i| {
                    v[i] == color[0] && v[plane + i] == color[1] && v[2 * plane + i] == color[2]
                })
                .count();
            assert_eq!(painted, mask.count_ones(), "seed {seed}");
        }
    }

    #[test]
    fn sample_episode_k1_and_reproducible() {
        let c = cfg();
        let split = FoldSplit::new(12, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ep = sample_episode(&c, &split, 0, Role::Test, 1, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 1);
        assert!(split.test_classes(0).contains(&ep.spec.class_id));
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let ep2 = sample_episode(&c, &split, 0, Role::Test, 1, &mut rng2).unwrap();
        assert_eq!(ep.spec, ep2.spec);
    }

    #[test]
    fn train_episodes_never_use_test_classes() {
        let c = cfg();
        let split = FoldSplit::new(12, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let ep = sample_episode(&c, &split, 2, Role::Train, 1, &mut rng).unwrap();
            assert!(!split.test_classes(2).contains(&ep.spec.class_id));
        }
    }

    #[test]
    fn identity_transform_keeps_pair() {
        let c = cfg();
        let (img, mask) = render_scene(&c, 1, 1, 3).unwrap();
        let (img2, mask2) = rotate_pair(&img, &mask, 0.0);
        assert_eq!(img.tensor().to_vec(), img2.tensor().to_vec());
        assert_eq!(mask, mask2);
    }

    #[test]
    fn double_flip_restores_original() {
        let c = cfg();
        let (img, mask) = render_scene(&c, 4, 0, 9).unwrap();
        let (f1, m1) = hflip_pair(&img, &mask);
        let (f2, m2) = hflip_pair(&f1, &m1);
        assert_eq!(img.tensor().to_vec(), f2.tensor().to_vec());
        assert_eq!(mask, m2);
    }

    #[test]
    fn rotation_by_90_degrees_matches_index_oracle() {
        let c = cfg();
        let (img, mask) = render_scene(&c, 2, 3, 17).unwrap();
        let (_, rotated) = rotate_pair(&img, &mask, 90.0);
        let n = c.side;
        for y in 0..n {
            for x in 0..n {
                // dest(y, x) samples source(x, n-1-y)
                assert_eq!(rotated.get(y, x), mask.get(x, n - 1 - y));
            }
        }
    }

    #[test]
    fn augmentation_roughly_preserves_mask_area() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for round in 0..30 {
            let (img, mask) = render_scene(&c, round % 12, round % 6, round as u64 * 31 + 1).unwrap();
            let (_, am) = augment(&img, &mask, &mut rng);
            let before = mask.count_ones() as f64;
            let after = am.count_ones() as f64;
            assert!(
                (after - before).abs() / before <= 0.15,
                "round {round}: {before} -> {after}"
            );
        }
    }

    #[test]
    fn weak_episode_has_all_ones_support_and_same_query() {
        let c = cfg();
        let split = FoldSplit::new(12, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = sample_episode(&c, &split, 1, Role::Test, 2, &mut rng).unwrap();
        let weak = make_weak(&ep);
        assert!(weak.weak);
        for (_, m) in &weak.support {
            assert_eq!(m.count_ones(), c.side * c.side);
        }
        assert_eq!(weak.query_mask, ep.query_mask);
    }

    #[test]
    fn manifest_line_roundtrip() {
        let spec = EpisodeSpec {
            class_id: 7,
            fold_id: 2,
            support_seeds: vec![11, 22, 33],
            support_bgs: vec![0, 5, 3],
            query_seed: 99,
            query_bg: 1,
        };
        let line = spec.to_line();
        let back = EpisodeSpec::parse_line(&line).unwrap();
        assert_eq!(spec, back);
        assert!(EpisodeSpec::parse_line("class=1 bogus").is_err());
    }

    #[test]
    fn replay_from_spec_is_identical() {
        let c = cfg();
        let split = FoldSplit::new(12, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let ep = sample_episode(&c, &split, 3, Role::Test, 2, &mut rng).unwrap();
        let replayed = render_episode(&c, &ep.spec).unwrap();
        assert_eq!(ep.query_mask, replayed.query_mask);
        assert_eq!(
            ep.query.tensor().to_vec(),
            replayed.query.tensor().to_vec()
        );
        for ((ia, ma), (ib, mb)) in ep.support.iter().zip(&replayed.support) {
            assert_eq!(ia.tensor().to_vec(), ib.tensor().to_vec());
            assert_eq!(ma, mb);
        }
    }
}
