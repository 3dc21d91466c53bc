//! Training-free align mask: for every query position, the maximum cosine
//! similarity against the mask-restricted support feature vectors, min-max
//! normalized to [0, 1]. Computed from frozen features with no trainable
//! parameters; no gradient ever flows through this path.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::proto::SupportMask;
use crate::tensor::{Graph, Tensor};

/// Per-pixel object prior in [0, 1], shaped 1×h×w.
#[derive(Clone, Debug)]
pub struct AlignMask {
    values: Tensor,
}

impl AlignMask {
    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// Wrap an existing 1×h×w map with values already in [0, 1].
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        if values.rank() != 3 || values.shape()[0] != 1 {
            return Err(Error::Dimension(format!(
                "align mask must be 1xhxw, got {:?}",
                values.shape()
            )));
        }
        if values.to_vec().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Validation(
                "align mask values must lie in [0, 1]".to_string(),
            ));
        }
        Ok(AlignMask { values })
    }
}

/// Support features with vectors zeroed wherever the mask is 0.
pub fn masked_support_features(
    features: &FeatureMap,
    mask: &SupportMask,
) -> Result<FeatureMap> {
    let (c, h, w) = (features.channels(), features.height(), features.width());
    let m = mask.feat();
    if m.height() != h || m.width() != w {
        return Err(Error::Dimension(format!(
            "mask {}x{} does not match feature resolution {h}x{w}",
            m.height(),
            m.width()
        )));
    }
    let data = features.tensor().read();
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    for ch in 0..c {
        let fp = &data[ch * plane..(ch + 1) * plane];
        let op = &mut out[ch * plane..(ch + 1) * plane];
        for i in 0..plane {
            if m.values()[i] == 1 {
                op[i] = fp[i];
            }
        }
    }
    drop(data);
    FeatureMap::new(Tensor::from_vec(vec![c, h, w], out).expect("shape consistent"))
}

/// Raw per-position maxima of cosine similarity between each query vector
/// and every masked support vector. The cosine of any zero vector is 0.
///
/// Computed by normalizing every position vector to unit length and taking
/// row maxima of the inner-product matrix, which equals the direct cosine
/// double loop.
pub fn raw_max_cosine(query: &FeatureMap, masked_support: &FeatureMap) -> Result<Vec<f64>> {
    let (c, h, w) = (query.channels(), query.height(), query.width());
    if masked_support.channels() != c
        || masked_support.height() != h
        || masked_support.width() != w
    {
        return Err(Error::Dimension(format!(
            "query {:?} and support {:?} feature shapes differ",
            query.tensor().shape(),
            masked_support.tensor().shape()
        )));
    }
    let plane = h * w;
    let q = unit_rows(&query.tensor().read(), c, plane);
    let s = unit_rows(&masked_support.tensor().read(), c, plane);
    let mut raw = vec![0.0; plane];
    for (i, out) in raw.iter_mut().enumerate() {
        let qi = &q[i * c..(i + 1) * c];
        let mut best = 0.0f64;
        for j in 0..plane {
            let sj = &s[j * c..(j + 1) * c];
            let mut dot = 0.0;
            for (a, b) in qi.iter().zip(sj) {
                dot += a * b;
            }
            best = best.max(dot);
        }
        *out = best;
    }
    Ok(raw)
}

/// Position-major unit vectors; zero vectors stay zero.
fn unit_rows(data: &[f64], c: usize, plane: usize) -> Vec<f64> {
    let mut rows = vec![0.0; plane * c];
    for i in 0..plane {
        let mut norm_sq = 0.0;
        for ch in 0..c {
            let v = data[ch * plane + i];
            norm_sq += v * v;
        }
        if norm_sq > 0.0 {
            let inv = 1.0 / norm_sq.sqrt();
            for ch in 0..c {
                rows[i * c + ch] = data[ch * plane + i] * inv;
            }
        }
    }
    rows
}

/// The align mask: raw max-cosine map min-max normalized to [0, 1].
/// A constant raw map normalizes to all 0.5.
pub fn align_mask(query: &FeatureMap, masked_support: &FeatureMap) -> Result<AlignMask> {
    let raw = raw_max_cosine(query, masked_support)?;
    let values = normalize_unit_range(&raw);
    let (h, w) = (query.height(), query.width());
    Ok(AlignMask {
        values: Tensor::from_vec(vec![1, h, w], values).expect("shape consistent"),
    })
}

pub(crate) fn normalize_unit_range(raw: &[f64]) -> Vec<f64> {
    let mn = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx > mn {
        raw.iter().map(|&v| (v - mn) / (mx - mn)).collect()
    } else {
        vec![0.5; raw.len()]
    }
}

/// Bilinear downsampling of the align mask to k×k. Interpolation of values
/// in [0, 1] stays in [0, 1].
pub fn downsample_mask(mask: &AlignMask, k: usize) -> Result<Tensor> {
    if k == 0 || k > mask.height() || k > mask.width() {
        return Err(Error::Dimension(format!(
            "downsample size {k} out of range for {}x{} mask",
            mask.height(),
            mask.width()
        )));
    }
    let mut g = Graph::new();
    g.bilinear_resize(mask.tensor(), k, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mask;

    fn feature_map(c: usize, h: usize, w: usize, data: Vec<f64>) -> FeatureMap {
        FeatureMap::new(Tensor::from_vec(vec![c, h, w], data).unwrap()).unwrap()
    }

    fn support_mask(h: usize, w: usize, data: Vec<u8>) -> SupportMask {
        SupportMask::new(Mask::from_vec(h, w, data).unwrap(), h, w).unwrap()
    }

    #[test]
    fn all_ones_mask_keeps_features() {
        let f = feature_map(2, 2, 2, (0..8).map(|v| v as f64).collect());
        let m = support_mask(2, 2, vec![1; 4]);
        let out = masked_support_features(&f, &m).unwrap();
        assert_eq!(out.tensor().to_vec(), f.tensor().to_vec());
    }

    #[test]
    fn all_zeros_mask_zeroes_features_and_mask_is_half() {
        let f = feature_map(2, 2, 2, (1..9).map(|v| v as f64).collect());
        let m = support_mask(2, 2, vec![0; 4]);
        let out = masked_support_features(&f, &m).unwrap();
        assert!(out.tensor().to_vec().iter().all(|&v| v == 0.0));
        // Zero support vectors: raw map all zero, normalized map all 0.5.
        let am = align_mask(&f, &out).unwrap();
        assert!(am.tensor().to_vec().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identical_vector_scores_raw_one_and_is_maximum() {
        // query position 0 exactly equals support position 3.
        let q = feature_map(2, 1, 2, vec![3.0, 0.5, 4.0, -0.2]);
        let s = feature_map(2, 1, 2, vec![9.9, 3.0, 1.1, 4.0]);
        let raw = raw_max_cosine(&q, &s).unwrap();
        assert!((raw[0] - 1.0).abs() < 1e-12);
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(raw[0] >= max - 1e-12);
    }

    #[test]
    fn downsample_identity_and_constant() {
        let am = AlignMask::from_tensor(Tensor::filled(vec![1, 4, 4], 0.25)).unwrap();
        let same = downsample_mask(&am, 4).unwrap();
        assert_eq!(same.to_vec(), am.tensor().to_vec());
        let down = downsample_mask(&am, 2).unwrap();
        assert!(down.to_vec().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn downsample_of_linear_ramp_samples_corners() {
        // 1x1x4 ramp 0,1,2,3 -> k=2 picks corner-aligned samples 0 and 3.
        let am = AlignMask::from_tensor(
            Tensor::from_vec(vec![1, 4, 4], {
                let mut v = vec![0.0; 16];
                for y in 0..4 {
                    for x in 0..4 {
                        v[y * 4 + x] = x as f64 / 3.0;
                    }
                }
                v
            })
            .unwrap(),
        )
        .unwrap();
        let down = downsample_mask(&am, 2).unwrap();
        assert_eq!(down.to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn range_is_unit_interval() {
        let q = feature_map(3, 2, 2, vec![
            1.0, -2.0, 0.3, 4.0, -0.5, 2.0, 1.5, -3.0, 0.0, 0.7, -1.2, 2.2,
        ]);
        let s = feature_map(3, 2, 2, vec![
            -1.0, 2.0, 0.0, 1.0, 0.5, -2.0, 3.0, 1.0, 2.0, -0.7, 1.2, -2.2,
        ]);
        let am = align_mask(&q, &s).unwrap();
        for v in am.tensor().to_vec() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn no_gradient_flows_into_align_inputs() {
        // Even when the align mask feeds a differentiable computation, its
        // inputs receive no gradient: the mask is rebuilt as a constant.
        let q = feature_map(2, 2, 2, (0..8).map(|v| v as f64 + 1.0).collect());
        let s = feature_map(2, 2, 2, (0..8).map(|v| (v as f64) * 0.5 + 0.1).collect());
        let am = align_mask(&q, &s).unwrap();
        assert!(!am.tensor().requires_grad());
        let w = Tensor::param(vec![1, 2, 2], vec![1.0; 4]).unwrap();
        let mut g = Graph::new();
        let y = g.mul(&w, am.tensor()).unwrap();
        let loss = g.adaptive_avg_pool(&y, 1, 1).unwrap();
        g.backward(&loss).unwrap();
        assert!(q.tensor().grad().is_none());
        assert!(s.tensor().grad().is_none());
        assert!(w.grad().is_some());
    }
}
