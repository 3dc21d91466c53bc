//! Prototype extraction: the object prototype comes from support features by
//! masked average pooling, the background prototype grid from the query
//! features by grid average pooling. All prototypes are computed outside the
//! gradient graph; the backbone is frozen.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Mask, Tensor};

/// Binary support mask at full resolution plus its working copy resized to
/// feature resolution (bilinear interpolation, then threshold at 0.5).
#[derive(Clone, Debug)]
pub struct SupportMask {
    full: Mask,
    feat: Mask,
}

impl SupportMask {
    pub fn new(full: Mask, feat_h: usize, feat_w: usize) -> Result<Self> {
        let feat = resize_binary(&full, feat_h, feat_w)?;
        Ok(SupportMask { full, feat })
    }

    /// All-ones mask at both resolutions (weakly-supervised mode).
    pub fn all_ones(h: usize, w: usize, feat_h: usize, feat_w: usize) -> Self {
        SupportMask {
            full: Mask::ones(h, w),
            feat: Mask::ones(feat_h, feat_w),
        }
    }

    pub fn full(&self) -> &Mask {
        &self.full
    }

    /// The mask at feature resolution.
    pub fn feat(&self) -> &Mask {
        &self.feat
    }
}

/// Bilinear resize of a binary mask followed by thresholding at 0.5.
pub fn resize_binary(mask: &Mask, out_h: usize, out_w: usize) -> Result<Mask> {
    if out_h == mask.height() && out_w == mask.width() {
        return Ok(mask.clone());
    }
    let mut g = Graph::new();
    let soft = g.bilinear_resize(&mask.to_tensor(), out_h, out_w)?;
    let data: Vec<u8> = soft
        .to_vec()
        .iter()
        .map(|&v| if v >= 0.5 { 1 } else { 0 })
        .collect();
    Mask::from_vec(out_h, out_w, data)
}

/// c-dimensional feature vector summarizing the object region.
#[derive(Clone, Debug)]
pub struct ObjectPrototype {
    values: Vec<f64>,
}

impl ObjectPrototype {
    pub fn from_values(values: Vec<f64>) -> Self {
        ObjectPrototype { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The prototype as a c×1×1 tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.values.len(), 1, 1], self.values.clone())
            .expect("prototype shape consistent")
    }
}

/// c×j×j grid of background prototypes.
#[derive(Clone, Debug)]
pub struct BackgroundGrid {
    values: Tensor,
    grid: usize,
}

impl BackgroundGrid {
    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn grid_size(&self) -> usize {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Mean of the support feature vectors at mask-positive positions.
/// Fails with [`Error::EmptyMask`] when the resized mask has no foreground;
/// such episodes are rejected and resampled by the dataset sampler.
pub fn masked_average_pool(features: &FeatureMap, mask: &SupportMask) -> Result<ObjectPrototype> {
    let (c, h, w) = (features.channels(), features.height(), features.width());
    let m = mask.feat();
    if m.height() != h || m.width() != w {
        return Err(Error::Dimension(format!(
            "mask {}x{} does not match feature resolution {h}x{w}",
            m.height(),
            m.width()
        )));
    }
    let count = m.count_ones();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let data = features.tensor().read();
    let plane = h * w;
    let mut values = vec![0.0; c];
    for (ch, out) in values.iter_mut().enumerate() {
        let fp = &data[ch * plane..(ch + 1) * plane];
        let mut acc = 0.0;
        for (v, &keep) in fp.iter().zip(m.values()) {
            if keep == 1 {
                acc += v;
            }
        }
        *out = acc / count as f64;
    }
    Ok(ObjectPrototype { values })
}

/// Arithmetic mean of per-shot object prototypes.
pub fn kshot_prototype(shots: &[(FeatureMap, SupportMask)]) -> Result<ObjectPrototype> {
    if shots.is_empty() {
        return Err(Error::Usage("kshot_prototype of empty shot list".to_string()));
    }
    let mut acc: Option<Vec<f64>> = None;
    for (features, mask) in shots {
        let p = masked_average_pool(features, mask)?;
        match acc.as_mut() {
            Some(a) => {
                for (x, y) in a.iter_mut().zip(p.values()) {
                    *x += y;
                }
            }
            None => acc = Some(p.values.clone()),
        }
    }
    let mut values = acc.expect("non-empty list");
    let n = shots.len() as f64;
    for v in &mut values {
        *v /= n;
    }
    Ok(ObjectPrototype { values })
}

/// Background prototypes mined from the query features: average pooling
/// within a j×j grid of regions.
pub fn background_grid(query_features: &FeatureMap, grid: usize) -> Result<BackgroundGrid> {
    let (h, w) = (query_features.height(), query_features.width());
    if grid == 0 || grid > h || grid > w {
        return Err(Error::Config(format!(
            "background grid size {grid} out of range for {h}x{w} features"
        )));
    }
    let mut g = Graph::new();
    let values = g.adaptive_avg_pool(query_features.tensor(), grid, grid)?;
    Ok(BackgroundGrid { values, grid })
}

/// Global average-pooled prototype, used when no support annotation exists.
pub fn weak_object_prototype(features: &FeatureMap) -> ObjectPrototype {
    let (c, h, w) = (features.channels(), features.height(), features.width());
    let data = features.tensor().read();
    let plane = h * w;
    let values = (0..c)
        .map(|ch| data[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    ObjectPrototype { values }
}

/// Background prototype grid from SUPPORT features: masked average pooling
/// with the mask complement, per grid cell. Cells whose region holds no
/// complement pixel fall back to the global complement mean; if the
/// complement is empty everywhere (all-ones mask), the global feature mean
/// is used for every cell.
pub fn complement_background_grid(
    features: &FeatureMap,
    mask: &SupportMask,
    grid: usize,
) -> Result<BackgroundGrid> {
    let (c, h, w) = (features.channels(), features.height(), features.width());
    if grid == 0 || grid > h || grid > w {
        return Err(Error::Config(format!(
            "background grid size {grid} out of range for {h}x{w} features"
        )));
    }
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

    let total_bg = plane - m.count_ones();
    let global: Vec<f64> = if total_bg == 0 {
        (0..c)
            .map(|ch| data[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect()
    } else {
        (0..c)
            .map(|ch| {
                let fp = &data[ch * plane..(ch + 1) * plane];
                let mut acc = 0.0;
                for (v, &keep) in fp.iter().zip(m.values()) {
                    if keep == 0 {
                        acc += v;
                    }
                }
                acc / total_bg as f64
            })
            .collect()
    };

    let mut values = vec![0.0; c * grid * grid];
    for gy in 0..grid {
        let (y0, y1) = crate::tensor::pool_bin(gy, h, grid);
        for gx in 0..grid {
            let (x0, x1) = crate::tensor::pool_bin(gx, w, grid);
            let mut count = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    if m.get(y, x) == 0 {
                        count += 1;
                    }
                }
            }
            for ch in 0..c {
                let fp = &data[ch * plane..(ch + 1) * plane];
                let cell = &mut values[(ch * grid + gy) * grid + gx];
                if count == 0 {
                    *cell = global[ch];
                } else {
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            if m.get(y, x) == 0 {
                                acc += fp[y * w + x];
                            }
                        }
                    }
                    *cell = acc / count as f64;
                }
            }
        }
    }
    drop(data);
    Ok(BackgroundGrid {
        values: Tensor::from_vec(vec![c, grid, grid], values)?,
        grid,
    })
}

/// Mean of per-shot complement grids.
pub fn kshot_complement_grid(
    shots: &[(FeatureMap, SupportMask)],
    grid: usize,
) -> Result<BackgroundGrid> {
    if shots.is_empty() {
        return Err(Error::Usage(
            "kshot_complement_grid of empty shot list".to_string(),
        ));
    }
    let mut acc: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for (features, mask) in shots {
        let g = complement_background_grid(features, mask, grid)?;
        shape = g.values.shape().to_vec();
        let v = g.values.to_vec();
        match acc.as_mut() {
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&v) {
                    *x += y;
                }
            }
            None => acc = Some(v),
        }
    }
    let mut values = acc.expect("non-empty list");
    let n = shots.len() as f64;
    for v in &mut values {
        *v /= n;
    }
    Ok(BackgroundGrid {
        values: Tensor::from_vec(shape, values)?,
        grid,
    })
}
