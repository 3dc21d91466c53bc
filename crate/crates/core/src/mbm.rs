//! Multi-scale background module: pool the query features into a scale
//! pyramid, expand the object prototype and background grid to each scale,
//! fuse them with the align mask through per-scale 1×1 convolutions, and sum
//! the resized outputs into the object features F_o and background features
//! F_b. Each Fuse+ output also feeds a small prediction head used for the
//! auxiliary losses.

use rand::Rng;

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::proto::{BackgroundGrid, ObjectPrototype};
use crate::tensor::{Graph, Tensor};

/// Query feature pyramid: level i is the adaptive average pool of F_q to
/// sizes[i]×sizes[i].
pub struct ScalePyramid {
    levels: Vec<Tensor>,
    sizes: Vec<usize>,
}

impl ScalePyramid {
    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
}

pub fn build_pyramid(query: &FeatureMap, sizes: &[usize]) -> Result<ScalePyramid> {
    if sizes.is_empty() {
        return Err(Error::Config("pyramid needs at least one scale".to_string()));
    }
    let h = query.height().min(query.width());
    for pair in sizes.windows(2) {
        if pair[1] > pair[0] {
            return Err(Error::Config(format!(
                "pyramid sizes must be non-increasing, got {sizes:?}"
            )));
        }
    }
    if sizes[0] > h || *sizes.last().unwrap() == 0 {
        return Err(Error::Dimension(format!(
            "pyramid sizes {sizes:?} out of range for {h}-pixel features"
        )));
    }
    let mut g = Graph::new();
    let levels = sizes
        .iter()
        .map(|&k| g.adaptive_avg_pool(query.tensor(), k, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScalePyramid {
        levels,
        sizes: sizes.to_vec(),
    })
}

/// Broadcast the object prototype to every position of a k×k map.
pub fn expand_object(prototype: &ObjectPrototype, k: usize) -> Tensor {
    let c = prototype.len();
    let mut data = vec![0.0; c * k * k];
    for (ch, &v) in prototype.values().iter().enumerate() {
        data[ch * k * k..(ch + 1) * k * k].fill(v);
    }
    Tensor::from_vec(vec![c, k, k], data).expect("shape consistent")
}

/// Expand the j×j background grid to k×k.
///
/// For k ≥ j each output cell copies grid cell (floor(y·j/k), floor(x·j/k)),
/// preserving region-to-region correspondence. For k < j the grid itself is
/// adaptively mean-pooled down to k×k, which keeps the region semantics when
/// the pyramid bottoms out below the grid size.
pub fn expand_background(grid: &BackgroundGrid, k: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::Config("expansion size must be positive".to_string()));
    }
    let j = grid.grid_size();
    if k < j {
        let mut g = Graph::new();
        return g.adaptive_avg_pool(grid.tensor(), k, k);
    }
    let c = grid.channels();
    let src = grid.tensor().read();
    let mut data = vec![0.0; c * k * k];
    for ch in 0..c {
        let sp = &src[ch * j * j..(ch + 1) * j * j];
        let dp = &mut data[ch * k * k..(ch + 1) * k * k];
        for y in 0..k {
            let gy = y * j / k;
            for x in 0..k {
                let gx = x * j / k;
                dp[y * k + x] = sp[gy * j + gx];
            }
        }
    }
    drop(src);
    Ok(Tensor::from_vec(vec![c, k, k], data).expect("shape consistent"))
}

/// Two 3×3 convolutions with relu plus a 1×1 projection to 2 logit channels.
pub struct PredictionHead {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub out: Conv2d,
}

impl PredictionHead {
    fn seeded(rng: &mut impl Rng, c: usize) -> Self {
        PredictionHead {
            conv_a: Conv2d::seeded(rng, c, c, 3),
            conv_b: Conv2d::seeded(rng, c, c, 3),
            out: Conv2d::seeded(rng, c, 2, 1),
        }
    }
}

/// Per-scale fuse convolutions and intermediate prediction heads. The minus
/// branch is absent when the model only extracts object features.
pub struct FuseParams {
    pub sizes: Vec<usize>,
    pub plus: Vec<Conv2d>,
    pub minus: Option<Vec<Conv2d>>,
    pub heads: Vec<PredictionHead>,
}

impl FuseParams {
    pub fn seeded(rng: &mut impl Rng, c: usize, sizes: &[usize], with_minus: bool) -> Self {
        let plus = sizes
            .iter()
            .map(|_| Conv2d::seeded(rng, 2 * c + 1, c, 1))
            .collect();
        let minus = with_minus.then(|| {
            sizes
                .iter()
                .map(|_| Conv2d::seeded(rng, 2 * c + 1, c, 1))
                .collect()
        });
        let heads = sizes.iter().map(|_| PredictionHead::seeded(rng, c)).collect();
        FuseParams {
            sizes: sizes.to_vec(),
            plus,
            minus,
            heads,
        }
    }

    pub(crate) fn collect_params(&self, out: &mut Vec<(String, Tensor)>) {
        for (i, conv) in self.plus.iter().enumerate() {
            conv.collect_params(&format!("fuse.s{i}.plus"), out);
        }
        if let Some(minus) = &self.minus {
            for (i, conv) in minus.iter().enumerate() {
                conv.collect_params(&format!("fuse.s{i}.minus"), out);
            }
        }
        for (i, head) in self.heads.iter().enumerate() {
            head.conv_a.collect_params(&format!("head.s{i}.conv_a"), out);
            head.conv_b.collect_params(&format!("head.s{i}.conv_b"), out);
            head.out.collect_params(&format!("head.s{i}.out"), out);
        }
    }
}

fn check_scale(name: &str, t: &Tensor, k: usize) -> Result<()> {
    if t.shape()[1] != k || t.shape()[2] != k {
        return Err(Error::Dimension(format!(
            "{name} has spatial size {}x{}, expected {k}x{k}",
            t.shape()[1],
            t.shape()[2]
        )));
    }
    Ok(())
}

/// Fuse+ at one scale: 1×1 convolution of [F_o expanded, F_m, M_a].
pub fn fuse_plus(
    g: &mut Graph,
    f_m: &Tensor,
    f_o_exp: &Tensor,
    m_a_k: &Tensor,
    conv: &Conv2d,
) -> Result<Tensor> {
    let k = f_m.shape()[1];
    check_scale("F_o expansion", f_o_exp, k)?;
    check_scale("align mask", m_a_k, k)?;
    let stacked = g.concat_channels(&[f_o_exp.clone(), f_m.clone(), m_a_k.clone()])?;
    conv.forward(g, &stacked)
}

/// Fuse− at one scale: 1×1 convolution of [F_m, F_b expanded, 1−M_a].
pub fn fuse_minus(
    g: &mut Graph,
    f_m: &Tensor,
    f_b_exp: &Tensor,
    m_a_k: &Tensor,
    conv: &Conv2d,
) -> Result<Tensor> {
    let k = f_m.shape()[1];
    check_scale("F_b expansion", f_b_exp, k)?;
    check_scale("align mask", m_a_k, k)?;
    let inv = g.one_minus(m_a_k);
    let stacked = g.concat_channels(&[f_m.clone(), f_b_exp.clone(), inv])?;
    conv.forward(g, &stacked)
}

/// Resize every level to h×w and sum.
pub fn aggregate(g: &mut Graph, levels: &[Tensor], h: usize, w: usize) -> Result<Tensor> {
    if levels.is_empty() {
        return Err(Error::Usage("aggregate of empty level list".to_string()));
    }
    let mut acc = g.bilinear_resize(&levels[0], h, w)?;
    for level in &levels[1..] {
        let up = g.bilinear_resize(level, h, w)?;
        acc = g.add(&acc, &up)?;
    }
    Ok(acc)
}

/// Intermediate 2-channel prediction from one Fuse+ output:
/// conv3×3 → relu → conv3×3 → relu → conv1×1.
pub fn intermediate_prediction(
    g: &mut Graph,
    fused: &Tensor,
    head: &PredictionHead,
) -> Result<Tensor> {
    let x = head.conv_a.forward(g, fused)?;
    let x = g.relu(&x);
    let x = head.conv_b.forward(g, &x)?;
    let x = g.relu(&x);
    head.out.forward(g, &x)
}
