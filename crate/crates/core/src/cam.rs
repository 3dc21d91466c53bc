//! Cross attention module: a learned spatial gate derived from the
//! concatenated object and background features weights F_o by A and F_b by
//! 1−A, and a convolutional classifier turns the weighted features into
//! 2-channel logits. Also hosts the total-loss combination and the argmax
//! prediction rule.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::tensor::{Graph, Mask, Tensor};

/// Spatial attention weights, 1×h×w, strictly inside (0, 1).
/// Gradients flow through it.
pub struct AttentionMap {
    values: Tensor,
}

impl AttentionMap {
    pub fn tensor(&self) -> &Tensor {
        &self.values
    }
}

/// Two 1×1 convolutions producing the attention logit map.
pub struct AttentionParams {
    pub reduce: Conv2d,
    pub project: Conv2d,
}

impl AttentionParams {
    pub fn seeded(rng: &mut impl Rng, c: usize) -> Self {
        AttentionParams {
            reduce: Conv2d::seeded(rng, 2 * c, c, 1),
            project: Conv2d::seeded(rng, c, 1, 1),
        }
    }

    pub(crate) fn collect_params(&self, out: &mut Vec<(String, Tensor)>) {
        self.reduce.collect_params("cam.reduce", out);
        self.project.collect_params("cam.project", out);
    }
}

/// Three 3×3 convolutions with relu plus a 1×1 projection to 2 logits.
pub struct ClassifierParams {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub conv_c: Conv2d,
    pub out: Conv2d,
}

impl ClassifierParams {
    pub fn seeded(rng: &mut impl Rng, c: usize) -> Self {
        ClassifierParams {
            conv_a: Conv2d::seeded(rng, 2 * c, c, 3),
            conv_b: Conv2d::seeded(rng, c, c, 3),
            conv_c: Conv2d::seeded(rng, c, c, 3),
            out: Conv2d::seeded(rng, c, 2, 1),
        }
    }

    pub(crate) fn collect_params(&self, out: &mut Vec<(String, Tensor)>) {
        self.conv_a.collect_params("cls.conv_a", out);
        self.conv_b.collect_params("cls.conv_b", out);
        self.conv_c.collect_params("cls.conv_c", out);
        self.out.collect_params("cls.out", out);
    }
}

/// Attention and classifier parameters together.
pub struct CamParams {
    pub attention: AttentionParams,
    pub classifier: ClassifierParams,
}

/// A = sigmoid(conv1×1(relu(conv1×1(concat([F_o, F_b]))))).
pub fn attention(
    g: &mut Graph,
    f_o: &Tensor,
    f_b: &Tensor,
    params: &AttentionParams,
) -> Result<AttentionMap> {
    if f_o.shape() != f_b.shape() {
        return Err(Error::Dimension(format!(
            "attention inputs differ: {:?} vs {:?}",
            f_o.shape(),
            f_b.shape()
        )));
    }
    let stacked = g.concat_channels(&[f_o.clone(), f_b.clone()])?;
    let x = params.reduce.forward(g, &stacked)?;
    let x = g.relu(&x);
    let logit = params.project.forward(g, &x)?;
    Ok(AttentionMap {
        values: g.sigmoid(&logit),
    })
}

/// F_o^A = F_o ⊙ A and F_b^A = F_b ⊙ (1−A), with A broadcast over channels.
pub fn apply_attention(
    g: &mut Graph,
    f_o: &Tensor,
    f_b: &Tensor,
    a: &AttentionMap,
) -> Result<(Tensor, Tensor)> {
    let weighted_o = g.mul(f_o, a.tensor())?;
    let inv = g.one_minus(a.tensor());
    let weighted_b = g.mul(f_b, &inv)?;
    Ok((weighted_o, weighted_b))
}

/// Classifier logits from the weighted object and background features.
pub fn classify(
    g: &mut Graph,
    f_o_a: &Tensor,
    f_b_a: &Tensor,
    params: &ClassifierParams,
) -> Result<Tensor> {
    if f_o_a.shape() != f_b_a.shape() {
        return Err(Error::Dimension(format!(
            "classifier inputs differ: {:?} vs {:?}",
            f_o_a.shape(),
            f_b_a.shape()
        )));
    }
    let stacked = g.concat_channels(&[f_o_a.clone(), f_b_a.clone()])?;
    let x = params.conv_a.forward(g, &stacked)?;
    let x = g.relu(&x);
    let x = params.conv_b.forward(g, &x)?;
    let x = g.relu(&x);
    let x = params.conv_c.forward(g, &x)?;
    let x = g.relu(&x);
    params.out.forward(g, &x)
}

/// Total loss: mean of the per-scale intermediate cross-entropies plus the
/// final segmentation cross-entropy. Every logit map is bilinearly upsampled
/// to the ground-truth resolution before its loss.
pub fn total_loss(
    g: &mut Graph,
    final_logits: &Tensor,
    intermediate_logits: &[Tensor],
    query_mask: &Mask,
) -> Result<Tensor> {
    if intermediate_logits.is_empty() {
        return Err(Error::Usage(
            "total_loss needs at least one intermediate prediction".to_string(),
        ));
    }
    let (h, w) = (query_mask.height(), query_mask.width());
    let mut aux_sum: Option<Tensor> = None;
    for logits in intermediate_logits {
        let up = g.bilinear_resize(logits, h, w)?;
        let loss = g.softmax_cross_entropy(&up, query_mask)?;
        aux_sum = Some(match aux_sum {
            Some(acc) => g.add(&acc, &loss)?,
            None => loss,
        });
    }
    let aux_mean = g.scale(
        &aux_sum.expect("non-empty list"),
        1.0 / intermediate_logits.len() as f64,
    );
    let final_up = g.bilinear_resize(final_logits, h, w)?;
    let seg = g.softmax_cross_entropy(&final_up, query_mask)?;
    g.add(&aux_mean, &seg)
}

/// Per-pixel argmax over the two logit channels; ties resolve to background.
pub fn predict_mask(final_logits: &Tensor) -> Result<Mask> {
    if final_logits.rank() != 3 || final_logits.shape()[0] != 2 {
        return Err(Error::Dimension(format!(
            "predict_mask expects 2xHxW logits, got {:?}",
            final_logits.shape()
        )));
    }
    let (h, w) = (final_logits.shape()[1], final_logits.shape()[2]);
    let d = final_logits.read();
    let plane = h * w;
    let data: Vec<u8> = (0..plane)
        .map(|i| if d[plane + i] > d[i] { 1 } else { 0 })
        .collect();
    drop(d);
    Mask::from_vec(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_attention(c: usize) -> AttentionParams {
        AttentionParams {
            reduce: Conv2d {
                weight: Tensor::param(vec![c, 2 * c, 1, 1], vec![0.0; 2 * c * c]).unwrap(),
                bias: Tensor::param(vec![c], vec![0.0; c]).unwrap(),
            },
            project: Conv2d {
                weight: Tensor::param(vec![1, c, 1, 1], vec![0.0; c]).unwrap(),
                bias: Tensor::param(vec![1], vec![0.0]).unwrap(),
            },
        }
    }

    #[test]
    fn zero_weights_give_uniform_half_attention() {
        let mut g = Graph::new();
        let c = 3;
        let f_o = Tensor::filled(vec![c, 2, 2], 1.5);
        let f_b = Tensor::filled(vec![c, 2, 2], -0.5);
        let a = attention(&mut g, &f_o, &f_b, &zero_attention(c)).unwrap();
        assert_eq!(a.tensor().shape(), &[1, 2, 2]);
        assert!(a.tensor().to_vec().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn attention_stays_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 4;
        let params = AttentionParams::seeded(&mut rng, c);
        let mut g = Graph::new();
        let f_o = Tensor::from_vec(vec![c, 3, 3], (0..36).map(|v| (v as f64).cos()).collect()).unwrap();
        let f_b = Tensor::from_vec(vec![c, 3, 3], (0..36).map(|v| (v as f64).sin()).collect()).unwrap();
        let a = attention(&mut g, &f_o, &f_b, &params).unwrap();
        assert_eq!(a.tensor().shape(), &[1, 3, 3]);
        for v in a.tensor().to_vec() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn apply_attention_at_extremes() {
        let mut g = Graph::new();
        let f_o = Tensor::from_vec(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f_b = Tensor::from_vec(vec![2, 1, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let ones = AttentionMap {
            values: Tensor::filled(vec![1, 1, 2], 1.0),
        };
        let (o, b) = apply_attention(&mut g, &f_o, &f_b, &ones).unwrap();
        assert_eq!(o.to_vec(), f_o.to_vec());
        assert!(b.to_vec().iter().all(|&v| v == 0.0));
        let zeros = AttentionMap {
            values: Tensor::filled(vec![1, 1, 2], 0.0),
        };
        let (o, b) = apply_attention(&mut g, &f_o, &f_b, &zeros).unwrap();
        assert!(o.to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(b.to_vec(), f_b.to_vec());
    }

    #[test]
    fn attention_fractions_sum_to_one() {
        // F_o^A/F_o + F_b^A/F_b = 1 wherever both denominators are nonzero.
        let mut g = Graph::new();
        let f_o = Tensor::from_vec(vec![2, 2, 2], (1..9).map(|v| v as f64).collect()).unwrap();
        let f_b = Tensor::from_vec(vec![2, 2, 2], (1..9).map(|v| v as f64 * -0.5).collect()).unwrap();
        let a = AttentionMap {
            values: Tensor::from_vec(vec![1, 2, 2], vec![0.1, 0.4, 0.7, 0.95]).unwrap(),
        };
        let (o, b) = apply_attention(&mut g, &f_o, &f_b, &a).unwrap();
        let (ov, bv) = (o.to_vec(), b.to_vec());
        let (fov, fbv) = (f_o.to_vec(), f_b.to_vec());
        for i in 0..8 {
            let frac = ov[i] / fov[i] + bv[i] / fbv[i];
            assert!((frac - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_shape_and_tie_break() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 3;
        let params = ClassifierParams::seeded(&mut rng, c);
        let mut g = Graph::new();
        let f_o = Tensor::filled(vec![c, 4, 4], 0.3);
        let f_b = Tensor::filled(vec![c, 4, 4], -0.3);
        let logits = classify(&mut g, &f_o, &f_b, &params).unwrap();
        assert_eq!(logits.shape(), &[2, 4, 4]);
        // equal logits -> all background by the tie rule
        let tied = Tensor::zeros(vec![2, 4, 4]);
        let m = predict_mask(&tied).unwrap();
        assert_eq!(m.count_ones(), 0);
        // channel 1 uniformly larger -> all ones
        let mut v = vec![0.0; 32];
        v[16..32].fill(1.0);
        let fg = Tensor::from_vec(vec![2, 4, 4], v).unwrap();
        assert_eq!(predict_mask(&fg).unwrap().count_ones(), 16);
    }

    #[test]
    fn predict_is_invariant_to_per_pixel_logit_shifts() {
        let base = Tensor::from_vec(
            vec![2, 2, 2],
            vec![0.3, -1.0, 2.0, 0.0, 0.2, -0.9, 2.5, 0.0],
        )
        .unwrap();
        let shifted = Tensor::from_vec(
            vec![2, 2, 2],
            vec![10.3, -31.0, 2.5, 7.0, 10.2, -30.9, 3.0, 7.0],
        )
        .unwrap();
        assert_eq!(
            predict_mask(&base).unwrap(),
            predict_mask(&shifted).unwrap()
        );
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::new();
        let target = Mask::from_vec(2, 2, vec![0, 1, 0, 1]).unwrap();
        // N=1 with identical logits: total = 2 * L_seg
        let logits = Tensor::from_vec(vec![2, 2, 2], vec![0.4, -0.3, 0.9, 0.1, 0.0, 1.2, -0.5, 0.3])
            .unwrap();
        let single = g.softmax_cross_entropy(&logits, &target).unwrap();
        let total = total_loss(&mut g, &logits, &[logits.clone()], &target).unwrap();
        let expect = 2.0 * single.scalar_value().unwrap();
        assert!((total.scalar_value().unwrap() - expect).abs() < 1e-12);
        // uniform logits everywhere: ln 2 + ln 2
        let flat = Tensor::zeros(vec![2, 2, 2]);
        let total = total_loss(&mut g, &flat, &[flat.clone(), flat.clone()], &target).unwrap();
        assert!((total.scalar_value().unwrap() - 2.0 * (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_permutation_invariant_in_intermediates() {
        let mut g = Graph::new();
        let target = Mask::from_vec(2, 2, vec![1, 0, 1, 1]).unwrap();
        let a = Tensor::from_vec(vec![2, 1, 1], vec![0.5, -0.5]).unwrap();
        let b = Tensor::from_vec(vec![2, 2, 2], (0..8).map(|v| v as f64 * 0.3 - 1.0).collect())
            .unwrap();
        let f = Tensor::from_vec(vec![2, 2, 2], (0..8).map(|v| (v as f64).sin()).collect())
            .unwrap();
        let t1 = total_loss(&mut g, &f, &[a.clone(), b.clone()], &target).unwrap();
        let t2 = total_loss(&mut g, &f, &[b, a], &target).unwrap();
        assert!((t1.scalar_value().unwrap() - t2.scalar_value().unwrap()).abs() < 1e-12);
    }
}
