//! Frozen feature extractor standing in for a large pretrained CNN:
//! seeded random 3×3 convolution blocks with relu and 2× mean pooling.
//! The weights are fixed at construction and never trained.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{io, Graph, Tensor};

/// RGB image with values in [0, 1], stored 3×H×W.
#[derive(Clone, Debug)]
pub struct ImageTensor {
    t: Tensor,
}

impl ImageTensor {
    /// Wrap a 3×H×W tensor, clamping values into [0, 1].
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 || t.shape()[0] != 3 {
            return Err(Error::Dimension(format!(
                "image must be 3xHxW, got {:?}",
                t.shape()
            )));
        }
        let clamped: Vec<f64> = t.to_vec().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let shape = t.shape().to_vec();
        Ok(ImageTensor {
            t: Tensor::from_vec(shape, clamped)?,
        })
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::from_vec(vec![3, h, w], data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.t
    }

    pub fn height(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.t.shape()[2]
    }
}

/// c×h×w activation block produced by the frozen backbone.
/// Never carries gradients.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    t: Tensor,
}

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::Dimension(format!(
                "feature map must be rank 3, got {:?}",
                t.shape()
            )));
        }
        if t.requires_grad() {
            return Err(Error::Usage(
                "feature maps are frozen; gradient tracking is not allowed".to_string(),
            ));
        }
        Ok(FeatureMap { t })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.t
    }

    pub fn channels(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.t.shape()[2]
    }
}

/// Configuration of the frozen backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Output channels.
    pub channels: usize,
    /// Overall spatial downsampling; must be a power of two.
    pub downsample: usize,
    pub seed: u64,
    /// Number of conv+relu blocks; the first log2(downsample) blocks end
    /// with a 2× mean pool.
    pub layers: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: 64,
            downsample: 4,
            seed: 0x0b_5e_55,
            layers: 3,
        }
    }
}

pub struct Backbone {
    cfg: BackboneConfig,
    convs: Vec<(Tensor, Tensor)>,
    pools: Vec<bool>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.layers == 0 {
            return Err(Error::Config(
                "backbone channels and layers must be positive".to_string(),
            ));
        }
        if !cfg.downsample.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample factor {} must be a power of two",
                cfg.downsample
            )));
        }
        let pool_stages = cfg.downsample.trailing_zeros() as usize;
        if pool_stages > cfg.layers {
            return Err(Error::Config(format!(
                "downsample {} needs {pool_stages} pooling stages but only {} layers",
                cfg.downsample, cfg.layers
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut convs = Vec::with_capacity(cfg.layers);
        let mut pools = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let c_in = if layer == 0 { 3 } else { cfg.channels };
            let fan_in = (c_in * 9) as f64;
            let std = 1.0 / fan_in.sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            let weight: Vec<f64> = (0..cfg.channels * c_in * 9)
                .map(|_| dist.sample(&mut rng))
                .collect();
            let bias: Vec<f64> = (0..cfg.channels).map(|_| dist.sample(&mut rng)).collect();
            convs.push((
                Tensor::from_vec(vec![cfg.channels, c_in, 3, 3], weight)?,
                Tensor::from_vec(vec![cfg.channels], bias)?,
            ));
            pools.push(layer < pool_stages);
        }
        Ok(Backbone { cfg, convs, pools })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Deterministic c×(H/downsample)×(W/downsample) features. The output
    /// never carries gradients.
    pub fn extract_features(&self, image: &ImageTensor) -> Result<FeatureMap> {
        let (h, w) = (image.height(), image.width());
        if h % self.cfg.downsample != 0 || w % self.cfg.downsample != 0 {
            return Err(Error::Dimension(format!(
                "image {h}x{w} not divisible by downsample factor {}",
                self.cfg.downsample
            )));
        }
        let mut g = Graph::new();
        let mut x = image.tensor().clone();
        let last = self.convs.len() - 1;
        for (layer, ((weight, bias), &pool)) in self.convs.iter().zip(&self.pools).enumerate() {
            x = g.conv2d(&x, weight, bias)?;
            // The final block stays linear: signed features spread cosine
            // similarities, which the align prior depends on. All-positive
            // relu features crowd into one orthant and score near-uniform
            // cosines everywhere.
            if layer < last {
                x = g.relu(&x);
            }
            if pool {
                let (ch, cw) = (x.shape()[1], x.shape()[2]);
                x = g.adaptive_avg_pool(&x, ch / 2, cw / 2)?;
            }
        }
        debug_assert!(g.is_empty(), "backbone records no gradient ops");
        // Center each channel over space. Without this, every position
        // shares one dominant brightness direction and all pairwise cosines
        // saturate near 1 regardless of content.
        let (c, fh, fw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut data = x.to_vec();
        let plane = fh * fw;
        for ch in 0..c {
            let slice = &mut data[ch * plane..(ch + 1) * plane];
            let mean = slice.iter().sum::<f64>() / plane as f64;
            for v in slice.iter_mut() {
                *v -= mean;
            }
        }
        FeatureMap::new(Tensor::from_vec(vec![c, fh, fw], data)?)
    }
}

/// Load a feature map from a `CBT1` file; the tensor must be rank 3.
pub fn load_features(path: &Path) -> Result<FeatureMap> {
    let t = io::read_tensor(path)?;
    if t.rank() != 3 {
        return Err(Error::Format(format!(
            "{}: feature file must hold a rank-3 tensor, got rank {}",
            path.display(),
            t.rank()
        )));
    }
    FeatureMap::new(t)
}

pub fn save_features(path: &Path, features: &FeatureMap) -> Result<()> {
    io::write_tensor(path, features.tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_image(side: usize) -> ImageTensor {
        ImageTensor::from_vec(side, side, vec![0.0; 3 * side * side]).unwrap()
    }

    #[test]
    fn extraction_is_deterministic_and_shaped() {
        let backbone = Backbone::new(BackboneConfig {
            channels: 64,
            downsample: 4,
            seed: 7,
            layers: 3,
        })
        .unwrap();
        let img = zero_image(64);
        let a = backbone.extract_features(&img).unwrap();
        let b = backbone.extract_features(&img).unwrap();
        assert_eq!(a.tensor().shape(), &[64, 16, 16]);
        let (av, bv) = (a.tensor().to_vec(), b.tensor().to_vec());
        for (x, y) in av.iter().zip(bv.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = BackboneConfig {
            channels: 8,
            downsample: 2,
            seed: 99,
            layers: 2,
        };
        let a = Backbone::new(cfg.clone()).unwrap();
        let b = Backbone::new(cfg).unwrap();
        for ((wa, ba), (wb, bb)) in a.convs.iter().zip(b.convs.iter()) {
            assert_eq!(wa.to_vec(), wb.to_vec());
            assert_eq!(ba.to_vec(), bb.to_vec());
        }
    }

    #[test]
    fn indivisible_side_is_rejected() {
        let backbone = Backbone::new(BackboneConfig {
            channels: 4,
            downsample: 4,
            seed: 1,
            layers: 2,
        })
        .unwrap();
        let img = zero_image(30);
        assert!(matches!(
            backbone.extract_features(&img),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_image_first_layer_output_is_bias_constant() {
        let backbone = Backbone::new(BackboneConfig {
            channels: 4,
            downsample: 2,
            seed: 3,
            layers: 1,
        })
        .unwrap();
        let img = zero_image(8);
        let feats = backbone.extract_features(&img).unwrap();
        // conv(0) = bias everywhere, relu, then exact 2x2 mean pooling of a
        // constant map keeps the constant.
        let bias = backbone.convs[0].1.to_vec();
        let v = feats.tensor().to_vec();
        for (ch, &b) in bias.iter().enumerate() {
            let expect = b.max(0.0);
            for i in 0..16 {
                assert_eq!(v[ch * 16 + i], expect);
            }
        }
    }

    #[test]
    fn features_are_frozen() {
        let backbone = Backbone::new(BackboneConfig::default()).unwrap();
        let img = zero_image(64);
        let feats = backbone.extract_features(&img).unwrap();
        assert!(!feats.tensor().requires_grad());
        for (w, b) in &backbone.convs {
            assert!(!w.requires_grad() && !b.requires_grad());
        }
    }

    #[test]
    fn feature_file_roundtrip_and_rank_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.cbt");
        let fm = FeatureMap::new(Tensor::from_vec(vec![2, 3, 3], (0..18).map(|v| v as f64).collect()).unwrap())
            .unwrap();
        save_features(&path, &fm).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back.tensor().to_vec(), fm.tensor().to_vec());

        let scalar_path = dir.path().join("scalar.cbt");
        io::write_tensor(&scalar_path, &Tensor::scalar(1.0)).unwrap();
        assert!(matches!(load_features(&scalar_path), Err(Error::Format(_))));
    }

    #[test]
    fn image_values_are_clamped() {
        let img = ImageTensor::from_vec(1, 2, vec![-0.5, 2.0, 0.25, 0.75, 0.0, 1.0]).unwrap();
        assert_eq!(img.tensor().to_vec(), vec![0.0, 1.0, 0.25, 0.75, 0.0, 1.0]);
    }
}
