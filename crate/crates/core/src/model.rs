//! The full model: prototypes and align mask from frozen features, the
//! multi-scale fuse pipeline, the optional cross attention head, and the
//! classifier. Also owns checkpoint serialization.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, FeatureMap};
use crate::cam::{self, AttentionMap, AttentionParams, ClassifierParams};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::mbm::{self, FuseParams};
use crate::prior::{self, AlignMask};
use crate::proto::{self, ObjectPrototype, SupportMask};
use crate::tensor::{io, Graph, Mask, Tensor};

/// Model variants used by the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Both fuse branches, query-mined background grid, cross attention.
    Full,
    /// Both fuse branches, query-mined background grid, no attention.
    MbmOnly,
    /// Background prototypes from the support set (complement-mask pooling),
    /// no attention.
    MbmSupportBg,
    /// Object branch only: no background features, no attention. The
    /// classifier consumes the object features concatenated with themselves.
    MbmObjectOnly,
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::MbmOnly => "mbm_only",
            Ablation::MbmSupportBg => "mbm_s",
            Ablation::MbmObjectOnly => "mbm_o",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "mbm_only" => Ok(Ablation::MbmOnly),
            "mbm_s" => Ok(Ablation::MbmSupportBg),
            "mbm_o" => Ok(Ablation::MbmObjectOnly),
            other => Err(Error::Config(format!(
                "unknown ablation mode '{other}' (expected full, mbm_only, mbm_s, mbm_o)"
            ))),
        }
    }

    pub fn all() -> [Ablation; 4] {
        [
            Ablation::MbmObjectOnly,
            Ablation::MbmSupportBg,
            Ablation::MbmOnly,
            Ablation::Full,
        ]
    }

    fn has_background(&self) -> bool {
        !matches!(self, Ablation::MbmObjectOnly)
    }

    fn has_attention(&self) -> bool {
        matches!(self, Ablation::Full)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    /// Pyramid sizes, non-increasing.
    pub scales: Vec<usize>,
    /// Background grid size j.
    pub grid: usize,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            scales: vec![16, 8, 4, 2],
            grid: 4,
            ablation: Ablation::Full,
            seed: 1,
        }
    }
}

/// Everything the forward pass produces for one episode.
pub struct ForwardOutput {
    /// 2×h×w logits at feature resolution.
    pub logits: Tensor,
    /// Per-scale intermediate logits from the Fuse+ heads.
    pub intermediates: Vec<Tensor>,
    pub align: AlignMask,
    pub attention: Option<AttentionMap>,
}

pub struct CobNet {
    cfg: ModelConfig,
    fuse: FuseParams,
    attention: Option<AttentionParams>,
    classifier: ClassifierParams,
}

impl CobNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if cfg.channels == 0 {
            return Err(Error::Config("channels must be positive".to_string()));
        }
        if cfg.scales.is_empty() {
            return Err(Error::Config("at least one pyramid scale".to_string()));
        }
        for pair in cfg.scales.windows(2) {
            if pair[1] > pair[0] {
                return Err(Error::Config(format!(
                    "scales must be non-increasing, got {:?}",
                    cfg.scales
                )));
            }
        }
        if cfg.grid == 0 {
            return Err(Error::Config("grid size must be positive".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fuse = FuseParams::seeded(
            &mut rng,
            cfg.channels,
            &cfg.scales,
            cfg.ablation.has_background(),
        );
        let attention = cfg
            .ablation
            .has_attention()
            .then(|| AttentionParams::seeded(&mut rng, cfg.channels));
        let classifier = ClassifierParams::seeded(&mut rng, cfg.channels);
        Ok(CobNet {
            cfg,
            fuse,
            attention,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Every trainable tensor, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.fuse.collect_params(&mut out);
        if let Some(att) = &self.attention {
            att.collect_params(&mut out);
        }
        self.classifier.collect_params(&mut out);
        out
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    /// Forward pass over prepared episode features.
    pub fn forward(
        &self,
        g: &mut Graph,
        shots: &[(FeatureMap, SupportMask)],
        query: &FeatureMap,
        weak: bool,
    ) -> Result<ForwardOutput> {
        if shots.is_empty() {
            return Err(Error::Usage("episode without support shots".to_string()));
        }
        let (c, h, w) = (query.channels(), query.height(), query.width());
        if c != self.cfg.channels {
            return Err(Error::Dimension(format!(
                "model expects {} channels, features have {c}",
                self.cfg.channels
            )));
        }
        for (f, _) in shots {
            if f.channels() != c || f.height() != h || f.width() != w {
                return Err(Error::Dimension(format!(
                    "support features {:?} do not match query {:?}",
                    f.tensor().shape(),
                    query.tensor().shape()
                )));
            }
        }

        let object_proto = if weak {
            weak_kshot_prototype(shots)
        } else {
            proto::kshot_prototype(shots)?
        };
        let align = episode_align_mask(query, shots)?;

        let background = match self.cfg.ablation {
            Ablation::Full | Ablation::MbmOnly => {
                Some(proto::background_grid(query, self.cfg.grid)?)
            }
            Ablation::MbmSupportBg => {
                Some(proto::kshot_complement_grid(shots, self.cfg.grid)?)
            }
            Ablation::MbmObjectOnly => None,
        };

        let pyramid = mbm::build_pyramid(query, &self.cfg.scales)?;
        let mut plus_levels = Vec::with_capacity(pyramid.sizes().len());
        let mut minus_levels = Vec::with_capacity(pyramid.sizes().len());
        let mut intermediates = Vec::with_capacity(pyramid.sizes().len());
        for (i, (&k, f_m)) in pyramid.sizes().iter().zip(pyramid.levels()).enumerate() {
            let m_a_k = prior::downsample_mask(&align, k)?;
            let f_o_exp = mbm::expand_object(&object_proto, k);
            let fused_plus = mbm::fuse_plus(g, f_m, &f_o_exp, &m_a_k, &self.fuse.plus[i])?;
            intermediates.push(mbm::intermediate_prediction(g, &fused_plus, &self.fuse.heads[i])?);
            plus_levels.push(fused_plus);
            if let (Some(bg), Some(minus)) = (&background, &self.fuse.minus) {
                let f_b_exp = mbm::expand_background(bg, k)?;
                minus_levels.push(mbm::fuse_minus(g, f_m, &f_b_exp, &m_a_k, &minus[i])?);
            }
        }
        let f_o = mbm::aggregate(g, &plus_levels, h, w)?;
        let f_b = if minus_levels.is_empty() {
            None
        } else {
            Some(mbm::aggregate(g, &minus_levels, h, w)?)
        };

        let (logits, attention) = match (&self.attention, &f_b) {
            (Some(att_params), Some(f_b)) => {
                let a = cam::attention(g, &f_o, f_b, att_params)?;
                let (w_o, w_b) = cam::apply_attention(g, &f_o, f_b, &a)?;
                (cam::classify(g, &w_o, &w_b, &self.classifier)?, Some(a))
            }
            (None, Some(f_b)) => (cam::classify(g, &f_o, f_b, &self.classifier)?, None),
            (_, None) => (cam::classify(g, &f_o, &f_o, &self.classifier)?, None),
        };

        Ok(ForwardOutput {
            logits,
            intermediates,
            align,
            attention,
        })
    }

    /// Total training loss for one episode.
    pub fn loss(&self, g: &mut Graph, output: &ForwardOutput, query_mask: &Mask) -> Result<Tensor> {
        cam::total_loss(g, &output.logits, &output.intermediates, query_mask)
    }

    /// Predicted query mask at the requested resolution.
    pub fn predict(&self, output: &ForwardOutput, h: usize, w: usize) -> Result<Mask> {
        let mut g = Graph::inference();
        let up = g.bilinear_resize(&output.logits, h, w)?;
        cam::predict_mask(&up)
    }
}

/// Mean of per-shot global-average prototypes (weak supervision).
fn weak_kshot_prototype(shots: &[(FeatureMap, SupportMask)]) -> ObjectPrototype {
    let protos: Vec<ObjectPrototype> = shots
        .iter()
        .map(|(f, _)| proto::weak_object_prototype(f))
        .collect();
    let c = protos[0].len();
    let mut values = vec![0.0; c];
    for p in &protos {
        for (v, x) in values.iter_mut().zip(p.values()) {
            *v += x;
        }
    }
    for v in &mut values {
        *v /= protos.len() as f64;
    }
    ObjectPrototype::from_values(values)
}

/// Align mask for a k-shot episode: elementwise max of the raw max-cosine
/// maps across shots, then one min-max normalization. Reduces to the
/// single-shot definition for k = 1.
pub fn episode_align_mask(
    query: &FeatureMap,
    shots: &[(FeatureMap, SupportMask)],
) -> Result<AlignMask> {
    let mut raw: Option<Vec<f64>> = None;
    for (f_s, m_s) in shots {
        let fm = prior::masked_support_features(f_s, m_s)?;
        let shot_raw = prior::raw_max_cosine(query, &fm)?;
        raw = Some(match raw {
            Some(acc) => acc
                .iter()
                .zip(&shot_raw)
                .map(|(&a, &b)| a.max(b))
                .collect(),
            None => shot_raw,
        });
    }
    let raw = raw.ok_or_else(|| Error::Usage("episode without support shots".to_string()))?;
    let values = prior::normalize_unit_range(&raw);
    AlignMask::from_tensor(
        Tensor::from_vec(vec![1, query.height(), query.width()], values)
            .expect("shape consistent"),
    )
}

/// Episode features ready for the model: frozen support/query features and
/// masks resized to feature resolution.
pub struct PreparedEpisode {
    pub shots: Vec<(FeatureMap, SupportMask)>,
    pub query: FeatureMap,
    pub query_mask: Mask,
    pub class_id: usize,
    pub weak: bool,
}

pub fn prepare_episode(backbone: &Backbone, episode: &Episode) -> Result<PreparedEpisode> {
    let query = backbone.extract_features(&episode.query)?;
    let (fh, fw) = (query.height(), query.width());
    let mut shots = Vec::with_capacity(episode.support.len());
    for (img, mask) in &episode.support {
        let features = backbone.extract_features(img)?;
        let support_mask = SupportMask::new(mask.clone(), fh, fw)?;
        shots.push((features, support_mask));
    }
    Ok(PreparedEpisode {
        shots,
        query,
        query_mask: episode.query_mask.clone(),
        class_id: episode.spec.class_id,
        weak: episode.weak,
    })
}

// ── Checkpoints ──────────────────────────────────────────────────────

const MANIFEST_HEADER: &str = "cobnet-checkpoint v1";

/// Write every parameter as a CBT1 file plus a manifest naming each one and
/// recording the model configuration. Extra lines (training provenance) are
/// stored verbatim with an `info ` prefix.
pub fn save_checkpoint(dir: &Path, model: &CobNet, extra: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let params = model.named_params();
    let mut manifest = String::new();
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    let cfg = model.config();
    let scales: Vec<String> = cfg.scales.iter().map(|s| s.to_string()).collect();
    manifest.push_str(&format!("channels={}\n", cfg.channels));
    manifest.push_str(&format!("scales={}\n", scales.join(",")));
    manifest.push_str(&format!("grid={}\n", cfg.grid));
    manifest.push_str(&format!("ablation={}\n", cfg.ablation.name()));
    manifest.push_str(&format!("model_seed={}\n", cfg.seed));
    for (name, tensor) in &params {
        io::write_tensor(&dir.join(format!("{name}.cbt")), tensor)?;
        manifest.push_str(&format!("param {name}\n"));
    }
    for line in extra {
        manifest.push_str(&format!("info {line}\n"));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Rebuild a model from a checkpoint directory written by
/// [`save_checkpoint`]. Evaluation after a round trip is bit-identical.
pub fn load_checkpoint(dir: &Path) -> Result<CobNet> {
    let manifest_path = dir.join("manifest.txt");
    if !manifest_path.exists() {
        return Err(Error::Format(format!(
            "{}: missing manifest.txt",
            dir.display()
        )));
    }
    let text = std::fs::read_to_string(&manifest_path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!(
            "{}: not a checkpoint manifest",
            manifest_path.display()
        )));
    }
    let mut channels = None;
    let mut scales = None;
    let mut grid = None;
    let mut ablation = None;
    let mut seed = None;
    let mut param_names = Vec::new();
    for line in lines {
        if let Some(name) = line.strip_prefix("param ") {
            param_names.push(name.to_string());
        } else if line.starts_with("info ") || line.is_empty() {
            continue;
        } else if let Some((key, value)) = line.split_once('=') {
            match key {
                "channels" => channels = Some(parse_field(value, "channels")?),
                "grid" => grid = Some(parse_field(value, "grid")?),
                "model_seed" => seed = Some(parse_field(value, "model_seed")?),
                "ablation" => ablation = Some(Ablation::parse(value)?),
                "scales" => {
                    scales = Some(
                        value
                            .split(',')
                            .map(|v| parse_field(v, "scales"))
                            .collect::<Result<Vec<usize>>>()?,
                    )
                }
                other => {
                    return Err(Error::Format(format!(
                        "unknown checkpoint field: {other}"
                    )))
                }
            }
        } else {
            return Err(Error::Format(format!("bad manifest line: {line}")));
        }
    }
    let cfg = ModelConfig {
        channels: channels.ok_or_else(|| Error::Format("manifest missing channels".into()))?,
        scales: scales.ok_or_else(|| Error::Format("manifest missing scales".into()))?,
        grid: grid.ok_or_else(|| Error::Format("manifest missing grid".into()))?,
        ablation: ablation.ok_or_else(|| Error::Format("manifest missing ablation".into()))?,
        seed: seed.ok_or_else(|| Error::Format("manifest missing model_seed".into()))?,
    };
    let model = CobNet::new(cfg)?;
    let params = model.named_params();
    if params.len() != param_names.len()
        || params
            .iter()
            .zip(&param_names)
            .any(|((name, _), listed)| name != listed)
    {
        return Err(Error::Format(
            "checkpoint parameter list does not match the model".to_string(),
        ));
    }
    for (name, tensor) in &params {
        let loaded = io::read_tensor(&dir.join(format!("{name}.cbt")))?;
        if loaded.shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "parameter {name}: checkpoint shape {:?} does not match model shape {:?}",
                loaded.shape(),
                tensor.shape()
            )));
        }
        let values = loaded.to_vec();
        tensor.overwrite_data(|data| data.copy_from_slice(&values));
    }
    Ok(model)
}

fn parse_field<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Format(format!("bad {key} value: {value}")))
}
