//! Shared value types and conventions: slices, label masks, training
//! configuration, and per-iteration loss reports.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{BiglError, Result};

/// Which distribution a slice belongs to.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
    SynSource,
    SynTarget,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
            Domain::SynSource => "syn_source",
            Domain::SynTarget => "syn_target",
        }
    }
}

/// One axial slice. `pixels` is the z-score-normalized view used by the
/// segmentation network; `unit` keeps the underlying [0, 1] intensities that
/// the synthesis networks consume (affinely mapped to [-1, 1] at their input).
#[derive(Clone, Debug)]
pub struct Slice2D {
    pub pixels: Array2<f32>,
    pub unit: Array2<f32>,
    /// (row_mm, col_mm) physical pixel size.
    pub spacing: (f64, f64),
    pub domain: Domain,
    pub case_id: String,
    pub slice_index: usize,
}

impl Slice2D {
    /// Build a slice from raw [0, 1] intensities, z-scoring over the nonzero
    /// support.
    pub fn from_unit(
        unit: Array2<f32>,
        spacing: (f64, f64),
        domain: Domain,
        case_id: impl Into<String>,
        slice_index: usize,
    ) -> Result<Self> {
        assert!(spacing.0 > 0.0 && spacing.1 > 0.0, "spacing must be positive");
        let pixels = normalize_grid(&unit)?;
        Ok(Slice2D {
            pixels,
            unit,
            spacing,
            domain,
            case_id: case_id.into(),
            slice_index,
        })
    }
}

/// Z-score a grid over its nonzero support; zero pixels stay zero. Degenerate
/// (constant-support) grids fall back to a unit divisor, producing zeros.
pub fn normalize_grid(raw: &Array2<f32>) -> Result<Array2<f32>> {
    assert!(raw.nrows() > 0 && raw.ncols() > 0, "grid must be nonempty");
    let support: Vec<f64> = raw.iter().filter(|&&v| v != 0.0).map(|&v| v as f64).collect();
    if support.is_empty() {
        return Err(BiglError::EmptyImage);
    }
    let n = support.len() as f64;
    let mean = support.iter().sum::<f64>() / n;
    let var = support.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let div = if std < 1e-8 { 1.0 } else { std };
    Ok(raw.mapv(|v| {
        if v == 0.0 {
            0.0
        } else {
            ((v as f64 - mean) / div) as f32
        }
    }))
}

/// Normalize a raw intensity grid into a [`Slice2D`] with neutral metadata.
pub fn normalize_slice(raw: Array2<f32>, spacing: (f64, f64)) -> Result<Slice2D> {
    Slice2D::from_unit(raw, spacing, Domain::Source, "", 0)
}

/// Raw on-disk label encodings.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum LabelScheme {
    /// Brain tumor scheme: raw {0, 1, 2, 4} for background, NCR/NET, ED, ET.
    Brats,
    /// Cardiac scheme: raw {0, 820, 420, 500, 205} for background, AA, LAC,
    /// LVC, MYO.
    Cardiac,
}

impl LabelScheme {
    /// (raw value, class index) pairs, class indices contiguous from 0.
    pub fn mapping(self) -> &'static [(i64, u8)] {
        match self {
            LabelScheme::Brats => &[(0, 0), (1, 1), (2, 2), (4, 3)],
            LabelScheme::Cardiac => &[(0, 0), (820, 1), (420, 2), (500, 3), (205, 4)],
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            LabelScheme::Brats => &["background", "NCR/NET", "ED", "ET"],
            LabelScheme::Cardiac => &["background", "AA", "LAC", "LVC", "MYO"],
        }
    }

    pub fn num_classes(self) -> usize {
        self.class_names().len()
    }

    /// Raw value a class index maps back to.
    pub fn raw_for(self, class: u8) -> i64 {
        self.mapping()
            .iter()
            .find(|(_, c)| *c == class)
            .map(|(r, _)| *r)
            .expect("class index out of range")
    }
}

/// Per-pixel class indices in {0 .. c-1} plus the scheme's naming.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    pub classes: Array2<u8>,
    pub num_classes: usize,
    pub scheme: LabelScheme,
}

impl LabelMask {
    pub fn class_names(&self) -> &'static [&'static str] {
        self.scheme.class_names()
    }
}

/// Remap a raw label grid onto contiguous class indices.
pub fn remap_labels(raw: &Array2<i64>, scheme: LabelScheme) -> Result<LabelMask> {
    let map = scheme.mapping();
    let mut classes = Array2::<u8>::zeros(raw.raw_dim());
    for (out, &v) in classes.iter_mut().zip(raw.iter()) {
        match map.iter().find(|(r, _)| *r == v) {
            Some((_, c)) => *out = *c,
            None => {
                return Err(BiglError::LabelSchemeViolation {
                    found: v,
                    allowed: map
                        .iter()
                        .map(|(r, _)| r.to_string())
                        .collect::<Vec<_>>()
                        .join(", "),
                })
            }
        }
    }
    Ok(LabelMask { classes, num_classes: scheme.num_classes(), scheme })
}

/// A positional pairing of unpaired samples: source slices carry labels,
/// target slices never do.
pub struct UnpairedBatch {
    pub source: Vec<(Slice2D, LabelMask)>,
    pub target: Vec<Slice2D>,
}

impl UnpairedBatch {
    pub fn new(source: Vec<(Slice2D, LabelMask)>, target: Vec<Slice2D>) -> Self {
        assert_eq!(source.len(), target.len(), "batch pairing is positional");
        UnpairedBatch { source, target }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

fn default_lambda_out() -> f64 {
    0.001
}
fn default_lambda_gtl() -> f64 {
    0.1
}
fn default_lambda_syn() -> f64 {
    0.01
}
fn default_lambda_term() -> f64 {
    0.1
}
fn default_lambda_rec() -> f64 {
    10.0
}
fn default_base_lr() -> f64 {
    5e-3
}
fn default_lr_power() -> f64 {
    0.75
}
fn default_disc_lr() -> f64 {
    5e-5
}
fn default_syn_lr() -> f64 {
    2e-4
}
fn default_momentum() -> f64 {
    0.9
}
fn default_epochs() -> u32 {
    150
}
fn default_batch_size() -> usize {
    8
}
fn default_seed() -> u64 {
    7
}
fn default_num_classes() -> usize {
    4
}
fn default_image_size() -> (usize, usize) {
    (64, 64)
}
fn default_base_width() -> usize {
    32
}
fn default_gen_width() -> usize {
    32
}
fn default_disc_width() -> usize {
    16
}
fn default_snapshot_every() -> u32 {
    10
}
fn default_true() -> bool {
    true
}

/// Full training configuration. Defaults follow the published schedule; the
/// desk-scale experiment overrides size/width/epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the output-consistency term.
    pub lambda_out: f64,
    /// Block weight of the global-to-local terms in the reported total.
    pub lambda_gtl: f64,
    /// Block weight of the synthesis terms in the reported total.
    pub lambda_syn: f64,
    /// Per-term weight of feature consistency in the backbone objective.
    pub lambda_feat: f64,
    /// Per-term weight of position-attention consistency.
    pub lambda_att_pos: f64,
    /// Per-term weight of channel-attention consistency.
    pub lambda_att_cha: f64,
    /// Reconstruction weight inside the generator objective.
    pub lambda_rec: f64,
    /// Backbone base learning rate (poly-decayed).
    pub base_lr: f64,
    /// Poly decay exponent.
    pub lr_power: f64,
    /// Alignment-discriminator learning rate (constant).
    pub disc_lr: f64,
    /// Synthesis generator/discriminator learning rate (constant).
    pub syn_lr: f64,
    /// Backbone SGD momentum.
    pub momentum: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub num_classes: usize,
    pub image_size: (usize, usize),
    /// Segmentation encoder base width (doubles per stage, capped at 8x).
    pub base_width: usize,
    /// Generator base width.
    pub gen_width: usize,
    /// Discriminator base width (image and alignment discriminators).
    pub disc_width: usize,
    /// Checkpoint cadence in epochs (a final checkpoint is always written).
    pub snapshot_every: u32,
    /// Replace the unpaired reconstruction term with a cycle reconstruction.
    pub cycle_reconstruction: bool,
    /// Ablation switch: include the output-consistency term.
    pub use_output_consistency: bool,
    /// Ablation switch: include feature-level alignment.
    pub use_feature_alignment: bool,
    /// Ablation switch: include attention-level alignment.
    pub use_attention_alignment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_out: default_lambda_out(),
            lambda_gtl: default_lambda_gtl(),
            lambda_syn: default_lambda_syn(),
            lambda_feat: default_lambda_term(),
            lambda_att_pos: default_lambda_term(),
            lambda_att_cha: default_lambda_term(),
            lambda_rec: default_lambda_rec(),
            base_lr: default_base_lr(),
            lr_power: default_lr_power(),
            disc_lr: default_disc_lr(),
            syn_lr: default_syn_lr(),
            momentum: default_momentum(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: default_seed(),
            num_classes: default_num_classes(),
            image_size: default_image_size(),
            base_width: default_base_width(),
            gen_width: default_gen_width(),
            disc_width: default_disc_width(),
            snapshot_every: default_snapshot_every(),
            cycle_reconstruction: false,
            use_output_consistency: default_true(),
            use_feature_alignment: default_true(),
            use_attention_alignment: default_true(),
        }
    }
}

impl TrainConfig {
    /// Validate invariants. Zero epochs are allowed (an initialization-only
    /// run that still emits checkpoints).
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda_out", self.lambda_out),
            ("lambda_gtl", self.lambda_gtl),
            ("lambda_syn", self.lambda_syn),
            ("lambda_feat", self.lambda_feat),
            ("lambda_att_pos", self.lambda_att_pos),
            ("lambda_att_cha", self.lambda_att_cha),
            ("lambda_rec", self.lambda_rec),
            ("base_lr", self.base_lr),
            ("lr_power", self.lr_power),
            ("disc_lr", self.disc_lr),
            ("syn_lr", self.syn_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(BiglError::IngestError(format!(
                    "config: {name} must be strictly positive, got {v}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(BiglError::IngestError("config: batch_size must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(BiglError::IngestError("config: num_classes must be >= 2".into()));
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(BiglError::IngestError(format!(
                "config: image_size must be positive multiples of 16, got ({h}, {w})"
            )));
        }
        if self.base_width == 0 || self.base_width % 2 != 0 {
            return Err(BiglError::IngestError(
                "config: base_width must be a positive even number".into(),
            ));
        }
        if self.gen_width == 0 || self.disc_width == 0 {
            return Err(BiglError::IngestError("config: widths must be positive".into()));
        }
        if self.snapshot_every == 0 {
            return Err(BiglError::IngestError("config: snapshot_every must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 hex digest of the canonical serialized form, embedded in
    /// checkpoints to tie them to the producing configuration.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = toml::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Training stage: stage 1 trains synthesis, stage 2 freezes it and trains
/// segmentation plus alignment.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

/// Per-iteration loss components. Absent components simply did not apply to
/// the producing stage.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seg_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seg_syn_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub output_consis: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub feat_consis: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub att_consis_pos: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub att_consis_cha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv_feat_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv_feat_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv_att_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv_att_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gen_syn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub disc_syn: Option<f64>,
    pub total: f64,
}

impl LossReport {
    /// All present components as (name, value) pairs, in field order.
    pub fn components(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        let fields = [
            ("seg_s", self.seg_s),
            ("seg_syn_s", self.seg_syn_s),
            ("output_consis", self.output_consis),
            ("feat_consis", self.feat_consis),
            ("att_consis_pos", self.att_consis_pos),
            ("att_consis_cha", self.att_consis_cha),
            ("adv_feat_s", self.adv_feat_s),
            ("adv_feat_t", self.adv_feat_t),
            ("adv_att_s", self.adv_att_s),
            ("adv_att_t", self.adv_att_t),
            ("gen_syn", self.gen_syn),
            ("disc_syn", self.disc_syn),
        ];
        for (name, v) in fields {
            if let Some(v) = v {
                out.push((name, v));
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.total.is_finite() && self.components().iter().all(|(_, v)| v.is_finite())
    }
}
