//! Global-to-local alignment: output-space consistency, adversarial alignment
//! of attention maps and bottleneck features, and the reported total
//! objective.
//!
//! Six small discriminators (three levels x two domains) classify whether a
//! representation originates from their own domain. Consistency losses drive
//! the segmentation network to fool them; adversarial losses train the
//! discriminators themselves.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::domain::{LossReport, Stage, TrainConfig};
use crate::error::{BiglError, Result};
use crate::nn::params::{bound_var, init_conv, zeros, Bound, ParamSet};
use crate::nn::{Scalar, Tape, Var};
use crate::segnet::{AttentionBundle, FeatureMap};
use crate::synthesis::{mean_log_one_minus_prob, mean_log_prob};

const LEAK: f64 = 0.2;

/// Representation level an alignment discriminator operates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignmentLevel {
    Feature,
    AttPosition,
    AttChannel,
}

impl AlignmentLevel {
    pub fn tag(&self) -> &'static str {
        match self {
            AlignmentLevel::Feature => "feat",
            AlignmentLevel::AttPosition => "att_pos",
            AlignmentLevel::AttChannel => "att_cha",
        }
    }
}

/// Domain whose representations the discriminator treats as positives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignmentDomain {
    Source,
    Target,
}

impl AlignmentDomain {
    pub fn tag(&self) -> &'static str {
        match self {
            AlignmentDomain::Source => "s",
            AlignmentDomain::Target => "t",
        }
    }
}

/// Attention kind selector for the per-kind loss operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Position,
    Channel,
}

impl AttentionKind {
    pub fn level(&self) -> AlignmentLevel {
        match self {
            AttentionKind::Position => AlignmentLevel::AttPosition,
            AttentionKind::Channel => AlignmentLevel::AttChannel,
        }
    }
}

/// Small convolutional domain classifier: three stride-2 convolutions, a 1x1
/// projection and global mean pooling to one logit per sample. No
/// normalization layers, so hand-set weights stay analytically tractable.
pub struct AlignmentDiscriminator<F: Scalar> {
    pub level: AlignmentLevel,
    pub domain: AlignmentDomain,
    pub in_channels: usize,
    pub params: ParamSet<F>,
}

impl<F: Scalar> AlignmentDiscriminator<F> {
    pub fn init(
        level: AlignmentLevel,
        domain: AlignmentDomain,
        in_channels: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut p = ParamSet::new();
        p.add("l1.w", init_conv(rng, width, in_channels, 3, 3));
        p.add("l1.b", zeros(&[width]));
        p.add("l2.w", init_conv(rng, 2 * width, width, 3, 3));
        p.add("l3.w", init_conv(rng, 2 * width, 2 * width, 3, 3));
        p.add("out.w", init_conv(rng, 1, 2 * width, 1, 1));
        p.add("out.b", zeros(&[1]));
        AlignmentDiscriminator { level, domain, in_channels, params: p }
    }

    /// All-zero parameters: probability exactly 0.5 for any input.
    pub fn zeroed(level: AlignmentLevel, domain: AlignmentDomain, in_channels: usize, width: usize) -> Self {
        let mut rng = crate::rng::stream(0, "disc-zero", 0);
        let mut d = Self::init(level, domain, in_channels, width, &mut rng);
        for (_, v) in d.params.iter_mut() {
            v.fill(F::zero());
        }
        d
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Per-sample logits [N] for a batch [N, C, H, W].
    pub fn forward(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(BiglError::LevelMismatch(format!(
                "discriminator {}/{} expects {} input channels, got shape {:?}",
                self.level.tag(),
                self.domain.tag(),
                self.in_channels,
                shape
            )));
        }
        let v = |name: &str| bound_var(&self.params, bound, name);
        let h = tape.conv2d(x, v("l1.w"), Some(v("l1.b")), 2, 1);
        let h = tape.leaky_relu(h, LEAK);
        let h = tape.conv2d(h, v("l2.w"), None, 2, 1);
        let h = tape.leaky_relu(h, LEAK);
        let h = tape.conv2d(h, v("l3.w"), None, 2, 1);
        let h = tape.leaky_relu(h, LEAK);
        let h = tape.conv2d(h, v("out.w"), Some(v("out.b")), 1, 0);
        let n = shape[0];
        let pooled = tape.sum_axes(h, &[1, 2, 3]);
        let count = tape.value(h).len() / n;
        Ok(tape.scale(pooled, 1.0 / count as f64))
    }
}

/// Errors unless every parameter in `bound` is frozen (no gradient tracking).
pub fn require_frozen<F: Scalar>(tape: &Tape<F>, bound: &Bound, context: &str) -> Result<()> {
    if bound.vars.iter().any(|&v| tape.needs_grad(v)) {
        return Err(BiglError::FrozenContractViolation(format!(
            "{context}: discriminator parameters must be frozen"
        )));
    }
    Ok(())
}

/// -mean(log sigmoid(logits)) after clamping: the fooling term pushing a
/// representation to be classified as own-domain.
pub fn neg_mean_log_prob<F: Scalar>(tape: &mut Tape<F>, logits: Var) -> Var {
    let m = mean_log_prob(tape, logits);
    tape.scale(m, -1.0)
}

/// Discriminator objective -E[log D(own)] - E[log(1 - D(cross))] from logit
/// nodes.
pub fn adversarial_from_logits<F: Scalar>(tape: &mut Tape<F>, own: Var, cross: Var) -> Var {
    let a = mean_log_prob(tape, own);
    let b = mean_log_one_minus_prob(tape, cross);
    let s = tape.add(a, b);
    tape.scale(s, -1.0)
}

/// Mean squared class-probability distance between two probability fields
/// [N, c, H, W]: mean over pixels of the squared L2 over classes.
pub fn output_consistency_node<F: Scalar>(tape: &mut Tape<F>, p_a: Var, p_b: Var) -> Result<Var> {
    let sa = tape.value(p_a).shape().to_vec();
    let sb = tape.value(p_b).shape().to_vec();
    if sa != sb {
        return Err(BiglError::ShapeMismatch {
            context: "output consistency".into(),
            expected: sa,
            got: sb,
        });
    }
    let d = tape.sub(p_a, p_b);
    let sq = tape.mul(d, d);
    let total = tape.sum_all(sq);
    let pixels = (sa[0] * sa[2] * sa[3]) as f64;
    Ok(tape.scale(total, 1.0 / pixels))
}

/// Mean squared class-probability distance between two single-slice softmax
/// fields [c, H, W].
pub fn output_consistency(p_t: &Array3<f32>, p_t2s: &Array3<f32>) -> Result<f64> {
    if p_t.dim() != p_t2s.dim() {
        let (a, b, c) = p_t.dim();
        let (d, e, f) = p_t2s.dim();
        return Err(BiglError::ShapeMismatch {
            context: "output consistency".into(),
            expected: vec![a, b, c],
            got: vec![d, e, f],
        });
    }
    let (_, h, w) = p_t.dim();
    let sum: f64 = p_t
        .iter()
        .zip(p_t2s.iter())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / (h * w) as f64)
}

fn check_disc_pair<F: Scalar>(
    disc_s: &AlignmentDiscriminator<F>,
    disc_t: &AlignmentDiscriminator<F>,
    level: AlignmentLevel,
) -> Result<()> {
    for (d, dom) in [(disc_s, AlignmentDomain::Source), (disc_t, AlignmentDomain::Target)] {
        if d.level != level {
            return Err(BiglError::LevelMismatch(format!(
                "expected level {}, got {}",
                level.tag(),
                d.level.tag()
            )));
        }
        if d.domain != dom {
            return Err(BiglError::LevelMismatch(format!(
                "expected domain {}, got {}",
                dom.tag(),
                d.domain.tag()
            )));
        }
    }
    Ok(())
}

fn image_batch<F: Scalar>(map: &Array2<f32>) -> ArrayD<F> {
    let (h, w) = map.dim();
    ArrayD::from_shape_fn(IxDyn(&[1, 1, h, w]), |ix| F::from_f64(map[[ix[2], ix[3]]] as f64))
}

fn feature_batch<F: Scalar>(feat: &FeatureMap) -> ArrayD<F> {
    let (c, h, w) = feat.values.dim();
    ArrayD::from_shape_fn(IxDyn(&[1, c, h, w]), |ix| {
        F::from_f64(feat.values[[ix[1], ix[2], ix[3]]] as f64)
    })
}

fn select_map(bundle: &AttentionBundle, kind: AttentionKind) -> &Array2<f32> {
    match kind {
        AttentionKind::Position => &bundle.position_map,
        AttentionKind::Channel => &bundle.channel_map,
    }
}

/// Discriminator probability of a single prepared input batch.
fn prob_of<F: Scalar>(disc: &AlignmentDiscriminator<F>, input: ArrayD<F>) -> Result<f64> {
    let mut tape = Tape::<F>::new();
    let bound = disc.bind(&mut tape, false);
    let x = tape.constant(input);
    let logits = disc.forward(&mut tape, &bound, x)?;
    let p = tape.sigmoid(logits);
    Ok(tape.value(p).iter().map(|&v| v.to_f64()).sum::<f64>() / tape.value(p).len() as f64)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(crate::synthesis::PROB_EPS, 1.0 - crate::synthesis::PROB_EPS)
}

/// Adversarial (discriminator-side) losses for one attention kind:
/// `L_adv_s = -E[log D_s(A_s)] - E[log(1 - D_s(A_t2s))]`,
/// `L_adv_t = -E[log D_t(A_s2t)] - E[log(1 - D_t(A_t))]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_adversarial_losses<F: Scalar>(
    bundle_s: &AttentionBundle,
    bundle_t: &AttentionBundle,
    bundle_s2t: &AttentionBundle,
    bundle_t2s: &AttentionBundle,
    disc_s: &AlignmentDiscriminator<F>,
    disc_t: &AlignmentDiscriminator<F>,
    kind: AttentionKind,
) -> Result<(f64, f64)> {
    check_disc_pair(disc_s, disc_t, kind.level())?;
    let p_own_s = clamp_prob(prob_of(disc_s, image_batch(select_map(bundle_s, kind)))?);
    let p_cross_s = clamp_prob(prob_of(disc_s, image_batch(select_map(bundle_t2s, kind)))?);
    let p_own_t = clamp_prob(prob_of(disc_t, image_batch(select_map(bundle_s2t, kind)))?);
    let p_cross_t = clamp_prob(prob_of(disc_t, image_batch(select_map(bundle_t, kind)))?);
    let l_s = -p_own_s.ln() - (1.0 - p_cross_s).ln();
    let l_t = -p_own_t.ln() - (1.0 - p_cross_t).ln();
    Ok((l_s, l_t))
}

/// Generator-side attention consistency over both kinds:
/// `-E[log D_s(A_t2s)] - E[log D_t(A_t)]` summed for position and channel
/// maps. Gradients flow into the segmentation network only; the
/// discriminators must be frozen by the caller's tape construction.
#[allow(clippy::too_many_arguments)]
pub fn attention_consistency_loss<F: Scalar>(
    bundle_t: &AttentionBundle,
    bundle_t2s: &AttentionBundle,
    disc_pos_s: &AlignmentDiscriminator<F>,
    disc_pos_t: &AlignmentDiscriminator<F>,
    disc_cha_s: &AlignmentDiscriminator<F>,
    disc_cha_t: &AlignmentDiscriminator<F>,
) -> Result<f64> {
    check_disc_pair(disc_pos_s, disc_pos_t, AlignmentLevel::AttPosition)?;
    check_disc_pair(disc_cha_s, disc_cha_t, AlignmentLevel::AttChannel)?;
    let mut loss = 0.0;
    for (d_s, d_t, kind) in [
        (disc_pos_s, disc_pos_t, AttentionKind::Position),
        (disc_cha_s, disc_cha_t, AttentionKind::Channel),
    ] {
        let p_cross = clamp_prob(prob_of(d_s, image_batch(select_map(bundle_t2s, kind)))?);
        let p_own = clamp_prob(prob_of(d_t, image_batch(select_map(bundle_t, kind)))?);
        loss += -p_cross.ln() - p_own.ln();
    }
    Ok(loss)
}

/// Per-kind generator-side attention consistency, for separate reporting.
pub fn attention_consistency_one<F: Scalar>(
    bundle_t: &AttentionBundle,
    bundle_t2s: &AttentionBundle,
    disc_s: &AlignmentDiscriminator<F>,
    disc_t: &AlignmentDiscriminator<F>,
    kind: AttentionKind,
) -> Result<f64> {
    check_disc_pair(disc_s, disc_t, kind.level())?;
    let p_cross = clamp_prob(prob_of(disc_s, image_batch(select_map(bundle_t2s, kind)))?);
    let p_own = clamp_prob(prob_of(disc_t, image_batch(select_map(bundle_t, kind)))?);
    Ok(-p_cross.ln() - p_own.ln())
}

/// Adversarial (discriminator-side) losses at the feature level.
pub fn feature_adversarial_losses<F: Scalar>(
    feat_s: &FeatureMap,
    feat_t: &FeatureMap,
    feat_s2t: &FeatureMap,
    feat_t2s: &FeatureMap,
    disc_s: &AlignmentDiscriminator<F>,
    disc_t: &AlignmentDiscriminator<F>,
) -> Result<(f64, f64)> {
    check_disc_pair(disc_s, disc_t, AlignmentLevel::Feature)?;
    let p_own_s = clamp_prob(prob_of(disc_s, feature_batch(feat_s))?);
    let p_cross_s = clamp_prob(prob_of(disc_s, feature_batch(feat_t2s))?);
    let p_own_t = clamp_prob(prob_of(disc_t, feature_batch(feat_s2t))?);
    let p_cross_t = clamp_prob(prob_of(disc_t, feature_batch(feat_t))?);
    Ok((
        -p_own_s.ln() - (1.0 - p_cross_s).ln(),
        -p_own_t.ln() - (1.0 - p_cross_t).ln(),
    ))
}

/// Generator-side feature consistency: `-E[log D_s(xi_t2s)] - E[log D_t(xi_t)]`.
pub fn feature_consistency_loss<F: Scalar>(
    feat_t: &FeatureMap,
    feat_t2s: &FeatureMap,
    disc_s: &AlignmentDiscriminator<F>,
    disc_t: &AlignmentDiscriminator<F>,
) -> Result<f64> {
    check_disc_pair(disc_s, disc_t, AlignmentLevel::Feature)?;
    let p_cross = clamp_prob(prob_of(disc_s, feature_batch(feat_t2s))?);
    let p_own = clamp_prob(prob_of(disc_t, feature_batch(feat_t))?);
    Ok(-p_cross.ln() - p_own.ln())
}

/// Reported total objective: a weighted sum over the blocks present in the
/// report. Blocks are all-or-none; a partially reported block is an error.
/// The synthesis block only contributes in stage 1 (synthesis is frozen in
/// stage 2).
pub fn total_loss(report: &LossReport, cfg: &TrainConfig, stage: Stage) -> Result<f64> {
    fn block(name: &str, parts: &[(&str, Option<f64>)]) -> Result<Option<f64>> {
        let present = parts.iter().filter(|(_, v)| v.is_some()).count();
        if present == 0 {
            return Ok(None);
        }
        if present < parts.len() {
            let missing: Vec<&str> =
                parts.iter().filter(|(_, v)| v.is_none()).map(|(n, _)| *n).collect();
            return Err(BiglError::IncompleteReport(format!(
                "{name} block missing {}",
                missing.join(", ")
            )));
        }
        Ok(Some(parts.iter().map(|(_, v)| v.unwrap()).sum()))
    }

    let mut total = 0.0;
    if let Some(seg) = block(
        "segmentation",
        &[("seg_s", report.seg_s), ("seg_syn_s", report.seg_syn_s)],
    )? {
        total += seg;
    }
    if let Some(out) = report.output_consis {
        total += cfg.lambda_out * out;
    }
    if stage == Stage::One {
        if let Some(syn) = block(
            "synthesis",
            &[("gen_syn", report.gen_syn), ("disc_syn", report.disc_syn)],
        )? {
            total += cfg.lambda_syn * syn;
        }
    }
    if let Some(feat) = block(
        "feature alignment",
        &[
            ("adv_feat_s", report.adv_feat_s),
            ("adv_feat_t", report.adv_feat_t),
            ("feat_consis", report.feat_consis),
        ],
    )? {
        total += cfg.lambda_gtl * feat;
    }
    if let Some(att) = block(
        "attention alignment",
        &[
            ("adv_att_s", report.adv_att_s),
            ("adv_att_t", report.adv_att_t),
            ("att_consis_pos", report.att_consis_pos),
            ("att_consis_cha", report.att_consis_cha),
        ],
    )? {
        total += cfg.lambda_gtl * att;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = core::f64::consts::LN_2;

    fn toy_bundle(v: f32) -> AttentionBundle {
        AttentionBundle {
            position_map: Array2::from_elem((4, 4), v),
            channel_map: Array2::from_elem((4, 4), v),
            alpha_pos: 0.0,
            alpha_cha: 0.0,
        }
    }

    fn toy_feat(v: f32) -> FeatureMap {
        FeatureMap { values: Array3::from_elem((2, 2, 2), v) }
    }

    /// Single-channel discriminator whose logit is a closed-form function of
    /// a constant input: center taps only, so conv chains reduce to scalar
    /// multiplication.
    fn scalar_disc(k: f64, domain: AlignmentDomain, level: AlignmentLevel) -> AlignmentDiscriminator<f64> {
        let mut d = AlignmentDiscriminator::<f64>::zeroed(level, domain, 1, 1);
        d.params.get_mut("l1.w")[[0, 0, 1, 1]] = k;
        d.params.get_mut("l2.w")[[0, 0, 1, 1]] = 1.0;
        d.params.get_mut("l2.w")[[1, 0, 1, 1]] = 0.0;
        d.params.get_mut("l3.w")[[0, 0, 1, 1]] = 1.0;
        d.params.get_mut("out.w")[[0, 0, 0, 0]] = 1.0;
        d
    }

    #[test]
    fn zeroed_disc_outputs_half() {
        let d = AlignmentDiscriminator::<f64>::zeroed(AlignmentLevel::Feature, AlignmentDomain::Source, 2, 2);
        let p = prob_of(&d, feature_batch(&toy_feat(0.3))).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wrong_channel_count_is_level_mismatch() {
        let d = AlignmentDiscriminator::<f64>::zeroed(AlignmentLevel::Feature, AlignmentDomain::Source, 3, 2);
        let err = prob_of(&d, feature_batch(&toy_feat(0.1))).unwrap_err();
        assert!(matches!(err, BiglError::LevelMismatch(_)));
    }

    #[test]
    fn wrong_level_pairing_rejected() {
        let pos = AlignmentDiscriminator::<f64>::zeroed(AlignmentLevel::AttPosition, AlignmentDomain::Source, 1, 1);
        let cha = AlignmentDiscriminator::<f64>::zeroed(AlignmentLevel::AttChannel, AlignmentDomain::Target, 1, 1);
        let b = toy_bundle(0.25);
        let err = attention_adversarial_losses(&b, &b, &b, &b, &pos, &cha, AttentionKind::Position)
            .unwrap_err();
        assert!(matches!(err, BiglError::LevelMismatch(_)));
    }

    #[test]
    fn untrained_attention_adversarial_is_two_log_two() {
        let d_s = AlignmentDiscriminator::<f64>::zeroed(AlignmentLevel::AttPosition, AlignmentDomain::Source, 1, 1);
        let d_t = AlignmentDiscriminator::<f64>::zeroed(AlignmentLevel::AttPosition, AlignmentDomain::Target, 1, 1);
        let b = toy_bundle(0.25);
        let (l_s, l_t) =
            attention_adversarial_losses(&b, &b, &b, &b, &d_s, &d_t, AttentionKind::Position).unwrap();
        assert!((l_s - 2.0 * LN2).abs() < 1e-9, "{l_s}");
        assert!((l_t - 2.0 * LN2).abs() < 1e-9, "{l_t}");
    }

    #[test]
    fn perfect_attention_discriminator_loss_is_tiny() {
        // center-tap chain: input +1 -> logit k; input -1 -> logit -0.008k
        // (three leaky-relu stages at slope 0.2)
        let d_s = scalar_disc(4000.0, AlignmentDomain::Source, AlignmentLevel::AttPosition);
        let d_t = scalar_disc(4000.0, AlignmentDomain::Target, AlignmentLevel::AttPosition);
        let own = toy_bundle(1.0);
        let cross = toy_bundle(-1.0);
        // D_s sees own = A_s (+1) and cross = A_t2s (-1); D_t sees own = A_s2t,
        // cross = A_t
        let (l_s, l_t) =
            attention_adversarial_losses(&own, &cross, &own, &cross, &d_s, &d_t, AttentionKind::Position)
                .unwrap();
        let oracle = -(1.0f64 - 1e-7).ln() * 2.0;
        assert!((l_s - oracle).abs() < 1e-6, "{l_s} vs {oracle}");
        assert!((l_t - oracle).abs() < 1e-6, "{l_t} vs {oracle}");
    }

    #[test]
    fn attention_consistency_oracles() {
        let pos_s = AlignmentDiscriminator::<f64>::zeroed(AlignmentLevel::AttPosition, AlignmentDomain::Source, 1, 1);
        let pos_t = AlignmentDiscriminator::<f64>::zeroed(AlignmentLevel::AttPosition, AlignmentDomain::Target, 1, 1);
        let cha_s = AlignmentDiscriminator::<f64>::zeroed(AlignmentLevel::AttChannel, AlignmentDomain::Source, 1, 1);
        let cha_t = AlignmentDiscriminator::<f64>::zeroed(AlignmentLevel::AttChannel, AlignmentDomain::Target, 1, 1);
        let b = toy_bundle(0.25);
        // all probabilities 0.5: each kind contributes 2 ln 2
        let loss = attention_consistency_loss(&b, &b, &pos_s, &pos_t, &cha_s, &cha_t).unwrap();
        assert!((loss - 4.0 * LN2).abs() < 1e-9, "{loss}");
        let one = attention_consistency_one(&b, &b, &pos_s, &pos_t, AttentionKind::Position).unwrap();
        assert!((one - 2.0 * LN2).abs() < 1e-9);

        // classified own-domain with probability ~ 1 on both terms
        let sharp_s = scalar_disc(4000.0, AlignmentDomain::Source, AlignmentLevel::AttPosition);
        let sharp_t = scalar_disc(4000.0, AlignmentDomain::Target, AlignmentLevel::AttPosition);
        let ones = toy_bundle(1.0);
        let one = attention_consistency_one(&ones, &ones, &sharp_s, &sharp_t, AttentionKind::Position)
            .unwrap();
        let oracle = -(1.0f64 - 1e-7).ln() * 2.0;
        assert!((one - oracle).abs() < 1e-6, "{one}");
    }

    #[test]
    fn feature_losses_match_attention_oracles() {
        let d_s = AlignmentDiscriminator::<f64>::zeroed(AlignmentLevel::Feature, AlignmentDomain::Source, 2, 1);
        let d_t = AlignmentDiscriminator::<f64>::zeroed(AlignmentLevel::Feature, AlignmentDomain::Target, 2, 1);
        let f = toy_feat(0.3);
        let (l_s, l_t) = feature_adversarial_losses(&f, &f, &f, &f, &d_s, &d_t).unwrap();
        assert!((l_s - 2.0 * LN2).abs() < 1e-9);
        assert!((l_t - 2.0 * LN2).abs() < 1e-9);
        let c = feature_consistency_loss(&f, &f, &d_s, &d_t).unwrap();
        assert!((c - 2.0 * LN2).abs() < 1e-9);
    }

    #[test]
    fn single_element_feature_closed_form() {
        // one-channel 1x1 feature v = 0.6, center-tap weights k = 2.0:
        // logit = 0.6 * 2.0 = 1.2 (positive path, leak never engages)
        let d_s = scalar_disc(2.0, AlignmentDomain::Source, AlignmentLevel::Feature);
        let d_t = scalar_disc(2.0, AlignmentDomain::Target, AlignmentLevel::Feature);
        let f = FeatureMap { values: Array3::from_elem((1, 1, 1), 0.6) };
        let logit = (0.6f32 as f64) * 2.0;
        let p = 1.0 / (1.0 + (-logit).exp());
        let expect = -2.0 * p.ln();
        let got = feature_consistency_loss(&f, &f, &d_s, &d_t).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn output_consistency_oracles() {
        let a = Array3::from_shape_vec((2, 1, 1), vec![1.0f32, 0.0]).unwrap();
        let b = Array3::from_shape_vec((2, 1, 1), vec![0.0f32, 1.0]).unwrap();
        assert_eq!(output_consistency(&a, &a).unwrap(), 0.0);
        assert!((output_consistency(&a, &b).unwrap() - 2.0).abs() < 1e-12);

        // 4x4 field, one pixel flipped between the two classes
        let mut pa = Array3::<f32>::zeros((2, 4, 4));
        pa.index_axis_mut(ndarray::Axis(0), 0).fill(1.0);
        let mut pb = pa.clone();
        pb[[0, 2, 3]] = 0.0;
        pb[[1, 2, 3]] = 1.0;
        assert!((output_consistency(&pa, &pb).unwrap() - 0.125).abs() < 1e-12);

        let c = Array3::<f32>::zeros((2, 2, 2));
        assert!(matches!(
            output_consistency(&a, &c),
            Err(BiglError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn output_consistency_node_matches_scalar_version() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 2]), vec![0.8, 0.6, 0.2, 0.4]).unwrap(),
        );
        let b = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 2]), vec![0.6, 0.6, 0.4, 0.4]).unwrap(),
        );
        let node = output_consistency_node(&mut tape, a, b).unwrap();
        // pixel 0: (0.2^2 + 0.2^2) = 0.08, pixel 1: 0 -> mean 0.04
        assert!((tape.scalar(node) - 0.04).abs() < 1e-12);
    }

    #[test]
    fn output_consistency_gradient_check() {
        use crate::nn::finite_difference_check;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = ArrayD::from_shape_fn(IxDyn(&[1, 2, 3, 3]), |_| rng.gen_range(0.1..0.9));
        let b = ArrayD::from_shape_fn(IxDyn(&[1, 2, 3, 3]), |_| rng.gen_range(0.1..0.9));
        finite_difference_check(
            &[vec![1, 2, 3, 3], vec![1, 2, 3, 3]],
            &[a, b],
            |tape, vars| output_consistency_node(tape, vars[0], vars[1]).unwrap(),
            1e-5,
            1e-3,
        )
        .unwrap();
    }

    #[test]
    fn frozen_contract_is_enforced() {
        let disc = AlignmentDiscriminator::<f64>::zeroed(AlignmentLevel::Feature, AlignmentDomain::Source, 1, 1);
        let mut tape = Tape::<f64>::new();
        let trainable = disc.bind(&mut tape, true);
        assert!(matches!(
            require_frozen(&tape, &trainable, "consistency"),
            Err(BiglError::FrozenContractViolation(_))
        ));
        let frozen = disc.bind(&mut tape, false);
        assert!(require_frozen(&tape, &frozen, "consistency").is_ok());
    }

    #[test]
    fn consistency_gradients_stop_at_frozen_discriminator() {
        let mut rng = crate::rng::stream(5, "routing", 0);
        let disc = AlignmentDiscriminator::<f64>::init(
            AlignmentLevel::Feature,
            AlignmentDomain::Source,
            2,
            2,
            &mut rng,
        );
        let mut tape = Tape::<f64>::new();
        let bound = disc.bind(&mut tape, false);
        require_frozen(&tape, &bound, "test").unwrap();
        let feat = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 2, 4, 4]), 0.3), true);
        let logits = disc.forward(&mut tape, &bound, feat).unwrap();
        let loss = neg_mean_log_prob(&mut tape, logits);
        let grads = tape.backward(loss);
        assert!(grads.get(feat).is_some(), "input must receive gradient");
        for &v in &bound.vars {
            assert!(grads.get(v).is_none(), "discriminator must not receive gradient");
        }
    }

    #[test]
    fn adversarial_gradients_reach_trainable_discriminator() {
        let mut rng = crate::rng::stream(6, "routing", 1);
        let disc = AlignmentDiscriminator::<f64>::init(
            AlignmentLevel::Feature,
            AlignmentDomain::Source,
            2,
            2,
            &mut rng,
        );
        let mut tape = Tape::<f64>::new();
        let bound = disc.bind(&mut tape, true);
        let own = tape.constant(ArrayD::from_elem(IxDyn(&[1, 2, 4, 4]), 0.9));
        let cross = tape.constant(ArrayD::from_elem(IxDyn(&[1, 2, 4, 4]), -0.4));
        let lo = disc.forward(&mut tape, &bound, own).unwrap();
        let lc = disc.forward(&mut tape, &bound, cross).unwrap();
        let loss = adversarial_from_logits(&mut tape, lo, lc);
        let grads = tape.backward(loss);
        let touched = bound.vars.iter().filter(|&&v| grads.get(v).is_some()).count();
        assert!(touched > 0, "discriminator parameters must receive gradients");
        assert!(grads.get(own).is_none());
        assert!(grads.get(cross).is_none());
    }

    fn full_report() -> LossReport {
        LossReport {
            iteration: 0,
            seg_s: Some(1.0),
            seg_syn_s: Some(1.0),
            output_consis: Some(1.0),
            feat_consis: Some(1.0),
            att_consis_pos: Some(0.5),
            att_consis_cha: Some(0.5),
            adv_feat_s: Some(0.5),
            adv_feat_t: Some(0.5),
            adv_att_s: Some(0.5),
            adv_att_t: Some(0.5),
            gen_syn: Some(1.0),
            disc_syn: Some(1.0),
            total: 0.0,
        }
    }

    #[test]
    fn total_loss_stage_oracles() {
        // unit-valued blocks with weights (0.001, 0.1, 0.01):
        // 2 + 0.001 + 0.01*2 + 0.1*4 = 2.421, stage 2 drops the 0.02
        let cfg = TrainConfig::default();
        let r = full_report();
        let t1 = total_loss(&r, &cfg, Stage::One).unwrap();
        assert!((t1 - 2.421).abs() < 1e-9, "{t1}");
        let t2 = total_loss(&r, &cfg, Stage::Two).unwrap();
        assert!((t2 - 2.401).abs() < 1e-9, "{t2}");
    }

    #[test]
    fn total_loss_zero_components() {
        let cfg = TrainConfig::default();
        let mut r = full_report();
        for v in [
            &mut r.seg_s, &mut r.seg_syn_s, &mut r.output_consis, &mut r.feat_consis,
            &mut r.att_consis_pos, &mut r.att_consis_cha, &mut r.adv_feat_s, &mut r.adv_feat_t,
            &mut r.adv_att_s, &mut r.adv_att_t, &mut r.gen_syn, &mut r.disc_syn,
        ] {
            *v = Some(0.0);
        }
        assert_eq!(total_loss(&r, &cfg, Stage::One).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_partial_block_is_incomplete_report() {
        let cfg = TrainConfig::default();
        let mut r = full_report();
        r.seg_syn_s = None;
        let err = total_loss(&r, &cfg, Stage::One).unwrap_err();
        match err {
            BiglError::IncompleteReport(msg) => assert!(msg.contains("seg_syn_s"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        let mut r = full_report();
        r.att_consis_cha = None;
        let err = total_loss(&r, &cfg, Stage::Two).unwrap_err();
        assert!(matches!(err, BiglError::IncompleteReport(_)));
    }

    #[test]
    fn total_loss_synthesis_only_report() {
        // stage-1 iterations report only the synthesis block
        let cfg = TrainConfig::default();
        let r = LossReport {
            gen_syn: Some(1.0),
            disc_syn: Some(1.0),
            ..LossReport::default()
        };
        let t = total_loss(&r, &cfg, Stage::One).unwrap();
        assert!((t - 0.02).abs() < 1e-12);
    }

    #[test]
    fn total_loss_linear_in_each_component() {
        let cfg = TrainConfig::default();
        let base = total_loss(&full_report(), &cfg, Stage::One).unwrap();
        let delta = 0.25;
        let mut r = full_report();
        r.adv_feat_s = Some(0.5 + delta);
        let moved = total_loss(&r, &cfg, Stage::One).unwrap();
        assert!((moved - base - cfg.lambda_gtl * delta).abs() < 1e-12);
        let mut r = full_report();
        r.output_consis = Some(1.0 + delta);
        let moved = total_loss(&r, &cfg, Stage::One).unwrap();
        assert!((moved - base - cfg.lambda_out * delta).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gtl_weight_scales_block() {
        let mut cfg = TrainConfig::default();
        let base = total_loss(&full_report(), &cfg, Stage::Two).unwrap();
        let gtl_part = base - 2.0 - cfg.lambda_out;
        cfg.lambda_gtl *= 2.0;
        let doubled = total_loss(&full_report(), &cfg, Stage::Two).unwrap();
        assert!((doubled - (2.0 + cfg.lambda_out + 2.0 * gtl_part)).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn output_consistency_symmetric_nonnegative(vals in proptest::collection::vec(0.0f32..1.0, 8)) {
            let a = Array3::from_shape_vec((2, 2, 2), vals[..8].to_vec()).unwrap();
            let b = Array3::from_shape_vec((2, 2, 2), vals.iter().rev().cloned().collect()).unwrap();
            let ab = output_consistency(&a, &b).unwrap();
            let ba = output_consistency(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert_eq!(output_consistency(&a, &a).unwrap(), 0.0);
        }
    }
}
