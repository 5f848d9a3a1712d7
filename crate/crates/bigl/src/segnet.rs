//! Shared-weight segmentation U-Net with a dual-attention bottleneck.
//!
//! One parameter set serves every input stream (source, target, and both
//! synthesized directions); the bottleneck exposes position/channel attention
//! maps and post-attention features for the alignment losses.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::domain::{LabelMask, Slice2D};
use crate::error::{BiglError, Result};
use crate::nn::params::{bound_var, init_conv, scalar_param, zeros, Bound, ParamSet};
use crate::nn::{Scalar, Tape, Var};

const LEAK: f64 = 0.01;
const IN_EPS: f64 = 1e-5;
const CE_EPS: f64 = 1e-7;

/// Position-attention branch: rows of `map` are softmax affinities between
/// the N = H*W spatial positions of the 1x1-projected features; the output is
/// `alpha * (recombined features) + x`.
pub fn position_attention<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    q_w: Var,
    k_w: Var,
    alpha: Var,
) -> (Var, Var) {
    let shape = tape.value(x).shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let np = h * w;
    let q = tape.conv2d(x, q_w, None, 1, 0);
    let k = tape.conv2d(x, k_w, None, 1, 0);
    let cq = tape.value(q).shape()[1];
    let q3 = tape.reshape(q, &[n, cq, np]);
    let k3 = tape.reshape(k, &[n, cq, np]);
    let scores = tape.bmm(q3, k3, true, false);
    let map = tape.softmax(scores, 2);
    let x3 = tape.reshape(x, &[n, c, np]);
    let attended = tape.bmm(x3, map, false, true);
    let attended = tape.reshape(attended, &[n, c, h, w]);
    let gated = tape.scale_var(alpha, attended);
    let out = tape.add(gated, x);
    (out, map)
}

/// Channel-attention branch: rows of `map` are softmax affinities between
/// channels (Gram matrix of the flattened features).
pub fn channel_attention<F: Scalar>(tape: &mut Tape<F>, x: Var, alpha: Var) -> (Var, Var) {
    let shape = tape.value(x).shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let np = h * w;
    let x3 = tape.reshape(x, &[n, c, np]);
    let gram = tape.bmm(x3, x3, false, true);
    let map = tape.softmax(gram, 2);
    let attended = tape.bmm(map, x3, false, false);
    let attended = tape.reshape(attended, &[n, c, h, w]);
    let gated = tape.scale_var(alpha, attended);
    let out = tape.add(gated, x);
    (out, map)
}

/// Attention maps and gate values extracted at the bottleneck of one forward
/// pass (single sample).
#[derive(Clone, Debug)]
pub struct AttentionBundle {
    pub position_map: Array2<f32>,
    pub channel_map: Array2<f32>,
    pub alpha_pos: f32,
    pub alpha_cha: f32,
}

/// Post-attention bottleneck features of one sample.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub values: Array3<f32>,
}

/// Tape handles produced by one batched forward pass.
pub struct SegForward {
    pub logits: Var,
    /// Post-attention bottleneck features [N, C, H', W'].
    pub feat: Var,
    /// Position map [N, N', N'] and channel map [N, C, C]; absent when the
    /// attention block is skipped.
    pub attention: Option<(Var, Var)>,
}

pub struct SegNet<F: Scalar> {
    pub params: ParamSet<F>,
    pub base_width: usize,
    pub num_classes: usize,
    pub image_size: (usize, usize),
}

impl<F: Scalar> SegNet<F> {
    pub fn init(
        num_classes: usize,
        base_width: usize,
        image_size: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = base_width;
        let c_bot = 8 * w;
        assert!(c_bot % 8 == 0);
        let mut p = ParamSet::new();
        p.add("stem.c1.w", init_conv(rng, w, 1, 3, 3));
        p.add("stem.c2.w", init_conv(rng, w, w, 3, 3));
        let widths = [(w, 2 * w), (2 * w, 4 * w), (4 * w, 8 * w), (8 * w, 8 * w)];
        for (i, (ci, co)) in widths.iter().enumerate() {
            p.add(&format!("enc{}.c1.w", i + 1), init_conv(rng, *co, *ci, 3, 3));
            p.add(&format!("enc{}.c2.w", i + 1), init_conv(rng, *co, *co, 3, 3));
        }
        p.add("att.q.w", init_conv(rng, c_bot / 8, c_bot, 1, 1));
        p.add("att.k.w", init_conv(rng, c_bot / 8, c_bot, 1, 1));
        p.add("att.alpha_pos", scalar_param(0.0));
        p.add("att.alpha_cha", scalar_param(0.0));
        let dec = [
            (8 * w + 8 * w, 4 * w),
            (4 * w + 4 * w, 2 * w),
            (2 * w + 2 * w, w),
            (w + w, w),
        ];
        for (i, (ci, co)) in dec.iter().enumerate() {
            p.add(&format!("dec{}.c1.w", 4 - i), init_conv(rng, *co, *ci, 3, 3));
            p.add(&format!("dec{}.c2.w", 4 - i), init_conv(rng, *co, *co, 3, 3));
        }
        p.add("head.w", init_conv(rng, num_classes, w, 1, 1));
        p.add("head.b", zeros(&[num_classes]));
        SegNet { params: p, base_width, num_classes, image_size }
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Bottleneck channel count.
    pub fn bottleneck_channels(&self) -> usize {
        8 * self.base_width
    }

    /// Bottleneck spatial side lengths for the configured image size.
    pub fn bottleneck_size(&self) -> (usize, usize) {
        (self.image_size.0 / 16, self.image_size.1 / 16)
    }

    /// Batched forward over [N, 1, H, W]; `use_attention = false` routes the
    /// encoder output straight to the decoder (the attention-free network).
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        use_attention: bool,
    ) -> SegForward {
        let v = |name: &str| bound_var(&self.params, bound, name);
        let block = |tape: &mut Tape<F>, x: Var, w1: Var, w2: Var, stride: usize| {
            let y = tape.conv2d(x, w1, None, stride, 1);
            let y = tape.instance_norm(y, IN_EPS);
            let y = tape.leaky_relu(y, LEAK);
            let y = tape.conv2d(y, w2, None, 1, 1);
            let y = tape.instance_norm(y, IN_EPS);
            tape.leaky_relu(y, LEAK)
        };
        let s0 = block(tape, x, v("stem.c1.w"), v("stem.c2.w"), 1);
        let s1 = block(tape, s0, v("enc1.c1.w"), v("enc1.c2.w"), 2);
        let s2 = block(tape, s1, v("enc2.c1.w"), v("enc2.c2.w"), 2);
        let s3 = block(tape, s2, v("enc3.c1.w"), v("enc3.c2.w"), 2);
        let s4 = block(tape, s3, v("enc4.c1.w"), v("enc4.c2.w"), 2);

        let (feat, attention) = if use_attention {
            let (pos_out, pos_map) =
                position_attention(tape, s4, v("att.q.w"), v("att.k.w"), v("att.alpha_pos"));
            let (both, cha_map) = {
                // single shared residual: x + alpha_p*(A_p x) + alpha_c*(A_c x)
                let shape = tape.value(s4).shape().to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let np = h * w;
                let x3 = tape.reshape(s4, &[n, c, np]);
                let gram = tape.bmm(x3, x3, false, true);
                let map = tape.softmax(gram, 2);
                let attended = tape.bmm(map, x3, false, false);
                let attended = tape.reshape(attended, &[n, c, h, w]);
                let gated = tape.scale_var(v("att.alpha_cha"), attended);
                (tape.add(pos_out, gated), map)
            };
            (both, Some((pos_map, cha_map)))
        } else {
            (s4, None)
        };

        let dec = |tape: &mut Tape<F>, x: Var, skip: Var, w1: Var, w2: Var| {
            let u = tape.upsample2x(x);
            let cat = tape.concat(&[u, skip], 1);
            block(tape, cat, w1, w2, 1)
        };
        let d4 = dec(tape, feat, s3, v("dec4.c1.w"), v("dec4.c2.w"));
        let d3 = dec(tape, d4, s2, v("dec3.c1.w"), v("dec3.c2.w"));
        let d2 = dec(tape, d3, s1, v("dec2.c1.w"), v("dec2.c2.w"));
        let d1 = dec(tape, d2, s0, v("dec1.c1.w"), v("dec1.c2.w"));
        let logits = tape.conv2d(d1, v("head.w"), Some(v("head.b")), 1, 0);
        SegForward { logits, feat, attention }
    }
}

/// Single-slice evaluation forward: logits, attention bundle and bottleneck
/// features as plain arrays.
pub fn forward_slice<F: Scalar>(
    net: &SegNet<F>,
    x: &Slice2D,
) -> Result<(Array3<f32>, AttentionBundle, FeatureMap)> {
    let (h, w) = (x.pixels.nrows(), x.pixels.ncols());
    if (h, w) != net.image_size {
        return Err(BiglError::ShapeMismatch {
            context: "segmentation input".into(),
            expected: vec![net.image_size.0, net.image_size.1],
            got: vec![h, w],
        });
    }
    let mut tape = Tape::<F>::new();
    let bound = net.bind(&mut tape, false);
    let input = x
        .pixels
        .mapv(|v| F::from_f64(v as f64))
        .into_shape_with_order(IxDyn(&[1, 1, h, w]))
        .unwrap();
    let xv = tape.constant(input);
    let fwd = net.forward(&mut tape, &bound, xv, true);
    for var in [fwd.logits, fwd.feat] {
        if tape.value(var).iter().any(|e| !e.is_finite()) {
            return Err(BiglError::NonFiniteActivation { context: "segmentation forward".into() });
        }
    }
    let logits_v = tape.value(fwd.logits);
    let (c, hh, ww) = (logits_v.shape()[1], logits_v.shape()[2], logits_v.shape()[3]);
    let logits = Array3::from_shape_fn((c, hh, ww), |(k, i, j)| logits_v[[0, k, i, j]].to_f64() as f32);
    let (pos, cha) = fwd.attention.unwrap();
    let pos_v = tape.value(pos);
    let cha_v = tape.value(cha);
    let np = pos_v.shape()[1];
    let cb = cha_v.shape()[1];
    let bundle = AttentionBundle {
        position_map: Array2::from_shape_fn((np, np), |(i, j)| pos_v[[0, i, j]].to_f64() as f32),
        channel_map: Array2::from_shape_fn((cb, cb), |(i, j)| cha_v[[0, i, j]].to_f64() as f32),
        alpha_pos: net.params.get("att.alpha_pos").first().copied().unwrap().to_f64() as f32,
        alpha_cha: net.params.get("att.alpha_cha").first().copied().unwrap().to_f64() as f32,
    };
    let feat_v = tape.value(fwd.feat);
    let (fc, fh, fw) = (feat_v.shape()[1], feat_v.shape()[2], feat_v.shape()[3]);
    let feat = FeatureMap {
        values: Array3::from_shape_fn((fc, fh, fw), |(k, i, j)| feat_v[[0, k, i, j]].to_f64() as f32),
    };
    Ok((logits, bundle, feat))
}

/// One-hot encoding [N, c, H, W] of a label batch [N, H, W].
pub fn one_hot<F: Scalar>(labels: &Array3<u8>, num_classes: usize) -> ArrayD<F> {
    let (n, h, w) = labels.dim();
    let mut out = ArrayD::<F>::zeros(IxDyn(&[n, num_classes, h, w]));
    for i in 0..n {
        for r in 0..h {
            for c in 0..w {
                let cls = labels[[i, r, c]] as usize;
                assert!(cls < num_classes, "label {cls} out of range");
                out[[i, cls, r, c]] = F::one();
            }
        }
    }
    out
}

/// Cross-entropy plus normalized generalized-dice loss over a batch.
///
/// Dice weights are 1/num(class) over classes present in the ground truth,
/// normalized to sum to one; absent classes contribute through cross-entropy
/// only. Returns a scalar tape node.
pub fn segmentation_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    labels: &Array3<u8>,
) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ln, lh, lw) = labels.dim();
    if (n, h, w) != (ln, lh, lw) {
        return Err(BiglError::ShapeMismatch {
            context: "segmentation loss logits vs labels".into(),
            expected: vec![n, h, w],
            got: vec![ln, lh, lw],
        });
    }
    let onehot = one_hot::<F>(labels, c);
    let p = tape.softmax(logits, 1);

    // cross-entropy over all pixels
    let pc = tape.clamp(p, CE_EPS, 1.0 - CE_EPS);
    let lp = tape.log(pc);
    let picked = tape.mul_const(lp, onehot.clone());
    let ce_sum = tape.sum_all(picked);
    let ce = tape.scale(ce_sum, -1.0 / ((n * h * w) as f64));

    // per-class counts and normalized inverse-frequency weights
    let mut counts = vec![0f64; c];
    for &l in labels.iter() {
        counts[l as usize] += 1.0;
    }
    let mut weights = vec![0f64; c];
    let wsum: f64 = counts.iter().filter(|&&n| n > 0.0).map(|&n| 1.0 / n).sum();
    for i in 0..c {
        if counts[i] > 0.0 {
            weights[i] = (1.0 / counts[i]) / wsum;
        }
    }
    // denominators of absent classes are padded to avoid 0/0; their weight is 0
    let count_pad: Vec<F> = counts
        .iter()
        .map(|&n| F::from_f64(if n > 0.0 { n } else { 1.0 }))
        .collect();

    let py = tape.mul_const(p, onehot);
    let numer = tape.sum_axes(py, &[0, 2, 3]);
    let numer = tape.scale(numer, 2.0);
    let psum = tape.sum_axes(p, &[0, 2, 3]);
    let count_var = tape.constant(ArrayD::from_shape_vec(IxDyn(&[c]), count_pad).unwrap());
    let denom = tape.add(psum, count_var);
    let dice = tape.div(numer, denom);
    let wvec = ArrayD::from_shape_vec(IxDyn(&[c]), weights.iter().map(|&w| F::from_f64(w)).collect())
        .unwrap();
    let weighted = tape.mul_const(dice, wvec);
    let dsum = tape.sum_all(weighted);
    let neg = tape.scale(dsum, -1.0);
    let gdl = tape.add_scalar(neg, 1.0);

    Ok(tape.add(ce, gdl))
}

/// Scalar segmentation loss of single-slice logits against a mask.
pub fn segmentation_loss_value(logits: &Array3<f64>, y: &LabelMask) -> Result<f64> {
    let (c, h, w) = logits.dim();
    let mut tape = Tape::<f64>::new();
    let arr = ArrayD::from_shape_fn(IxDyn(&[1, c, h, w]), |ix| logits[[ix[1], ix[2], ix[3]]]);
    let lv = tape.constant(arr);
    let labels = Array3::from_shape_fn((1, y.classes.nrows(), y.classes.ncols()), |(_, i, j)| {
        y.classes[[i, j]]
    });
    let loss = segmentation_loss(&mut tape, lv, &labels)?;
    Ok(tape.scalar(loss))
}

/// Supervised losses of a source slice and its synthesized counterpart
/// against the shared ground truth.
pub fn seg_losses_pair<F: Scalar>(
    net: &SegNet<F>,
    x_s: &Slice2D,
    x_syn_t: &Slice2D,
    y_s: &LabelMask,
) -> Result<(f64, f64)> {
    let (h, w) = (x_s.pixels.nrows(), x_s.pixels.ncols());
    let mut tape = Tape::<F>::new();
    let bound = net.bind(&mut tape, false);
    let labels =
        Array3::from_shape_fn((1, h, w), |(_, i, j)| y_s.classes[[i, j]]);
    let mut loss_of = |slice: &Slice2D| -> Result<f64> {
        let input = slice
            .pixels
            .mapv(|v| F::from_f64(v as f64))
            .into_shape_with_order(IxDyn(&[1, 1, h, w]))
            .unwrap();
        let xv = tape.constant(input);
        let fwd = net.forward(&mut tape, &bound, xv, true);
        let loss = segmentation_loss(&mut tape, fwd.logits, &labels)?;
        Ok(tape.scalar(loss).to_f64())
    };
    let l_s = loss_of(x_s)?;
    let l_syn = loss_of(x_syn_t)?;
    Ok((l_s, l_syn))
}
