//! Bidirectional cross-modality image translators and their patch
//! discriminators. Generators map [-1, 1] images to [-1, 1] images through a
//! residual encoder-decoder; discriminators emit per-patch logits.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Domain, Slice2D};
use crate::error::{BiglError, Result};
use crate::nn::params::{bound_var, init_conv, zeros, Bound, ParamSet};
use crate::nn::{Scalar, Tape, Var};

/// Probabilities are clamped into [PROB_EPS, 1 - PROB_EPS] before logs.
pub const PROB_EPS: f64 = 1e-7;

const LEAK: f64 = 0.2;
const IN_EPS: f64 = 1e-5;

/// Translation direction of a generator.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SynDirection {
    SToT,
    TToS,
}

impl SynDirection {
    pub fn tag(self) -> &'static str {
        match self {
            SynDirection::SToT => "s_to_t",
            SynDirection::TToS => "t_to_s",
        }
    }

    /// Domains accepted on the input side.
    fn accepts(self, d: Domain) -> bool {
        match self {
            SynDirection::SToT => matches!(d, Domain::Source | Domain::SynSource),
            SynDirection::TToS => matches!(d, Domain::Target | Domain::SynTarget),
        }
    }

    fn output_domain(self) -> Domain {
        match self {
            SynDirection::SToT => Domain::SynTarget,
            SynDirection::TToS => Domain::SynSource,
        }
    }
}

const N_RES_BLOCKS: usize = 4;

/// Residual encoder-decoder translator: stem, two strided downs, residual
/// blocks, two nearest-upsample ups, tanh output head.
pub struct Generator<F: Scalar> {
    pub direction: SynDirection,
    pub params: ParamSet<F>,
    width: usize,
}

impl<F: Scalar> Generator<F> {
    pub fn init(direction: SynDirection, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = width;
        let mut p = ParamSet::new();
        p.add("stem.w", init_conv(rng, w, 1, 3, 3));
        p.add("down1.w", init_conv(rng, 2 * w, w, 3, 3));
        p.add("down2.w", init_conv(rng, 4 * w, 2 * w, 3, 3));
        for i in 0..N_RES_BLOCKS {
            p.add(&format!("res{i}.c1.w"), init_conv(rng, 4 * w, 4 * w, 3, 3));
            p.add(&format!("res{i}.c2.w"), init_conv(rng, 4 * w, 4 * w, 3, 3));
        }
        p.add("up1.w", init_conv(rng, 2 * w, 4 * w, 3, 3));
        p.add("up2.w", init_conv(rng, w, 2 * w, 3, 3));
        p.add("out.w", init_conv(rng, 1, w, 3, 3));
        p.add("out.b", zeros(&[1]));
        Generator { direction, params: p, width }
    }

    /// All-zero weights; forward then returns tanh(0) = 0 everywhere.
    pub fn zeroed(direction: SynDirection, width: usize) -> Self {
        let mut rng = crate::rng::stream(0, "zero", 0);
        let mut g = Self::init(direction, width, &mut rng);
        for (_, v) in g.params.iter_mut() {
            v.fill(F::zero());
        }
        g
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Forward an [N, 1, H, W] image in [-1, 1]; H and W must be multiples
    /// of 4.
    pub fn forward(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Var {
        let v = |name: &str| bound_var(&self.params, bound, name);
        let conv_in_lrelu = |tape: &mut Tape<F>, x: Var, w: Var, stride: usize| {
            let y = tape.conv2d(x, w, None, stride, 1);
            let y = tape.instance_norm(y, IN_EPS);
            tape.leaky_relu(y, LEAK)
        };
        let mut h = conv_in_lrelu(tape, x, v("stem.w"), 1);
        h = conv_in_lrelu(tape, h, v("down1.w"), 2);
        h = conv_in_lrelu(tape, h, v("down2.w"), 2);
        for i in 0..N_RES_BLOCKS {
            let r = conv_in_lrelu(tape, h, v(&format!("res{i}.c1.w")), 1);
            let r = tape.conv2d(r, v(&format!("res{i}.c2.w")), None, 1, 1);
            let r = tape.instance_norm(r, IN_EPS);
            h = tape.add(h, r);
        }
        let u = tape.upsample2x(h);
        h = conv_in_lrelu(tape, u, v("up1.w"), 1);
        let u = tape.upsample2x(h);
        h = conv_in_lrelu(tape, u, v("up2.w"), 1);
        let y = tape.conv2d(h, v("out.w"), Some(v("out.b")), 1, 1);
        tape.tanh(y)
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Strided patch classifier; returns per-patch logits.
pub struct ImageDiscriminator<F: Scalar> {
    pub domain: Domain,
    pub params: ParamSet<F>,
}

impl<F: Scalar> ImageDiscriminator<F> {
    pub fn init(domain: Domain, width: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(matches!(domain, Domain::Source | Domain::Target));
        let d = width;
        let mut p = ParamSet::new();
        p.add("l1.w", init_conv(rng, d, 1, 4, 4));
        p.add("l1.b", zeros(&[d]));
        p.add("l2.w", init_conv(rng, 2 * d, d, 4, 4));
        p.add("l3.w", init_conv(rng, 4 * d, 2 * d, 4, 4));
        p.add("out.w", init_conv(rng, 1, 4 * d, 4, 4));
        p.add("out.b", zeros(&[1]));
        ImageDiscriminator { domain, params: p }
    }

    /// All-zero weights; every patch probability is then sigmoid(0) = 0.5.
    pub fn zeroed(domain: Domain, width: usize) -> Self {
        let mut rng = crate::rng::stream(0, "zero", 0);
        let mut d = Self::init(domain, width, &mut rng);
        for (_, v) in d.params.iter_mut() {
            v.fill(F::zero());
        }
        d
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Forward an [N, 1, H, W] image to patch logits [N, 1, h, w].
    pub fn forward(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Var {
        let v = |name: &str| bound_var(&self.params, bound, name);
        let h = tape.conv2d(x, v("l1.w"), Some(v("l1.b")), 2, 1);
        let h = tape.leaky_relu(h, LEAK);
        let h = tape.conv2d(h, v("l2.w"), None, 2, 1);
        let h = tape.instance_norm(h, IN_EPS);
        let h = tape.leaky_relu(h, LEAK);
        let h = tape.conv2d(h, v("l3.w"), None, 2, 1);
        let h = tape.instance_norm(h, IN_EPS);
        let h = tape.leaky_relu(h, LEAK);
        tape.conv2d(h, v("out.w"), Some(v("out.b")), 1, 1)
    }
}

/// Mean over elements of log(clamped sigmoid(logits)).
pub fn mean_log_prob<F: Scalar>(tape: &mut Tape<F>, logits: Var) -> Var {
    let p = tape.sigmoid(logits);
    let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let l = tape.log(p);
    tape.mean_all(l)
}

/// Mean over elements of log(1 - clamped sigmoid(logits)).
pub fn mean_log_one_minus_prob<F: Scalar>(tape: &mut Tape<F>, logits: Var) -> Var {
    let p = tape.sigmoid(logits);
    let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let neg = tape.scale(p, -1.0);
    let q = tape.add_scalar(neg, 1.0);
    let l = tape.log(q);
    tape.mean_all(l)
}

/// Mean absolute difference.
pub fn l1_mean<F: Scalar>(tape: &mut Tape<F>, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let d = tape.abs(d);
    tape.mean_all(d)
}

/// Generator objective on the tape: E[log(1 - D(x_syn))] plus the weighted
/// reconstruction term |x_ref - x_syn|.
pub fn generator_objective<F: Scalar>(
    tape: &mut Tape<F>,
    disc_logits_on_syn: Var,
    x_ref: Var,
    x_syn: Var,
    lambda_rec: f64,
) -> Var {
    let adv = mean_log_one_minus_prob(tape, disc_logits_on_syn);
    let rec = l1_mean(tape, x_ref, x_syn);
    let rec = tape.scale(rec, lambda_rec);
    tape.add(adv, rec)
}

/// Discriminator objective on the tape: -E[log D(real)] - E[log(1 - D(fake))].
pub fn discriminator_objective<F: Scalar>(
    tape: &mut Tape<F>,
    real_logits: Var,
    fake_logits: Var,
) -> Var {
    let lr = mean_log_prob(tape, real_logits);
    let lf = mean_log_one_minus_prob(tape, fake_logits);
    let s = tape.add(lr, lf);
    tape.scale(s, -1.0)
}

/// Affine [0, 1] -> [-1, 1] view of a slice for the synthesis networks.
pub fn affine_input(slice: &Slice2D) -> ArrayD<f32> {
    let (h, w) = (slice.unit.nrows(), slice.unit.ncols());
    slice
        .unit
        .mapv(|v| 2.0 * v - 1.0)
        .into_shape_with_order(IxDyn(&[1, 1, h, w]))
        .unwrap()
}

/// Run a generator over one slice, producing the synthesized-domain slice
/// with identical spacing, case id and slice index.
pub fn generate<F: Scalar>(g: &Generator<F>, x: &Slice2D) -> Result<Slice2D> {
    if !g.direction.accepts(x.domain) {
        return Err(BiglError::DirectionMismatch(format!(
            "generator {} cannot take a {} slice",
            g.direction.tag(),
            x.domain.as_str()
        )));
    }
    let mut tape = Tape::<F>::new();
    let bound = g.bind(&mut tape, false);
    let input = affine_input(x).mapv(|v| F::from_f64(v as f64));
    let xv = tape.constant(input);
    let y = g.forward(&mut tape, &bound, xv);
    let out = tape.value(y);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(BiglError::NonFiniteActivation { context: format!("generator {}", g.direction.tag()) });
    }
    let (h, w) = (x.unit.nrows(), x.unit.ncols());
    let unit = Array2::from_shape_fn((h, w), |(i, j)| {
        (0.5 * (out[[0, 0, i, j]].to_f64() + 1.0)) as f32
    });
    Slice2D::from_unit(
        unit,
        x.spacing,
        g.direction.output_domain(),
        x.case_id.clone(),
        x.slice_index,
    )
}

/// Generator loss of one synthesized slice against a reference slice from the
/// output domain (evaluation wrapper over [`generator_objective`]).
pub fn generator_loss<F: Scalar>(
    _x_s: &Slice2D,
    x_t: &Slice2D,
    x_syn: &Slice2D,
    d: &ImageDiscriminator<F>,
    lambda_rec: f64,
) -> Result<f64> {
    if x_t.unit.dim() != x_syn.unit.dim() {
        return Err(BiglError::ShapeMismatch {
            context: "generator_loss reference vs synthesized".into(),
            expected: vec![x_t.unit.nrows(), x_t.unit.ncols()],
            got: vec![x_syn.unit.nrows(), x_syn.unit.ncols()],
        });
    }
    let mut tape = Tape::<F>::new();
    let bound = d.bind(&mut tape, false);
    let syn = tape.constant(affine_input(x_syn).mapv(|v| F::from_f64(v as f64)));
    let reference = tape.constant(affine_input(x_t).mapv(|v| F::from_f64(v as f64)));
    let logits = d.forward(&mut tape, &bound, syn);
    check_logits(&tape, logits, "image discriminator")?;
    let loss = generator_objective(&mut tape, logits, reference, syn, lambda_rec);
    Ok(tape.scalar(loss).to_f64())
}

/// Discriminator loss on one real and one synthesized slice (evaluation
/// wrapper over [`discriminator_objective`]).
pub fn discriminator_loss<F: Scalar>(
    x_real: &Slice2D,
    x_syn: &Slice2D,
    d: &ImageDiscriminator<F>,
) -> Result<f64> {
    let mut tape = Tape::<F>::new();
    let bound = d.bind(&mut tape, false);
    let real = tape.constant(affine_input(x_real).mapv(|v| F::from_f64(v as f64)));
    let syn = tape.constant(affine_input(x_syn).mapv(|v| F::from_f64(v as f64)));
    let rl = d.forward(&mut tape, &bound, real);
    let fl = d.forward(&mut tape, &bound, syn);
    check_logits(&tape, rl, "image discriminator")?;
    check_logits(&tape, fl, "image discriminator")?;
    let loss = discriminator_objective(&mut tape, rl, fl);
    Ok(tape.scalar(loss).to_f64())
}

fn check_logits<F: Scalar>(tape: &Tape<F>, v: Var, context: &str) -> Result<()> {
    if tape.value(v).iter().any(|e| !e.is_finite()) {
        return Err(BiglError::NonFiniteActivation { context: context.into() });
    }
    Ok(())
}
