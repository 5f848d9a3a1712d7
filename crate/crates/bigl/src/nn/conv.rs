//! 2-D convolution kernels: im2col lowering to a single GEMM per sample.
//!
//! The backward pass recomputes the column buffer instead of caching it from
//! the forward pass, trading a little compute for a much smaller peak
//! footprint on long tapes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView3, ArrayViewMut3, Axis, Ix2};

use super::Scalar;

/// Output spatial size for one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Lower one sample `[C, H, W]` into columns `[C*kh*kw, Ho*Wo]`.
fn im2col<F: Scalar>(
    x: &ArrayView3<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xs = x.as_slice().expect("im2col input must be standard layout");
    let mut cols = Array2::<F>::zeros((c * kh * kw, ho * wo));
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_base = ((ci * kh + ki) * kw + kj) * (ho * wo);
                for oi in 0..ho {
                    let ii = oi * stride + ki;
                    if ii < pad || ii >= h + pad {
                        continue;
                    }
                    let x_base = (ci * h + (ii - pad)) * w;
                    let o_base = row_base + oi * wo;
                    for oj in 0..wo {
                        let jj = oj * stride + kj;
                        if jj < pad || jj >= w + pad {
                            continue;
                        }
                        cs[o_base + oj] = xs[x_base + jj - pad];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter columns `[C*kh*kw, Ho*Wo]` back onto one sample `[C, H, W]`,
/// accumulating overlaps. Adjoint of `im2col`.
fn col2im_acc<F: Scalar>(
    cols: &Array2<F>,
    dx: &mut ArrayViewMut3<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (c, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2]);
    let cs = cols.as_slice().unwrap();
    let ds = dx.as_slice_mut().expect("col2im output must be standard layout");
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_base = ((ci * kh + ki) * kw + kj) * (ho * wo);
                for oi in 0..ho {
                    let ii = oi * stride + ki;
                    if ii < pad || ii >= h + pad {
                        continue;
                    }
                    let x_base = (ci * h + (ii - pad)) * w;
                    let o_base = row_base + oi * wo;
                    for oj in 0..wo {
                        let jj = oj * stride + kj;
                        if jj < pad || jj >= w + pad {
                            continue;
                        }
                        ds[x_base + jj - pad] += cs[o_base + oj];
                    }
                }
            }
        }
    }
}

/// Forward convolution: `x [N, Ci, H, W]`, `w [Co, Ci, kh, kw]`, zero padding.
pub fn forward<F: Scalar>(
    x: &Array4<F>,
    w: &Array4<F>,
    b: Option<&Array1<F>>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, ci, h, wdt) = x.dim();
    let (co, ciw, kh, kw) = w.dim();
    assert_eq!(ci, ciw, "conv channel mismatch");
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(wdt, kw, stride, pad);
    let w2 = w
        .view()
        .into_shape_with_order((co, ci * kh * kw))
        .expect("conv weight must be standard layout");
    let mut out = Array4::<F>::zeros((n, co, ho, wo));
    for i in 0..n {
        let cols = im2col(&x.index_axis(Axis(0), i), kh, kw, stride, pad, ho, wo);
        let mut o2 = out
            .index_axis_mut(Axis(0), i)
            .into_shape_with_order((co, ho * wo))
            .unwrap();
        general_mat_mul(F::one(), &w2, &cols, F::zero(), &mut o2);
    }
    if let Some(bias) = b {
        for i in 0..n {
            for c in 0..co {
                let bc = bias[c];
                out.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), c)
                    .mapv_inplace(|v| v + bc);
            }
        }
    }
    out
}

/// Gradients of the forward convolution. Any of the three outputs can be
/// skipped when the corresponding input does not require a gradient.
#[allow(clippy::type_complexity)]
pub fn backward<F: Scalar>(
    x: &Array4<F>,
    w: &Array4<F>,
    dout: &Array4<F>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Array4<F>>, Option<Array4<F>>, Option<Array1<F>>) {
    let (n, ci, h, wdt) = x.dim();
    let (co, _, kh, kw) = w.dim();
    let (_, _, ho, wo) = dout.dim();
    let w2 = w
        .view()
        .into_shape_with_order((co, ci * kh * kw))
        .unwrap();
    let mut dx = need_dx.then(|| Array4::<F>::zeros((n, ci, h, wdt)));
    let mut dw2 = need_dw.then(|| Array2::<F>::zeros((co, ci * kh * kw)));
    let mut db = need_db.then(|| Array1::<F>::zeros(co));

    for i in 0..n {
        let dout2 = dout
            .index_axis(Axis(0), i)
            .into_shape_with_order((co, ho * wo))
            .unwrap();
        if let Some(dw2) = dw2.as_mut() {
            let cols = im2col(&x.index_axis(Axis(0), i), kh, kw, stride, pad, ho, wo);
            general_mat_mul(F::one(), &dout2.view().into_dimensionality::<Ix2>().unwrap(), &cols.t(), F::one(), dw2);
        }
        if let Some(dx) = dx.as_mut() {
            let mut dcols = Array2::<F>::zeros((ci * kh * kw, ho * wo));
            general_mat_mul(F::one(), &w2.t(), &dout2, F::zero(), &mut dcols);
            col2im_acc(&dcols, &mut dx.index_axis_mut(Axis(0), i), kh, kw, stride, pad, ho, wo);
        }
        if let Some(db) = db.as_mut() {
            for c in 0..co {
                db[c] += dout.index_axis(Axis(0), i).index_axis(Axis(0), c).sum();
            }
        }
    }
    let dw = dw2.map(|d| d.into_shape_with_order((co, ci, kh, kw)).unwrap());
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use proptest::prelude::*;

    /// Direct O(N*Co*Ci*Ho*Wo*kh*kw) reference convolution.
    fn naive_conv(
        x: &Array4<f64>,
        w: &Array4<f64>,
        b: Option<&Array1<f64>>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, ci, h, wdt) = x.dim();
        let (co, _, kh, kw) = w.dim();
        let ho = conv_out_len(h, kh, stride, pad);
        let wo = conv_out_len(wdt, kw, stride, pad);
        let mut out = Array4::<f64>::zeros((n, co, ho, wo));
        for i in 0..n {
            for oc in 0..co {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = b.map_or(0.0, |b| b[oc]);
                        for icx in 0..ci {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ii = (oi * stride + ki) as isize - pad as isize;
                                    let jj = (oj * stride + kj) as isize - pad as isize;
                                    if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < wdt {
                                        acc += x[[i, icx, ii as usize, jj as usize]]
                                            * w[[oc, icx, ki, kj]];
                                    }
                                }
                            }
                        }
                        out[[i, oc, oi, oj]] = acc;
                    }
                }
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn gemm_conv_matches_naive(
            n in 1usize..3, ci in 1usize..4, co in 1usize..4,
            h in 3usize..8, w in 3usize..8,
            k in 1usize..4, stride in 1usize..3, pad in 0usize..2,
            seed in 0u64..1000,
        ) {
            prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Array4::from_shape_fn((n, ci, h, w), |_| rng.gen_range(-1.0..1.0));
            let wt = Array4::from_shape_fn((co, ci, k, k), |_| rng.gen_range(-1.0..1.0));
            let b = Array1::from_shape_fn(co, |_| rng.gen_range(-1.0..1.0));
            let fast = forward(&x, &wt, Some(&b), stride, pad);
            let slow = naive_conv(&x, &wt, Some(&b), stride, pad);
            for (a, b) in fast.iter().zip(slow.iter()) {
                prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
}
