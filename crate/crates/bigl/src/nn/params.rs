//! Named parameter collections with deterministic ordering, tape binding and
//! content digests.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

use super::{Scalar, Tape, Var};

/// Ordered, named set of parameter tensors. Insertion order is the canonical
/// order used for binding, optimizer state and serialization.
pub struct ParamSet<F: Scalar> {
    entries: Vec<(String, ArrayD<F>)>,
    index: BTreeMap<String, usize>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<F>) {
        assert!(
            self.index.insert(name.to_string(), self.entries.len()).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements across all tensors.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<F>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    /// Bind every parameter onto a tape in canonical order.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, v)| tape.leaf(v.clone(), trainable))
            .collect();
        Bound { vars }
    }

    /// Collect gradients for a binding, in canonical order. Parameters that
    /// received no gradient yield `None`.
    pub fn collect_grads(
        &self,
        bound: &Bound,
        grads: &super::Gradients<F>,
    ) -> Vec<Option<ArrayD<F>>> {
        assert_eq!(bound.vars.len(), self.entries.len());
        bound.vars.iter().map(|v| grads.get(*v).cloned()).collect()
    }

    /// SHA-256 digest over names, shapes and values (as f64 little-endian
    /// bytes). Stable across runs; used to verify freeze contracts.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((value.ndim() as u32).to_le_bytes());
            for &d in value.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for &e in value.iter() {
                h.update(e.to_f64().to_le_bytes());
            }
        }
        let d = h.finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replace values from another set with identical names and shapes.
    pub fn load_from(&mut self, source: &ParamSet<F>) -> crate::error::Result<()> {
        if self.entries.len() != source.entries.len() {
            return Err(crate::error::BiglError::IngestError(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                source.entries.len()
            )));
        }
        for (name, value) in &mut self.entries {
            let Some(&si) = source.index.get(name.as_str()) else {
                return Err(crate::error::BiglError::IngestError(format!(
                    "missing parameter {name}"
                )));
            };
            let sv = &source.entries[si].1;
            if sv.shape() != value.shape() {
                return Err(crate::error::BiglError::ShapeMismatch {
                    context: format!("parameter {name}"),
                    expected: value.shape().to_vec(),
                    got: sv.shape().to_vec(),
                });
            }
            value.clone_from(sv);
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamSet`], in canonical order.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    /// Handle of the parameter at canonical position `i`.
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Look up the bound handle of a named parameter.
pub fn bound_var<F: Scalar>(set: &ParamSet<F>, bound: &Bound, name: &str) -> Var {
    let i = set
        .iter()
        .position(|(n, _)| n == name)
        .unwrap_or_else(|| panic!("unknown parameter {name}"));
    bound.vars[i]
}

/// Kaiming-normal convolution weight `[co, ci, kh, kw]`, gain for leaky-ReLU.
/// Draws happen in f64 so the sequence is dtype-independent.
pub fn init_conv<F: Scalar>(
    rng: &mut ChaCha8Rng,
    co: usize,
    ci: usize,
    kh: usize,
    kw: usize,
) -> ArrayD<F> {
    let fan_in = (ci * kh * kw) as f64;
    let std = (2.0 / fan_in).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(&[co, ci, kh, kw]), |_| F::from_f64(dist.sample(rng)))
}

/// Small-uniform init for heads that should start near zero output.
pub fn init_conv_small<F: Scalar>(
    rng: &mut ChaCha8Rng,
    co: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    scale: f64,
) -> ArrayD<F> {
    ArrayD::from_shape_fn(IxDyn(&[co, ci, kh, kw]), |_| {
        F::from_f64(rng.gen_range(-scale..scale))
    })
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

/// 0-d parameter with the given initial value.
pub fn scalar_param<F: Scalar>(value: f64) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(&[]), F::from_f64(value))
}
