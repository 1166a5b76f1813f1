//! Named parameter store. Parameters live in a flat name -> tensor map
//! (the same keys the checkpoint manifest uses) and get bound onto a
//! tape as named leaves at the start of each forward pass.

use std::collections::BTreeMap;

use rand::Rng;

use crate::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Default)]
pub struct ParamMap<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamMap<T> {
    pub fn new() -> Self {
        ParamMap {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), t).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    /// Replace an existing parameter (optimizer step).
    pub fn set(&mut self, name: &str, t: Tensor<T>) {
        let slot = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        assert_eq!(slot.shape(), t.shape(), "shape change for {name}");
        *slot = t;
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn num_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Bind every parameter onto the tape as a named leaf.
    pub fn bind(&self, tape: &mut Tape<T>) {
        for (name, t) in &self.map {
            tape.named_leaf(name.clone(), t.clone());
        }
    }

    pub fn merge(&mut self, other: ParamMap<T>) {
        for (name, t) in other.map {
            self.insert(name, t);
        }
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor<T>> {
        self.map
    }

    pub fn from_inner(map: BTreeMap<String, Tensor<T>>) -> Self {
        ParamMap { map }
    }

    pub fn cast<U: Scalar>(&self) -> ParamMap<U> {
        ParamMap {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Bound-parameter lookup; absence is a wiring bug, not user error.
    pub fn p(&self, name: &str) -> VarId {
        self.named_id(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound to tape"))
    }
}

/// Centered uniform init with scale 1/sqrt(fan_in).
pub fn uniform_fan_in<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let s = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape.to_vec(), -s, s, rng)
}

/// Conv weight [cout, cin, kh, kw] plus zero bias.
pub fn init_conv<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParamMap<T>,
    prefix: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut R,
) {
    params.insert(
        format!("{prefix}/w"),
        uniform_fan_in(&[cout, cin, k, k], cin * k * k, rng),
    );
    params.insert(format!("{prefix}/b"), Tensor::zeros(vec![cout]));
}

/// Linear weight [din, dout] plus zero bias.
pub fn init_linear<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParamMap<T>,
    prefix: &str,
    din: usize,
    dout: usize,
    rng: &mut R,
) {
    params.insert(
        format!("{prefix}/w"),
        uniform_fan_in(&[din, dout], din, rng),
    );
    params.insert(format!("{prefix}/b"), Tensor::zeros(vec![dout]));
}

/// Layer-norm affine: gamma = 1, beta = 0.
pub fn init_ln_affine<T: Scalar>(params: &mut ParamMap<T>, prefix: &str, width: usize) {
    params.insert(format!("{prefix}/gamma"), Tensor::ones(vec![width]));
    params.insert(format!("{prefix}/beta"), Tensor::zeros(vec![width]));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bind_and_lookup() {
        let mut p = ParamMap::<f32>::new();
        p.insert("a/w", Tensor::ones(vec![2]));
        let mut tape = Tape::new();
        p.bind(&mut tape);
        assert_eq!(tape.value(tape.p("a/w")).data(), &[1.0, 1.0]);
    }

    #[test]
    fn fan_in_scale_bounds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let w: Tensor<f32> = uniform_fan_in(&[8, 4, 3, 3], 36, &mut rng);
        let bound = 1.0 / 6.0 + 1e-6;
        assert!(w.data().iter().all(|&v| v.abs() < bound));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_insert_panics() {
        let mut p = ParamMap::<f32>::new();
        p.insert("x", Tensor::ones(vec![1]));
        p.insert("x", Tensor::ones(vec![1]));
    }
}
