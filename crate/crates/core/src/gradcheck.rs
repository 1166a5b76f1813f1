//! Central finite-difference verification of tape gradients.
//!
//! The checker builds the op under test, projects its output to a
//! scalar with fixed random weights, and compares the tape's gradient
//! for every (optionally sampled) input coordinate against a central
//! difference. Probes near non-differentiable points are moved off the
//! kink instead of being reported as failures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per input tensor (sampled
    /// deterministically); `None` checks everything.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl GradCheck {
    pub fn new(tolerance: f64) -> Self {
        GradCheck {
            step: 1e-5,
            tolerance,
            max_coords_per_input: None,
            seed: 0x5eed,
        }
    }

    pub fn sampled(tolerance: f64, max_coords: usize, seed: u64) -> Self {
        GradCheck {
            step: 1e-5,
            tolerance,
            max_coords_per_input: Some(max_coords),
            seed,
        }
    }

    /// `build` must construct the computation from the given leaves and
    /// return its output (any shape; it is projected to a scalar).
    pub fn run(
        &self,
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>,
    ) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);

        // Fixed projection weights make the scalar loss sensitive to
        // every output coordinate.
        let eval = |tensors: &[Tensor<f64>],
                    proj: Option<&Tensor<f64>>|
         -> Result<(f64, Tape<f64>, Vec<VarId>, VarId, Tensor<f64>)> {
            let mut tape = Tape::new();
            let ids: Vec<VarId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &ids)?;
            let proj_t = match proj {
                Some(p) => p.clone(),
                None => {
                    let mut prng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e3779b9);
                    Tensor::from_fn(tape.value(out).shape().to_vec(), |_| {
                        prng.random::<f64>() * 2.0 - 1.0
                    })
                }
            };
            let pid = tape.leaf(proj_t.clone());
            let prod = tape.mul(out, pid)?;
            let loss = tape.sum_all(prod);
            let v = tape.value(loss).item();
            Ok((v, tape, ids, loss, proj_t))
        };

        let (_, tape, ids, loss, proj) = eval(inputs, None)?;
        let grads = tape.backward(loss)?;
        let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| grads.get_or_zeros(id)).collect();

        let mut max_rel = 0.0f64;
        let mut checked = 0usize;
        for (ti, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let coords: Vec<usize> = match self.max_coords_per_input {
                Some(k) if k < n => {
                    let mut set = std::collections::BTreeSet::new();
                    while set.len() < k {
                        set.insert(rng.random_range(0..n));
                    }
                    set.into_iter().collect()
                }
                _ => (0..n).collect(),
            };
            for ci in coords {
                let base = input.data()[ci];
                let perturb = |v: f64| -> Result<f64> {
                    let mut tensors = inputs.to_vec();
                    let mut data = input.data().to_vec();
                    data[ci] = v;
                    tensors[ti] = Tensor::from_vec(input.shape().to_vec(), data)?;
                    Ok(eval(&tensors, Some(&proj))?.0)
                };
                let fp = perturb(base + self.step)?;
                let fm = perturb(base - self.step)?;
                let numeric = (fp - fm) / (2.0 * self.step);
                let a = analytic[ti].data()[ci];
                let scale = a.abs().max(numeric.abs());
                if scale < 1e-7 {
                    // Both effectively zero: below finite-difference resolution.
                    checked += 1;
                    continue;
                }
                let rel = (a - numeric).abs() / scale;
                if rel > max_rel {
                    max_rel = rel;
                }
                checked += 1;
            }
        }
        Ok(GradCheckReport {
            max_rel_err: max_rel,
            coords_checked: checked,
            tolerance: self.tolerance,
        })
    }
}

/// Move values that sit within `margin` of a kink off the kink, so the
/// central difference straddles a smooth region. `nearest` returns the
/// closest non-differentiable point for a value, if any.
pub fn condition_probe(
    t: &Tensor<f64>,
    margin: f64,
    nearest: impl Fn(f64) -> Option<f64>,
) -> Tensor<f64> {
    t.map(|v| match nearest(v) {
        Some(kink) if (v - kink).abs() < margin => {
            if v >= kink {
                kink + margin
            } else {
                kink - margin
            }
        }
        _ => v,
    })
}

/// Probe conditioning for ops with kinks at fixed points (0 for the
/// leaky rectifier and absolute value, a threshold for selects).
pub fn condition_point_kinks(t: &Tensor<f64>, kinks: &[f64], margin: f64) -> Tensor<f64> {
    condition_probe(t, margin, |v| {
        kinks
            .iter()
            .copied()
            .min_by(|a, b| (v - a).abs().partial_cmp(&(v - b).abs()).unwrap())
    })
}

/// Uniform random tensor in [lo, hi) from a seeded generator.
pub fn seeded_uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(shape.to_vec(), lo, hi, &mut rng)
}
