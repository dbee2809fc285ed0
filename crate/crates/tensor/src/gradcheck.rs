//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;

use crate::error::{Result, TensorError};
use crate::rng::NoiseRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of coordinates compared.
    pub coords: usize,
    /// `(parameter index, flat element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub tol_rel: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol_rel
    }
}

/// Finite-difference checker configuration.
///
/// Relative errors use a denominator floor so coordinates whose true
/// gradient is zero compare on an absolute scale instead of dividing
/// round-off by zero.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub h: f64,
    pub tol_rel: f64,
    pub floor: f64,
    /// Check a seeded random subset of this many coordinates per parameter
    /// instead of every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            tol_rel: 1e-4,
            floor: 1e-6,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn run<F>(&self, f: F, params: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars = params
            .iter()
            .map(|p| tape.leaf(p.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        if !tape.value(loss).is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        let grads = tape.backward(loss)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| grads.get(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();

        let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
            let mut t = Tape::new();
            let vs = ps
                .iter()
                .map(|p| t.constant(p.clone()))
                .collect::<Result<Vec<_>>>()?;
            let l = f(&mut t, &vs)?;
            let value = t.value(l);
            if value.numel() != 1 {
                return Err(TensorError::NotScalar(value.shape().to_vec()));
            }
            let v = value.item();
            if !v.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            Ok(v)
        };

        let mut rng = NoiseRng::new(self.seed, "grad_check");
        let mut work = params.to_vec();
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            coords: 0,
            worst: None,
            tol_rel: self.tol_rel,
        };
        for pi in 0..params.len() {
            let n = params[pi].numel();
            let coords: Vec<usize> = match self.max_coords_per_param {
                Some(m) if m < n => {
                    let mut picked = sample(rng.inner(), n, m).into_vec();
                    picked.sort_unstable();
                    picked
                }
                _ => (0..n).collect(),
            };
            for j in coords {
                let orig = params[pi].data()[j];
                work[pi].data_mut()[j] = orig + self.h;
                let plus = eval(&work)?;
                work[pi].data_mut()[j] = orig - self.h;
                let minus = eval(&work)?;
                work[pi].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.h);
                let a = analytic[pi].data()[j];
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(self.floor);
                report.coords += 1;
                report.max_abs_err = report.max_abs_err.max(abs);
                if rel > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(rel);
                    report.worst = Some((pi, j));
                }
            }
        }
        Ok(report)
    }
}

/// Checks every coordinate of `params` with step `h` and tolerance `tol_rel`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64, tol_rel: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    GradCheck {
        h,
        tol_rel,
        ..GradCheck::default()
    }
    .run(f, params)
}
