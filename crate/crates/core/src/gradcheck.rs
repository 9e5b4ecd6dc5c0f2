//! Central finite-difference verification of analytic gradients (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates probed per tensor; tensors smaller than this are probed exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            h: 1e-4,
            samples_per_tensor: 64,
            seed: 0,
        }
    }
}

/// Result of a check: the worst coordinate and where it was.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: usize,
    pub worst_index: usize,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `loss` against central differences.
///
/// `loss` receives one [`Var`] per entry of `params`, in order, and must
/// return a scalar node. The relative error of a coordinate is
/// `|a - n| / (|a| + |n| + 1e-12)`.
pub fn finite_difference_check<L>(params: &[Tensor<f64>], loss: L, opts: &CheckOptions) -> Result<CheckReport>
where
    L: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if opts.h <= 0.0 {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = loss(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = loss(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst_tensor: 0,
        worst_index: 0,
        worst_pair: (0.0, 0.0),
        coordinates: 0,
    };
    for (ti, p) in params.iter().enumerate() {
        let n = p.len();
        let coords: Vec<usize> = if n <= opts.samples_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.samples_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + opts.h;
            let up = eval(&work)?;
            work[ti].data_mut()[i] = orig - opts.h;
            let down = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            let analytic = grads.get(vars[ti]).map_or(0.0, |t| t.data()[i]);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_tensor = ti;
                report.worst_index = i;
                report.worst_pair = (analytic, numeric);
            }
        }
    }
    Ok(report)
}
