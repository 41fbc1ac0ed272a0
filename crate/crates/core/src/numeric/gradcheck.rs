//! Central finite-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{ParamStore, Tape, Var};

/// Which coordinates of each parameter tensor get probed.
#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Base step; the actual step is `h · max(1, |θ|)`.
    pub h: f64,
    /// Probe at most this many coordinates per tensor (all when `None`).
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Lower bound on the error denominator `|analytic| + |numeric|`.
    pub denom_floor: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords_per_tensor: Some(24),
            seed: 0,
            denom_floor: 1e-12,
        }
    }
}

/// Result of a gradient check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

/// Compares the tape gradient of `loss_fn` against central differences.
///
/// `loss_fn` receives a fresh tape with `params` bound (one var per tensor)
/// and must return a scalar node. The error per coordinate is
/// `|analytic − numeric| / max(floor, |analytic| + |numeric|)` with the
/// floor from [`CheckOptions::denom_floor`] (1e-12 by default).
pub fn gradient_check<F>(
    loss_fn: F,
    params: &ParamStore<f64>,
    opts: CheckOptions,
) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = tape.bind(store);
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let mut tape = Tape::new();
    let vars = tape.bind(params);
    let loss = loss_fn(&mut tape, &vars)?;
    let analytic = tape.backward(loss)?.for_params(params);
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
    };
    for i in 0..params.len() {
        let n = params.tensor(i).numel();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let theta = params.tensor(i).data()[j];
            let h = opts.h * theta.abs().max(1.0);
            work.tensor_mut(i).data_mut()[j] = theta + h;
            let plus = eval(&work)?;
            work.tensor_mut(i).data_mut()[j] = theta - h;
            let minus = eval(&work)?;
            work.tensor_mut(i).data_mut()[j] = theta;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(opts.denom_floor);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.name(i).to_string();
                report.worst_coord = j;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
