//! Fourth-order central finite-difference oracle for analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per parameter; smaller parameters are checked exhaustively.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            coords_per_param: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_pair: Option<(f64, f64)>,
    pub coords_checked: usize,
}

/// Derivatives smaller than this are compared in absolute terms.
pub const ERROR_FLOOR: f64 = 1e-6;

/// Relative error used by the oracle.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

fn evaluate<L>(loss: &L, store: &ParameterStore<f64>) -> Result<f64>
where
    L: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = loss(&mut g, store)?;
    let x = g.value(v).item()?;
    if !x.is_finite() {
        return Err(Error::NonFinite("finite-difference objective".into()));
    }
    Ok(x)
}

/// Maximum relative error between the analytic gradient and a central
/// difference, over sampled coordinates of every non-frozen parameter.
pub fn finite_diff_check<L>(loss: L, store: &ParameterStore<f64>, eps: f64) -> Result<f64>
where
    L: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let opts = GradCheckOptions {
        eps,
        ..Default::default()
    };
    Ok(finite_diff_report(loss, store, opts)?.max_rel_error)
}

pub fn finite_diff_report<L>(
    loss: L,
    store: &ParameterStore<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    if opts.eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    if !g.value(out).item()?.is_finite() {
        return Err(Error::NonFinite("finite-difference objective".into()));
    }
    let grads = g.backward(out)?.into_named();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_pair: None,
        coords_checked: 0,
    };
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let n = store.value(&name)?.numel();
        let zeros;
        let analytic = match grads.get(&name) {
            Some(t) => t.data(),
            None => {
                zeros = vec![0.0; n];
                &zeros
            }
        };
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_param).into_vec()
        };
        for i in coords {
            let orig = store.value(&name)?.data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                probe.get_mut(&name)?.value.data_mut()[i] = orig + offset;
                evaluate(&loss, &probe)
            };
            let h = opts.eps;
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            probe.get_mut(&name)?.value.data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let err = relative_error(analytic[i], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), i));
                report.worst_pair = Some((analytic[i], numeric));
            }
        }
    }
    Ok(report)
}
