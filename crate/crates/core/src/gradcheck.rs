//! Central finite-difference verification of graph gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Negative-control hook: perturbs the analytic gradient before comparing.
    pub corrupt_analytic: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            coords_per_tensor: None,
            seed: 0,
            corrupt_analytic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(tensor index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
}

fn evaluate<F>(f: &F, params: &[Tensor], track: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = if track { Graph::new() } else { Graph::inference() };
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(crate::tensor::TensorError::NonScalarLoss(value.shape().to_vec()).into());
    }
    if !value.data()[0].is_finite() {
        return Err(Error::NonFinite("gradient-check objective".into()));
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of scalar `f` against central differences.
///
/// The error at one coordinate is `|analytic − numeric| / max(1, |analytic|, |numeric|)`;
/// the report carries the maximum over all checked coordinates.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::Config(format!(
            "gradient-check eps {} outside [1e-7, 1e-3]",
            opts.eps
        )));
    }
    let (mut g, vars, out) = evaluate(&f, params, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for ti in 0..params.len() {
        let n = params[ti].numel();
        let coords: Vec<usize> = match opts.coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params[ti].data()[c];
            work[ti].data_mut()[c] = orig + opts.eps;
            let plus = evaluate(&f, &work, false)?;
            let fp = plus.0.value(plus.2).data()[0];
            work[ti].data_mut()[c] = orig - opts.eps;
            let minus = evaluate(&f, &work, false)?;
            let fm = minus.0.value(minus.2).data()[0];
            work[ti].data_mut()[c] = orig;

            let numeric = (fp - fm) / (2.0 * opts.eps);
            let mut a = analytic[ti][c];
            if opts.corrupt_analytic && report.coords_checked == 0 {
                a += 1.0;
            }
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, c));
            }
        }
    }
    Ok(report)
}
