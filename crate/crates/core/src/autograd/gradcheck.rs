//! Central finite-difference verification of [`Graph::backward`] in 64-bit mode.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{Graph, Var};

#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Perturbation step.
    pub h: f64,
    /// Probe at most this many elements per input tensor (chosen with `seed`);
    /// `None` sweeps every element.
    pub max_elems_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            h: 1e-4,
            max_elems_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Elements whose ±h probes crossed a pooling tie or a PReLU kink.
    pub skipped: usize,
}

pub fn relative_error(fd: f64, ad: f64) -> f64 {
    (fd - ad).abs() / (fd.abs() + ad.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of the scalar built by `build` against
/// `(L(x+h) - L(x-h)) / 2h` for every probed element of every input.
pub fn finite_diff_check<F>(build: F, inputs: &[Tensor<f64>], opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g.value(loss).data()[0], g.kink_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        return Err(Error::shape("finite_diff_check", "builder must return a scalar"));
    }
    let base_sig = g.kink_signature();
    let grads = g.backward(loss)?;

    let mut rng = Rng::new(opts.seed);
    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let ad_all = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_unchecked(inputs[i].dims()));
        let mut elems: Vec<usize> = (0..inputs[i].len()).collect();
        if let Some(limit) = opts.max_elems_per_input {
            rng.shuffle(&mut elems);
            elems.truncate(limit);
            elems.sort_unstable();
        }
        for e in elems {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + opts.h;
            let (plus, sig_plus) = eval(&probe)?;
            probe[i].data_mut()[e] = orig - opts.h;
            let (minus, sig_minus) = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * opts.h);
            let err = relative_error(fd, ad_all.data()[e]);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
