//! Finite-difference oracles for energy gradients, Hessian-vector products
//! and unrolled parameter gradients.

use crate::autodiff::{fd_gradient, fd_hessian, hessian_times};
use crate::energy::{EnergyModel, EnergySpec};
use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::{relative_error, relative_error_slices, Tensor};
use crate::{Spen, SpenRng};

use super::backprop::{backprop_unroll, BackpropConfig};
use super::hvp::{hvp, HvpConfig};
use super::loss::{unroll_loss, LossConfig};

/// Relative error between the autodiff `∇_y E` and central differences.
pub fn energy_gradient_error<M: EnergyModel>(
    spec: &EnergySpec<M>,
    params: &ParamSet,
    y: &Tensor,
    x: &M::Input,
    step: f64,
) -> Result<f64> {
    let g = spec.energy_grad_y(params, y, x)?;
    let fd = fd_gradient(
        |p| {
            spec.evaluate_unchecked(params, p, x, false)
                .map(|e| e.value)
                .unwrap_or(f64::NAN)
        },
        y,
        step,
    );
    Ok(relative_error(&g, &fd))
}

/// Relative error between [`hvp`] and a dense finite-difference Hessian
/// applied to `v`.
pub fn hvp_error<M: EnergyModel>(
    spec: &EnergySpec<M>,
    params: &ParamSet,
    y: &Tensor,
    x: &M::Input,
    v: &Tensor,
    cfg: &HvpConfig,
    step: f64,
) -> Result<f64> {
    let h = hvp(spec, params, y, x, v, cfg)?;
    let hess = fd_hessian(
        |p| {
            spec.evaluate_unchecked(params, p, x, false)
                .map(|e| e.value)
                .unwrap_or(f64::NAN)
        },
        y,
        step,
    );
    Ok(relative_error(&h, &hessian_times(&hess, v)))
}

/// Total unrolled loss as a function of the parameters.
pub fn total_loss<M: EnergyModel>(
    spen: &Spen<M>,
    params: &ParamSet,
    x: &M::Input,
    target: &Tensor,
    lc: &LossConfig,
) -> Result<f64> {
    unroll_loss(&spen.predict(params, x)?, target, lc)
}

/// Per-parameter relative error of [`backprop_unroll`] against central
/// differences of [`total_loss`], in parameter-name order.
pub fn unroll_gradient_errors<M: EnergyModel>(
    spen: &Spen<M>,
    params: &ParamSet,
    x: &M::Input,
    target: &Tensor,
    lc: &LossConfig,
    cfg: &BackpropConfig,
    step: f64,
) -> Result<Vec<(String, f64)>> {
    compare_coords(spen, params, x, target, lc, cfg, step, |n| (0..n).collect())
}

/// As [`unroll_gradient_errors`], differentiating at most `max_coords`
/// randomly chosen coordinates of each parameter tensor.
#[allow(clippy::too_many_arguments)]
pub fn sampled_unroll_gradient_errors<M: EnergyModel>(
    spen: &Spen<M>,
    params: &ParamSet,
    x: &M::Input,
    target: &Tensor,
    lc: &LossConfig,
    cfg: &BackpropConfig,
    step: f64,
    max_coords: usize,
    rng: &mut SpenRng,
) -> Result<Vec<(String, f64)>> {
    let mut pick = |n: usize| {
        if n <= max_coords {
            (0..n).collect()
        } else {
            let mut v = rand::seq::index::sample(rng, n, max_coords).into_vec();
            v.sort_unstable();
            v
        }
    };
    compare_coords(spen, params, x, target, lc, cfg, step, &mut pick)
}

#[allow(clippy::too_many_arguments)]
fn compare_coords<M: EnergyModel>(
    spen: &Spen<M>,
    params: &ParamSet,
    x: &M::Input,
    target: &Tensor,
    lc: &LossConfig,
    cfg: &BackpropConfig,
    step: f64,
    mut coords: impl FnMut(usize) -> Vec<usize>,
) -> Result<Vec<(String, f64)>> {
    let analytic = backprop_unroll(spen, params, x, target, lc, cfg)?.grads;
    let mut out = Vec::new();
    for (name, value) in params.iter() {
        let a = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(value));
        let idx = coords(value.len());
        let mut probe = params.clone();
        let mut fd = Vec::with_capacity(idx.len());
        for &i in &idx {
            let v = value.data()[i];
            let mut loss_at = |u: f64| -> f64 {
                probe
                    .get_mut(name)
                    .expect("name from the same set")
                    .data_mut()[i] = u;
                total_loss(spen, &probe, x, target, lc).unwrap_or(f64::NAN)
            };
            let (up, down) = (loss_at(v + step), loss_at(v - step));
            probe
                .get_mut(name)
                .expect("name from the same set")
                .data_mut()[i] = v;
            fd.push((up - down) / (2.0 * step));
        }
        let picked: Vec<f64> = idx.iter().map(|&i| a.data()[i]).collect();
        out.push((name.to_string(), relative_error_slices(&picked, &fd)));
    }
    Ok(out)
}

/// Largest error in a report, `0` when empty and infinite if any entry is
/// NaN.
pub fn worst(errors: &[(String, f64)]) -> f64 {
    errors
        .iter()
        .map(|(_, e)| if e.is_nan() { f64::INFINITY } else { *e })
        .fold(0.0, f64::max)
}
