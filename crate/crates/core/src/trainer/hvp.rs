//! Finite-difference Hessian-vector products.
//!
//! `∇E(y + εv) − ∇E(y − εv)` over `2ε` approximates `∇²E(y)·v`. The same
//! pair of evaluations, differentiated with respect to the parameters
//! instead of `y`, approximates the mixed term `∂θ (v · ∇_y E)` that the
//! unrolled backward pass needs.

use crate::energy::{EnergyModel, EnergySpec};
use crate::error::{Result, SpenError};
use crate::minimizer::{Rule, Spen};
use crate::params::{ParamGrads, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HvpConfig {
    /// Base step `ε0`.
    pub eps0: f64,
}

impl Default for HvpConfig {
    fn default() -> Self {
        HvpConfig { eps0: 1e-5 }
    }
}

impl HvpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return Err(SpenError::Config(format!(
                "finite-difference step must be positive, got {}",
                self.eps0
            )));
        }
        Ok(())
    }

    /// `ε0 (1 + ‖y‖_∞) / ‖v‖_∞`, for non-zero `v`.
    pub fn epsilon(&self, y: &Tensor, v: &Tensor) -> f64 {
        self.eps0 * (1.0 + y.norm_inf()) / v.norm_inf()
    }
}

fn central(plus: &Tensor, minus: &Tensor, eps: f64) -> Tensor {
    plus.zip_map(minus, |a, b| (a - b) / (2.0 * eps))
}

fn shifted(y: &Tensor, v: &Tensor, s: f64) -> Tensor {
    let mut out = y.clone();
    out.axpy(s, v);
    out
}

/// `∇²_y E(y)·v` by central differences of `∇_y E`. A zero `v` returns
/// zeros without evaluating the energy.
pub fn hvp<M: EnergyModel>(
    spec: &EnergySpec<M>,
    params: &ParamSet,
    y: &Tensor,
    x: &M::Input,
    v: &Tensor,
    cfg: &HvpConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    spec.validate_output(y, x)?;
    y.check_same_shape(v, "hvp")?;
    if v.norm_inf() == 0.0 {
        return Ok(Tensor::zeros_like(y));
    }
    let eps = cfg.epsilon(y, v);
    let gp = spec
        .evaluate_unchecked(params, &shifted(y, v, eps), x, false)?
        .grad_y;
    let gm = spec
        .evaluate_unchecked(params, &shifted(y, v, -eps), x, false)?
        .grad_y;
    Ok(central(&gp, &gm, eps))
}

/// Second-order quantities of one unrolled step along direction `v`.
pub(crate) struct SecondOrder {
    /// `∇²_u E · v`.
    pub hv: Tensor,
    /// `∂θ (v · ∇_u E)`.
    pub mixed: ParamGrads,
}

/// Both second-order terms at the optimization variable `u` of `spen`.
///
/// Mirror descent evaluates the entropy term in `y`, whose curvature blows
/// up at zero; the step is shrunk so that `u ± εv` keeps every entry at
/// least half its value.
pub(crate) fn second_order<M: EnergyModel>(
    spen: &Spen<M>,
    params: &ParamSet,
    u: &Tensor,
    x: &M::Input,
    v: &Tensor,
    cfg: &HvpConfig,
) -> Result<SecondOrder> {
    if v.norm_inf() == 0.0 {
        return Ok(SecondOrder {
            hv: Tensor::zeros_like(u),
            mixed: ParamGrads::new(),
        });
    }
    let mut eps = cfg.epsilon(u, v);
    if spen.unroll.rule == Rule::Emd {
        for (&ui, &vi) in u.data().iter().zip(v.data()) {
            if vi != 0.0 {
                eps = eps.min(0.5 * ui / vi.abs());
            }
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(SpenError::NumericGuard(
                "finite-difference step collapsed at a zero simplex entry".into(),
            ));
        }
    }
    let plus = spen.eval_perturbed(params, &shifted(u, v, eps), x)?;
    let minus = spen.eval_perturbed(params, &shifted(u, v, -eps), x)?;
    let hv = central(&plus.grad_y, &minus.grad_y, eps);
    let mut mixed = ParamGrads::new();
    for (name, gp) in &plus.param_grads {
        if let Some(gm) = minus.param_grads.get(name) {
            mixed.insert(name.clone(), central(gp, gm, eps));
        }
    }
    Ok(SecondOrder { hv, mixed })
}
