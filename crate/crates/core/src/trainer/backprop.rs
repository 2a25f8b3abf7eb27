//! Reverse-mode differentiation through an unrolled minimization run.
//!
//! The forward pass stores only the iterates (and momenta or logits). The
//! reverse sweep runs from the convergence step `T0` down to 0; at step `t`
//! the adjoint of the gradient `g_t` is pushed back into the iterate with a
//! finite-difference Hessian-vector product and into the parameters with
//! the matching mixed second-derivative term. Iterates past `T0` are
//! identity copies, so their loss gradients all land on `y_{T0}`.

use crate::autodiff::{sigmoid, softmax_vjp};
use crate::energy::EnergyModel;
use crate::error::{Result, SpenError};
use crate::minimizer::{Rule, Spen, StoredStep, Trajectory, EMD_FLOOR, STEP_RHO};
use crate::params::{add_grads, Graph, ParamGrads, ParamSet};
use crate::tensor::Tensor;

use super::hvp::{second_order, HvpConfig};
use super::loss::LossConfig;

/// Where the energy gradients `g_t` come from during the reverse sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MemoryMode {
    /// Recompute each `g_t` from the stored iterate; only one energy
    /// evaluation's activations are alive at a time.
    #[default]
    Checkpointed,
    /// Keep every forward tape and its gradient alive until the backward
    /// pass ends.
    Naive,
}

impl std::fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MemoryMode::Checkpointed => "checkpointed",
            MemoryMode::Naive => "naive",
        })
    }
}

impl std::str::FromStr for MemoryMode {
    type Err = SpenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checkpointed" => Ok(MemoryMode::Checkpointed),
            "naive" => Ok(MemoryMode::Naive),
            other => Err(SpenError::Config(format!("unknown memory mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BackpropConfig {
    pub hvp: HvpConfig,
    pub memory: MemoryMode,
}

/// Loss, parameter gradients and the forward trajectory of one example.
#[derive(Clone, Debug)]
pub struct UnrollGrad {
    pub loss: f64,
    pub grads: ParamGrads,
    pub trajectory: Trajectory,
}

/// Tolerance on recomputed versus stored energies in checkpointed mode.
const RECOMPUTE_TOLERANCE: f64 = 1e-12;

/// Loss gradient on `y_t` mapped to the optimization variable.
fn loss_grad_u(
    rule: Rule,
    lc: &LossConfig,
    y: &Tensor,
    target: &Tensor,
    coef: f64,
) -> Result<Tensor> {
    let (_, dy) = lc.loss.eval(y, target)?;
    let dy = dy.scale(coef);
    Ok(match rule {
        Rule::Logit => softmax_vjp(y, &dy),
        _ => dy,
    })
}

/// Gradients of [`super::unroll_loss`] with respect to every parameter that
/// influences the run: energy, initial-iterate and step-size parameters.
pub fn backprop_unroll<M: EnergyModel>(
    spen: &Spen<M>,
    params: &ParamSet,
    x: &M::Input,
    target: &Tensor,
    lc: &LossConfig,
    cfg: &BackpropConfig,
) -> Result<UnrollGrad> {
    cfg.hvp.validate()?;
    let rule = spen.unroll.rule;
    let steps = spen.unroll.steps;
    let coef = lc.coefficients(steps)?;

    let keep = cfg.memory == MemoryMode::Naive;
    let (traj, stored) = spen.unroll_forward(params, x, keep)?;
    let t0 = traj.converged_at;

    let mut loss = 0.0;
    for (t, &c) in coef.iter().enumerate() {
        if c != 0.0 {
            loss += c * lc.loss.eval(&traj.iterates[t + 1], target)?.0;
        }
    }

    // Loss terms of y_{T0} and its copies.
    let mut ubar = Tensor::zeros_like(traj.variable(t0));
    for t in t0..=steps {
        let c = coef[t - 1];
        if c != 0.0 {
            ubar.add_assign(&loss_grad_u(rule, lc, &traj.iterates[t0], target, c)?);
        }
    }

    let mut grads = ParamGrads::new();
    let mut eta_bar = vec![0.0; steps];
    let mut hbar = traj.momenta.as_ref().map(|h| Tensor::zeros_like(&h[0]));

    for t in (0..t0).rev() {
        let u = traj.variable(t);
        let g = step_gradient(spen, params, x, &traj, stored.as_deref(), t)?;
        let eta = traj.steps[t];
        let next_bar = &ubar;

        // Adjoints of u_t (through the direct path) and of g_t.
        let (mut u_bar, g_bar) = match rule {
            Rule::Gd | Rule::Logit => {
                eta_bar[t] = -g.dot(next_bar);
                (next_bar.clone(), next_bar.scale(-eta))
            }
            Rule::Clip => {
                let pre = {
                    let mut p = u.clone();
                    p.axpy(-eta, &g);
                    p
                };
                let masked =
                    next_bar.zip_map(&pre, |b, p| if (0.0..=1.0).contains(&p) { b } else { 0.0 });
                eta_bar[t] = -g.dot(&masked);
                let gb = masked.scale(-eta);
                (masked, gb)
            }
            Rule::Momentum => {
                let hs = traj.momenta.as_ref().expect("momentum trajectory");
                let hb = hbar.as_mut().expect("momentum adjoint");
                // Total adjoint of h_{t+1}: from y_{t+1} and from step t+1.
                let mut h_total = hb.clone();
                h_total.axpy(-eta, next_bar);
                eta_bar[t] = -hs[t + 1].dot(next_bar);
                *hb = h_total.scale(spen.unroll.momentum);
                (next_bar.clone(), h_total)
            }
            Rule::Emd => {
                let z_bar = softmax_vjp(&traj.iterates[t + 1], next_bar);
                eta_bar[t] = -g.dot(&z_bar);
                let yb = z_bar.zip_map(u, |zb, y| if y < EMD_FLOOR { 0.0 } else { zb / y });
                let gb = z_bar.scale(-eta);
                (yb, gb)
            }
        };

        let so = second_order(spen, params, u, x, &g_bar, &cfg.hvp)?;
        u_bar.add_assign(&so.hv);
        add_grads(&mut grads, &so.mixed);

        if t >= 1 && coef[t - 1] != 0.0 {
            u_bar.add_assign(&loss_grad_u(
                rule,
                lc,
                &traj.iterates[t],
                target,
                coef[t - 1],
            )?);
        }
        if !u_bar.all_finite() {
            return Err(SpenError::NonFinite(format!(
                "backward adjoint at iterate {t} is not finite"
            )));
        }
        ubar = u_bar;
    }

    add_grads(&mut grads, &init_vjp(spen, params, x, &ubar)?);

    if spen.unroll.learn_step_sizes {
        let rho = params.get(STEP_RHO)?;
        let data = eta_bar
            .iter()
            .zip(rho.data())
            .map(|(eb, &r)| eb * sigmoid(r))
            .collect();
        grads.insert(STEP_RHO.to_string(), Tensor::from_parts(vec![steps], data));
    }

    for (name, g) in &grads {
        if !g.all_finite() {
            return Err(SpenError::NonFinite(format!(
                "gradient of `{name}` is not finite"
            )));
        }
    }
    Ok(UnrollGrad {
        loss,
        grads,
        trajectory: traj,
    })
}

/// `g_t`, recomputed (and checked against the stored energy) or read from
/// the stored forward evaluation.
fn step_gradient<M: EnergyModel>(
    spen: &Spen<M>,
    params: &ParamSet,
    x: &M::Input,
    traj: &Trajectory,
    stored: Option<&[StoredStep]>,
    t: usize,
) -> Result<Tensor> {
    if let Some(s) = stored {
        return Ok(s[t].eval.grad_y.clone());
    }
    let (eval, _) = spen.eval_variable(params, traj.variable(t), x, false, false)?;
    let want = traj.energies[t];
    if (eval.value - want).abs() > RECOMPUTE_TOLERANCE * (1.0 + want.abs()) {
        return Err(SpenError::Consistency(format!(
            "recomputed energy {} at iterate {t} differs from stored {want}",
            eval.value
        )));
    }
    Ok(eval.grad_y)
}

/// Push the adjoint of the first optimization variable through `init`.
fn init_vjp<M: EnergyModel>(
    spen: &Spen<M>,
    params: &ParamSet,
    x: &M::Input,
    ubar0: &Tensor,
) -> Result<ParamGrads> {
    let mut g = Graph::new(params, true);
    let out = spen.model().init(&mut g, x)?;
    let out = match spen.unroll.rule {
        Rule::Emd => g.tape.softmax(out),
        _ => out,
    };
    let root = g.tape.dot_const(out, ubar0)?;
    let grads = g.tape.backward(root)?;
    Ok(g.param_grads(&grads))
}

/// Gradient of `ℓ(y_0, y*)` alone, used to pretrain the initial iterate.
pub fn init_loss_grad<M: EnergyModel>(
    spen: &Spen<M>,
    params: &ParamSet,
    x: &M::Input,
    target: &Tensor,
    lc: &LossConfig,
) -> Result<(f64, ParamGrads)> {
    let (y0, _) = spen.init_iterate(params, x)?;
    let (loss, dy) = lc.loss.eval(&y0, target)?;
    let ubar = match spen.unroll.rule {
        Rule::Logit => softmax_vjp(&y0, &dy),
        _ => dy,
    };
    Ok((loss, init_vjp(spen, params, x, &ubar)?))
}
