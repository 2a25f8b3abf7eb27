//! Fixed-length unrolled gradient-based energy minimization.
//!
//! Prediction runs `T` steps of one update rule from the initial iterate
//! produced by the model's `init`. If the iterate stops moving (sup-norm
//! change below the tolerance) at step `T0 < T`, the remaining iterates are
//! identity copies of `y_{T0}`. The trajectory records everything the
//! trainer needs to differentiate through the run without keeping any
//! energy-internal activations.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{softmax_rows, softplus, Tape};
use crate::energy::{finish_eval, EnergyEval, EnergyModel, EnergySpec, Space};
use crate::error::{Result, SpenError};
use crate::params::{Graph, ParamSet};
use crate::tensor::Tensor;
use crate::SpenRng;

/// Parameter holding the unconstrained step sizes `ρ_t`, `η_t = softplus(ρ_t)`.
pub const STEP_RHO: &str = "unroll.step_rho";

/// Entries below this are clamped before taking logs in mirror descent.
pub const EMD_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    /// `y ← y − η ∇E(y)`
    Gd,
    /// Heavy ball: `h ← μ h + ∇E(y)`, `y ← y − η h`
    Momentum,
    /// Entropic mirror descent on the simplex.
    Emd,
    /// Gradient descent on logits `l` with `y = softmax(l)`.
    Logit,
    /// Projected gradient descent onto `[0, 1]`.
    Clip,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::Gd => "gd",
            Rule::Momentum => "momentum",
            Rule::Emd => "emd",
            Rule::Logit => "logit",
            Rule::Clip => "clip",
        }
    }

    pub fn requires_simplex(self) -> bool {
        matches!(self, Rule::Emd | Rule::Logit)
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = SpenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(Rule::Gd),
            "momentum" => Ok(Rule::Momentum),
            "emd" => Ok(Rule::Emd),
            "logit" => Ok(Rule::Logit),
            "clip" => Ok(Rule::Clip),
            other => Err(SpenError::Config(format!("unknown update rule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnrollConfig {
    /// Number of unrolled steps `T`.
    pub steps: usize,
    pub rule: Rule,
    /// Initial (or, when not learned, fixed) step size.
    pub step_size: f64,
    /// Learn per-step sizes through [`STEP_RHO`].
    pub learn_step_sizes: bool,
    /// Momentum constant μ.
    pub momentum: f64,
    /// Convergence tolerance τ on `‖y_t − y_{t−1}‖_∞`.
    pub tolerance: f64,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        UnrollConfig {
            steps: 20,
            rule: Rule::Gd,
            step_size: 0.1,
            learn_step_sizes: true,
            momentum: 0.0,
            tolerance: 1e-5,
        }
    }
}

impl UnrollConfig {
    pub fn validate(&self, space: Space) -> Result<()> {
        if self.steps == 0 {
            return Err(SpenError::Config("unroll steps must be at least 1".into()));
        }
        if self.learn_step_sizes && (self.step_size.is_nan() || self.step_size <= 0.0) {
            return Err(SpenError::Config(format!(
                "learned step sizes need a positive initial value, got {}",
                self.step_size
            )));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(SpenError::Config(format!(
                "step size must be non-negative, got {}",
                self.step_size
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SpenError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(SpenError::Config(format!(
                "convergence tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        match (self.rule.requires_simplex(), space) {
            (true, Space::Box) => Err(SpenError::Config(format!(
                "rule `{}` needs a simplex output space",
                self.rule
            ))),
            (false, Space::Simplex { .. }) => Err(SpenError::Config(format!(
                "rule `{}` does not keep iterates on the simplex; use emd or logit",
                self.rule
            ))),
            _ => Ok(()),
        }
    }
}

/// `ρ` such that `softplus(ρ) = v`.
pub fn inverse_softplus(v: f64) -> f64 {
    assert!(v > 0.0, "inverse_softplus needs a positive value");
    if v > 30.0 {
        v
    } else {
        v + (-(-v).exp_m1()).ln()
    }
}

/// Recorded iterates of one prediction.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// `y_0 … y_T`.
    pub iterates: Vec<Tensor>,
    /// `l_0 … l_T` for the logit rule.
    pub logits: Option<Vec<Tensor>>,
    /// `h_0 … h_T` for the momentum rule (`h_0 = 0`).
    pub momenta: Option<Vec<Tensor>>,
    /// `E(y_t)` for every stored iterate.
    pub energies: Vec<f64>,
    /// Realized step sizes `η_0 … η_{T−1}`.
    pub steps: Vec<f64>,
    /// First `t` with `‖y_t − y_{t−1}‖_∞ < τ`, or `T`.
    pub converged_at: usize,
    /// Entries clamped to [`EMD_FLOOR`] by mirror descent.
    pub guard_clamps: usize,
}

impl Trajectory {
    pub fn output(&self) -> &Tensor {
        self.iterates.last().expect("trajectory has at least y_0")
    }

    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    /// The optimization variable at step `t` (logits for the logit rule).
    pub fn variable(&self, t: usize) -> &Tensor {
        match &self.logits {
            Some(l) => &l[t],
            None => &self.iterates[t],
        }
    }
}

pub fn step_gd(y: &Tensor, grad: &Tensor, eta: f64) -> Tensor {
    let mut out = y.clone();
    out.axpy(-eta, grad);
    out
}

/// Returns `(y_{t+1}, h_{t+1})`.
pub fn step_momentum(y: &Tensor, h: &Tensor, grad: &Tensor, eta: f64, mu: f64) -> (Tensor, Tensor) {
    let mut h_next = h.scale(mu);
    h_next.add_assign(grad);
    let mut y_next = y.clone();
    y_next.axpy(-eta, &h_next);
    (y_next, h_next)
}

/// `softmax(log y − η ∇E)` per row; returns the number of entries that had
/// to be clamped to [`EMD_FLOOR`].
pub fn step_emd(y: &Tensor, grad: &Tensor, eta: f64) -> (Tensor, usize) {
    let clamps = y.data().iter().filter(|&&v| v < EMD_FLOOR).count();
    let z = y.zip_map(grad, |v, g| v.max(EMD_FLOOR).ln() - eta * g);
    (softmax_rows(&z), clamps)
}

pub fn step_logit(l: &Tensor, grad_l: &Tensor, eta: f64) -> Tensor {
    step_gd(l, grad_l, eta)
}

/// Returns `(y_{t+1}, pass)` where `pass[i]` is false for coordinates the
/// projection clamped; those carry zero gradient backward.
pub fn step_clip(y: &Tensor, grad: &Tensor, eta: f64) -> (Tensor, Vec<bool>) {
    let pre = step_gd(y, grad, eta);
    let pass = pre.data().iter().map(|v| (0.0..=1.0).contains(v)).collect();
    (pre.clamp(0.0, 1.0), pass)
}

/// Argmax per last-axis row, ties to the lowest index.
pub fn round_output(y: &Tensor, space: Space) -> Result<Vec<usize>> {
    if !matches!(space, Space::Simplex { .. }) {
        return Err(SpenError::Contract(
            "rounding needs a simplex-typed output".into(),
        ));
    }
    Ok(y.rows()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// A SPEN: an energy plus the unrolled procedure that minimizes it.
#[derive(Clone, Debug)]
pub struct Spen<M> {
    pub energy: EnergySpec<M>,
    pub unroll: UnrollConfig,
}

/// Per-step gradients and the tapes that produced them, kept only by the
/// activation-storing backward path.
pub(crate) struct StoredStep {
    pub eval: EnergyEval,
    pub _tape: Tape,
}

impl<M: EnergyModel> Spen<M> {
    pub fn new(energy: EnergySpec<M>, unroll: UnrollConfig) -> Result<Self> {
        unroll.validate(energy.space())?;
        Ok(Spen { energy, unroll })
    }

    pub fn model(&self) -> &M {
        &self.energy.model
    }

    /// Fresh parameters for the energy and, if learned, the step sizes.
    pub fn init_params(&self, rng: &mut SpenRng) -> ParamSet {
        let mut ps = ParamSet::new();
        self.energy.model.init_params(&mut ps, rng);
        if self.unroll.learn_step_sizes {
            ps.insert(
                STEP_RHO,
                Tensor::full(
                    &[self.unroll.steps],
                    inverse_softplus(self.unroll.step_size),
                ),
            );
        }
        ps
    }

    /// Realized `η_0 … η_{T−1}`.
    pub fn step_sizes(&self, params: &ParamSet) -> Result<Vec<f64>> {
        if !self.unroll.learn_step_sizes {
            return Ok(vec![self.unroll.step_size; self.unroll.steps]);
        }
        let rho = params.get(STEP_RHO)?;
        if rho.len() != self.unroll.steps {
            return Err(SpenError::dim(
                "step_sizes",
                format!(
                    "{} step parameters for T = {}",
                    rho.len(),
                    self.unroll.steps
                ),
            ));
        }
        Ok(rho.data().iter().map(|&r| softplus(r, 1.0)).collect())
    }

    /// `(y_0, l_0)`; `l_0` is present only for the logit rule.
    pub fn init_iterate(
        &self,
        params: &ParamSet,
        x: &M::Input,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = Graph::new(params, false);
        let v = self.energy.model.init(&mut g, x)?;
        let out = g.tape.value(v).clone();
        out.ensure_finite("initial iterate")?;
        Ok(match self.energy.space() {
            Space::Box => (out, None),
            Space::Simplex { .. } => {
                let y0 = softmax_rows(&out);
                match self.unroll.rule {
                    Rule::Logit => (y0, Some(out)),
                    _ => (y0, None),
                }
            }
        })
    }

    /// Energy and gradient with respect to the optimization variable `u`
    /// (logits for the logit rule, `y` otherwise). With `keep`, the tape is
    /// returned alongside.
    pub(crate) fn eval_variable(
        &self,
        params: &ParamSet,
        u: &Tensor,
        x: &M::Input,
        param_grads: bool,
        keep: bool,
    ) -> Result<(EnergyEval, Option<Tape>)> {
        self.eval_inner(params, u, x, param_grads, keep, true)
    }

    /// As [`Spen::eval_variable`] without the feasibility check, for points
    /// perturbed off the simplex by finite differences.
    pub(crate) fn eval_perturbed(
        &self,
        params: &ParamSet,
        u: &Tensor,
        x: &M::Input,
    ) -> Result<EnergyEval> {
        Ok(self.eval_inner(params, u, x, true, false, false)?.0)
    }

    fn eval_inner(
        &self,
        params: &ParamSet,
        u: &Tensor,
        x: &M::Input,
        param_grads: bool,
        keep: bool,
        validate: bool,
    ) -> Result<(EnergyEval, Option<Tape>)> {
        let mut g = Graph::new(params, param_grads);
        let uv = g.tape.var(u.clone());
        let yv = if self.unroll.rule == Rule::Logit {
            g.tape.softmax(uv)
        } else {
            uv
        };
        if validate {
            self.energy.validate_output(g.tape.value(yv), x)?;
        }
        let e = self.energy.build(&mut g, yv, x)?;
        let eval = finish_eval(&g, e, uv)?;
        let tape = keep.then(|| std::mem::take(&mut g.tape));
        Ok((eval, tape))
    }

    pub fn predict(&self, params: &ParamSet, x: &M::Input) -> Result<Trajectory> {
        Ok(self.unroll_forward(params, x, false)?.0)
    }

    pub(crate) fn unroll_forward(
        &self,
        params: &ParamSet,
        x: &M::Input,
        keep_tapes: bool,
    ) -> Result<(Trajectory, Option<Vec<StoredStep>>)> {
        let cfg = &self.unroll;
        let etas = self.step_sizes(params)?;
        let (y0, l0) = self.init_iterate(params, x)?;
        let mut iterates = vec![y0.clone()];
        let mut logits = l0.map(|l| vec![l]);
        let mut momenta = (cfg.rule == Rule::Momentum).then(|| vec![Tensor::zeros_like(&y0)]);
        let mut energies = Vec::with_capacity(cfg.steps + 1);
        let mut stored = keep_tapes.then(Vec::new);
        let mut guard_clamps = 0;
        let mut converged_at = cfg.steps;

        for t in 0..cfg.steps {
            let u = match &logits {
                Some(l) => l[t].clone(),
                None => iterates[t].clone(),
            };
            let (eval, tape) = self
                .eval_variable(params, &u, x, false, keep_tapes)
                .map_err(|e| annotate(e, t))?;
            energies.push(eval.value);
            let g = &eval.grad_y;
            let eta = etas[t];
            let y_next = match cfg.rule {
                Rule::Gd => step_gd(&iterates[t], g, eta),
                Rule::Momentum => {
                    let hs = momenta.as_mut().unwrap();
                    let (y, h) = step_momentum(&iterates[t], &hs[t], g, eta, cfg.momentum);
                    hs.push(h);
                    y
                }
                Rule::Emd => {
                    let (y, c) = step_emd(&iterates[t], g, eta);
                    if c > 0 {
                        log::warn!("mirror descent clamped {c} entries at step {t}");
                    }
                    guard_clamps += c;
                    y
                }
                Rule::Logit => {
                    let ls = logits.as_mut().unwrap();
                    let l = step_logit(&ls[t], g, eta);
                    let y = softmax_rows(&l);
                    ls.push(l);
                    y
                }
                Rule::Clip => step_clip(&iterates[t], g, eta).0,
            };
            y_next.ensure_finite(&format!("iterate {}", t + 1))?;
            let moved = y_next.max_abs_diff(&iterates[t]);
            iterates.push(y_next);
            if let (Some(s), Some(tape)) = (stored.as_mut(), tape) {
                s.push(StoredStep { eval, _tape: tape });
            }
            if moved < cfg.tolerance {
                converged_at = t + 1;
                break;
            }
        }

        // Energy at the last computed iterate, then identity continuation.
        let last_u = match &logits {
            Some(l) => l[converged_at].clone(),
            None => iterates[converged_at].clone(),
        };
        let last_e = {
            let mut g = Graph::new(params, false);
            let uv = g.tape.constant(last_u);
            let yv = if cfg.rule == Rule::Logit {
                g.tape.softmax(uv)
            } else {
                uv
            };
            let e = self.energy.build(&mut g, yv, x)?;
            g.tape.value(e).item()
        };
        if !last_e.is_finite() {
            return Err(SpenError::NonFinite(format!(
                "energy at iterate {converged_at} is {last_e}"
            )));
        }
        energies.push(last_e);
        for _ in converged_at..cfg.steps {
            let y = iterates[converged_at].clone();
            iterates.push(y);
            if let Some(l) = logits.as_mut() {
                let v = l[converged_at].clone();
                l.push(v);
            }
            if let Some(h) = momenta.as_mut() {
                let v = h[converged_at].clone();
                h.push(v);
            }
            energies.push(last_e);
        }

        Ok((
            Trajectory {
                iterates,
                logits,
                momenta,
                energies,
                steps: etas,
                converged_at,
                guard_clamps,
            },
            stored,
        ))
    }
}

fn annotate(e: SpenError, t: usize) -> SpenError {
    match e {
        SpenError::NonFinite(m) => SpenError::NonFinite(format!("iterate {t}: {m}")),
        other => other,
    }
}
