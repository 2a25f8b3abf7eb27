//! Energy functions `E(y; F(x))` with a global/local split.
//!
//! An [`EnergyModel`] records its terms on a [`Graph`]; [`EnergySpec`] adds
//! entropy smoothing for simplex-valued outputs and exposes black-box
//! evaluation and gradients. The minimizer only ever talks to
//! [`EnergySpec`].

mod denoise;
mod tagging;

pub use denoise::{DeepPrior, DenoisingEnergy, FoePrior, Prior};
pub use tagging::{TagFeatures, TaggingEnergy, ToyGlobalEnergy};

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Result, SpenError};
use crate::params::{Graph, ParamGrads, ParamSet};
use crate::tensor::Tensor;
use crate::SpenRng;

/// Feasible set for the output `y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    /// Unconstrained during descent; values of interest lie in `[0, 1]`.
    Box,
    /// Every row along the last axis lies on the probability simplex of
    /// this many labels.
    Simplex { labels: usize },
}

/// Row sums must be within this of 1 for a simplex-typed `y`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

pub trait EnergyModel: Send + Sync {
    type Input: Send + Sync;

    fn space(&self) -> Space;

    fn output_shape(&self, x: &Self::Input) -> Vec<usize>;

    /// Add freshly initialized parameters for this model.
    fn init_params(&self, params: &mut ParamSet, rng: &mut SpenRng);

    /// `E^g(y; F(x))`, or `None` when the model has no global term.
    fn global_term(&self, g: &mut Graph, y: Var, x: &Self::Input) -> Result<Option<Var>>;

    /// `Σ_i E_i^l(y_i; F(x))`, or `None`.
    fn local_terms(&self, g: &mut Graph, y: Var, x: &Self::Input) -> Result<Option<Var>>;

    /// The initial iterate. Box spaces return `y_0` itself; simplex spaces
    /// return logits whose row-wise softmax is `y_0`.
    fn init(&self, g: &mut Graph, x: &Self::Input) -> Result<Var>;

    /// Parameters of the local terms (held fixed while the global energy is
    /// trained in isolation).
    fn local_param_names(&self) -> Vec<String>;

    /// Parameters used by `init`.
    fn init_param_names(&self) -> Vec<String> {
        self.local_param_names()
    }

    /// Parameters clamped non-negative in input-convex mode.
    fn icnn_param_names(&self) -> Vec<String>;
}

/// An energy model plus entropy smoothing.
#[derive(Clone, Debug)]
pub struct EnergySpec<M> {
    pub model: M,
    /// Weight λ of `−Σ_i H(y_i)`; only applied on simplex spaces.
    pub entropy_weight: f64,
}

/// Result of one recorded energy evaluation.
#[derive(Clone, Debug)]
pub struct EnergyEval {
    pub value: f64,
    pub grad_y: Tensor,
    /// Empty unless parameter gradients were requested.
    pub param_grads: ParamGrads,
}

impl<M: EnergyModel> EnergySpec<M> {
    pub fn new(model: M, entropy_weight: f64) -> Result<Self> {
        if !(entropy_weight >= 0.0 && entropy_weight.is_finite()) {
            return Err(SpenError::Config(format!(
                "entropy weight must be non-negative, got {entropy_weight}"
            )));
        }
        Ok(EnergySpec {
            model,
            entropy_weight,
        })
    }

    pub fn space(&self) -> Space {
        self.model.space()
    }

    /// Check that `y` has the model's output shape and, for simplex spaces,
    /// lies on the simplex.
    pub fn validate_output(&self, y: &Tensor, x: &M::Input) -> Result<()> {
        let want = self.model.output_shape(x);
        if y.shape() != want.as_slice() {
            return Err(SpenError::dim(
                "energy",
                format!("y has shape {:?}, expected {want:?}", y.shape()),
            ));
        }
        if let Space::Simplex { .. } = self.space() {
            check_simplex(y, SIMPLEX_TOLERANCE)?;
        }
        Ok(())
    }

    /// Record the total energy at `y` (already on the graph) and return it.
    pub fn build(&self, g: &mut Graph, y: Var, x: &M::Input) -> Result<Var> {
        let global = self.model.global_term(g, y, x)?;
        let local = self.model.local_terms(g, y, x)?;
        let mut total = match (global, local) {
            (Some(a), Some(b)) => g.tape.add(a, b)?,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => {
                let zero = g.tape.constant(Tensor::scalar(0.0));
                g.tape.scale(zero, 1.0)
            }
        };
        if self.entropy_weight > 0.0 && matches!(self.space(), Space::Simplex { .. }) {
            let neg_entropy = {
                let xl = g.tape.xlogx(y);
                g.tape.sum(xl)
            };
            let weighted = g.tape.scale(neg_entropy, self.entropy_weight);
            total = g.tape.add(total, weighted)?;
        }
        Ok(total)
    }

    /// Energy value alone.
    pub fn energy_eval(&self, params: &ParamSet, y: &Tensor, x: &M::Input) -> Result<f64> {
        self.validate_output(y, x)?;
        let mut g = Graph::new(params, false);
        let yv = g.tape.constant(y.clone());
        let e = self.build(&mut g, yv, x)?;
        let v = g.tape.value(e).item();
        if !v.is_finite() {
            return Err(SpenError::NonFinite(format!("energy evaluated to {v}")));
        }
        Ok(v)
    }

    /// Gradient of the total energy with respect to `y`.
    pub fn energy_grad_y(&self, params: &ParamSet, y: &Tensor, x: &M::Input) -> Result<Tensor> {
        Ok(self.evaluate(params, y, x, false)?.grad_y)
    }

    /// Value, `∇_y E` and optionally `∇_θ E` from one tape pass.
    pub fn evaluate(
        &self,
        params: &ParamSet,
        y: &Tensor,
        x: &M::Input,
        param_grads: bool,
    ) -> Result<EnergyEval> {
        self.validate_output(y, x)?;
        self.evaluate_unchecked(params, y, x, param_grads)
    }

    /// [`EnergySpec::evaluate`] without the shape and feasibility checks,
    /// for finite-difference probes that step slightly off the simplex.
    pub(crate) fn evaluate_unchecked(
        &self,
        params: &ParamSet,
        y: &Tensor,
        x: &M::Input,
        param_grads: bool,
    ) -> Result<EnergyEval> {
        let mut g = Graph::new(params, param_grads);
        let yv = g.tape.var(y.clone());
        let e = self.build(&mut g, yv, x)?;
        finish_eval(&g, e, yv)
    }
}

/// Backward from an energy root and package value plus gradients.
pub(crate) fn finish_eval(g: &Graph, root: Var, wrt: Var) -> Result<EnergyEval> {
    let value = g.tape.value(root).item();
    if !value.is_finite() {
        return Err(SpenError::NonFinite(format!("energy evaluated to {value}")));
    }
    let grads = g.tape.backward(root)?;
    let grad_y = grads.get_or_zeros(wrt, g.tape.value(wrt));
    grad_y.ensure_finite("energy gradient")?;
    let param_grads = g.param_grads(&grads);
    Ok(EnergyEval {
        value,
        grad_y,
        param_grads,
    })
}

/// Error unless every last-axis row is non-negative and sums to 1 within
/// `tol`.
pub fn check_simplex(y: &Tensor, tol: f64) -> Result<()> {
    for (i, row) in y.rows().enumerate() {
        let s: f64 = row.iter().sum();
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        if (s - 1.0).abs() > tol || min < -tol {
            return Err(SpenError::Contract(format!(
                "row {i} is off the simplex (sum {s}, min {min})"
            )));
        }
    }
    Ok(())
}

/// Clamp the listed parameters elementwise to be non-negative.
pub fn icnn_project(params: &mut ParamSet, constrained: &[String]) -> Result<()> {
    params.check_names(constrained.iter().map(String::as_str))?;
    for name in constrained {
        for v in params.get_mut(name)?.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SpenRng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Two-layer perceptron with a softplus in the middle and a scalar output
/// per input row. Parameters live under `{prefix}.w1/.b1/.w2/.b2`.
pub(crate) struct Mlp {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl Mlp {
    pub fn new(prefix: &str, input: usize, hidden: usize) -> Self {
        Mlp {
            prefix: prefix.to_string(),
            input,
            hidden,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut SpenRng) {
        params.insert(
            self.name("w1"),
            glorot(&[self.hidden, self.input], self.input, self.hidden, rng),
        );
        params.insert(self.name("b1"), Tensor::zeros(&[self.hidden]));
        params.insert(
            self.name("w2"),
            glorot(&[1, self.hidden], self.hidden, 1, rng),
        );
        params.insert(self.name("b2"), Tensor::zeros(&[1]));
    }

    /// Sum of the MLP output over rows of `input` (`[n]` or `[rows, n]`).
    pub fn apply_sum(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let (w1, b1) = (g.param(&self.name("w1"))?, g.param(&self.name("b1"))?);
        let (w2, b2) = (g.param(&self.name("w2"))?, g.param(&self.name("b2"))?);
        let h = g.tape.linear(input, w1, Some(b1))?;
        let h = g.tape.softplus(h, 1.0)?;
        let o = g.tape.linear(h, w2, Some(b2))?;
        Ok(g.tape.sum(o))
    }

    pub fn second_layer(&self) -> String {
        self.name("w2")
    }
}
