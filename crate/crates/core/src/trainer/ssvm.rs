//! Structured SVM training with gradient-based loss-augmented inference.
//!
//! For each example the unrolled minimizer searches for
//! `ŷ ≈ argmin_y E(y) − Δ(y, y_i)`; the margin violation
//! `Δ(ŷ, y_i) − E(ŷ) + E(y_i)` is then pushed down by its subgradient.
//! Examples where no violation is found contribute nothing, and a batch
//! without violations leaves the parameters untouched.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::autodiff::Var;
use crate::energy::{icnn_project, EnergyModel, EnergySpec, Space};
use crate::error::{Result, SpenError};
use crate::minimizer::{Spen, UnrollConfig};
use crate::params::{Graph, ParamGrads, ParamSet};
use crate::tensor::Tensor;
use crate::SpenRng;

use super::adam::Adam;
use super::loss::{IterateLoss, LossConfig};
use super::train::{
    batch_grads, evaluate, worker_pool, BestTracker, Example, MetricsLog, MetricsRow, ScoreFn,
    TrainConfig, TrainOutcome,
};

/// Input of the loss-augmented energy: the original input plus the target
/// the margin is measured against.
pub struct AugmentedInput<'a, I> {
    pub x: &'a I,
    pub target: &'a Tensor,
}

/// `E(y) − Δ(y, y*)` with `Δ` the mean squared error.
pub struct LossAugmented<'a, M> {
    pub inner: &'a M,
}

impl<'a, M: EnergyModel> EnergyModel for LossAugmented<'a, M> {
    type Input = AugmentedInput<'a, M::Input>;

    fn space(&self) -> Space {
        self.inner.space()
    }

    fn output_shape(&self, x: &Self::Input) -> Vec<usize> {
        self.inner.output_shape(x.x)
    }

    fn init_params(&self, params: &mut ParamSet, rng: &mut SpenRng) {
        self.inner.init_params(params, rng)
    }

    fn global_term(&self, g: &mut Graph, y: Var, x: &Self::Input) -> Result<Option<Var>> {
        self.inner.global_term(g, y, x.x)
    }

    fn local_terms(&self, g: &mut Graph, y: Var, x: &Self::Input) -> Result<Option<Var>> {
        let d = g.tape.sub_const(y, x.target)?;
        let sq = g.tape.square(d);
        let mse = g.tape.mean(sq);
        let neg = g.tape.scale(mse, -1.0);
        match self.inner.local_terms(g, y, x.x)? {
            Some(l) => g.tape.add(l, neg).map(Some),
            None => Ok(Some(neg)),
        }
    }

    fn init(&self, g: &mut Graph, x: &Self::Input) -> Result<Var> {
        self.inner.init(g, x.x)
    }

    fn local_param_names(&self) -> Vec<String> {
        self.inner.local_param_names()
    }

    fn init_param_names(&self) -> Vec<String> {
        self.inner.init_param_names()
    }

    fn icnn_param_names(&self) -> Vec<String> {
        self.inner.icnn_param_names()
    }
}

/// Outcome of loss-augmented inference on one example.
#[derive(Clone, Debug)]
pub struct HingeStep {
    pub violator: Tensor,
    pub hinge: f64,
    /// `∇θ E(y_i) − ∇θ E(ŷ)` when the hinge is active, otherwise empty.
    pub grads: ParamGrads,
}

/// Loss-augmented inference plus the hinge subgradient for one example.
pub fn hinge_step<M: EnergyModel>(
    energy: &EnergySpec<M>,
    inference: &UnrollConfig,
    params: &ParamSet,
    x: &M::Input,
    target: &Tensor,
) -> Result<HingeStep> {
    let aug = Spen::new(
        EnergySpec::new(
            LossAugmented {
                inner: &energy.model,
            },
            energy.entropy_weight,
        )?,
        inference.clone(),
    )?;
    let input = AugmentedInput { x, target };
    let violator = aug.predict(params, &input)?.output().clone();
    let delta = IterateLoss::SquaredError.eval(&violator, target)?.0;
    let at_violator = energy.evaluate(params, &violator, x, true)?;
    let at_target = energy.evaluate(params, target, x, true)?;
    let hinge = delta - at_violator.value + at_target.value;
    let mut grads = ParamGrads::new();
    if hinge > 0.0 {
        for (name, gt) in &at_target.param_grads {
            let mut g = gt.clone();
            if let Some(gv) = at_violator.param_grads.get(name) {
                g.axpy(-1.0, gv);
            }
            grads.insert(name.clone(), g);
        }
        for (name, gv) in &at_violator.param_grads {
            grads.entry(name.clone()).or_insert_with(|| gv.scale(-1.0));
        }
    }
    Ok(HingeStep {
        violator,
        hinge,
        grads,
    })
}

/// SSVM training of the energy parameters of `spen`. Inference at
/// training and evaluation time uses `spen.unroll`, which must not learn
/// its step sizes.
#[allow(clippy::too_many_arguments)]
pub fn ssvm_train<M: EnergyModel>(
    spen: &Spen<M>,
    mut params: ParamSet,
    train_set: &[Example<M::Input>],
    dev_set: &[Example<M::Input>],
    lc: &LossConfig,
    cfg: &TrainConfig,
    score: &ScoreFn<'_>,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if spen.unroll.learn_step_sizes {
        return Err(SpenError::Config(
            "SSVM training cannot learn inference step sizes".into(),
        ));
    }
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(SpenError::Config(
            "SSVM training needs train and dev examples".into(),
        ));
    }
    let icnn_names = spen.model().icnn_param_names();
    if cfg.icnn {
        icnn_project(&mut params, &icnn_names)?;
    }
    let pool = worker_pool(cfg.workers)?;
    let mut adam = Adam::new(cfg.adam, &params);
    let mut rng = SpenRng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = BestTracker::new();
    let start = std::time::Instant::now();
    let epochs = cfg.clamped_epochs + cfg.joint_epochs;
    let none = BTreeSet::new();

    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut total_hinge = 0.0;
        for (b, chunk) in order.chunks(cfg.micro_batch).enumerate() {
            let batch: Vec<&Example<M::Input>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let ps = &params;
            let (hinge, grads) = batch_grads(pool.as_ref(), &batch, |ex| {
                let h = hinge_step(&spen.energy, &spen.unroll, ps, &ex.input, &ex.target)?;
                Ok((h.hinge.max(0.0), h.grads))
            })?;
            if !hinge.is_finite() {
                return Err(SpenError::NonFinite(format!(
                    "hinge {hinge} at epoch {epoch}, batch {b}"
                )));
            }
            total_hinge += hinge * chunk.len() as f64;
            if grads.is_empty() {
                continue;
            }
            adam.update(&mut params, &grads, &none)?;
            if cfg.icnn {
                icnn_project(&mut params, &icnn_names)?;
            }
        }
        let (dev_loss, dev_score) = evaluate(spen, &params, dev_set, lc, score)?;
        log::info!(
            "ssvm epoch {epoch}: hinge {:.6}, dev score {dev_score:.4}",
            total_hinge / train_set.len() as f64
        );
        let wall = start.elapsed().as_secs_f64();
        log.push(MetricsRow {
            epoch,
            split: "train".into(),
            loss: total_hinge / train_set.len() as f64,
            metric: f64::NAN,
            wall_seconds: wall,
        })?;
        log.push(MetricsRow {
            epoch,
            split: "dev".into(),
            loss: dev_loss,
            metric: dev_score,
            wall_seconds: wall,
        })?;
        best.offer(dev_score, epoch, &params);
    }
    Ok(TrainOutcome {
        best: best.params.unwrap_or_else(|| params.clone()),
        last: params,
        best_score: best.score,
        best_epoch: best.epoch,
        adam,
    })
}
