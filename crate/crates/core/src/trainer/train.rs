//! Phased end-to-end training with dev-set model selection.
//!
//! Phase 1 fits the initial-iterate predictor on `ℓ(y_0, y*)`. Phase 2
//! trains with the local-term parameters held fixed. Phase 3 trains
//! everything. After every epoch the dev set is scored with full
//! prediction and the best snapshot is kept.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::energy::{icnn_project, EnergyModel};
use crate::error::{Result, SpenError};
use crate::params::{add_grads, scale_grads, ParamGrads, ParamSet};
use crate::tensor::Tensor;
use crate::{Spen, SpenRng};

use super::adam::{Adam, AdamConfig};
use super::backprop::{backprop_unroll, init_loss_grad, BackpropConfig};
use super::loss::{unroll_loss, LossConfig};

/// One supervised example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<I> {
    pub input: I,
    pub target: Tensor,
}

/// Per-example task score of a prediction against its target; higher is
/// better.
pub type ScoreFn<'a> = dyn Fn(&Tensor, &Tensor) -> Result<f64> + Sync + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    /// Epochs with the local terms held fixed.
    pub clamped_epochs: usize,
    pub joint_epochs: usize,
    /// Examples whose gradients are averaged into one update.
    pub micro_batch: usize,
    /// Worker threads for per-example gradients; 1 runs inline.
    pub workers: usize,
    /// Clamp input-convex weights non-negative after every update.
    pub icnn: bool,
    pub adam: AdamConfig,
    pub backprop: BackpropConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 2,
            clamped_epochs: 2,
            joint_epochs: 10,
            micro_batch: 1,
            workers: 1,
            icnn: false,
            adam: AdamConfig::default(),
            backprop: BackpropConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.backprop.hvp.validate()?;
        if self.micro_batch == 0 || self.workers == 0 {
            return Err(SpenError::Config(
                "micro-batch size and worker count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub metric: f64,
    pub wall_seconds: f64,
}

/// Append-only metrics log, optionally mirrored to a CSV file.
#[derive(Debug, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    writer: Option<csv::Writer<File>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Append to `path`, writing the header only when the file is new.
    pub fn to_file(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        if fresh {
            w.write_record(["epoch", "split", "loss", "task-metric", "wall-seconds"])
                .map_err(csv_err)?;
            w.flush()?;
        }
        Ok(MetricsLog {
            rows: Vec::new(),
            writer: Some(w),
        })
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.write_record([
                row.epoch.to_string(),
                row.split.clone(),
                format!("{:?}", row.loss),
                format!("{:?}", row.metric),
                format!("{:.3}", row.wall_seconds),
            ])
            .map_err(csv_err)?;
            w.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> SpenError {
    SpenError::Io(std::io::Error::other(e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best dev score.
    pub best: ParamSet,
    /// Parameters after the final epoch.
    pub last: ParamSet,
    pub best_score: f64,
    /// Epoch of the best snapshot (0 when no epoch ran).
    pub best_epoch: usize,
    pub adam: Adam,
}

/// Mean unrolled loss and mean score of full predictions over `data`.
pub fn evaluate<M: EnergyModel>(
    spen: &Spen<M>,
    params: &ParamSet,
    data: &[Example<M::Input>],
    lc: &LossConfig,
    score: &ScoreFn<'_>,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(SpenError::Config("evaluation set is empty".into()));
    }
    let (mut loss, mut total) = (0.0, 0.0);
    for ex in data {
        let tr = spen.predict(params, &ex.input)?;
        loss += unroll_loss(&tr, &ex.target, lc)?;
        total += score(tr.output(), &ex.target)?;
    }
    let n = data.len() as f64;
    Ok((loss / n, total / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Pretrain,
    Clamped,
    Joint,
}

/// Average per-example gradients in input order, optionally computed on a
/// worker pool.
pub(crate) fn batch_grads<T: Sync>(
    pool: Option<&rayon::ThreadPool>,
    batch: &[T],
    f: impl Fn(&T) -> Result<(f64, ParamGrads)> + Sync,
) -> Result<(f64, ParamGrads)> {
    let results: Vec<Result<(f64, ParamGrads)>> = match pool {
        Some(p) => {
            use rayon::prelude::*;
            p.install(|| batch.par_iter().map(&f).collect())
        }
        None => batch.iter().map(&f).collect(),
    };
    let mut loss = 0.0;
    let mut grads = ParamGrads::new();
    for r in results {
        let (l, g) = r?;
        loss += l;
        add_grads(&mut grads, &g);
    }
    let n = batch.len() as f64;
    scale_grads(&mut grads, 1.0 / n);
    Ok((loss / n, grads))
}

pub(crate) fn worker_pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| SpenError::Config(format!("cannot start {workers} workers: {e}")))
}

/// Strict improvement bookkeeping shared by both trainers.
pub(crate) struct BestTracker {
    pub score: f64,
    pub epoch: usize,
    pub params: Option<ParamSet>,
}

impl BestTracker {
    pub fn new() -> Self {
        BestTracker {
            score: f64::NEG_INFINITY,
            epoch: 0,
            params: None,
        }
    }

    pub fn offer(&mut self, score: f64, epoch: usize, params: &ParamSet) {
        if score > self.score || self.params.is_none() {
            self.score = score;
            self.epoch = epoch;
            self.params = Some(params.clone());
        }
    }
}

/// End-to-end training. `log` receives one `train` and one `dev` row per
/// epoch.
#[allow(clippy::too_many_arguments)]
pub fn train<M: EnergyModel>(
    spen: &Spen<M>,
    params: ParamSet,
    train_set: &[Example<M::Input>],
    dev_set: &[Example<M::Input>],
    lc: &LossConfig,
    cfg: &TrainConfig,
    score: &ScoreFn<'_>,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    train_observed(
        spen,
        params,
        train_set,
        dev_set,
        lc,
        cfg,
        score,
        log,
        &mut |_| {},
    )
}

/// [`train`], calling `on_update` with the parameters after every update
/// (and its projection).
#[allow(clippy::too_many_arguments)]
pub fn train_observed<M: EnergyModel>(
    spen: &Spen<M>,
    mut params: ParamSet,
    train_set: &[Example<M::Input>],
    dev_set: &[Example<M::Input>],
    lc: &LossConfig,
    cfg: &TrainConfig,
    score: &ScoreFn<'_>,
    log: &mut MetricsLog,
    on_update: &mut dyn FnMut(&ParamSet),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(SpenError::Config("training set is empty".into()));
    }
    if dev_set.is_empty() {
        return Err(SpenError::Config("dev set is empty".into()));
    }
    let model = spen.model();
    let icnn_names = model.icnn_param_names();
    if cfg.icnn {
        icnn_project(&mut params, &icnn_names)?;
    }
    let pretrain = if model.init_param_names().is_empty() {
        0
    } else {
        cfg.pretrain_epochs
    };
    let phases = std::iter::repeat_n(Phase::Pretrain, pretrain)
        .chain(std::iter::repeat_n(Phase::Clamped, cfg.clamped_epochs))
        .chain(std::iter::repeat_n(Phase::Joint, cfg.joint_epochs));
    let local: BTreeSet<String> = model.local_param_names().into_iter().collect();
    let none = BTreeSet::new();

    let pool = worker_pool(cfg.workers)?;
    let mut adam = Adam::new(cfg.adam, &params);
    let mut rng = SpenRng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = BestTracker::new();
    let start = Instant::now();

    for (e, phase) in phases.enumerate() {
        let epoch = e + 1;
        order.shuffle(&mut rng);
        let frozen = if phase == Phase::Clamped {
            &local
        } else {
            &none
        };
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.micro_batch).enumerate() {
            let batch: Vec<&Example<M::Input>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let ps = &params;
            let (loss, grads) = batch_grads(pool.as_ref(), &batch, |ex| match phase {
                Phase::Pretrain => init_loss_grad(spen, ps, &ex.input, &ex.target, lc),
                _ => backprop_unroll(spen, ps, &ex.input, &ex.target, lc, &cfg.backprop)
                    .map(|r| (r.loss, r.grads)),
            })
            .map_err(|err| match err {
                SpenError::NonFinite(m) => {
                    SpenError::NonFinite(format!("epoch {epoch}, batch {b}: {m}"))
                }
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(SpenError::NonFinite(format!(
                    "loss {loss} at epoch {epoch}, batch {b}"
                )));
            }
            epoch_loss += loss * chunk.len() as f64;
            adam.update(&mut params, &grads, frozen)?;
            if cfg.icnn {
                icnn_project(&mut params, &icnn_names)?;
            }
            on_update(&params);
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let (dev_loss, dev_score) = evaluate(spen, &params, dev_set, lc, score)?;
        log::info!(
            "epoch {epoch} ({phase:?}): train loss {train_loss:.6}, dev score {dev_score:.4}"
        );
        let wall = start.elapsed().as_secs_f64();
        log.push(MetricsRow {
            epoch,
            split: "train".into(),
            loss: train_loss,
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

    let best_params = match best.params {
        Some(p) => p,
        None => params.clone(),
    };
    Ok(TrainOutcome {
        best: best_params,
        last: params,
        best_score: best.score,
        best_epoch: best.epoch,
        adam,
    })
}
