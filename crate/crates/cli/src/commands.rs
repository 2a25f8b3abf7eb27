use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use spen_core::autodiff::softmax_rows;
use spen_core::config::{ExperimentConfig, Method, Task};
use spen_core::energy::EnergyModel;
use spen_core::minimizer::round_output;
use spen_core::tasks::dataset::{save_denoise, save_tagging};
use spen_core::tasks::denoise::{input_psnr, psnr};
use spen_core::tasks::pgm::write_pgm;
use spen_core::tasks::tagging::{pooled_metrics, TagExample, TagGenerator, TagMetrics};
use spen_core::trainer::gradcheck::{
    energy_gradient_error, hvp_error, sampled_unroll_gradient_errors, worst,
};
use spen_core::trainer::{ssvm_train, HvpConfig, MetricsLog, ScoreFn, TrainOutcome};
use spen_core::{spnt, Example, LossConfig, ParamSet, Space, Spen, SpenRng, Tensor};

use crate::checkpoint::Checkpoint;
use crate::data::{self, TaskData};
use crate::outputs::Outputs;
use crate::{CliError, CliResult};

/// Write the configured dataset to `out`, or to `[paths] data`.
pub fn gen_data(cfg: &ExperimentConfig, out: Option<&Path>) -> CliResult<PathBuf> {
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None if !cfg.paths.data.is_empty() => PathBuf::from(&cfg.paths.data),
        None => {
            return Err(CliError::Usage(
                "no output directory: pass --out or set [paths] data".into(),
            ))
        }
    };
    let guard = Outputs::new(&dir)?;
    match cfg.task {
        Task::Denoise => {
            let spec = cfg.denoise_data();
            save_denoise(&dir, &spec, &spec.generate()?)?;
        }
        Task::Tagging => {
            let spec = cfg.tagging_data();
            save_tagging(&dir, &spec, &spec.generate()?)?;
        }
    }
    guard.commit();
    Ok(dir)
}

fn run_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .unwrap_or_else(|| Path::new(&cfg.paths.out).join(&cfg.name))
}

fn psnr_score(pred: &Tensor, truth: &Tensor) -> spen_core::Result<f64> {
    psnr(&pred.clamp(0.0, 1.0), truth)
}

fn accuracy_score(space: Space) -> impl Fn(&Tensor, &Tensor) -> spen_core::Result<f64> + Sync {
    move |pred, truth| {
        let p = round_output(pred, space)?;
        let g = round_output(truth, space)?;
        Ok(p.iter().zip(&g).filter(|(a, b)| a == b).count() as f64 / g.len().max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub best_epoch: usize,
    pub best_dev_score: f64,
    pub test_score: f64,
}

/// Train, then write `best.spnt`, `last.spnt` (each with a `.txt`
/// manifest), `metrics.csv` and `config.txt` into the run directory.
pub fn train(cfg: &ExperimentConfig, out: Option<&Path>) -> CliResult<TrainSummary> {
    cfg.validate()?;
    let data = data::load(cfg)?;
    let mut guard = Outputs::new(&run_dir(cfg, out))?;
    let summary = match data {
        TaskData::Denoise(d) => {
            let spen = cfg.denoise_spen()?;
            let ex = |s: &[_]| data::denoise_examples(s);
            fit(
                cfg,
                &spen,
                &ex(&d.train),
                &ex(&d.dev),
                &ex(&d.test),
                &psnr_score,
                &mut guard,
            )?
        }
        TaskData::Tagging(d) => {
            let spen = cfg.tagging_spen()?;
            let ex = |s: &[TagExample]| data::tagging_examples(s, cfg.data.labels);
            let score = accuracy_score(spen.model().space());
            fit(
                cfg,
                &spen,
                &ex(&d.train),
                &ex(&d.dev),
                &ex(&d.test),
                &score,
                &mut guard,
            )?
        }
    };
    guard.commit();
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn fit<M: EnergyModel>(
    cfg: &ExperimentConfig,
    spen: &Spen<M>,
    train_set: &[Example<M::Input>],
    dev_set: &[Example<M::Input>],
    test_set: &[Example<M::Input>],
    score: &ScoreFn<'_>,
    out: &mut Outputs,
) -> CliResult<TrainSummary> {
    let params = spen.init_params(&mut SpenRng::seed_from_u64(cfg.seed));
    std::fs::write(out.path("config.txt"), cfg.to_text())?;
    let mut log = MetricsLog::to_file(&out.path("metrics.csv"))?;
    let lc = &cfg.loss;
    let outcome: TrainOutcome = match cfg.method {
        Method::EndToEnd => spen_core::train(
            spen,
            params,
            train_set,
            dev_set,
            lc,
            &cfg.trainer,
            score,
            &mut log,
        )?,
        Method::Ssvm => ssvm_train(
            spen,
            params,
            train_set,
            dev_set,
            lc,
            &cfg.trainer,
            score,
            &mut log,
        )?,
    };
    let hash = cfg.hash();
    let epochs = log.rows.iter().map(|r| r.epoch).max().unwrap_or(0);
    let last_dev = log
        .rows
        .iter()
        .rev()
        .find(|r| r.split == "dev")
        .map_or(f64::NAN, |r| r.metric);
    for (name, params, epoch, dev) in [
        (
            "best",
            &outcome.best,
            outcome.best_epoch,
            outcome.best_score,
        ),
        ("last", &outcome.last, epochs, last_dev),
    ] {
        let path = out.path(&format!("{name}.spnt"));
        out.path(&format!("{name}.txt"));
        Checkpoint::new(params, &hash, epoch, dev).save(&path)?;
    }
    let (_, test_score) = spen_core::trainer::evaluate(spen, &outcome.best, test_set, lc, score)?;
    Ok(TrainSummary {
        dir: out.dir().to_path_buf(),
        best_epoch: outcome.best_epoch,
        best_dev_score: outcome.best_score,
        test_score,
    })
}

fn restore<M: EnergyModel>(
    cfg: &ExperimentConfig,
    spen: &Spen<M>,
    checkpoint: &Path,
) -> CliResult<ParamSet> {
    if !checkpoint.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let ck = Checkpoint::load(checkpoint)?;
    if ck.config_hash != cfg.hash() {
        log::warn!(
            "checkpoint was trained with a different config (hash {})",
            ck.config_hash
        );
    }
    let mut params = spen.init_params(&mut SpenRng::seed_from_u64(cfg.seed));
    ck.apply(&mut params)?;
    Ok(params)
}

#[derive(Clone, Debug)]
pub struct PredictOptions {
    pub checkpoint: PathBuf,
    pub split: String,
    pub out: PathBuf,
    pub dump_trajectory: bool,
}

/// Predict a split. Writes `predictions.spnt` with one tensor per example,
/// plus PGM images (denoising) or `labels.txt` (tagging), and with
/// `dump_trajectory` every iterate and energy in `trajectory.spnt`.
pub fn predict(cfg: &ExperimentConfig, opts: &PredictOptions) -> CliResult<PathBuf> {
    cfg.validate()?;
    let data = data::load(cfg)?;
    let mut guard = Outputs::new(&opts.out)?;
    match data {
        TaskData::Denoise(d) => {
            let spen = cfg.denoise_spen()?;
            let params = restore(cfg, &spen, &opts.checkpoint)?;
            let inputs: Vec<&Tensor> = d.get(&opts.split)?.iter().map(|e| &e.noisy).collect();
            let preds = predict_all(&spen, &params, &inputs, opts.dump_trajectory, &mut guard)?;
            for (i, p) in preds.iter().enumerate() {
                write_pgm(guard.path(&format!("{i:05}.pgm")), p, 65535)?;
            }
        }
        TaskData::Tagging(d) => {
            let spen = cfg.tagging_spen()?;
            let params = restore(cfg, &spen, &opts.checkpoint)?;
            let inputs: Vec<_> = d.get(&opts.split)?.iter().map(|e| &e.features).collect();
            let preds = predict_all(&spen, &params, &inputs, opts.dump_trajectory, &mut guard)?;
            let mut text = String::new();
            for p in &preds {
                let labels = round_output(p, spen.model().space())?;
                let row: Vec<String> = labels.iter().map(usize::to_string).collect();
                text.push_str(&row.join(" "));
                text.push('\n');
            }
            std::fs::write(guard.path("labels.txt"), text)?;
        }
    }
    guard.commit();
    Ok(opts.out.clone())
}

fn predict_all<M: EnergyModel>(
    spen: &Spen<M>,
    params: &ParamSet,
    inputs: &[&M::Input],
    dump: bool,
    out: &mut Outputs,
) -> CliResult<Vec<Tensor>> {
    let mut preds = Vec::with_capacity(inputs.len());
    let mut traj: Vec<(String, Tensor)> = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let tr = spen.predict(params, x)?;
        if dump {
            for (t, y) in tr.iterates.iter().enumerate() {
                traj.push((format!("{i:05}.y{t:03}"), y.clone()));
            }
            traj.push((
                format!("{i:05}.energy"),
                Tensor::vector(tr.energies.clone()),
            ));
            traj.push((
                format!("{i:05}.converged_at"),
                Tensor::scalar(tr.converged_at as f64),
            ));
        }
        preds.push(tr.output().clone());
    }
    let names: Vec<String> = (0..preds.len()).map(|i| format!("{i:05}")).collect();
    spnt::write_file(
        &out.path("predictions.spnt"),
        names.iter().map(String::as_str).zip(preds.iter()),
    )?;
    if dump {
        spnt::write_file(
            &out.path("trajectory.spnt"),
            traj.iter().map(|(n, t)| (n.as_str(), t)),
        )?;
    }
    Ok(preds)
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalReport {
    Denoise {
        split: String,
        psnr: f64,
        input_psnr: f64,
    },
    Tagging {
        split: String,
        metrics: TagMetrics,
    },
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalReport::Denoise {
                split,
                psnr,
                input_psnr,
            } => {
                write!(
                    f,
                    "{split}: psnr {psnr:.4} dB (noisy input {input_psnr:.4} dB)"
                )
            }
            EvalReport::Tagging { split, metrics } => write!(
                f,
                "{split}: accuracy {:.4}, count violation rate {:.4}",
                metrics.accuracy, metrics.violation
            ),
        }
    }
}

/// Where the predictions to score come from.
#[derive(Clone, Debug)]
pub enum EvalSource {
    Checkpoint(PathBuf),
    /// A `predictions.spnt` written by [`predict`].
    Predictions(PathBuf),
}

pub fn eval(cfg: &ExperimentConfig, source: &EvalSource, split: &str) -> CliResult<EvalReport> {
    cfg.validate()?;
    let data = data::load(cfg)?;
    match data {
        TaskData::Denoise(d) => {
            let part = d.get(split)?;
            let inputs: Vec<&Tensor> = part.iter().map(|e| &e.noisy).collect();
            let preds = match source {
                EvalSource::Checkpoint(p) => {
                    let spen = cfg.denoise_spen()?;
                    let params = restore(cfg, &spen, p)?;
                    run_model(&spen, &params, &inputs)?
                }
                EvalSource::Predictions(p) => read_predictions(p, part.len())?,
            };
            let mut total = 0.0;
            for (p, e) in preds.iter().zip(part) {
                total += psnr_score(p, &e.clean)?;
            }
            Ok(EvalReport::Denoise {
                split: split.to_string(),
                psnr: total / part.len().max(1) as f64,
                input_psnr: input_psnr(part)?,
            })
        }
        TaskData::Tagging(d) => {
            let part = d.get(split)?;
            let space = cfg.space();
            let preds = match source {
                EvalSource::Checkpoint(p) => {
                    let spen = cfg.tagging_spen()?;
                    let params = restore(cfg, &spen, p)?;
                    let inputs: Vec<_> = part.iter().map(|e| &e.features).collect();
                    run_model(&spen, &params, &inputs)?
                }
                EvalSource::Predictions(p) => read_predictions(p, part.len())?,
            };
            let labels = preds
                .iter()
                .map(|p| round_output(p, space))
                .collect::<spen_core::Result<Vec<_>>>()?;
            let metrics = pooled_metrics(labels.iter().map(Vec::as_slice).zip(part))?;
            Ok(EvalReport::Tagging {
                split: split.to_string(),
                metrics,
            })
        }
    }
}

fn run_model<M: EnergyModel>(
    spen: &Spen<M>,
    params: &ParamSet,
    inputs: &[&M::Input],
) -> CliResult<Vec<Tensor>> {
    inputs
        .iter()
        .map(|x| Ok(spen.predict(params, x)?.output().clone()))
        .collect()
}

fn read_predictions(path: &Path, n: usize) -> CliResult<Vec<Tensor>> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "predictions file {} does not exist",
            path.display()
        )));
    }
    let tensors = spnt::read_file(path)?;
    (0..n)
        .map(|i| Ok(spnt::find(&tensors, &format!("{i:05}"))?.clone()))
        .collect()
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Bound on the HVP and unrolled-gradient errors.
    pub tolerance: f64,
    /// Bound on the energy-gradient error.
    pub energy_tolerance: f64,
    /// Coordinates per parameter tensor compared by finite differences.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            tolerance: 1e-3,
            energy_tolerance: 1e-4,
            max_coords: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// `(check, relative error)` rows.
    pub rows: Vec<(String, f64)>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        worst(&self.rows)
    }
}

/// Finite-difference checks of the configured model on a small instance:
/// the energy gradient, the Hessian-vector product and the gradients of
/// the unrolled loss for every parameter.
pub fn gradcheck(cfg: &ExperimentConfig, opts: &GradcheckOptions) -> CliResult<GradcheckReport> {
    cfg.validate()?;
    let mut small = cfg.clone();
    small.unroll.steps = cfg.unroll.steps.min(3);
    small.unroll.tolerance = 1e-14;
    if let spen_core::LossWeights::Custom(_) = small.loss.weights {
        small.loss.weights = spen_core::LossWeights::AvgWeighted;
    }
    let mut rng = SpenRng::seed_from_u64(opts.seed);
    match cfg.task {
        Task::Denoise => {
            let spen = small.denoise_spen()?;
            let side = if matches!(cfg.energy.kind, spen_core::config::EnergyKind::DeepPrior) {
                cfg.energy.kernel.max(4)
            } else {
                4
            };
            let target = Tensor::uniform(&[1, side, side], 0.2, 0.8, &mut rng);
            let noise = Tensor::uniform(&[1, side, side], -0.2, 0.2, &mut rng);
            let x = target.add(&noise);
            let y = Tensor::uniform(&[1, side, side], 0.0, 1.0, &mut rng);
            run_checks(&small, &spen, &x, &target, &y, opts, &mut rng)
        }
        Task::Tagging => {
            let spen = small.tagging_spen()?;
            let labels = cfg.data.labels;
            let generator = TagGenerator::new(2, 3, labels, cfg.data.dim, opts.seed)?;
            let ex = generator.example(&mut rng)?;
            let y = softmax_rows(&Tensor::uniform(&[2, 3, labels], -1.0, 1.0, &mut rng));
            let target = ex.gold_tensor(labels);
            run_checks(&small, &spen, &ex.features, &target, &y, opts, &mut rng)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_checks<M: EnergyModel>(
    cfg: &ExperimentConfig,
    spen: &Spen<M>,
    x: &M::Input,
    target: &Tensor,
    y: &Tensor,
    opts: &GradcheckOptions,
    rng: &mut SpenRng,
) -> CliResult<GradcheckReport> {
    let params = spen.init_params(rng);
    let lc: &LossConfig = &cfg.loss;
    let e = energy_gradient_error(&spen.energy, &params, y, x, 1e-6)?;
    let v = Tensor::uniform(y.shape(), -1.0, 1.0, rng);
    let h = hvp_error(&spen.energy, &params, y, x, &v, &HvpConfig::default(), 1e-4)?;
    let unroll = sampled_unroll_gradient_errors(
        spen,
        &params,
        x,
        target,
        lc,
        &cfg.trainer.backprop,
        1e-5,
        opts.max_coords,
        rng,
    )?;
    let mut rows = vec![("energy-gradient".to_string(), e), ("hvp".to_string(), h)];
    let passed =
        e <= opts.energy_tolerance && h <= opts.tolerance && worst(&unroll) <= opts.tolerance;
    rows.extend(
        unroll
            .into_iter()
            .map(|(n, err)| (format!("unroll {n}"), err)),
    );
    Ok(GradcheckReport { rows, passed })
}
