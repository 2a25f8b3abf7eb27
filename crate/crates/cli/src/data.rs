use std::path::Path;

use spen_core::config::{ExperimentConfig, Task};
use spen_core::energy::TagFeatures;
use spen_core::tasks::dataset::{dataset_task, load_denoise, load_tagging, Splits};
use spen_core::tasks::denoise::DenoiseExample;
use spen_core::tasks::tagging::TagExample;
use spen_core::{Example, Tensor};

use crate::{CliError, CliResult};

pub(crate) enum TaskData {
    Denoise(Splits<DenoiseExample>),
    Tagging(Splits<TagExample>),
}

/// Load the configured dataset directory, or generate the data in memory
/// when no directory is set.
pub(crate) fn load(cfg: &ExperimentConfig) -> CliResult<TaskData> {
    if cfg.paths.data.is_empty() {
        return Ok(match cfg.task {
            Task::Denoise => TaskData::Denoise(cfg.denoise_data().generate()?),
            Task::Tagging => TaskData::Tagging(cfg.tagging_data().generate()?),
        });
    }
    let dir = Path::new(&cfg.paths.data);
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "data directory {} does not exist",
            dir.display()
        )));
    }
    let task = dataset_task(dir)?;
    if task != cfg.task.to_string() {
        return Err(CliError::Usage(format!(
            "data directory holds a `{task}` dataset but the config task is `{}`",
            cfg.task
        )));
    }
    Ok(match cfg.task {
        Task::Denoise => TaskData::Denoise(load_denoise(dir)?.1),
        Task::Tagging => TaskData::Tagging(load_tagging(dir)?.1),
    })
}

pub(crate) fn denoise_examples(data: &[DenoiseExample]) -> Vec<Example<Tensor>> {
    data.iter()
        .map(|e| Example {
            input: e.noisy.clone(),
            target: e.clean.clone(),
        })
        .collect()
}

pub(crate) fn tagging_examples(data: &[TagExample], labels: usize) -> Vec<Example<TagFeatures>> {
    data.iter()
        .map(|e| Example {
            input: e.features.clone(),
            target: e.gold_tensor(labels),
        })
        .collect()
}
