//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use spen_core::config::ExperimentConfig;
use spen_core::energy::{DenoisingEnergy, TagFeatures, TaggingEnergy};
use spen_core::{LossConfig, ParamSet, Result, Spen, SpenRng, Tensor};

pub struct Fixture<M: spen_core::EnergyModel> {
    pub spen: Spen<M>,
    pub params: ParamSet,
    pub input: M::Input,
    pub target: Tensor,
    pub loss: LossConfig,
}

/// A preset on one `side`×`side` noisy image.
pub fn denoise(preset: &str, side: usize) -> Result<Fixture<DenoisingEnergy>> {
    let mut cfg = ExperimentConfig::preset(preset)?;
    cfg.data.train = 1;
    cfg.data.dev = 1;
    cfg.data.test = 1;
    cfg.data.height = side;
    cfg.data.width = side;
    let spen = cfg.denoise_spen()?;
    let params = spen.init_params(&mut SpenRng::seed_from_u64(cfg.seed));
    let ex = cfg.denoise_data().generate()?.train.remove(0);
    Ok(Fixture {
        spen,
        params,
        input: ex.noisy,
        target: ex.clean,
        loss: cfg.loss,
    })
}

/// A tagging preset on one generated example.
pub fn tagging(preset: &str) -> Result<Fixture<TaggingEnergy>> {
    let cfg = ExperimentConfig::preset(preset)?;
    let spen = cfg.tagging_spen()?;
    let params = spen.init_params(&mut SpenRng::seed_from_u64(cfg.seed));
    let ex = cfg.tagging_data().generate()?.train.remove(0);
    let target = ex.gold_tensor(cfg.data.labels);
    let input: TagFeatures = ex.features;
    Ok(Fixture {
        spen,
        params,
        input,
        target,
        loss: cfg.loss,
    })
}
