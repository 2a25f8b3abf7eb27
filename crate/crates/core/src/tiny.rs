//! Small problem instances for gradient oracles and smoke runs.

use rand::SeedableRng;

use crate::energy::{
    DeepPrior, DenoisingEnergy, EnergySpec, FoePrior, Prior, TagFeatures, TaggingEnergy,
};
use crate::error::Result;
use crate::minimizer::{Rule, Spen, UnrollConfig};
use crate::params::ParamSet;
use crate::tasks::tagging::TagGenerator;
use crate::tensor::Tensor;
use crate::SpenRng;

/// A model, parameters and one supervised example.
pub struct Instance<M: crate::EnergyModel> {
    pub spen: Spen<M>,
    pub params: ParamSet,
    pub input: M::Input,
    pub target: Tensor,
}

/// Unroll settings for oracle runs: learned steps, no early stop.
pub fn oracle_unroll(rule: Rule, steps: usize, step_size: f64) -> UnrollConfig {
    UnrollConfig {
        steps,
        rule,
        step_size,
        learn_step_sizes: true,
        momentum: if rule == Rule::Momentum { 0.5 } else { 0.0 },
        tolerance: 1e-14,
    }
}

/// 4×4 denoising with a field-of-experts prior of `filters` 3×3 filters.
pub fn foe(
    rule: Rule,
    steps: usize,
    filters: usize,
    seed: u64,
) -> Result<Instance<DenoisingEnergy>> {
    let prior = Prior::Foe(FoePrior {
        filters,
        kernel: 3,
        temperature: 25.0,
    });
    denoise(prior, rule, steps, seed)
}

/// 4×4 denoising with a two-channel, 3×3 deep prior.
pub fn deep(rule: Rule, steps: usize, seed: u64) -> Result<Instance<DenoisingEnergy>> {
    let prior = Prior::Deep(DeepPrior {
        channels: 2,
        kernel: 3,
        temperature: 1.0,
    });
    denoise(prior, rule, steps, seed)
}

fn denoise(prior: Prior, rule: Rule, steps: usize, seed: u64) -> Result<Instance<DenoisingEnergy>> {
    let mut rng = SpenRng::seed_from_u64(seed);
    let model = DenoisingEnergy::new(prior, 0.3)?;
    let spen = Spen::new(
        EnergySpec::new(model, 0.0)?,
        oracle_unroll(rule, steps, 0.1),
    )?;
    let params = spen.init_params(&mut rng);
    let target = Tensor::uniform(&[1, 4, 4], 0.2, 0.8, &mut rng);
    let input = target.zip_map(&Tensor::uniform(&[1, 4, 4], -0.2, 0.2, &mut rng), |a, b| {
        a + b
    });
    Ok(Instance {
        spen,
        params,
        input,
        target,
    })
}

/// `P = 2` heads, `A = 3` items, `D = 4` labels with the global energy.
pub fn tagging(rule: Rule, steps: usize, seed: u64) -> Result<Instance<TaggingEnergy>> {
    let mut rng = SpenRng::seed_from_u64(seed);
    let dim = 4;
    let model = TaggingEnergy::new(4, dim, 5, true)?;
    let spen = Spen::new(
        EnergySpec::new(model, 0.5)?,
        oracle_unroll(rule, steps, 0.2),
    )?;
    let params = spen.init_params(&mut rng);
    let generator = TagGenerator::new(2, 3, 4, dim, seed)?;
    let ex = generator.example(&mut rng)?;
    let target = ex.gold_tensor(4);
    let input: TagFeatures = ex.features;
    Ok(Instance {
        spen,
        params,
        input,
        target,
    })
}
