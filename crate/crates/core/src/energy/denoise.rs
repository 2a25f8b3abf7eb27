use crate::autodiff::Var;
use crate::energy::{glorot, EnergyModel, Space};
use crate::error::{Result, SpenError};
use crate::params::{Graph, ParamSet};
use crate::tensor::Tensor;
use crate::SpenRng;

/// ℓ1 field-of-experts prior: `Σ_k Σ_pixels SoftAbs(f_k ∗ y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FoePrior {
    pub filters: usize,
    pub kernel: usize,
    /// SoftAbs temperature.
    pub temperature: f64,
}

impl Default for FoePrior {
    fn default() -> Self {
        FoePrior {
            filters: 32,
            kernel: 7,
            temperature: 25.0,
        }
    }
}

impl FoePrior {
    pub const FILTERS: &'static str = "foe.filters";

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut SpenRng) {
        let kk = self.kernel * self.kernel;
        params.insert(
            Self::FILTERS,
            glorot(
                &[self.filters, 1, self.kernel, self.kernel],
                kk,
                self.filters * kk,
                rng,
            ),
        );
    }

    pub fn energy(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let f = g.param(Self::FILTERS)?;
        let resp = g.tape.conv2d(y, f, None)?;
        let a = g.tape.softabs(resp, self.temperature)?;
        Ok(g.tape.sum(a))
    }
}

/// Convolutional prior: `conv(k×k×C) → softplus → conv(k×k×C) → softplus →
/// conv(1×1×1) → spatial average pool`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepPrior {
    pub channels: usize,
    pub kernel: usize,
    /// Temperature of the hidden softplus nonlinearities.
    pub temperature: f64,
}

impl Default for DeepPrior {
    fn default() -> Self {
        DeepPrior {
            channels: 32,
            kernel: 7,
            temperature: 1.0,
        }
    }
}

impl DeepPrior {
    pub const CONV1_K: &'static str = "dp.conv1.k";
    pub const CONV1_B: &'static str = "dp.conv1.b";
    pub const CONV2_K: &'static str = "dp.conv2.k";
    pub const CONV2_B: &'static str = "dp.conv2.b";
    pub const CONV3_K: &'static str = "dp.conv3.k";
    pub const CONV3_B: &'static str = "dp.conv3.b";

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut SpenRng) {
        let (c, k) = (self.channels, self.kernel);
        let kk = k * k;
        params.insert(Self::CONV1_K, glorot(&[c, 1, k, k], kk, c * kk, rng));
        params.insert(Self::CONV1_B, Tensor::zeros(&[c]));
        params.insert(Self::CONV2_K, glorot(&[c, c, k, k], c * kk, c * kk, rng));
        params.insert(Self::CONV2_B, Tensor::zeros(&[c]));
        params.insert(Self::CONV3_K, glorot(&[1, c, 1, 1], c, 1, rng));
        params.insert(Self::CONV3_B, Tensor::zeros(&[1]));
    }

    pub fn energy(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let s = g.tape.shape(y).to_vec();
        if s.len() != 3 || s[1] < self.kernel || s[2] < self.kernel {
            return Err(SpenError::dim(
                "deep_prior",
                format!(
                    "image {s:?} is smaller than the {k}×{k} kernel",
                    k = self.kernel
                ),
            ));
        }
        let mut h = y;
        for (k, b) in [
            (Self::CONV1_K, Self::CONV1_B),
            (Self::CONV2_K, Self::CONV2_B),
        ] {
            let (kv, bv) = (g.param(k)?, g.param(b)?);
            h = g.tape.conv2d(h, kv, Some(bv))?;
            h = g.tape.softplus(h, self.temperature)?;
        }
        let (kv, bv) = (g.param(Self::CONV3_K)?, g.param(Self::CONV3_B)?);
        let out = g.tape.conv2d(h, kv, Some(bv))?;
        g.tape.spatial_avg_pool(out)
    }

    pub fn kernel_names() -> Vec<String> {
        vec![
            Self::CONV1_K.into(),
            Self::CONV2_K.into(),
            Self::CONV3_K.into(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    Foe(FoePrior),
    Deep(DeepPrior),
    /// Identically zero; reduces the energy to the data term.
    Zero,
}

/// MAP denoising energy `‖y − x‖² + 2σ² · prior(y)` with a trainable noise
/// variance `σ² = softplus(ρ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingEnergy {
    pub prior: Prior,
    /// Initial value of σ².
    pub noise_variance_init: f64,
}

impl DenoisingEnergy {
    pub const SIGMA_RHO: &'static str = "denoise.sigma_rho";

    pub fn new(prior: Prior, noise_variance_init: f64) -> Result<Self> {
        if !(noise_variance_init > 0.0 && noise_variance_init.is_finite()) {
            return Err(SpenError::Config(format!(
                "noise variance must be positive, got {noise_variance_init}"
            )));
        }
        Ok(DenoisingEnergy {
            prior,
            noise_variance_init,
        })
    }

    /// Realized σ² for a parameter set.
    pub fn noise_variance(params: &ParamSet) -> Result<f64> {
        Ok(crate::autodiff::softplus(
            params.get(Self::SIGMA_RHO)?.item(),
            1.0,
        ))
    }

    pub fn prior_energy(&self, g: &mut Graph, y: Var) -> Result<Option<Var>> {
        match &self.prior {
            Prior::Foe(p) => p.energy(g, y).map(Some),
            Prior::Deep(p) => p.energy(g, y).map(Some),
            Prior::Zero => Ok(None),
        }
    }
}

impl EnergyModel for DenoisingEnergy {
    type Input = Tensor;

    fn space(&self) -> Space {
        Space::Box
    }

    fn output_shape(&self, x: &Tensor) -> Vec<usize> {
        x.shape().to_vec()
    }

    fn init_params(&self, params: &mut ParamSet, rng: &mut SpenRng) {
        params.insert(
            Self::SIGMA_RHO,
            Tensor::scalar(crate::minimizer::inverse_softplus(self.noise_variance_init)),
        );
        match &self.prior {
            Prior::Foe(p) => p.init_params(params, rng),
            Prior::Deep(p) => p.init_params(params, rng),
            Prior::Zero => {}
        }
    }

    fn global_term(&self, g: &mut Graph, y: Var, _x: &Tensor) -> Result<Option<Var>> {
        let Some(prior) = self.prior_energy(g, y)? else {
            return Ok(None);
        };
        let rho = g.param(Self::SIGMA_RHO)?;
        let sigma2 = g.tape.softplus(rho, 1.0)?;
        let scaled = g.tape.scale(prior, 2.0);
        g.tape.mul_scalar(scaled, sigma2).map(Some)
    }

    fn local_terms(&self, g: &mut Graph, y: Var, x: &Tensor) -> Result<Option<Var>> {
        let r = g.tape.sub_const(y, x)?;
        let sq = g.tape.square(r);
        Ok(Some(g.tape.sum(sq)))
    }

    fn init(&self, g: &mut Graph, x: &Tensor) -> Result<Var> {
        Ok(g.tape.constant(x.clone()))
    }

    fn local_param_names(&self) -> Vec<String> {
        Vec::new()
    }

    fn icnn_param_names(&self) -> Vec<String> {
        match &self.prior {
            Prior::Foe(_) => vec![FoePrior::FILTERS.into()],
            Prior::Deep(_) => DeepPrior::kernel_names(),
            Prior::Zero => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_gradient;
    use crate::energy::{icnn_project, EnergySpec};
    use crate::tensor::relative_error;
    use rand::SeedableRng;

    fn rng() -> SpenRng {
        SpenRng::seed_from_u64(3)
    }

    fn foe_value(prior: &FoePrior, params: &ParamSet, y: &Tensor) -> f64 {
        let mut g = Graph::new(params, false);
        let yv = g.tape.constant(y.clone());
        let e = prior.energy(&mut g, yv).unwrap();
        g.tape.value(e).item()
    }

    #[test]
    fn foe_zero_image() {
        let prior = FoePrior {
            filters: 3,
            kernel: 3,
            temperature: 25.0,
        };
        let mut ps = ParamSet::new();
        prior.init_params(&mut ps, &mut rng());
        let e = foe_value(&prior, &ps, &Tensor::zeros(&[1, 4, 5]));
        let expect = 4.0 * 5.0 * 3.0 * 2f64.ln() / 25.0;
        assert!((e - expect).abs() < 1e-12, "{e} vs {expect}");
    }

    #[test]
    fn foe_single_pixel_unit_filter() {
        let prior = FoePrior {
            filters: 1,
            kernel: 1,
            temperature: 25.0,
        };
        let mut ps = ParamSet::new();
        ps.insert(FoePrior::FILTERS, Tensor::ones(&[1, 1, 1, 1]));
        let e0 = foe_value(&prior, &ps, &Tensor::zeros(&[1, 1, 1]));
        assert!((e0 - 0.027_725_887_222_397_81).abs() < 1e-12);
        // The two half-weighted softplus branches approach |v| / 2.
        let e2 = foe_value(&prior, &ps, &Tensor::full(&[1, 1, 1], 2.0));
        assert!((e2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn denoising_zero_prior() {
        let spec = EnergySpec::new(DenoisingEnergy::new(Prior::Zero, 1.0).unwrap(), 0.0).unwrap();
        let mut ps = ParamSet::new();
        spec.model.init_params(&mut ps, &mut rng());
        let x = Tensor::uniform(&[1, 4, 4], 0.0, 1.0, &mut rng());
        assert_eq!(spec.energy_eval(&ps, &x, &x).unwrap(), 0.0);
        let y = x.map(|v| v + 0.25);
        let g = spec.energy_grad_y(&ps, &y, &x).unwrap();
        assert!(g.max_abs_diff(&y.sub(&x).scale(2.0)) < 1e-15);
    }

    #[test]
    fn deep_prior_constant_network() {
        let dp = DeepPrior {
            channels: 4,
            kernel: 3,
            temperature: 1.0,
        };
        let spec = EnergySpec::new(
            DenoisingEnergy::new(Prior::Deep(dp.clone()), 1.0).unwrap(),
            0.0,
        )
        .unwrap();
        let mut ps = ParamSet::new();
        spec.model.init_params(&mut ps, &mut rng());
        for name in ps.names().map(String::from).collect::<Vec<_>>() {
            if name.starts_with("dp.") {
                ps.get_mut(&name).unwrap().fill(0.0);
            }
        }
        let mut r = rng();
        let a = Tensor::uniform(&[1, 5, 5], 0.0, 1.0, &mut r);
        let b = Tensor::uniform(&[1, 5, 5], 0.0, 1.0, &mut r);
        let ev = |y: &Tensor| {
            let mut g = Graph::new(&ps, false);
            let yv = g.tape.var(y.clone());
            let e = dp.energy(&mut g, yv).unwrap();
            let v = g.tape.value(e).item();
            let grads = g.tape.backward(e).unwrap();
            (v, grads.get_or_zeros(yv, y))
        };
        let (va, ga) = ev(&a);
        let (vb, _) = ev(&b);
        assert_eq!(va, vb);
        assert_eq!(ga.norm_inf(), 0.0);
    }

    #[test]
    fn deep_prior_rejects_small_image() {
        let dp = DeepPrior::default();
        let mut ps = ParamSet::new();
        dp.init_params(&mut ps, &mut rng());
        let mut g = Graph::new(&ps, false);
        let y = g.tape.constant(Tensor::zeros(&[1, 6, 9]));
        assert!(matches!(
            dp.energy(&mut g, y),
            Err(SpenError::Dimension { .. })
        ));
    }

    #[test]
    fn foe_gradient_matches_fd() {
        let prior = FoePrior {
            filters: 2,
            kernel: 3,
            temperature: 25.0,
        };
        let spec =
            EnergySpec::new(DenoisingEnergy::new(Prior::Foe(prior), 0.5).unwrap(), 0.0).unwrap();
        let mut ps = ParamSet::new();
        let mut r = rng();
        spec.model.init_params(&mut ps, &mut r);
        let x = Tensor::uniform(&[1, 4, 4], 0.0, 1.0, &mut r);
        let y = Tensor::uniform(&[1, 4, 4], 0.0, 1.0, &mut r);
        let g = spec.energy_grad_y(&ps, &y, &x).unwrap();
        let fd = fd_gradient(|v| spec.energy_eval(&ps, v, &x).unwrap(), &y, 1e-5);
        assert!(relative_error(&g, &fd) < 1e-4);
    }

    #[test]
    fn icnn_deep_prior_is_midpoint_convex() {
        let dp = DeepPrior {
            channels: 3,
            kernel: 3,
            temperature: 1.0,
        };
        let model = DenoisingEnergy::new(Prior::Deep(dp), 1.0).unwrap();
        let mut ps = ParamSet::new();
        let mut r = rng();
        model.init_params(&mut ps, &mut r);
        icnn_project(&mut ps, &model.icnn_param_names()).unwrap();
        let spec = EnergySpec::new(model, 0.0).unwrap();
        let x = Tensor::uniform(&[1, 6, 6], 0.0, 1.0, &mut r);
        for _ in 0..20 {
            let a = Tensor::uniform(&[1, 6, 6], -1.0, 2.0, &mut r);
            let b = Tensor::uniform(&[1, 6, 6], -1.0, 2.0, &mut r);
            let t = 0.3;
            let mid = a.scale(t).add(&b.scale(1.0 - t));
            let em = spec.energy_eval(&ps, &mid, &x).unwrap();
            let ea = spec.energy_eval(&ps, &a, &x).unwrap();
            let eb = spec.energy_eval(&ps, &b, &x).unwrap();
            assert!(em <= t * ea + (1.0 - t) * eb + 1e-10);
        }
    }
}
