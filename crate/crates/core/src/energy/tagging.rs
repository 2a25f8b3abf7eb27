//! Simplex-relaxed arc labeling: `y[p, a, :]` is a distribution over `D`
//! labels for the arc between head `p` and item `a`. Label 0 is the null
//! label ("no arc").

use crate::autodiff::Var;
use crate::energy::{glorot, EnergyModel, Mlp, Space};
use crate::error::{Result, SpenError};
use crate::params::{Graph, ParamSet};
use crate::tensor::Tensor;
use crate::SpenRng;

/// Dense features for one tagging instance.
#[derive(Clone, Debug, PartialEq)]
pub struct TagFeatures {
    /// Per-head features, `[P, F]`.
    pub heads: Tensor,
    /// Per-item features, `[A, F]`.
    pub items: Tensor,
    /// Per-arc features, `[P, A, F]`.
    pub arcs: Tensor,
}

impl TagFeatures {
    pub fn num_heads(&self) -> usize {
        self.heads.shape()[0]
    }

    pub fn num_items(&self) -> usize {
        self.items.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (hs, is, rs) = (self.heads.shape(), self.items.shape(), self.arcs.shape());
        if hs.len() != 2 || is.len() != 2 || rs.len() != 3 || rs[0] != hs[0] || rs[1] != is[0] {
            return Err(SpenError::dim(
                "tag_features",
                format!("heads {hs:?}, items {is:?}, arcs {rs:?} are inconsistent"),
            ));
        }
        Ok(())
    }
}

/// Five-term global energy over `y ∈ Δ_D^{P×A}`:
///
/// 1. per head, an MLP of `[mean_a z_p[a]·f_a ‖ f_p]`
/// 2. per head, an MLP of `[f_p ‖ w_p]`
/// 3. per head, `(c·f_p + b − Σ_a z_p[a])²`
/// 4. an MLP of `w_p` averaged over heads
/// 5. an MLP of `mean_{p,a} z_p[a]·f_r`
///
/// where `z_p[a]` is the non-null mass on arc `(p, a)` and `w_p[d]` the mass
/// of label `d` summed over head `p`'s arcs.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyGlobalEnergy {
    pub labels: usize,
    pub head_dim: usize,
    pub item_dim: usize,
    pub arc_dim: usize,
    pub hidden: usize,
}

impl ToyGlobalEnergy {
    pub const COUNT_W: &'static str = "global.t3.w";
    pub const COUNT_B: &'static str = "global.t3.b";

    fn mlps(&self) -> [Mlp; 4] {
        [
            Mlp::new("global.t1", self.item_dim + self.head_dim, self.hidden),
            Mlp::new("global.t2", self.head_dim + self.labels, self.hidden),
            Mlp::new("global.t4", self.labels, self.hidden),
            Mlp::new("global.t5", self.arc_dim, self.hidden),
        ]
    }

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut SpenRng) {
        for m in self.mlps() {
            m.init_params(params, rng);
        }
        params.insert(
            Self::COUNT_W,
            glorot(&[1, self.head_dim], self.head_dim, 1, rng),
        );
        params.insert(Self::COUNT_B, Tensor::zeros(&[1]));
    }

    pub fn mlp_second_layers(&self) -> Vec<String> {
        self.mlps().iter().map(Mlp::second_layer).collect()
    }

    /// Record the sum of the five terms for `y` of shape `[P, A, D]`.
    pub fn terms(&self, g: &mut Graph, y: Var, x: &TagFeatures) -> Result<Var> {
        let (p, a, d) = (x.num_heads(), x.num_items(), self.labels);
        let [mlp1, mlp2, mlp4, mlp5] = self.mlps();

        let heads = g.tape.constant(x.heads.clone());
        let items = g.tape.constant(x.items.clone());
        let arcs = g.tape.constant(x.arcs.reshape(&[p * a, self.arc_dim])?);

        let non_null = g.tape.narrow(y, 2, 1, d - 1)?;
        let z = g.tape.sum_axis(non_null, 2)?; // [P, A]
        let w = g.tape.sum_axis(y, 1)?; // [P, D]

        // 1: arguments attached to each head
        let za = g.tape.matmul(z, items)?;
        let za = g.tape.scale(za, 1.0 / a as f64);
        let in1 = g.tape.concat(za, heads)?;
        let t1 = mlp1.apply_sum(g, in1)?;

        // 2: label mass per head
        let in2 = g.tape.concat(heads, w)?;
        let t2 = mlp2.apply_sum(g, in2)?;

        // 3: predicted versus realized argument count
        let (cw, cb) = (g.param(Self::COUNT_W)?, g.param(Self::COUNT_B)?);
        let count = g.tape.linear(heads, cw, Some(cb))?;
        let count = g.tape.reshape(count, &[p])?;
        let mass = g.tape.sum_axis(z, 1)?;
        let diff = g.tape.sub(count, mass)?;
        let sq = g.tape.square(diff);
        let t3 = g.tape.sum(sq);

        // 4: label mass averaged over heads
        let wbar = g.tape.sum_axis(w, 0)?;
        let wbar = g.tape.scale(wbar, 1.0 / p as f64);
        let t4 = mlp4.apply_sum(g, wbar)?;

        // 5: arc features weighted by arc mass
        let s = g.tape.reshape(z, &[1, p * a])?;
        let sr = g.tape.matmul(s, arcs)?;
        let sr = g.tape.scale(sr, 1.0 / (p * a) as f64);
        let t5 = mlp5.apply_sum(g, sr)?;

        let mut total = g.tape.add(t1, t2)?;
        for t in [t3, t4, t5] {
            total = g.tape.add(total, t)?;
        }
        Ok(total)
    }
}

/// Linear local scores `s[p, a] = W f_r[p, a] + b` with local energy
/// `−Σ y ⊙ s`, plus an optional [`ToyGlobalEnergy`]. The local scores double
/// as the initial logits.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggingEnergy {
    pub labels: usize,
    pub arc_dim: usize,
    pub global: Option<ToyGlobalEnergy>,
}

impl TaggingEnergy {
    pub const LOCAL_W: &'static str = "local.w";
    pub const LOCAL_B: &'static str = "local.b";

    pub fn new(
        labels: usize,
        feature_dim: usize,
        hidden: usize,
        with_global: bool,
    ) -> Result<Self> {
        if labels < 2 {
            return Err(SpenError::Config(format!(
                "tagging needs at least 2 labels (one null), got {labels}"
            )));
        }
        Ok(TaggingEnergy {
            labels,
            arc_dim: feature_dim,
            global: with_global.then_some(ToyGlobalEnergy {
                labels,
                head_dim: feature_dim,
                item_dim: feature_dim,
                arc_dim: feature_dim,
                hidden,
            }),
        })
    }

    fn scores(&self, g: &mut Graph, x: &TagFeatures) -> Result<Var> {
        x.validate()?;
        let (p, a) = (x.num_heads(), x.num_items());
        let arcs = g.tape.constant(x.arcs.reshape(&[p * a, self.arc_dim])?);
        let (w, b) = (g.param(Self::LOCAL_W)?, g.param(Self::LOCAL_B)?);
        let s = g.tape.linear(arcs, w, Some(b))?;
        g.tape.reshape(s, &[p, a, self.labels])
    }
}

impl EnergyModel for TaggingEnergy {
    type Input = TagFeatures;

    fn space(&self) -> Space {
        Space::Simplex {
            labels: self.labels,
        }
    }

    fn output_shape(&self, x: &TagFeatures) -> Vec<usize> {
        vec![x.num_heads(), x.num_items(), self.labels]
    }

    fn init_params(&self, params: &mut ParamSet, rng: &mut SpenRng) {
        params.insert(
            Self::LOCAL_W,
            glorot(&[self.labels, self.arc_dim], self.arc_dim, self.labels, rng),
        );
        params.insert(Self::LOCAL_B, Tensor::zeros(&[self.labels]));
        if let Some(gl) = &self.global {
            gl.init_params(params, rng);
        }
    }

    fn global_term(&self, g: &mut Graph, y: Var, x: &TagFeatures) -> Result<Option<Var>> {
        match &self.global {
            Some(gl) => gl.terms(g, y, x).map(Some),
            None => Ok(None),
        }
    }

    fn local_terms(&self, g: &mut Graph, y: Var, x: &TagFeatures) -> Result<Option<Var>> {
        let s = self.scores(g, x)?;
        let ys = g.tape.mul(y, s)?;
        let total = g.tape.sum(ys);
        Ok(Some(g.tape.scale(total, -1.0)))
    }

    fn init(&self, g: &mut Graph, x: &TagFeatures) -> Result<Var> {
        self.scores(g, x)
    }

    fn local_param_names(&self) -> Vec<String> {
        vec![Self::LOCAL_B.into(), Self::LOCAL_W.into()]
    }

    fn icnn_param_names(&self) -> Vec<String> {
        self.global
            .as_ref()
            .map(ToyGlobalEnergy::mlp_second_layers)
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_gradient, softmax_rows};
    use crate::energy::EnergySpec;
    use crate::tensor::relative_error;
    use rand::SeedableRng;

    fn features(p: usize, a: usize, f: usize, rng: &mut SpenRng) -> TagFeatures {
        TagFeatures {
            heads: Tensor::uniform(&[p, f], -1.0, 1.0, rng),
            items: Tensor::uniform(&[a, f], -1.0, 1.0, rng),
            arcs: Tensor::uniform(&[p, a, f], -1.0, 1.0, rng),
        }
    }

    fn global_only_value(e: &ToyGlobalEnergy, ps: &ParamSet, y: &Tensor, x: &TagFeatures) -> f64 {
        let mut g = Graph::new(ps, false);
        let yv = g.tape.constant(y.clone());
        let t = e.terms(&mut g, yv, x).unwrap();
        g.tape.value(t).item()
    }

    #[test]
    fn zero_mlps_leave_only_count_term() {
        let mut rng = SpenRng::seed_from_u64(1);
        let x = features(2, 3, 4, &mut rng);
        let e = ToyGlobalEnergy {
            labels: 4,
            head_dim: 4,
            item_dim: 4,
            arc_dim: 4,
            hidden: 50,
        };
        let mut ps = ParamSet::new();
        e.init_params(&mut ps, &mut rng);
        let names: Vec<String> = ps
            .names()
            .filter(|n| !n.starts_with("global.t3"))
            .map(String::from)
            .collect();
        for n in names {
            ps.get_mut(&n).unwrap().fill(0.0);
        }
        let y = softmax_rows(&Tensor::uniform(&[2, 3, 4], -2.0, 2.0, &mut rng));
        // Term 3 by hand.
        let mut expect = 0.0;
        for p in 0..2 {
            let c: f64 = (0..4)
                .map(|k| {
                    ps.get(ToyGlobalEnergy::COUNT_W).unwrap().data()[k] * x.heads.data()[p * 4 + k]
                })
                .sum();
            let mass: f64 = (0..3)
                .map(|a| (1..4).map(|d| y.data()[(p * 3 + a) * 4 + d]).sum::<f64>())
                .sum();
            expect += (c - mass) * (c - mass);
        }
        let got = global_only_value(&e, &ps, &y, &x);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");

        // Matched count predictor contributes nothing. With a zero weight the
        // bias is shared, so give both heads the same arc distribution.
        let mut ps2 = ps.clone();
        ps2.get_mut(ToyGlobalEnergy::COUNT_W).unwrap().fill(0.0);
        let y_same = {
            let mut t = y.clone();
            let (first, rest) = t.data_mut().split_at_mut(12);
            rest.copy_from_slice(first);
            t
        };
        let mass: f64 = (0..3)
            .map(|a| (1..4).map(|d| y_same.data()[a * 4 + d]).sum::<f64>())
            .sum();
        ps2.get_mut(ToyGlobalEnergy::COUNT_B).unwrap().fill(mass);
        assert!(global_only_value(&e, &ps2, &y_same, &x).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_fd() {
        let mut rng = SpenRng::seed_from_u64(2);
        let x = features(2, 3, 4, &mut rng);
        let spec = EnergySpec::new(TaggingEnergy::new(4, 4, 50, true).unwrap(), 0.1).unwrap();
        let mut ps = ParamSet::new();
        spec.model.init_params(&mut ps, &mut rng);
        let y = softmax_rows(&Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng));
        let g = spec.energy_grad_y(&ps, &y, &x).unwrap();
        // Evaluate off-simplex through the raw graph for the oracle.
        let raw = |v: &Tensor| {
            let mut gr = Graph::new(&ps, false);
            let yv = gr.tape.constant(v.clone());
            let e = spec.build(&mut gr, yv, &x).unwrap();
            gr.tape.value(e).item()
        };
        let fd = fd_gradient(raw, &y, 1e-5);
        assert!(
            relative_error(&g, &fd) < 1e-4,
            "{}",
            relative_error(&g, &fd)
        );
    }

    #[test]
    fn entropy_of_uniform_rows() {
        let mut rng = SpenRng::seed_from_u64(3);
        let x = features(1, 2, 3, &mut rng);
        let lam = 0.3;
        let spec = EnergySpec::new(TaggingEnergy::new(4, 3, 8, false).unwrap(), lam).unwrap();
        let mut ps = ParamSet::new();
        spec.model.init_params(&mut ps, &mut rng);
        ps.get_mut(TaggingEnergy::LOCAL_W).unwrap().fill(0.0);
        let y = Tensor::full(&[1, 2, 4], 0.25);
        let e = spec.energy_eval(&ps, &y, &x).unwrap();
        assert!((e - 2.0 * (-lam * 4f64.ln())).abs() < 1e-12);
        let g = spec.energy_grad_y(&ps, &y, &x).unwrap();
        let expect = lam * ((0.25f64).ln() + 1.0);
        assert!(g.data().iter().all(|v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn off_simplex_is_contract_error() {
        let mut rng = SpenRng::seed_from_u64(4);
        let x = features(1, 2, 3, &mut rng);
        let spec = EnergySpec::new(TaggingEnergy::new(3, 3, 8, true).unwrap(), 0.1).unwrap();
        let mut ps = ParamSet::new();
        spec.model.init_params(&mut ps, &mut rng);
        let y = Tensor::full(&[1, 2, 3], 0.5);
        assert!(matches!(
            spec.energy_eval(&ps, &y, &x),
            Err(SpenError::Contract(_))
        ));
    }
}
