use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use spen_core::autodiff::Tape;
use spen_core::energy::{icnn_project, FoePrior};
use spen_core::params::Graph;
use spen_core::tiny;
use spen_core::trainer::{hvp, HvpConfig};
use spen_core::{
    backprop_unroll, BackpropConfig, IterateLoss, LossConfig, LossWeights, MemoryMode, ParamSet,
    Rule, Spen, SpenRng, Tensor, UnrollConfig,
};

fn rng(seed: u64) -> SpenRng {
    SpenRng::seed_from_u64(seed)
}

/// Direct zero-padded same-size cross-correlation.
fn reference_conv(x: &Tensor, k: &Tensor) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let r = (ks / 2) as isize;
    let mut out = Tensor::zeros(&[co, h, w]);
    for o in 0..co {
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = 0.0;
                for c in 0..ci {
                    for a in 0..ks as isize {
                        for b in 0..ks as isize {
                            let (ii, jj) = (i + a - r, j + b - r);
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            let xv = x.data()[(c * h + ii as usize) * w + jj as usize];
                            let kv = k.data()[((o * ci + c) * ks + a as usize) * ks + b as usize];
                            acc += xv * kv;
                        }
                    }
                }
                out.data_mut()[(o * h + i as usize) * w + j as usize] = acc;
            }
        }
    }
    out
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_matches_reference_and_its_adjoint(
        seed in any::<u64>(),
        ci in 1usize..3,
        co in 1usize..4,
        half in 0usize..3,
        h in 1usize..7,
        w in 1usize..7,
    ) {
        let mut r = rng(seed);
        let ks = 2 * half + 1;
        let x = Tensor::uniform(&[ci, h, w], -1.0, 1.0, &mut r);
        let k = Tensor::uniform(&[co, ci, ks, ks], -1.0, 1.0, &mut r);
        let cot = Tensor::uniform(&[co, h, w], -1.0, 1.0, &mut r);

        let mut t = Tape::new();
        let (xv, kv) = (t.var(x.clone()), t.var(k.clone()));
        let y = t.conv2d(xv, kv, None).unwrap();
        prop_assert!(t.value(y).max_abs_diff(&reference_conv(&x, &k)) < 1e-12);

        // The map is bilinear, so <cot, conv(dx, k)> = <∇x, dx> exactly.
        let root = t.dot_const(y, &cot).unwrap();
        let grads = t.backward(root).unwrap();
        let dx = Tensor::uniform(&[ci, h, w], -1.0, 1.0, &mut r);
        let dk = Tensor::uniform(&[co, ci, ks, ks], -1.0, 1.0, &mut r);
        let gx = grads.get_or_zeros(xv, &x);
        let gk = grads.get_or_zeros(kv, &k);
        prop_assert!(rel(reference_conv(&dx, &k).dot(&cot), gx.dot(&dx)) < 1e-10);
        prop_assert!(rel(reference_conv(&x, &dk).dot(&cot), gk.dot(&dk)) < 1e-10);
    }

    #[test]
    fn foe_energy_is_nonnegative(seed in any::<u64>(), filters in 1usize..4, scale in 0.1f64..5.0) {
        let mut r = rng(seed);
        let foe = FoePrior { filters, kernel: 3, temperature: 25.0 };
        let mut ps = ParamSet::new();
        foe.init_params(&mut ps, &mut r);
        let y = Tensor::uniform(&[1, 5, 5], -scale, scale, &mut r);
        let mut g = Graph::new(&ps, false);
        let yv = g.tape.constant(y);
        let e = foe.energy(&mut g, yv).unwrap();
        prop_assert!(g.tape.value(e).item() >= 0.0);
    }

    #[test]
    fn uniform_rows_have_entropy_log_d(rows in 1usize..6, d in 2usize..9) {
        let mut t = Tape::new();
        let y = t.constant(Tensor::full(&[rows, d], 1.0 / d as f64));
        let xl = t.xlogx(y);
        let s = t.sum(xl);
        let want = -(rows as f64) * (d as f64).ln();
        prop_assert!((t.value(s).item() - want).abs() < 1e-12);
    }

    #[test]
    fn avg_weights_are_reciprocals(steps in 1usize..60) {
        let lc = LossConfig::default();
        let w = lc.weights(steps).unwrap();
        for (t, wt) in w.iter().enumerate() {
            prop_assert_eq!(*wt, 1.0 / (steps - t) as f64);
        }
        prop_assert_eq!(w[steps - 1], 1.0);
        let fin = LossConfig { weights: LossWeights::FinalOnly, ..lc };
        let c = fin.coefficients(steps).unwrap();
        prop_assert_eq!(c[steps - 1], 1.0);
        prop_assert_eq!(c.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn icnn_projection_is_idempotent(seed in any::<u64>(), n in 1usize..20) {
        let mut r = rng(seed);
        let mut ps = ParamSet::new();
        let raw = Tensor::uniform(&[n], -1.0, 1.0, &mut r);
        ps.insert("w", raw.clone());
        ps.insert("free", raw.clone());
        let names = vec!["w".to_string()];
        icnn_project(&mut ps, &names).unwrap();
        let once = ps.clone();
        icnn_project(&mut ps, &names).unwrap();
        prop_assert_eq!(&once, &ps);
        let w = ps.get("w").unwrap();
        for (a, b) in w.data().iter().zip(raw.data()) {
            prop_assert_eq!(*a, b.max(0.0));
        }
        prop_assert_eq!(ps.get("free").unwrap(), &raw);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn iterates_after_convergence_are_copies(seed in any::<u64>(), momentum in any::<bool>()) {
        let rule = if momentum { Rule::Momentum } else { Rule::Gd };
        let inst = tiny::foe(rule, 60, 2, seed).unwrap();
        let spen = Spen::new(
            inst.spen.energy.clone(),
            UnrollConfig { tolerance: 1e-3, ..inst.spen.unroll.clone() },
        ).unwrap();
        let tr = spen.predict(&inst.params, &inst.input).unwrap();
        let t0 = tr.converged_at;
        for y in &tr.iterates[t0..] {
            prop_assert_eq!(y, &tr.iterates[t0]);
        }
        if t0 < 60 {
            let step = tr.iterates[t0].sub(&tr.iterates[t0 - 1]).norm_inf();
            prop_assert!(step < 1e-3);
        }
    }

    #[test]
    fn memory_modes_agree(seed in any::<u64>(), which in 0usize..4) {
        let mode = |memory| BackpropConfig { memory, ..BackpropConfig::default() };
        let (ck, naive) = if which < 2 {
            let rule = [Rule::Gd, Rule::Momentum][which];
            let i = tiny::foe(rule, 4, 2, seed).unwrap();
            let lc = LossConfig::default();
            (
                backprop_unroll(&i.spen, &i.params, &i.input, &i.target, &lc, &mode(MemoryMode::Checkpointed)).unwrap(),
                backprop_unroll(&i.spen, &i.params, &i.input, &i.target, &lc, &mode(MemoryMode::Naive)).unwrap(),
            )
        } else {
            let rule = [Rule::Logit, Rule::Emd][which - 2];
            let i = tiny::tagging(rule, 4, seed).unwrap();
            let lc = LossConfig { loss: IterateLoss::LogLoss, ..LossConfig::default() };
            (
                backprop_unroll(&i.spen, &i.params, &i.input, &i.target, &lc, &mode(MemoryMode::Checkpointed)).unwrap(),
                backprop_unroll(&i.spen, &i.params, &i.input, &i.target, &lc, &mode(MemoryMode::Naive)).unwrap(),
            )
        };
        prop_assert_eq!(ck.loss, naive.loss);
        prop_assert_eq!(ck.grads.len(), naive.grads.len());
        for (k, g) in &ck.grads {
            prop_assert!(g.max_abs_diff(&naive.grads[k]) <= 1e-12, "{}", k);
        }
    }

    #[test]
    fn hvp_is_symmetric_and_homogeneous(seed in any::<u64>(), c in 0.1f64..10.0) {
        let inst = tiny::foe(Rule::Gd, 1, 2, seed).unwrap();
        let spec = &inst.spen.energy;
        let mut r = rng(seed ^ 1);
        let y = Tensor::uniform(&[1, 4, 4], 0.0, 1.0, &mut r);
        let u = Tensor::uniform(&[1, 4, 4], -1.0, 1.0, &mut r);
        let v = Tensor::uniform(&[1, 4, 4], -1.0, 1.0, &mut r);
        let cfg = HvpConfig::default();
        let hv = hvp(spec, &inst.params, &y, &inst.input, &v, &cfg).unwrap();
        let hu = hvp(spec, &inst.params, &y, &inst.input, &u, &cfg).unwrap();
        prop_assert!(rel(u.dot(&hv), v.dot(&hu)) < 1e-5);
        let hcv = hvp(spec, &inst.params, &y, &inst.input, &v.scale(c), &cfg).unwrap();
        prop_assert!(hcv.sub(&hv.scale(c)).norm_inf() <= 1e-9 * (1.0 + hcv.norm_inf()));
    }
}

#[test]
fn random_params_do_not_break_feasibility_of_simplex_predictions() {
    let mut r = rng(5);
    for rule in [Rule::Logit, Rule::Emd] {
        let mut inst = tiny::tagging(rule, 6, 9).unwrap();
        for _ in 0..10 {
            let names: Vec<String> = inst.params.names().map(str::to_string).collect();
            for n in names {
                for v in inst.params.get_mut(&n).unwrap().data_mut() {
                    *v += r.random_range(-0.5..0.5);
                }
            }
            let tr = inst.spen.predict(&inst.params, &inst.input).unwrap();
            for y in &tr.iterates {
                for row in y.rows() {
                    assert!(row.iter().all(|&p| p >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
