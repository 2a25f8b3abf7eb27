//! End-to-end learning through the unrolled minimizer, plus a structured
//! SVM baseline.

mod adam;
mod backprop;
pub mod gradcheck;
mod hvp;
mod loss;
mod ssvm;
mod train;

pub use adam::{Adam, AdamConfig};
pub use backprop::{backprop_unroll, init_loss_grad, BackpropConfig, MemoryMode, UnrollGrad};
pub use hvp::{hvp, HvpConfig};
pub use loss::{unroll_loss, IterateLoss, LossConfig, LossWeights};
pub use ssvm::{hinge_step, ssvm_train, AugmentedInput, HingeStep, LossAugmented};
pub use train::{
    evaluate, train, train_observed, Example, MetricsLog, MetricsRow, ScoreFn, TrainConfig,
    TrainOutcome,
};

#[cfg(test)]
mod tests {
    use super::gradcheck::{unroll_gradient_errors, worst};
    use super::*;
    use crate::autodiff::{reset_tape_peak, tape_memory};
    use crate::energy::{EnergyModel, FoePrior};
    use crate::minimizer::{Rule, Spen, UnrollConfig, STEP_RHO};
    use crate::params::ParamSet;
    use crate::tensor::{relative_error, Tensor};
    use crate::{tiny, SpenRng};
    use rand::SeedableRng;
    use std::collections::BTreeSet;

    fn bc(memory: MemoryMode) -> BackpropConfig {
        BackpropConfig {
            hvp: HvpConfig::default(),
            memory,
        }
    }

    #[test]
    fn master_gradient_check_box_rules() {
        for rule in [Rule::Gd, Rule::Momentum] {
            let inst = tiny::foe(rule, 3, 2, 4).unwrap();
            let errs = unroll_gradient_errors(
                &inst.spen,
                &inst.params,
                &inst.input,
                &inst.target,
                &LossConfig::default(),
                &bc(MemoryMode::Checkpointed),
                1e-5,
            )
            .unwrap();
            assert!(worst(&errs) < 1e-3, "{rule}: {errs:?}");
        }
    }

    #[test]
    fn master_gradient_check_simplex_rules() {
        for rule in [Rule::Logit, Rule::Emd] {
            let inst = tiny::tagging(rule, 3, 6).unwrap();
            let lc = LossConfig {
                loss: IterateLoss::LogLoss,
                ..LossConfig::default()
            };
            let errs = unroll_gradient_errors(
                &inst.spen,
                &inst.params,
                &inst.input,
                &inst.target,
                &lc,
                &bc(MemoryMode::Checkpointed),
                1e-5,
            )
            .unwrap();
            assert!(worst(&errs) < 1e-3, "{rule}: {errs:?}");
        }
    }

    #[test]
    fn step_size_gradient_is_nonzero() {
        let inst = tiny::foe(Rule::Gd, 3, 2, 9).unwrap();
        let r = backprop_unroll(
            &inst.spen,
            &inst.params,
            &inst.input,
            &inst.target,
            &LossConfig::default(),
            &bc(MemoryMode::Checkpointed),
        )
        .unwrap();
        assert!(r.grads[STEP_RHO].norm_inf() > 1e-6);
    }

    #[test]
    fn checkpointed_matches_naive() {
        let inst = tiny::foe(Rule::Momentum, 4, 2, 5).unwrap();
        let lc = LossConfig::default();
        let run = |m| {
            backprop_unroll(
                &inst.spen,
                &inst.params,
                &inst.input,
                &inst.target,
                &lc,
                &bc(m),
            )
            .unwrap()
        };
        let a = run(MemoryMode::Checkpointed);
        let b = run(MemoryMode::Naive);
        assert_eq!(
            a.grads.keys().collect::<Vec<_>>(),
            b.grads.keys().collect::<Vec<_>>()
        );
        for (k, g) in &a.grads {
            assert!(g.max_abs_diff(&b.grads[k]) <= 1e-12, "{k}");
        }
    }

    #[test]
    fn checkpointing_bounds_live_activations() {
        let inst = tiny::deep(Rule::Gd, 6, 3).unwrap();
        let lc = LossConfig::default();
        // One evaluation with parameter gradients, for scale.
        reset_tape_peak();
        let base = tape_memory().live;
        inst.spen
            .eval_variable(&inst.params, &inst.input, &inst.input, true, false)
            .unwrap();
        let one = tape_memory().peak - base;

        reset_tape_peak();
        backprop_unroll(
            &inst.spen,
            &inst.params,
            &inst.input,
            &inst.target,
            &lc,
            &bc(MemoryMode::Checkpointed),
        )
        .unwrap();
        let ck = tape_memory().peak - base;
        reset_tape_peak();
        backprop_unroll(
            &inst.spen,
            &inst.params,
            &inst.input,
            &inst.target,
            &lc,
            &bc(MemoryMode::Naive),
        )
        .unwrap();
        let naive = tape_memory().peak - base;
        assert!(ck <= one, "checkpointed peak {ck} vs one evaluation {one}");
        assert!(naive >= 5 * ck, "naive peak {naive} vs checkpointed {ck}");
    }

    #[test]
    fn early_stop_matches_shorter_unroll() {
        let inst = tiny::foe(Rule::Gd, 40, 2, 11).unwrap();
        let mk = |steps| {
            Spen::new(
                inst.spen.energy.clone(),
                UnrollConfig {
                    steps,
                    tolerance: 1e-3,
                    ..inst.spen.unroll.clone()
                },
            )
            .unwrap()
        };
        let lc = LossConfig {
            weights: LossWeights::FinalOnly,
            ..LossConfig::default()
        };
        let cfg = bc(MemoryMode::Checkpointed);
        let long = mk(40);
        let ex_long =
            backprop_unroll(&long, &inst.params, &inst.input, &inst.target, &lc, &cfg).unwrap();
        let t0 = ex_long.trajectory.converged_at;
        assert!(t0 < 40 && t0 > 1, "T0 = {t0}");
        let short = mk(t0);
        let mut ps = inst.params.clone();
        let rho = ps.get(STEP_RHO).unwrap().data()[..t0].to_vec();
        ps.insert(STEP_RHO, Tensor::vector(rho));
        let ex_short = backprop_unroll(&short, &ps, &inst.input, &inst.target, &lc, &cfg).unwrap();
        assert!((ex_long.loss - ex_short.loss).abs() < 1e-12);
        for (k, g) in &ex_short.grads {
            if k != STEP_RHO {
                assert!(g.max_abs_diff(&ex_long.grads[k]) < 1e-12, "{k}");
            }
        }
        let gl = &ex_long.grads[STEP_RHO];
        let gs = &ex_short.grads[STEP_RHO];
        for t in 0..40 {
            let expect = if t < t0 { gs.data()[t] } else { 0.0 };
            assert!((gl.data()[t] - expect).abs() < 1e-12, "step {t}");
        }
    }

    #[test]
    fn zero_weights_reproduce_final_only() {
        let inst = tiny::foe(Rule::Gd, 4, 2, 2).unwrap();
        let run = |weights| {
            let lc = LossConfig {
                weights,
                ..LossConfig::default()
            };
            backprop_unroll(
                &inst.spen,
                &inst.params,
                &inst.input,
                &inst.target,
                &lc,
                &bc(MemoryMode::Checkpointed),
            )
            .unwrap()
        };
        let a = run(LossWeights::FinalOnly);
        let b = run(LossWeights::Custom(vec![0.0, 0.0, 0.0, 4.0]));
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn degenerate_unroll_equals_init_predictor() {
        let inst = tiny::tagging(Rule::Logit, 1, 3).unwrap();
        let mut spen = inst.spen;
        spen.unroll.learn_step_sizes = false;
        spen.unroll.step_size = 0.0;
        let mut ps = ParamSet::new();
        spen.model()
            .init_params(&mut ps, &mut SpenRng::seed_from_u64(0));
        let lc = LossConfig {
            loss: IterateLoss::LogLoss,
            ..LossConfig::default()
        };
        let full = backprop_unroll(
            &spen,
            &ps,
            &inst.input,
            &inst.target,
            &lc,
            &bc(MemoryMode::Checkpointed),
        )
        .unwrap();
        let (l0, g0) = init_loss_grad(&spen, &ps, &inst.input, &inst.target, &lc).unwrap();
        assert!((full.loss - l0).abs() < 1e-12);
        for (k, g) in &g0 {
            assert!(relative_error(g, &full.grads[k]) < 1e-12, "{k}");
        }
        // Energy parameters receive nothing.
        for (k, g) in &full.grads {
            if !g0.contains_key(k) {
                assert_eq!(g.norm_inf(), 0.0, "{k}");
            }
        }
    }

    fn psnr_score(pred: &Tensor, truth: &Tensor) -> crate::Result<f64> {
        crate::tasks::denoise::psnr(&pred.clamp(0.0, 1.0), truth)
    }

    #[test]
    fn overfits_one_example() {
        let inst = tiny::foe(Rule::Gd, 3, 2, 12).unwrap();
        let ex = vec![Example {
            input: inst.input.clone(),
            target: inst.target.clone(),
        }];
        let cfg = TrainConfig {
            pretrain_epochs: 0,
            clamped_epochs: 0,
            joint_epochs: 50,
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut log = MetricsLog::in_memory();
        let out = train(
            &inst.spen,
            inst.params.clone(),
            &ex,
            &ex,
            &LossConfig::default(),
            &cfg,
            &psnr_score,
            &mut log,
        )
        .unwrap();
        let losses: Vec<f64> = log
            .rows
            .iter()
            .filter(|r| r.split == "train")
            .map(|r| r.loss)
            .collect();
        assert_eq!(losses.len(), 50);
        let smooth: Vec<f64> = losses
            .windows(5)
            .map(|w| w.iter().sum::<f64>() / 5.0)
            .collect();
        for w in smooth.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{smooth:?}");
        }
        let last_dev = log
            .rows
            .iter()
            .rev()
            .find(|r| r.split == "dev")
            .unwrap()
            .metric;
        assert!(out.best_score >= last_dev);
    }

    #[test]
    fn pretrain_only_equals_feedforward_baseline() {
        let inst = tiny::tagging(Rule::Logit, 2, 8).unwrap();
        let lc = LossConfig {
            loss: IterateLoss::LogLoss,
            ..LossConfig::default()
        };
        let data: Vec<Example<_>> = (0..4)
            .map(|s| {
                let i = tiny::tagging(Rule::Logit, 2, 100 + s).unwrap();
                Example {
                    input: i.input,
                    target: i.target,
                }
            })
            .collect();
        let cfg = TrainConfig {
            pretrain_epochs: 3,
            clamped_epochs: 0,
            joint_epochs: 0,
            ..TrainConfig::default()
        };
        let score = |_: &Tensor, _: &Tensor| Ok(0.0);
        let out = train(
            &inst.spen,
            inst.params.clone(),
            &data,
            &data,
            &lc,
            &cfg,
            &score,
            &mut MetricsLog::in_memory(),
        )
        .unwrap();

        // The same optimizer on the feed-forward predictor alone.
        use rand::seq::SliceRandom;
        let mut ps = inst.params.clone();
        let mut adam = Adam::new(cfg.adam, &ps);
        let mut rng = SpenRng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..3 {
            order.shuffle(&mut rng);
            for &i in &order {
                let (_, g) =
                    init_loss_grad(&inst.spen, &ps, &data[i].input, &data[i].target, &lc).unwrap();
                adam.update(&mut ps, &g, &BTreeSet::new()).unwrap();
            }
        }
        assert_eq!(out.last, ps);
        let names: BTreeSet<String> = inst.spen.model().init_param_names().into_iter().collect();
        for (k, v) in ps.iter() {
            if !names.contains(k) {
                assert_eq!(v, inst.params.get(k).unwrap(), "{k} moved");
            }
        }
    }

    #[test]
    fn clamped_phase_freezes_local_terms() {
        let inst = tiny::tagging(Rule::Logit, 2, 8).unwrap();
        let ex = vec![Example {
            input: inst.input.clone(),
            target: inst.target.clone(),
        }];
        let cfg = TrainConfig {
            pretrain_epochs: 0,
            clamped_epochs: 2,
            joint_epochs: 0,
            ..TrainConfig::default()
        };
        let score = |_: &Tensor, _: &Tensor| Ok(0.0);
        let out = train(
            &inst.spen,
            inst.params.clone(),
            &ex,
            &ex,
            &LossConfig::default(),
            &cfg,
            &score,
            &mut MetricsLog::in_memory(),
        )
        .unwrap();
        for k in inst.spen.model().local_param_names() {
            assert_eq!(out.last.get(&k).unwrap(), inst.params.get(&k).unwrap());
        }
        assert_ne!(out.last, inst.params);
    }

    #[test]
    fn parallel_workers_match_inline() {
        let data: Vec<Example<Tensor>> = (0..4)
            .map(|s| {
                let i = tiny::foe(Rule::Gd, 2, 2, 40 + s).unwrap();
                Example {
                    input: i.input,
                    target: i.target,
                }
            })
            .collect();
        let inst = tiny::foe(Rule::Gd, 2, 2, 40).unwrap();
        let run = |workers| {
            let cfg = TrainConfig {
                pretrain_epochs: 0,
                clamped_epochs: 0,
                joint_epochs: 2,
                micro_batch: 2,
                workers,
                ..TrainConfig::default()
            };
            train(
                &inst.spen,
                inst.params.clone(),
                &data,
                &data,
                &LossConfig::default(),
                &cfg,
                &psnr_score,
                &mut MetricsLog::in_memory(),
            )
            .unwrap()
            .last
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn icnn_projection_keeps_weights_nonnegative() {
        let inst = tiny::foe(Rule::Gd, 2, 2, 7).unwrap();
        let ex = vec![Example {
            input: inst.input.clone(),
            target: inst.target.clone(),
        }];
        let cfg = TrainConfig {
            pretrain_epochs: 0,
            clamped_epochs: 0,
            joint_epochs: 3,
            icnn: true,
            adam: AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train(
            &inst.spen,
            inst.params.clone(),
            &ex,
            &ex,
            &LossConfig::default(),
            &cfg,
            &psnr_score,
            &mut MetricsLog::in_memory(),
        )
        .unwrap();
        assert!(out.last.get(FoePrior::FILTERS).unwrap().min() >= 0.0);
    }

    #[test]
    fn hinge_gate_gives_zero_update() {
        let inst = tiny::foe(Rule::Gd, 3, 2, 3).unwrap();
        let spen = Spen::new(
            inst.spen.energy.clone(),
            UnrollConfig {
                learn_step_sizes: false,
                ..inst.spen.unroll.clone()
            },
        )
        .unwrap();
        let mut ps = inst.params.clone();
        // Zero prior weight: E(y) = ‖y − x‖², whose minimizer x is the target.
        ps.get_mut(FoePrior::FILTERS).unwrap().fill(0.0);
        let ex = vec![Example {
            input: inst.target.clone(),
            target: inst.target.clone(),
        }];
        let h = hinge_step(&spen.energy, &spen.unroll, &ps, &ex[0].input, &ex[0].target).unwrap();
        assert!(h.hinge <= 0.0, "hinge {}", h.hinge);
        assert!(h.grads.is_empty());
        let cfg = TrainConfig {
            clamped_epochs: 0,
            joint_epochs: 2,
            ..TrainConfig::default()
        };
        let out = ssvm_train(
            &spen,
            ps.clone(),
            &ex,
            &ex,
            &LossConfig::default(),
            &cfg,
            &psnr_score,
            &mut MetricsLog::in_memory(),
        )
        .unwrap();
        assert_eq!(out.last, ps);
        assert_eq!(out.adam.step, 0);
    }

    #[test]
    fn ssvm_active_hinge_moves_parameters() {
        let inst = tiny::foe(Rule::Momentum, 5, 2, 21).unwrap();
        let spen = Spen::new(
            inst.spen.energy.clone(),
            UnrollConfig {
                learn_step_sizes: false,
                ..inst.spen.unroll.clone()
            },
        )
        .unwrap();
        let h = hinge_step(
            &spen.energy,
            &spen.unroll,
            &inst.params,
            &inst.input,
            &inst.target,
        )
        .unwrap();
        assert!(h.hinge > 0.0);
        assert!(!h.grads.is_empty());
        // The subgradient is ∇θE(y_i) − ∇θE(ŷ).
        let a = spen
            .energy
            .evaluate(&inst.params, &inst.target, &inst.input, true)
            .unwrap();
        let b = spen
            .energy
            .evaluate(&inst.params, &h.violator, &inst.input, true)
            .unwrap();
        for (k, g) in &h.grads {
            let want = a.param_grads[k].sub(&b.param_grads[k]);
            assert!(g.max_abs_diff(&want) < 1e-14);
        }
    }
}
