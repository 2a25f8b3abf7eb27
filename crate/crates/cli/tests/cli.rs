use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spen_cli::commands::{EvalSource, PredictOptions};
use spen_cli::{eval, gen_data, predict, train, EvalReport};
use spen_core::config::{parse_config, ExperimentConfig, PRESETS};
use spen_core::spnt;
use spen_core::tasks::dataset::{load_denoise, load_tagging};

fn spen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY_DENOISE: &str = "
[experiment]
name = \"tiny\"
seed = 4
[energy]
kind = foe
filters = 2
kernel = 3
[unroll]
rule = momentum
momentum = 0.5
steps = 2
[trainer]
pretrain_epochs = 0
clamped_epochs = 0
joint_epochs = 2
lr = 0.01
[data]
train = 3
dev = 2
test = 2
height = 6
width = 6
";

const TINY_TAGGING: &str = "
[experiment]
preset = \"TAG-LOGIT\"
[energy]
hidden = 4
[unroll]
steps = 2
[trainer]
pretrain_epochs = 1
clamped_epochs = 1
joint_epochs = 1
[data]
train = 4
dev = 2
test = 3
heads = 2
items = 3
labels = 4
dim = 4
";

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn gradcheck_on_tiny_foe_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", TINY_DENOISE);
    let out = spen(&["gradcheck", cfg.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    let worst: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("worst relative error "))
        .expect("worst error printed")
        .trim()
        .parse()
        .unwrap();
    assert!(worst < 1e-3, "{text}");
}

#[test]
fn gradcheck_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", TINY_DENOISE);
    let out = spen(&["gradcheck", cfg.to_str().unwrap(), "--tolerance", "1e-30"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.txt", "[unroll]\nsteps = 3\nstepz = 2\n");
    let out = spen(&["train", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("line 3") && err.contains("unroll.stepz"),
        "{err}"
    );

    let emd = write_config(dir.path(), "emd.txt", "[unroll]\nrule = emd\n");
    assert_eq!(
        spen(&["gradcheck", emd.to_str().unwrap()]).status.code(),
        Some(1)
    );
    let missing = dir.path().join("nope.txt");
    assert_eq!(
        spen(&["train", missing.to_str().unwrap()]).status.code(),
        Some(1)
    );
    assert_eq!(spen(&["frobnicate"]).status.code(), Some(1));

    let cfg = write_config(dir.path(), "c.txt", TINY_DENOISE);
    let out = spen(&[
        "eval",
        cfg.to_str().unwrap(),
        "--checkpoint",
        dir.path().join("none.spnt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", TINY_DENOISE);
    let ck = dir.path().join("broken.spnt");
    fs::write(&ck, b"SPNT\x01\x00").unwrap();
    fs::write(
        dir.path().join("broken.txt"),
        "config_hash = x\nepoch = 1\ndev_score = 1.0\n",
    )
    .unwrap();
    let out = spen(&[
        "eval",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn training_is_bit_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(TINY_DENOISE).unwrap();
    let a = train(&cfg, Some(&dir.path().join("a"))).unwrap();
    let b = train(&cfg, Some(&dir.path().join("b"))).unwrap();
    assert_eq!(a.best_dev_score, b.best_dev_score);
    for f in [
        "last.spnt",
        "best.spnt",
        "last.txt",
        "best.txt",
        "config.txt",
    ] {
        assert_eq!(
            fs::read(a.dir.join(f)).unwrap(),
            fs::read(b.dir.join(f)).unwrap(),
            "{f}"
        );
    }
    let csv = fs::read_to_string(a.dir.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,split,loss,task-metric,wall-seconds")
    );
    assert_eq!(lines.count(), 4);
}

#[test]
fn failed_training_leaves_no_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    fs::create_dir_all(run.join("metrics.csv")).unwrap();
    let cfg = write_config(dir.path(), "c.txt", TINY_DENOISE);
    let out = spen(&[
        "train",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!run.join("config.txt").exists());
    assert!(run.join("metrics.csv").is_dir());

    let fresh = dir.path().join("fresh");
    let bad_data = write_config(
        dir.path(),
        "d.txt",
        &format!(
            "{TINY_DENOISE}\n[paths]\ndata = \"{}\"\n",
            dir.path().join("missing").display()
        ),
    );
    let out = spen(&[
        "train",
        bad_data.to_str().unwrap(),
        "--out",
        fresh.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!fresh.exists());
}

#[test]
fn train_predict_eval_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg_text = format!(
        "{TINY_DENOISE}\n[paths]\ndata = \"{}\"\nout = \"{}\"\n",
        data.display(),
        dir.path().join("runs").display()
    );
    let cfg = write_config(dir.path(), "c.txt", &cfg_text);
    let c = cfg.to_str().unwrap();
    assert!(spen(&["gen-data", c]).status.success());
    let out = spen(&["train", c]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ck = dir.path().join("runs/tiny/best.spnt");
    assert!(ck.is_file());

    let pred = dir.path().join("pred");
    let out = spen(&[
        "predict",
        c,
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
        "--dump-trajectory",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(pred.join("00000.pgm").is_file() && pred.join("00001.pgm").is_file());
    let traj = spnt::read_file(&pred.join("trajectory.spnt")).unwrap();
    for t in 0..=2 {
        spnt::find(&traj, &format!("00001.y{t:03}")).unwrap();
    }
    assert_eq!(spnt::find(&traj, "00000.energy").unwrap().len(), 3);

    let by_ck = stdout(&spen(&["eval", c, "--checkpoint", ck.to_str().unwrap()]));
    let by_pred = stdout(&spen(&[
        "eval",
        c,
        "--predictions",
        pred.join("predictions.spnt").to_str().unwrap(),
    ]));
    assert!(by_ck.starts_with("test: psnr"), "{by_ck}");
    assert_eq!(by_ck, by_pred);
}

#[test]
fn eval_of_gold_predictions_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    // Denoising: the clean images score the PSNR cap.
    let data = dir.path().join("dn");
    let mut cfg = parse_config(TINY_DENOISE).unwrap();
    cfg.paths.data = data.display().to_string();
    gen_data(&cfg, None).unwrap();
    let (_, splits) = load_denoise(&data).unwrap();
    let names: Vec<String> = (0..splits.test.len()).map(|i| format!("{i:05}")).collect();
    let gold = dir.path().join("gold.spnt");
    spnt::write_file(
        &gold,
        names
            .iter()
            .map(String::as_str)
            .zip(splits.test.iter().map(|e| &e.clean)),
    )
    .unwrap();
    match eval(&cfg, &EvalSource::Predictions(gold.clone()), "test").unwrap() {
        EvalReport::Denoise { psnr, .. } => assert_eq!(psnr, 99.0),
        other => panic!("{other:?}"),
    }

    // Tagging: one-hot gold labels score accuracy 1 and no violations.
    let tdata = dir.path().join("tg");
    let mut tcfg = parse_config(TINY_TAGGING).unwrap();
    tcfg.paths.data = tdata.display().to_string();
    gen_data(&tcfg, None).unwrap();
    let (_, tsplits) = load_tagging(&tdata).unwrap();
    let onehot: Vec<_> = tsplits
        .test
        .iter()
        .map(|e| e.gold_tensor(tcfg.data.labels))
        .collect();
    spnt::write_file(
        &gold,
        names
            .iter()
            .map(String::as_str)
            .chain(["00002"])
            .zip(onehot.iter()),
    )
    .unwrap();
    match eval(&tcfg, &EvalSource::Predictions(gold), "test").unwrap() {
        EvalReport::Tagging { metrics, .. } => {
            assert_eq!(metrics.accuracy, 1.0);
            assert_eq!(metrics.violation, 0.0);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn tagging_round_trip_through_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(TINY_TAGGING).unwrap();
    let s = train(&cfg, Some(&dir.path().join("run"))).unwrap();
    assert!((0.0..=1.0).contains(&s.test_score));
    let opts = PredictOptions {
        checkpoint: s.dir.join("best.spnt"),
        split: "dev".into(),
        out: dir.path().join("pred"),
        dump_trajectory: false,
    };
    predict(&cfg, &opts).unwrap();
    let labels = fs::read_to_string(dir.path().join("pred/labels.txt")).unwrap();
    assert_eq!(labels.lines().count(), 2);
    assert!(labels.lines().all(|l| l.split(' ').count() == 6));
}

#[test]
fn every_preset_runs_one_training_step() {
    let dir = tempfile::tempdir().unwrap();
    for name in PRESETS {
        let mut cfg = ExperimentConfig::preset(name).unwrap();
        cfg.data.train = 1;
        cfg.data.dev = 1;
        cfg.data.test = 1;
        cfg.data.height = 8;
        cfg.data.width = 8;
        cfg.data.items = 3;
        cfg.trainer.pretrain_epochs = 0;
        cfg.trainer.clamped_epochs = 0;
        cfg.trainer.joint_epochs = 1;
        let s = train(&cfg, Some(&dir.path().join(name))).unwrap();
        assert_eq!(s.best_epoch, 1, "{name}");
        assert!(s.test_score.is_finite(), "{name}");
    }
}

#[test]
fn show_preset_prints_a_parseable_config() {
    let out = spen(&["show-preset", "DP-SSVM"]);
    assert!(out.status.success());
    let cfg = parse_config(&stdout(&out)).unwrap();
    assert_eq!(cfg, ExperimentConfig::preset("DP-SSVM").unwrap());
}
