//! Experiment configuration.
//!
//! The text format is line based: `[section]` headers, `key = value`
//! pairs and `#` comments. Strings may be double-quoted. Every key must be
//! known; `preset = "<name>"` under `[experiment]` starts from a named
//! preset, and all other keys override it regardless of their position.
//! [`ExperimentConfig::to_text`] writes every field, so parsing its output
//! reproduces the configuration exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::energy::{
    DeepPrior, DenoisingEnergy, EnergySpec, FoePrior, Prior, Space, TaggingEnergy,
};
use crate::error::{Result, SpenError};
use crate::minimizer::{Rule, Spen, UnrollConfig};
use crate::tasks::dataset::{DenoiseSpec, TaggingSpec};
use crate::trainer::{IterateLoss, LossConfig, LossWeights, MemoryMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Denoise,
    Tagging,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnergyKind {
    Foe,
    DeepPrior,
    ToyGlobal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    EndToEnd,
    Ssvm,
}

macro_rules! keyword_enum {
    ($ty:ident, $what:literal, $($variant:ident => $text:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = SpenError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(SpenError::Config(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
    };
}

keyword_enum!(Task, "task", Denoise => "denoise", Tagging => "tagging");
keyword_enum!(EnergyKind, "energy", Foe => "foe", DeepPrior => "deep-prior", ToyGlobal => "toy-global");
keyword_enum!(Method, "training method", EndToEnd => "end-to-end", Ssvm => "ssvm");

/// Energy architecture. Fields that do not apply to the chosen kind are
/// kept so that they round-trip, but are otherwise ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergySection {
    pub kind: EnergyKind,
    pub filters: usize,
    pub channels: usize,
    pub kernel: usize,
    pub temperature: f64,
    /// Initial σ² of the denoising data term.
    pub noise_variance: f64,
    /// Hidden width of the toy global energy's MLPs.
    pub hidden: usize,
    /// Include the global terms in the tagging energy.
    pub global: bool,
    /// Entropy weight λ; simplex tasks only.
    pub entropy: f64,
}

/// Dataset generation settings for both tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub heads: usize,
    pub items: usize,
    pub labels: usize,
    pub dim: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathsSection {
    /// Dataset directory; empty means generate from `[data]` in memory.
    pub data: String,
    /// Run directory for checkpoints and metrics.
    pub out: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: Task,
    pub method: Method,
    /// Seed for parameter initialization.
    pub seed: u64,
    pub energy: EnergySection,
    pub unroll: UnrollConfig,
    pub loss: LossConfig,
    pub trainer: TrainConfig,
    pub data: DataSection,
    pub paths: PathsSection,
}

/// Named presets accepted by `preset = ...`.
pub const PRESETS: [&str; 9] = [
    "FOE-20",
    "FOE-20+",
    "FOE-3",
    "DP-20",
    "DP-3",
    "FOE-SSVM",
    "DP-SSVM",
    "TAG-LOGIT",
    "TAG-LOCAL",
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::default_for(Task::Denoise)
    }
}

impl ExperimentConfig {
    /// Defaults for a task.
    pub fn default_for(task: Task) -> Self {
        let denoise = DenoiseSpec::default();
        let tagging = TaggingSpec::default();
        let foe = FoePrior::default();
        let dp = DeepPrior::default();
        let mut c = ExperimentConfig {
            name: "custom".into(),
            task,
            method: Method::EndToEnd,
            seed: 0,
            energy: EnergySection {
                kind: EnergyKind::Foe,
                filters: foe.filters,
                channels: dp.channels,
                kernel: foe.kernel,
                temperature: foe.temperature,
                noise_variance: 0.01,
                hidden: 16,
                global: true,
                entropy: 0.0,
            },
            unroll: UnrollConfig::default(),
            loss: LossConfig::default(),
            trainer: TrainConfig::default(),
            data: DataSection {
                train: denoise.train,
                dev: denoise.dev,
                test: denoise.test,
                height: denoise.height,
                width: denoise.width,
                sigma: denoise.sigma,
                heads: tagging.heads,
                items: tagging.items,
                labels: tagging.labels,
                dim: tagging.dim,
                seed: denoise.seed,
            },
            paths: PathsSection {
                data: String::new(),
                out: "runs".into(),
            },
        };
        if task == Task::Tagging {
            c.energy.kind = EnergyKind::ToyGlobal;
            c.energy.entropy = 0.1;
            c.unroll.rule = Rule::Logit;
            c.unroll.steps = 10;
            c.unroll.step_size = 0.5;
            c.loss.loss = IterateLoss::LogLoss;
            c.trainer.pretrain_epochs = 5;
            c.trainer.clamped_epochs = 5;
            c.trainer.joint_epochs = 5;
            c.trainer.adam.lr = 0.01;
            c.data.train = tagging.train;
            c.data.dev = tagging.dev;
            c.data.test = tagging.test;
        }
        c
    }

    /// A named preset.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = match name {
            "TAG-LOGIT" | "TAG-LOCAL" => Self::default_for(Task::Tagging),
            _ => Self::default_for(Task::Denoise),
        };
        c.name = name.into();
        let u = &mut c.unroll;
        match name {
            "FOE-20" => {
                u.rule = Rule::Momentum;
                u.momentum = 0.75;
                u.steps = 20;
                u.learn_step_sizes = false;
                c.loss.weights = LossWeights::FinalOnly;
            }
            "FOE-20+" | "FOE-3" | "DP-20" | "DP-3" => {
                u.rule = Rule::Momentum;
                u.momentum = 0.25;
                u.steps = if name.ends_with('3') { 3 } else { 20 };
                u.learn_step_sizes = true;
                if name.starts_with("DP") {
                    c.energy.kind = EnergyKind::DeepPrior;
                }
            }
            "FOE-SSVM" | "DP-SSVM" => {
                u.rule = Rule::Momentum;
                u.momentum = 0.25;
                u.steps = 20;
                u.learn_step_sizes = false;
                u.step_size = 0.03;
                c.method = Method::Ssvm;
                if name.starts_with("DP") {
                    c.energy.kind = EnergyKind::DeepPrior;
                }
            }
            "TAG-LOGIT" => {}
            "TAG-LOCAL" => c.energy.global = false,
            other => {
                return Err(SpenError::Config(format!(
                    "unknown preset `{other}`; known presets: {}",
                    PRESETS.join(", ")
                )))
            }
        }
        if c.energy.kind == EnergyKind::DeepPrior {
            c.energy.temperature = DeepPrior::default().temperature;
        }
        Ok(c)
    }

    pub fn space(&self) -> Space {
        match self.task {
            Task::Denoise => Space::Box,
            Task::Tagging => Space::Simplex {
                labels: self.data.labels,
            },
        }
    }

    /// Serialize every field.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for f in FIELDS {
            if f.section != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{}]\n", f.section));
                section = f.section;
            }
            out.push_str(&format!("{} = {}\n", f.key, (f.get)(self)));
        }
        out
    }

    /// Hex SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        parse_config(&std::fs::read_to_string(path)?)
    }

    /// Check every constraint; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|v| SpenError::Config(format!("`{}`: {}", v.key, v.msg)))
    }

    fn check(&self) -> std::result::Result<(), Violation> {
        let bad = |key: &'static str, msg: String| Err(Violation { key, msg });
        for (key, s) in [
            ("experiment.name", &self.name),
            ("paths.data", &self.paths.data),
            ("paths.out", &self.paths.out),
        ] {
            if s.contains(['"', '\n', '\r']) {
                return bad(key, "must not contain quotes or line breaks".into());
            }
        }
        if self.name.is_empty() {
            return bad("experiment.name", "must not be empty".into());
        }

        let e = &self.energy;
        match (self.task, e.kind) {
            (Task::Denoise, EnergyKind::Foe | EnergyKind::DeepPrior)
            | (Task::Tagging, EnergyKind::ToyGlobal) => {}
            (task, kind) => {
                return bad(
                    "energy.kind",
                    format!("energy `{kind}` does not apply to task `{task}`"),
                )
            }
        }
        if e.filters == 0 {
            return bad("energy.filters", "must be at least 1".into());
        }
        if e.channels == 0 {
            return bad("energy.channels", "must be at least 1".into());
        }
        if e.kernel.is_multiple_of(2) {
            return bad("energy.kernel", format!("must be odd, got {}", e.kernel));
        }
        if !(e.temperature > 0.0 && e.temperature.is_finite()) {
            return bad(
                "energy.temperature",
                format!("must be positive, got {}", e.temperature),
            );
        }
        if !(e.noise_variance > 0.0 && e.noise_variance.is_finite()) {
            return bad(
                "energy.noise_variance",
                format!("must be positive, got {}", e.noise_variance),
            );
        }
        if e.hidden == 0 {
            return bad("energy.hidden", "must be at least 1".into());
        }
        if !(e.entropy >= 0.0 && e.entropy.is_finite()) {
            return bad(
                "energy.entropy",
                format!("must be non-negative, got {}", e.entropy),
            );
        }
        if e.entropy > 0.0 && self.task == Task::Denoise {
            return bad(
                "energy.entropy",
                "entropy smoothing needs a simplex task".into(),
            );
        }

        let u = &self.unroll;
        if u.steps == 0 {
            return bad("unroll.steps", "must be at least 1".into());
        }
        if !(u.step_size >= 0.0 && u.step_size.is_finite())
            || (u.learn_step_sizes && u.step_size == 0.0)
        {
            return bad(
                "unroll.step_size",
                format!(
                    "must be positive when learned and non-negative otherwise, got {}",
                    u.step_size
                ),
            );
        }
        if !(0.0..1.0).contains(&u.momentum) {
            return bad(
                "unroll.momentum",
                format!("must lie in [0, 1), got {}", u.momentum),
            );
        }
        if u.tolerance.is_nan() || u.tolerance <= 0.0 {
            return bad(
                "unroll.tolerance",
                format!("must be positive, got {}", u.tolerance),
            );
        }
        if let Err(err) = u.validate(self.space()) {
            return bad("unroll.rule", err.to_string());
        }
        if self.method == Method::Ssvm && u.learn_step_sizes {
            return bad(
                "unroll.learn_step_sizes",
                "SSVM training uses fixed inference step sizes".into(),
            );
        }

        if self.loss.loss == IterateLoss::LogLoss && self.task == Task::Denoise {
            return bad("loss.loss", "log-loss needs a simplex task".into());
        }
        if let LossWeights::Custom(w) = &self.loss.weights {
            if w.len() != u.steps {
                return bad(
                    "loss.weights",
                    format!("{} custom weights for {} steps", w.len(), u.steps),
                );
            }
            if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return bad(
                    "loss.weights",
                    "custom weights must be finite and non-negative".into(),
                );
            }
        }

        let t = &self.trainer;
        if t.micro_batch == 0 {
            return bad("trainer.micro_batch", "must be at least 1".into());
        }
        if t.workers == 0 {
            return bad("trainer.workers", "must be at least 1".into());
        }
        if !(t.adam.lr > 0.0 && t.adam.lr.is_finite()) {
            return bad("trainer.lr", format!("must be positive, got {}", t.adam.lr));
        }
        if !(0.0..1.0).contains(&t.adam.beta1) {
            return bad(
                "trainer.beta1",
                format!("must lie in [0, 1), got {}", t.adam.beta1),
            );
        }
        if !(0.0..1.0).contains(&t.adam.beta2) {
            return bad(
                "trainer.beta2",
                format!("must lie in [0, 1), got {}", t.adam.beta2),
            );
        }
        if !(t.adam.eps > 0.0 && t.adam.eps.is_finite()) {
            return bad(
                "trainer.adam_eps",
                format!("must be positive, got {}", t.adam.eps),
            );
        }
        if !(t.backprop.hvp.eps0 > 0.0 && t.backprop.hvp.eps0.is_finite()) {
            return bad(
                "trainer.hvp_eps",
                format!("must be positive, got {}", t.backprop.hvp.eps0),
            );
        }

        let d = &self.data;
        for (key, n) in [
            ("data.train", d.train),
            ("data.dev", d.dev),
            ("data.test", d.test),
        ] {
            if n == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        if self.task == Task::Denoise {
            if d.height == 0 || d.width == 0 {
                return bad("data.height", "image extents must be at least 1".into());
            }
            if !(d.sigma >= 0.0 && d.sigma.is_finite()) {
                return bad(
                    "data.sigma",
                    format!("must be non-negative, got {}", d.sigma),
                );
            }
        } else {
            if d.heads == 0 || d.items == 0 {
                return bad("data.items", "heads and items must be at least 1".into());
            }
            if d.labels < 2 {
                return bad("data.labels", "need at least one non-null label".into());
            }
            if d.dim == 0 {
                return bad("data.dim", "must be at least 1".into());
            }
        }
        Ok(())
    }

    pub fn denoise_model(&self) -> Result<DenoisingEnergy> {
        self.validate()?;
        let e = &self.energy;
        let prior = match e.kind {
            EnergyKind::Foe => Prior::Foe(FoePrior {
                filters: e.filters,
                kernel: e.kernel,
                temperature: e.temperature,
            }),
            EnergyKind::DeepPrior => Prior::Deep(DeepPrior {
                channels: e.channels,
                kernel: e.kernel,
                temperature: e.temperature,
            }),
            EnergyKind::ToyGlobal => {
                return Err(SpenError::Config("toy-global is a tagging energy".into()))
            }
        };
        DenoisingEnergy::new(prior, e.noise_variance)
    }

    pub fn tagging_model(&self) -> Result<TaggingEnergy> {
        self.validate()?;
        if self.task != Task::Tagging {
            return Err(SpenError::Config("not a tagging configuration".into()));
        }
        TaggingEnergy::new(
            self.data.labels,
            self.data.dim,
            self.energy.hidden,
            self.energy.global,
        )
    }

    pub fn denoise_spen(&self) -> Result<Spen<DenoisingEnergy>> {
        Spen::new(
            EnergySpec::new(self.denoise_model()?, 0.0)?,
            self.unroll.clone(),
        )
    }

    pub fn tagging_spen(&self) -> Result<Spen<TaggingEnergy>> {
        Spen::new(
            EnergySpec::new(self.tagging_model()?, self.energy.entropy)?,
            self.unroll.clone(),
        )
    }

    pub fn denoise_data(&self) -> DenoiseSpec {
        let d = &self.data;
        DenoiseSpec {
            train: d.train,
            dev: d.dev,
            test: d.test,
            height: d.height,
            width: d.width,
            sigma: d.sigma,
            seed: d.seed,
        }
    }

    pub fn tagging_data(&self) -> TaggingSpec {
        let d = &self.data;
        TaggingSpec {
            train: d.train,
            dev: d.dev,
            test: d.test,
            heads: d.heads,
            items: d.items,
            labels: d.labels,
            dim: d.dim,
            seed: d.seed,
        }
    }
}

struct Violation {
    key: &'static str,
    msg: String,
}

/// Text conversion for config values.
trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($ty:ty => $what:literal),+) => {$(
        impl ConfigValue for $ty {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|_| format!(concat!("expected ", $what, ", got `{}`"), s))
            }

            fn render(&self) -> String {
                format!("{self:?}")
            }
        }
    )+};
}

plain_value!(usize => "a non-negative integer", u64 => "a non-negative integer", f64 => "a number", bool => "true or false");

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }

    fn render(&self) -> String {
        format!("\"{self}\"")
    }
}

macro_rules! keyword_value {
    ($($ty:ty),+) => {$(
        impl ConfigValue for $ty {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e: SpenError| match e {
                    SpenError::Config(m) => m,
                    other => other.to_string(),
                })
            }

            fn render(&self) -> String {
                self.to_string()
            }
        }
    )+};
}

keyword_value!(
    Task,
    EnergyKind,
    Method,
    Rule,
    IterateLoss,
    LossWeights,
    MemoryMode
);

type Getter = fn(&ExperimentConfig) -> String;
type Setter = fn(&mut ExperimentConfig, &str) -> std::result::Result<(), String>;

struct Field {
    section: &'static str,
    key: &'static str,
    get: Getter,
    set: Setter,
}

macro_rules! fields {
    ($($section:literal $key:literal => $($path:ident).+;)+) => {
        const FIELDS: &[Field] = &[$(
            Field {
                section: $section,
                key: $key,
                get: |c| ConfigValue::render(&c.$($path).+),
                set: |c, v| {
                    c.$($path).+ = ConfigValue::parse_value(v)?;
                    Ok(())
                },
            },
        )+];
    };
}

fields! {
    "experiment" "name" => name;
    "experiment" "task" => task;
    "experiment" "method" => method;
    "experiment" "seed" => seed;
    "energy" "kind" => energy.kind;
    "energy" "filters" => energy.filters;
    "energy" "channels" => energy.channels;
    "energy" "kernel" => energy.kernel;
    "energy" "temperature" => energy.temperature;
    "energy" "noise_variance" => energy.noise_variance;
    "energy" "hidden" => energy.hidden;
    "energy" "global" => energy.global;
    "energy" "entropy" => energy.entropy;
    "unroll" "rule" => unroll.rule;
    "unroll" "steps" => unroll.steps;
    "unroll" "step_size" => unroll.step_size;
    "unroll" "learn_step_sizes" => unroll.learn_step_sizes;
    "unroll" "momentum" => unroll.momentum;
    "unroll" "tolerance" => unroll.tolerance;
    "loss" "loss" => loss.loss;
    "loss" "weights" => loss.weights;
    "trainer" "pretrain_epochs" => trainer.pretrain_epochs;
    "trainer" "clamped_epochs" => trainer.clamped_epochs;
    "trainer" "joint_epochs" => trainer.joint_epochs;
    "trainer" "micro_batch" => trainer.micro_batch;
    "trainer" "workers" => trainer.workers;
    "trainer" "icnn" => trainer.icnn;
    "trainer" "lr" => trainer.adam.lr;
    "trainer" "beta1" => trainer.adam.beta1;
    "trainer" "beta2" => trainer.adam.beta2;
    "trainer" "adam_eps" => trainer.adam.eps;
    "trainer" "hvp_eps" => trainer.backprop.hvp.eps0;
    "trainer" "memory" => trainer.backprop.memory;
    "trainer" "seed" => trainer.seed;
    "data" "train" => data.train;
    "data" "dev" => data.dev;
    "data" "test" => data.test;
    "data" "height" => data.height;
    "data" "width" => data.width;
    "data" "sigma" => data.sigma;
    "data" "heads" => data.heads;
    "data" "items" => data.items;
    "data" "labels" => data.labels;
    "data" "dim" => data.dim;
    "data" "seed" => data.seed;
    "paths" "data" => paths.data;
    "paths" "out" => paths.out;
}

struct Entry {
    line: usize,
    field: Option<&'static Field>,
    key: String,
    value: String,
}

fn parse_err(line: usize, key: &str, msg: impl Into<String>) -> SpenError {
    SpenError::ConfigParse {
        line,
        key: key.into(),
        msg: msg.into(),
    }
}

/// Strip a trailing comment and surrounding quotes from a raw value.
fn clean_value(raw: &str, line: usize, key: &str) -> Result<String> {
    let raw = raw.trim();
    if let Some(rest) = raw.strip_prefix('"') {
        let end = rest
            .find('"')
            .ok_or_else(|| parse_err(line, key, "unterminated string"))?;
        let tail = rest[end + 1..].trim();
        if !(tail.is_empty() || tail.starts_with('#')) {
            return Err(parse_err(
                line,
                key,
                format!("unexpected text `{tail}` after string"),
            ));
        }
        return Ok(rest[..end].to_string());
    }
    let value = raw.split('#').next().unwrap_or("").trim();
    if value.is_empty() {
        return Err(parse_err(line, key, "missing value"));
    }
    Ok(value.to_string())
}

/// Parse and validate a configuration. Errors name the key and its
/// 1-based line; line 0 refers to a value that came from a default or
/// preset.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut section = String::new();
    let mut entries: Vec<Entry> = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest
                .split('#')
                .next()
                .unwrap_or("")
                .trim()
                .strip_suffix(']')
                .ok_or_else(|| parse_err(line, trimmed, "malformed section header"))?
                .trim();
            if !FIELDS.iter().any(|f| f.section == name) {
                return Err(parse_err(line, name, "unknown section"));
            }
            section = name.to_string();
            continue;
        }
        let (key, raw_value) = trimmed
            .split_once('=')
            .ok_or_else(|| parse_err(line, trimmed, "expected `key = value`"))?;
        let key = key.trim();
        if section.is_empty() {
            return Err(parse_err(line, key, "key outside of any section"));
        }
        let full = format!("{section}.{key}");
        let value = clean_value(raw_value, line, &full)?;
        if let Some(prev) = seen.insert(full.clone(), line) {
            return Err(parse_err(
                line,
                &full,
                format!("duplicate key, first set on line {prev}"),
            ));
        }
        let field = FIELDS.iter().find(|f| f.section == section && f.key == key);
        if field.is_none() && full != "experiment.preset" {
            return Err(parse_err(line, &full, "unknown key"));
        }
        entries.push(Entry {
            line,
            field,
            key: full,
            value,
        });
    }

    let find = |k: &str| entries.iter().find(|e| e.key == k);
    let mut cfg = match (find("experiment.preset"), find("experiment.task")) {
        (Some(p), _) => ExperimentConfig::preset(&p.value)
            .map_err(|e| parse_err(p.line, &p.key, e.to_string()))?,
        (None, Some(t)) => {
            let task = Task::parse_value(&t.value).map_err(|m| parse_err(t.line, &t.key, m))?;
            ExperimentConfig::default_for(task)
        }
        (None, None) => ExperimentConfig::default(),
    };
    for e in &entries {
        if let Some(f) = e.field {
            (f.set)(&mut cfg, &e.value).map_err(|m| parse_err(e.line, &e.key, m))?;
        }
    }
    cfg.check().map_err(|v| {
        let line = find(v.key)
            .or_else(|| find("experiment.preset"))
            .map_or(0, |e| e.line);
        parse_err(line, v.key, v.msg)
    })?;
    Ok(cfg)
}
