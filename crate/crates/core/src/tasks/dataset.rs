//! Dataset directories: one SPNT file per split plus `manifest.txt`.
//!
//! The manifest is `key = value` lines recording the task, generator
//! version, seed, split sizes and shapes. Loading checks the split files
//! against it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::energy::TagFeatures;
use crate::error::{Result, SpenError};
use crate::spnt;
use crate::tensor::Tensor;

use super::denoise::{gen_denoise, DenoiseExample};
use super::tagging::{gen_tagging, TagExample};

pub const GENERATOR_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Splits<T> {
    /// Cut one sequence into consecutive train/dev/test parts.
    pub fn partition(mut all: Vec<T>, train: usize, dev: usize) -> Self {
        let test = all.split_off((train + dev).min(all.len()));
        let dev_part = all.split_off(train.min(all.len()));
        Splits {
            train: all,
            dev: dev_part,
            test,
        }
    }

    pub fn get(&self, split: &str) -> Result<&[T]> {
        match split {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(SpenError::Config(format!("unknown split `{other}`"))),
        }
    }

    fn parts(&self) -> [(&'static str, &[T]); 3] {
        [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
        ]
    }
}

/// Ordered `key = value` metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest(pub BTreeMap<String, String>);

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| SpenError::Config(format!("manifest is missing `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| SpenError::Config(format!("manifest `{key}` has bad value `{v}`")))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.0 {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                SpenError::Config(format!("manifest line {}: expected `key = value`", i + 1))
            })?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Generation settings for a denoising dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for DenoiseSpec {
    fn default() -> Self {
        DenoiseSpec {
            train: 200,
            dev: 50,
            test: 100,
            height: 32,
            width: 32,
            sigma: 0.1,
            seed: 1,
        }
    }
}

impl DenoiseSpec {
    pub fn generate(&self) -> Result<Splits<DenoiseExample>> {
        let all = gen_denoise(
            self.train + self.dev + self.test,
            self.height,
            self.width,
            self.sigma,
            self.seed,
        )?;
        Ok(Splits::partition(all, self.train, self.dev))
    }

    fn manifest(&self) -> Manifest {
        let mut m = Manifest::default();
        m.set("task", "denoise");
        m.set("generator_version", GENERATOR_VERSION);
        m.set("seed", self.seed);
        m.set("train", self.train);
        m.set("dev", self.dev);
        m.set("test", self.test);
        m.set("height", self.height);
        m.set("width", self.width);
        m.set("sigma", self.sigma);
        m
    }
}

/// Generation settings for a tagging dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggingSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub heads: usize,
    pub items: usize,
    pub labels: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for TaggingSpec {
    fn default() -> Self {
        TaggingSpec {
            train: 500,
            dev: 100,
            test: 200,
            heads: 3,
            items: 6,
            labels: 5,
            dim: 16,
            seed: 1,
        }
    }
}

impl TaggingSpec {
    pub fn generate(&self) -> Result<Splits<TagExample>> {
        let (_, all) = gen_tagging(
            self.heads,
            self.items,
            self.labels,
            self.dim,
            self.train + self.dev + self.test,
            self.seed,
        )?;
        Ok(Splits::partition(all, self.train, self.dev))
    }

    fn manifest(&self) -> Manifest {
        let mut m = Manifest::default();
        m.set("task", "tagging");
        m.set("generator_version", GENERATOR_VERSION);
        m.set("seed", self.seed);
        m.set("train", self.train);
        m.set("dev", self.dev);
        m.set("test", self.test);
        m.set("heads", self.heads);
        m.set("items", self.items);
        m.set("labels", self.labels);
        m.set("dim", self.dim);
        m
    }
}

fn check_version(m: &Manifest, task: &str) -> Result<()> {
    if m.get("task")? != task {
        return Err(SpenError::Config(format!(
            "dataset holds task `{}`, expected `{task}`",
            m.get("task")?
        )));
    }
    let v: u32 = m.parse("generator_version")?;
    if v != GENERATOR_VERSION {
        return Err(SpenError::Config(format!(
            "unsupported generator version {v}"
        )));
    }
    Ok(())
}

fn save_split<T>(
    dir: &Path,
    split: &str,
    items: &[T],
    to: impl Fn(&T) -> Vec<(&'static str, Tensor)>,
) -> Result<()> {
    let mut named = Vec::new();
    for (i, ex) in items.iter().enumerate() {
        for (field, t) in to(ex) {
            named.push((format!("{i:05}.{field}"), t));
        }
    }
    spnt::write_file(
        &dir.join(format!("{split}.spnt")),
        named.iter().map(|(n, t)| (n.as_str(), t)),
    )
}

fn load_split<T>(
    dir: &Path,
    split: &str,
    expected: usize,
    from: impl Fn(&[(String, Tensor)], &str) -> Result<T>,
) -> Result<Vec<T>> {
    let tensors = spnt::read_file(&dir.join(format!("{split}.spnt")))?;
    (0..expected)
        .map(|i| from(&tensors, &format!("{i:05}")))
        .collect()
}

pub fn save_denoise(dir: &Path, spec: &DenoiseSpec, data: &Splits<DenoiseExample>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (split, items) in data.parts() {
        save_split(dir, split, items, |ex| {
            vec![("clean", ex.clean.clone()), ("noisy", ex.noisy.clone())]
        })?;
    }
    spec.manifest().write(&dir.join(MANIFEST))
}

pub fn load_denoise(dir: &Path) -> Result<(Manifest, Splits<DenoiseExample>)> {
    let m = Manifest::read(&dir.join(MANIFEST))?;
    check_version(&m, "denoise")?;
    let read = |split: &str| {
        load_split(dir, split, m.parse(split)?, |ts, key| {
            Ok(DenoiseExample {
                clean: spnt::find(ts, &format!("{key}.clean"))?.clone(),
                noisy: spnt::find(ts, &format!("{key}.noisy"))?.clone(),
                seed: 0,
            })
        })
    };
    let data = Splits {
        train: read("train")?,
        dev: read("dev")?,
        test: read("test")?,
    };
    Ok((m, data))
}

fn labels_tensor(labels: &[usize], shape: &[usize]) -> Tensor {
    Tensor::from_parts(shape.to_vec(), labels.iter().map(|&l| l as f64).collect())
}

fn tensor_labels(t: &Tensor, what: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(SpenError::Format {
                    offset: 0,
                    msg: format!("{what} holds non-integer label {v}"),
                })
            }
        })
        .collect()
}

pub fn save_tagging(dir: &Path, spec: &TaggingSpec, data: &Splits<TagExample>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (split, items) in data.parts() {
        save_split(dir, split, items, |ex| {
            let (p, a) = (ex.features.num_heads(), ex.features.num_items());
            vec![
                ("heads", ex.features.heads.clone()),
                ("items", ex.features.items.clone()),
                ("arcs", ex.features.arcs.clone()),
                ("gold", labels_tensor(&ex.gold, &[p, a])),
                ("counts", labels_tensor(&ex.counts, &[p])),
            ]
        })?;
    }
    spec.manifest().write(&dir.join(MANIFEST))
}

pub fn load_tagging(dir: &Path) -> Result<(Manifest, Splits<TagExample>)> {
    let m = Manifest::read(&dir.join(MANIFEST))?;
    check_version(&m, "tagging")?;
    let read = |split: &str| {
        load_split(dir, split, m.parse(split)?, |ts, key| {
            let get = |f: &str| spnt::find(ts, &format!("{key}.{f}"));
            let features = TagFeatures {
                heads: get("heads")?.clone(),
                items: get("items")?.clone(),
                arcs: get("arcs")?.clone(),
            };
            features.validate()?;
            Ok(TagExample {
                features,
                gold: tensor_labels(get("gold")?, "gold")?,
                counts: tensor_labels(get("counts")?, "counts")?,
            })
        })
    };
    let data = Splits {
        train: read("train")?,
        dev: read("dev")?,
        test: read("test")?,
    };
    Ok((m, data))
}

/// Task name recorded in a dataset directory.
pub fn dataset_task(dir: &Path) -> Result<String> {
    Ok(Manifest::read(&dir.join(MANIFEST))?
        .get("task")?
        .to_string())
}
