//! Toy arc tagging with a planted per-head count rule.
//!
//! Each head `p` has `count_p = c·f_p + b` active arcs (exactly, after a
//! projection of `f_p`). The active arcs are the `count_p` items with the
//! largest activity `v·f_r`; an active arc's label is
//! `1 + argmax(U f_r)`, inactive arcs take the null label 0. Arc-local
//! features decide *which* arcs and *which* labels; only the head features
//! decide *how many*.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::energy::TagFeatures;
use crate::error::{Result, SpenError};
use crate::tensor::Tensor;
use crate::SpenRng;

const MAX_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct TagExample {
    pub features: TagFeatures,
    /// Gold label per arc, row-major `[P, A]`.
    pub gold: Vec<usize>,
    /// Planted non-null count per head.
    pub counts: Vec<usize>,
}

impl TagExample {
    /// One-hot `[P, A, D]` gold tensor.
    pub fn gold_tensor(&self, labels: usize) -> Tensor {
        one_hot(
            &self.gold,
            self.features.num_heads(),
            self.features.num_items(),
            labels,
        )
    }
}

pub fn one_hot(labels_flat: &[usize], heads: usize, items: usize, labels: usize) -> Tensor {
    let mut data = vec![0.0; heads * items * labels];
    for (i, &l) in labels_flat.iter().enumerate() {
        data[i * labels + l] = 1.0;
    }
    Tensor::from_parts(vec![heads, items, labels], data)
}

fn normal(shape: &[usize], rng: &mut SpenRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Standard-normal features of the given sizes.
pub fn random_features(heads: usize, items: usize, dim: usize, rng: &mut SpenRng) -> TagFeatures {
    TagFeatures {
        heads: normal(&[heads, dim], rng),
        items: normal(&[items, dim], rng),
        arcs: normal(&[heads, items, dim], rng),
    }
}

/// The planted rules behind a tagging dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TagGenerator {
    pub heads: usize,
    pub items: usize,
    pub labels: usize,
    pub dim: usize,
    /// Count rule weights `c`, `[F]`.
    pub count_w: Tensor,
    pub count_b: f64,
    /// Activity direction `v`, `[F]`.
    pub activity: Tensor,
    /// Label scores `U`, `[D − 1, F]`.
    pub label_w: Tensor,
}

impl TagGenerator {
    pub fn new(heads: usize, items: usize, labels: usize, dim: usize, seed: u64) -> Result<Self> {
        if labels < 2 {
            return Err(SpenError::Config(format!(
                "tagging needs a null label plus at least one other, got {labels} labels"
            )));
        }
        if heads == 0 || items == 0 || dim == 0 {
            return Err(SpenError::Config("tagging sizes must be positive".into()));
        }
        let mut rng = SpenRng::seed_from_u64(seed ^ 0x7A67_6765_6E00_0001);
        let c = normal(&[dim], &mut rng);
        // c·f_p then has standard deviation about A/4.
        let count_w = c.scale(items as f64 / 4.0 / c.norm_l2());
        Ok(TagGenerator {
            heads,
            items,
            labels,
            dim,
            count_w,
            count_b: items as f64 / 2.0,
            activity: normal(&[dim], &mut rng),
            label_w: normal(&[labels - 1, dim], &mut rng),
        })
    }

    fn count_score(&self, f: &[f64]) -> f64 {
        self.count_w
            .data()
            .iter()
            .zip(f)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + self.count_b
    }

    pub fn example(&self, rng: &mut SpenRng) -> Result<TagExample> {
        let (p, a, d, f) = (self.heads, self.items, self.labels, self.dim);
        let mut heads = Vec::with_capacity(p * f);
        let mut counts = Vec::with_capacity(p);
        let cw2 = self.count_w.dot(&self.count_w);
        for _ in 0..p {
            let mut tries = 0;
            loop {
                let mut fp: Vec<f64> = (0..f).map(|_| StandardNormal.sample(rng)).collect();
                let raw = self.count_score(&fp);
                let k = raw.round();
                if (0.0..=a as f64).contains(&k) {
                    // Move f_p onto the level set where the rule is exact.
                    let shift = (k - raw) / cw2;
                    for (v, c) in fp.iter_mut().zip(self.count_w.data()) {
                        *v += shift * c;
                    }
                    heads.extend(fp);
                    counts.push(k as usize);
                    break;
                }
                tries += 1;
                if tries >= MAX_RETRIES {
                    return Err(SpenError::NumericGuard(format!(
                        "no feasible planted count after {MAX_RETRIES} draws"
                    )));
                }
            }
        }
        let items = normal(&[a, f], rng);
        let arcs = normal(&[p, a, f], rng);

        let mut gold = vec![0usize; p * a];
        for (pi, &k) in counts.iter().enumerate() {
            let act: Vec<f64> = (0..a)
                .map(|ai| {
                    let fr = &arcs.data()[(pi * a + ai) * f..(pi * a + ai + 1) * f];
                    self.activity
                        .data()
                        .iter()
                        .zip(fr)
                        .map(|(x, y)| x * y)
                        .sum()
                })
                .collect();
            let mut order: Vec<usize> = (0..a).collect();
            order.sort_by(|&i, &j| act[j].total_cmp(&act[i]).then(i.cmp(&j)));
            for &ai in order.iter().take(k) {
                let fr = &arcs.data()[(pi * a + ai) * f..(pi * a + ai + 1) * f];
                let mut best = (0, f64::NEG_INFINITY);
                for (li, row) in self.label_w.rows().enumerate() {
                    let s: f64 = row.iter().zip(fr).map(|(x, y)| x * y).sum();
                    if s > best.1 {
                        best = (li, s);
                    }
                }
                gold[pi * a + ai] = 1 + best.0;
            }
        }
        debug_assert!(gold.iter().all(|&l| l < d));
        Ok(TagExample {
            features: TagFeatures {
                heads: Tensor::from_parts(vec![p, f], heads),
                items,
                arcs,
            },
            gold,
            counts,
        })
    }
}

pub fn gen_tagging(
    heads: usize,
    items: usize,
    labels: usize,
    dim: usize,
    n: usize,
    seed: u64,
) -> Result<(TagGenerator, Vec<TagExample>)> {
    let generator = TagGenerator::new(heads, items, labels, dim, seed)?;
    let mut rng = SpenRng::seed_from_u64(seed);
    let data = (0..n)
        .map(|_| generator.example(&mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((generator, data))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TagMetrics {
    /// Fraction of arcs with the gold label.
    pub accuracy: f64,
    /// Fraction of heads whose predicted non-null count misses the planted
    /// count.
    pub violation: f64,
}

/// Metrics over flattened `[P, A]` labels; `counts` holds one entry per head.
pub fn tag_metrics(pred: &[usize], gold: &[usize], counts: &[usize]) -> Result<TagMetrics> {
    if pred.len() != gold.len() || counts.is_empty() || !gold.len().is_multiple_of(counts.len()) {
        return Err(SpenError::dim(
            "tag_metrics",
            format!(
                "{} predictions, {} gold labels, {} heads",
                pred.len(),
                gold.len(),
                counts.len()
            ),
        ));
    }
    let items = gold.len() / counts.len();
    let correct = pred.iter().zip(gold).filter(|(a, b)| a == b).count();
    let violated = counts
        .iter()
        .enumerate()
        .filter(|&(p, &k)| {
            pred[p * items..(p + 1) * items]
                .iter()
                .filter(|&&l| l != 0)
                .count()
                != k
        })
        .count();
    Ok(TagMetrics {
        accuracy: correct as f64 / gold.len() as f64,
        violation: violated as f64 / counts.len() as f64,
    })
}

/// Metrics pooled over many examples.
pub fn pooled_metrics<'a>(
    items: impl IntoIterator<Item = (&'a [usize], &'a TagExample)>,
) -> Result<TagMetrics> {
    let (mut arcs, mut correct, mut heads, mut violated) = (0.0, 0.0, 0.0, 0.0);
    for (pred, ex) in items {
        let m = tag_metrics(pred, &ex.gold, &ex.counts)?;
        arcs += ex.gold.len() as f64;
        heads += ex.counts.len() as f64;
        correct += m.accuracy * ex.gold.len() as f64;
        violated += m.violation * ex.counts.len() as f64;
    }
    Ok(TagMetrics {
        accuracy: correct / arcs.max(1.0),
        violation: violated / heads.max(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{EnergyModel, TaggingEnergy, ToyGlobalEnergy};
    use crate::params::{Graph, ParamSet};
    use rand::Rng;

    #[test]
    fn deterministic() {
        let a = gen_tagging(3, 6, 5, 16, 20, 4).unwrap();
        let b = gen_tagging(3, 6, 5, 16, 20, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gold_matches_planted_counts() {
        let (g, data) = gen_tagging(3, 6, 5, 16, 200, 1).unwrap();
        for ex in &data {
            for p in 0..3 {
                let fp = &ex.features.heads.data()[p * 16..(p + 1) * 16];
                let k = ex.counts[p];
                assert!((g.count_score(fp) - k as f64).abs() < 1e-9);
                let realized = ex.gold[p * 6..(p + 1) * 6]
                    .iter()
                    .filter(|&&l| l != 0)
                    .count();
                assert_eq!(realized, k);
                if k == 0 {
                    assert!(ex.gold[p * 6..(p + 1) * 6].iter().all(|&l| l == 0));
                }
            }
            let m = tag_metrics(&ex.gold, &ex.gold, &ex.counts).unwrap();
            assert_eq!(
                m,
                TagMetrics {
                    accuracy: 1.0,
                    violation: 0.0
                }
            );
        }
    }

    #[test]
    fn planted_counts_zero_term3() {
        let (g, data) = gen_tagging(3, 6, 5, 16, 30, 2).unwrap();
        let model = TaggingEnergy::new(5, 16, 8, true).unwrap();
        let mut ps = ParamSet::new();
        model.init_params(&mut ps, &mut SpenRng::seed_from_u64(0));
        *ps.get_mut(ToyGlobalEnergy::COUNT_W).unwrap() = g.count_w.reshape(&[1, 16]).unwrap();
        *ps.get_mut(ToyGlobalEnergy::COUNT_B).unwrap() = Tensor::vector(vec![g.count_b]);
        for name in ps.names().map(String::from).collect::<Vec<_>>() {
            if name.starts_with("global.t") && !name.starts_with("global.t3") {
                ps.get_mut(&name).unwrap().fill(0.0);
            }
        }
        // Zero MLP weights make the other four terms vanish.
        for ex in &data {
            let mut gr = Graph::new(&ps, false);
            let y = gr.tape.constant(ex.gold_tensor(5));
            let e = model
                .global_term(&mut gr, y, &ex.features)
                .unwrap()
                .unwrap();
            assert!(gr.tape.value(e).item().abs() < 1e-9);
        }
    }

    #[test]
    fn all_null_prediction_violates_nonzero_counts() {
        let gold = vec![0, 1, 2, 0, 0, 0];
        let m = tag_metrics(&[0; 6], &gold, &[2, 0]).unwrap();
        assert_eq!(m.violation, 0.5);
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn random_predictions_near_chance() {
        let (_, data) = gen_tagging(3, 6, 4, 8, 3000, 3).unwrap();
        let mut rng = SpenRng::seed_from_u64(99);
        let preds: Vec<Vec<usize>> = data
            .iter()
            .map(|ex| ex.gold.iter().map(|_| rng.random_range(0..4)).collect())
            .collect();
        let m = pooled_metrics(preds.iter().map(Vec::as_slice).zip(&data)).unwrap();
        assert!((m.accuracy - 0.25).abs() < 0.02, "{}", m.accuracy);
    }

    #[test]
    fn metrics_shape_mismatch() {
        assert!(tag_metrics(&[0, 1], &[0, 1, 2], &[1]).is_err());
    }
}
