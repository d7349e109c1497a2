//! First-order Taylor filter importance.
//!
//! The score of a filter is `|Σ ∂R/∂f ⊙ f|` over the feature map `f` it
//! feeds into the next layer, reduced over batch and spatial positions,
//! averaged over batches. A single backward pass per batch scores every
//! filter at once.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::{Error, IoContext, Result};
use crate::netcore::{BnMode, FilterRef, PrunableNetwork};
use crate::tensor::Tensor;

/// A differentiable objective on network logits. `evaluate` returns the
/// value on one batch and its gradient with respect to the logits.
pub trait Objective: Sync {
    fn evaluate(&self, batch: &Batch, logits: &Tensor) -> Result<(f64, Tensor)>;
}

impl<F> Objective for F
where
    F: Fn(&Batch, &Tensor) -> Result<(f64, Tensor)> + Sync,
{
    fn evaluate(&self, batch: &Batch, logits: &Tensor) -> Result<(f64, Tensor)> {
        self(batch, logits)
    }
}

/// Where the absolute value is taken when reducing `∂R/∂f ⊙ f`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Sum over batch and spatial positions, then take `|·|`.
    #[default]
    SumThenAbs,
    /// Take `|·|` elementwise, then sum.
    AbsThenSum,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub entries: BTreeMap<FilterRef, f64>,
    pub batch_count: usize,
}

impl ScoreTable {
    pub fn get(&self, f: FilterRef) -> Option<f64> {
        self.entries.get(&f).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scaled(&self, c: f64) -> ScoreTable {
        ScoreTable { entries: self.entries.iter().map(|(&f, &s)| (f, s * c)).collect(), batch_count: self.batch_count }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "layer_index,filter_index,score").expect("write to Vec");
        for (f, s) in &self.entries {
            writeln!(out, "{},{},{:e}", f.layer_index, f.filter_index, s).expect("write to Vec");
        }
        std::fs::write(path, out).at(path)
    }

    /// Sum-of-absolute-weights scores.
    pub fn l1(net: &PrunableNetwork) -> ScoreTable {
        ScoreTable { entries: net.l1_norms(), batch_count: 0 }
    }

    /// Geometric-median redundancy: the summed Euclidean distance from a
    /// filter to every other alive filter of its layer. Filters near the
    /// layer's geometric median score lowest.
    pub fn geometric_median(net: &PrunableNetwork) -> ScoreTable {
        let mut entries = BTreeMap::new();
        for l in 0..net.num_layers() {
            let filters = net.alive_filters(l);
            let ws: Vec<Vec<f64>> = filters.iter().map(|&f| net.filter_weights(f)).collect();
            for (i, &f) in filters.iter().enumerate() {
                let d = ws
                    .iter()
                    .map(|w| w.iter().zip(&ws[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                    .sum::<f64>();
                entries.insert(f, d);
            }
        }
        ScoreTable { entries, batch_count: 0 }
    }

    /// Uniform random scores in `[0, 1)`.
    pub fn random(net: &PrunableNetwork, rng: &mut impl Rng) -> ScoreTable {
        let entries = (0..net.num_layers()).flat_map(|l| net.alive_filters(l)).map(|f| (f, rng.random::<f64>())).collect();
        ScoreTable { entries, batch_count: 0 }
    }

    pub fn random_seeded(net: &PrunableNetwork, seed: u64) -> ScoreTable {
        Self::random(net, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

pub fn score_filters(net: &PrunableNetwork, objective: &dyn Objective, batches: &[Batch]) -> Result<ScoreTable> {
    score_filters_with(net, objective, batches, Reduction::SumThenAbs, BnMode::Train)
}

pub fn score_filters_with(
    net: &PrunableNetwork,
    objective: &dyn Objective,
    batches: &[Batch],
    reduction: Reduction,
    mode: BnMode,
) -> Result<ScoreTable> {
    if batches.is_empty() {
        return Err(Error::InsufficientData { class: 0, available: 0, required: 1 });
    }
    let mut totals: BTreeMap<FilterRef, f64> = BTreeMap::new();
    for (bi, batch) in batches.iter().enumerate() {
        let pass = net.pass(net.params(), &batch.x, mode)?;
        let (_, dlogits) = objective.evaluate(batch, &pass.logits)?;
        if !dlogits.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NumericFailure { batch: bi, what: "objective gradient".into() });
        }
        let back = net.backward(net.params(), &pass, &dlogits)?;
        let mut sums: BTreeMap<FilterRef, f64> = BTreeMap::new();
        for site in &pass.taps {
            let f_map = &pass.acts[site.act];
            let g_map = back.acts[site.act]
                .as_ref()
                .ok_or_else(|| Error::Structural(format!("no gradient reaches the tap of layer {}", site.layer)))?;
            for f in net.alive_filters(site.layer) {
                let mut s = 0.0;
                for n in 0..f_map.n() {
                    let (a, g) = (f_map.plane(n, f.filter_index), g_map.plane(n, f.filter_index));
                    s += match reduction {
                        Reduction::SumThenAbs => a.iter().zip(g).map(|(x, y)| x * y).sum::<f64>(),
                        Reduction::AbsThenSum => a.iter().zip(g).map(|(x, y)| (x * y).abs()).sum::<f64>(),
                    };
                }
                *sums.entry(f).or_default() += s;
            }
        }
        for l in 0..net.num_layers() {
            for f in net.alive_filters(l) {
                let s = sums.get(&f).ok_or_else(|| Error::Structural(format!("filter {f:?} has no tap")))?;
                if !s.is_finite() {
                    return Err(Error::NumericFailure { batch: bi, what: format!("score of {f:?}") });
                }
                *totals.entry(f).or_default() += s.abs();
            }
        }
    }
    let inv = 1.0 / batches.len() as f64;
    Ok(ScoreTable { entries: totals.into_iter().map(|(f, s)| (f, s * inv)).collect(), batch_count: batches.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::zoo::{toy_cnn, ToyLayer};

    fn linear_reward(batch: &Batch, logits: &Tensor) -> Result<(f64, Tensor)> {
        let k = logits.c();
        let w = |i: usize| ((i % k) as f64 * 0.7 - 0.9) / batch.len() as f64;
        let v = logits.data().iter().enumerate().map(|(i, x)| w(i) * x).sum();
        let g = Tensor::from_vec(logits.shape(), (0..logits.data().len()).map(w).collect());
        Ok((v, g))
    }

    fn toy() -> (PrunableNetwork, Vec<Batch>) {
        let arch = toy_cnn([2, 5, 5], &[ToyLayer::new(4), ToyLayer::new(3).linear()], 3).unwrap();
        let net = PrunableNetwork::initialized(arch, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = (0..2)
            .map(|b| {
                let x = Tensor::from_vec([4, 2, 5, 5], (0..200).map(|_| rng.random_range(-1.0..1.0)).collect());
                Batch { x, labels: vec![0, 1, 2, 0], ids: (b * 4..b * 4 + 4).collect() }
            })
            .collect();
        (net, batches)
    }

    #[test]
    fn scale_covariance_and_determinism() {
        let (net, batches) = toy();
        let a = score_filters(&net, &linear_reward, &batches).unwrap();
        let b = score_filters(&net, &linear_reward, &batches).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), net.total_alive());
        let scaled = |batch: &Batch, l: &Tensor| {
            let (v, mut g) = linear_reward(batch, l)?;
            g.data_mut().iter_mut().for_each(|x| *x *= 3.0);
            Ok((3.0 * v, g))
        };
        let c = score_filters(&net, &scaled, &batches).unwrap();
        for (f, s) in &a.entries {
            assert!((c.entries[f] - 3.0 * s).abs() <= 1e-12 * s.abs().max(1.0));
        }
    }

    #[test]
    fn dead_channel_scores_zero() {
        let (mut net, batches) = toy();
        let slots = net.layout().convs[1];
        let p = net.params_mut();
        // zero filter 1 of the linear layer: its output channel becomes exactly 0
        for v in &mut p[slots.weight + 4 * 9..slots.weight + 2 * 4 * 9] {
            *v = 0.0;
        }
        p[slots.bias.unwrap() + 1] = 0.0;
        let s = score_filters(&net, &linear_reward, &batches).unwrap();
        assert_eq!(s.get(FilterRef::new(1, 1)), Some(0.0));
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let (net, batches) = toy();
        let bad = |_: &Batch, l: &Tensor| Ok((0.0, Tensor::from_vec(l.shape(), vec![f64::NAN; l.data().len()])));
        assert!(matches!(score_filters(&net, &bad, &batches), Err(Error::NumericFailure { batch: 0, .. })));
    }

    #[test]
    fn csv_export() {
        let (net, _) = toy();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        ScoreTable::l1(&net).write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1 + net.total_alive());
        assert!(text.starts_with("layer_index,filter_index,score\n0,0,"));
    }

    #[test]
    fn geometric_median_ranks_duplicates_lowest() {
        let (mut net, _) = toy();
        let (w, n) = (net.layout().conv_weight(0), 2 * 9);
        let p = net.params_mut();
        let first: Vec<f64> = p[w..w + n].to_vec();
        p[w + n..w + 2 * n].copy_from_slice(&first);
        let s = ScoreTable::geometric_median(&net);
        let d = |i: usize| s.get(FilterRef::new(0, i)).unwrap();
        assert!((d(0) - d(1)).abs() < 1e-12);
        assert!(d(0) < d(2) && d(0) < d(3));
        let w0 = net.filter_weights(FilterRef::new(0, 0));
        let w2 = net.filter_weights(FilterRef::new(0, 2));
        let w3 = net.filter_weights(FilterRef::new(0, 3));
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((d(2) - (2.0 * dist(&w2, &w0) + dist(&w2, &w3))).abs() < 1e-9);
    }
}
