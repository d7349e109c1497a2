//! Greedy sub-network search guided by ensemble knowledge.
//!
//! Every iteration scores the alive filters, proposes the lowest-scoring
//! fraction `r` of each layer as that layer's candidate set, evaluates the
//! reward of removing each set and commits the best one. The reward is the
//! negated validation loss minus a distillation loss against the running
//! mean of all interim networks' validation logits.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentationPolicy, Batch, Dataset, Splits};
use crate::error::{Error, IoContext, Result};
use crate::loss::{cross_entropy, kl_divergence};
use crate::netcore::{BnMode, FilterRef, PrunableNetwork};
use crate::optim::{train_epoch, Sgd};
use crate::scoring::{score_filters, Objective, ScoreTable};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreStrategy {
    #[default]
    Taylor,
    /// Taylor saliency of channel gates under the task loss alone.
    Gate,
    /// Distance to the layer's geometric median.
    Fpgm,
    L1,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Fraction of a layer's alive filters proposed per iteration.
    pub ratio: f64,
    /// FLOPs reduction goal τ.
    pub target_rate: f64,
    /// Accepted distance between the achieved rate and τ.
    pub band: f64,
    pub kd_weight: f64,
    pub kd_temperature: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub warmup_batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    pub strategy: ScoreStrategy,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            ratio: 0.2,
            target_rate: 0.5,
            band: 0.01,
            kd_weight: 1.0,
            kd_temperature: 1.0,
            batch_size: 256,
            warmup_epochs: 1,
            warmup_lr: 1e-3,
            warmup_batch_size: 256,
            max_iterations: None,
            strategy: ScoreStrategy::Taylor,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("candidate ratio {} must lie in (0, 1)", self.ratio)));
        }
        if !(0.0..1.0).contains(&self.target_rate) {
            return Err(Error::Config(format!("target rate {} must lie in [0, 1)", self.target_rate)));
        }
        if self.batch_size == 0 || self.warmup_batch_size == 0 || self.kd_temperature <= 0.0 || self.band < 0.0 {
            return Err(Error::Config("search batch sizes, temperature and band must be positive".into()));
        }
        Ok(())
    }
}

/// Running mean of interim networks' logits on the validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeSnapshot {
    ids: Vec<usize>,
    rows: BTreeMap<usize, usize>,
    classes: usize,
    logits: Vec<f64>,
    count: usize,
}

impl KnowledgeSnapshot {
    /// Knowledge of a single network: `ids[i]` owns row `i` of `logits`.
    pub fn new(ids: Vec<usize>, classes: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != ids.len() * classes {
            return Err(Error::ShapeMismatch("knowledge logits do not match ids".into()));
        }
        let rows = ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        Ok(KnowledgeSnapshot { ids, rows, classes, logits, count: 1 })
    }

    pub fn of_network(net: &PrunableNetwork, val: &[Batch]) -> Result<Self> {
        let (ids, logits) = collect_logits(net, val)?;
        Self::new(ids, net.num_classes(), logits)
    }

    /// Fold in one more network's outputs (same id order).
    pub fn absorb(&mut self, logits: &[f64]) -> Result<()> {
        if logits.len() != self.logits.len() {
            return Err(Error::ShapeMismatch("absorbed logits do not match the snapshot".into()));
        }
        self.count += 1;
        let inv = 1.0 / self.count as f64;
        for (m, &x) in self.logits.iter_mut().zip(logits) {
            *m += (x - *m) * inv;
        }
        Ok(())
    }

    /// Number of networks averaged so far.
    pub fn count(&self) -> usize {
        self.count
    }
    pub fn iteration(&self) -> usize {
        self.count - 1
    }
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn targets(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ids.len() * self.classes);
        for id in ids {
            let r = *self.rows.get(id).ok_or(Error::Coverage(*id))?;
            out.extend_from_slice(&self.logits[r * self.classes..(r + 1) * self.classes]);
        }
        Ok(out)
    }
}

/// Train-mode logits over consecutive batches, with the ids in batch order.
pub fn collect_logits(net: &PrunableNetwork, batches: &[Batch]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut ids = Vec::new();
    let mut logits = Vec::new();
    for b in batches {
        ids.extend_from_slice(&b.ids);
        logits.extend_from_slice(net.forward(&b.x, BnMode::Train)?.data());
    }
    Ok((ids, logits))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardParts {
    pub reward: f64,
    pub val_loss: f64,
    pub knowledge_loss: f64,
}

/// `−CE − w·KL(T ‖ net)` on the validation batches, BN in train mode.
struct RewardObjective<'a> {
    knowledge: &'a KnowledgeSnapshot,
    kd_weight: f64,
    temperature: f64,
    total: usize,
}

impl RewardObjective<'_> {
    fn parts(&self, batch: &Batch, logits: &Tensor) -> Result<(f64, f64, Tensor)> {
        let targets = self.knowledge.targets(&batch.ids)?;
        let (ce, gce) = cross_entropy(logits, &batch.labels);
        let (kl, gkl) = kl_divergence(&targets, logits, self.temperature);
        let share = batch.len() as f64 / self.total as f64;
        let grad = gce.data().iter().zip(gkl.data()).map(|(a, b)| -(a + self.kd_weight * b) * share).collect();
        Ok((ce * share, kl * share, Tensor::from_vec(logits.shape(), grad)))
    }
}

impl Objective for RewardObjective<'_> {
    fn evaluate(&self, batch: &Batch, logits: &Tensor) -> Result<(f64, Tensor)> {
        let (ce, kl, g) = self.parts(batch, logits)?;
        Ok((-(ce + self.kd_weight * kl), g))
    }
}

pub fn reward(net: &PrunableNetwork, val: &[Batch], knowledge: &KnowledgeSnapshot, kd_weight: f64, temperature: f64) -> Result<RewardParts> {
    let total = val.iter().map(Batch::len).sum::<usize>().max(1);
    let obj = RewardObjective { knowledge, kd_weight, temperature, total };
    let (mut val_loss, mut knowledge_loss) = (0.0, 0.0);
    for b in val {
        let logits = net.forward(&b.x, BnMode::Train)?;
        let (ce, kl, _) = obj.parts(b, &logits)?;
        val_loss += ce;
        knowledge_loss += kl;
    }
    Ok(RewardParts { reward: -(val_loss + kd_weight * knowledge_loss), val_loss, knowledge_loss })
}

/// Per-layer lowest-score filters proposed for joint removal.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub per_layer: BTreeMap<usize, Vec<FilterRef>>,
    pub ratio: f64,
}

/// `ceil(r · alive)`, robust to `r · alive` landing a hair above an integer.
pub fn candidate_count(ratio: f64, alive: usize) -> usize {
    ((ratio * alive as f64) - 1e-9).ceil().max(1.0) as usize
}

pub fn build_candidates(scores: &ScoreTable, net: &PrunableNetwork, ratio: f64) -> Result<CandidateSet> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("candidate ratio {ratio} must lie in (0, 1)")));
    }
    let mut per_layer = BTreeMap::new();
    for l in 0..net.num_layers() {
        let alive = net.alive_filters(l);
        let m = candidate_count(ratio, alive.len());
        if m >= alive.len() {
            continue;
        }
        let mut scored = alive
            .into_iter()
            .map(|f| scores.get(f).map(|s| (s, f)).ok_or(Error::Structural(format!("no score for {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.filter_index.cmp(&b.1.filter_index)));
        per_layer.insert(l, scored.into_iter().take(m).map(|(_, f)| f).collect());
    }
    if per_layer.is_empty() {
        return Err(Error::SearchStuck);
    }
    Ok(CandidateSet { per_layer, ratio })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub iteration: usize,
    pub chosen_layer: usize,
    /// Reward of removing each layer's full candidate set.
    pub rewards: BTreeMap<usize, f64>,
    pub val_loss: f64,
    pub knowledge_loss: f64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub removed: Vec<FilterRef>,
    /// The removal was truncated or redirected to land on the target rate.
    pub adjusted: bool,
    pub alive: Vec<usize>,
}

impl SearchRecord {
    pub fn argmax_layer(&self) -> Option<usize> {
        argmax(&self.rewards)
    }
}

fn argmax(rewards: &BTreeMap<usize, f64>) -> Option<usize> {
    rewards.iter().fold(None, |best: Option<(usize, f64)>, (&l, &r)| match best {
        Some((_, br)) if br >= r => best,
        _ => Some((l, r)),
    })
    .map(|(l, _)| l)
}

/// A by-product network of the search: masks over the warmed network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interim {
    pub iteration: usize,
    pub subset_loss: f64,
    pub flops: u64,
    #[serde(with = "mask_strings")]
    pub masks: Vec<Vec<bool>>,
}

impl Interim {
    pub fn network(&self, base: &PrunableNetwork) -> Result<PrunableNetwork> {
        base.with_masks(self.masks.clone())
    }
}

mod mask_strings {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(masks: &[Vec<bool>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(masks.iter().map(|m| m.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<bool>>, D::Error> {
        let rows = Vec::<String>::deserialize(d)?;
        rows.iter()
            .map(|r| {
                r.chars()
                    .map(|c| match c {
                        '1' => Ok(true),
                        '0' => Ok(false),
                        _ => Err(serde::de::Error::custom("mask strings hold only 0 and 1")),
                    })
                    .collect()
            })
            .collect()
    }
}

/// Fixed inputs of a search.
pub struct SearchContext {
    pub val: Vec<Batch>,
    pub subset: Vec<Batch>,
    pub config: SearchConfig,
    pub base_flops: u64,
}

impl SearchContext {
    pub fn new(net: &PrunableNetwork, data: &Dataset, splits: &Splits, config: SearchConfig) -> Result<Self> {
        config.validate()?;
        Ok(SearchContext {
            val: data.batches(&splits.val, config.batch_size),
            subset: data.batches(&splits.subset, config.batch_size),
            config,
            base_flops: net.flops(),
        })
    }

    pub fn reduction(&self, net: &PrunableNetwork) -> f64 {
        1.0 - net.flops() as f64 / self.base_flops as f64
    }

    fn subset_loss(&self, net: &PrunableNetwork) -> Result<f64> {
        let (ids, logits) = collect_logits(net, &self.subset)?;
        let labels: Vec<usize> = self.subset.iter().flat_map(|b| b.labels.iter().copied()).collect();
        let rows = crate::loss::cross_entropy_rows(&logits, net.num_classes(), &labels);
        Ok(rows.iter().sum::<f64>() / ids.len().max(1) as f64)
    }
}

#[derive(Clone, Debug)]
pub struct SearchState {
    pub network: PrunableNetwork,
    pub knowledge: KnowledgeSnapshot,
    pub iteration: usize,
    pub trace: Vec<SearchRecord>,
    pub interims: Vec<Interim>,
    pub done: bool,
}

impl SearchState {
    pub fn start(ctx: &SearchContext, network: PrunableNetwork) -> Result<Self> {
        let knowledge = KnowledgeSnapshot::of_network(&network, &ctx.val)?;
        let interims = vec![Interim {
            iteration: 0,
            subset_loss: ctx.subset_loss(&network)?,
            flops: network.flops(),
            masks: network.masks().to_vec(),
        }];
        let mut s = SearchState { network, knowledge, iteration: 0, trace: Vec::new(), interims, done: false };
        s.done = s.finished(ctx);
        Ok(s)
    }

    fn finished(&self, ctx: &SearchContext) -> bool {
        ctx.config.target_rate <= 0.0
            || ctx.reduction(&self.network) >= ctx.config.target_rate
            || ctx.config.max_iterations.is_some_and(|m| self.iteration >= m)
    }
}

/// Prefix length of `cands` whose removal lands closest to `target`, and
/// the reduction it reaches. Zero means removing nothing.
pub fn closest_prefix(base_flops: u64, net: &PrunableNetwork, cands: &[FilterRef], target: f64) -> Result<(usize, f64)> {
    let red = |m: usize| -> Result<f64> { Ok(1.0 - net.mask(&cands[..m])?.flops() as f64 / base_flops as f64) };
    let (mut lo, mut hi) = (0, cands.len());
    // smallest m with red(m) > target, found by bisection on a monotone sequence
    while lo < hi {
        let mid = (lo + hi) / 2;
        if red(mid)? > target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let over = lo;
    let mut best = (0, red(0)?);
    for m in [over.saturating_sub(1), over.min(cands.len())] {
        let r = red(m)?;
        if (r - target).abs() < (best.1 - target).abs() {
            best = (m, r);
        }
    }
    Ok(best)
}

/// One greedy iteration.
pub fn search_step(ctx: &SearchContext, mut state: SearchState) -> Result<SearchState> {
    if state.done {
        return Ok(state);
    }
    let cfg = &ctx.config;
    let net = &state.network;
    let scores = match cfg.strategy {
        ScoreStrategy::Taylor => {
            let total = ctx.val.iter().map(Batch::len).sum::<usize>().max(1);
            let obj = RewardObjective { knowledge: &state.knowledge, kd_weight: cfg.kd_weight, temperature: cfg.kd_temperature, total };
            score_filters(net, &obj, &ctx.val)?
        }
        ScoreStrategy::Gate => {
            let total = ctx.val.iter().map(Batch::len).sum::<usize>().max(1);
            let obj = RewardObjective { knowledge: &state.knowledge, kd_weight: 0.0, temperature: cfg.kd_temperature, total };
            score_filters(net, &obj, &ctx.val)?
        }
        ScoreStrategy::Fpgm => ScoreTable::geometric_median(net),
        ScoreStrategy::L1 => ScoreTable::l1(net),
        ScoreStrategy::Random => ScoreTable::random_seeded(net, cfg.seed ^ (state.iteration as u64).wrapping_mul(0x9E37_79B9)),
    };
    let cands = build_candidates(&scores, net, cfg.ratio)?;
    let evaluated: Vec<(usize, RewardParts)> = cands
        .per_layer
        .par_iter()
        .map(|(&l, c)| Ok((l, reward(&net.mask(c)?, &ctx.val, &state.knowledge, cfg.kd_weight, cfg.kd_temperature)?)))
        .collect::<Result<_>>()?;
    let rewards: BTreeMap<usize, f64> = evaluated.iter().map(|(l, p)| (*l, p.reward)).collect();
    let parts: BTreeMap<usize, RewardParts> = evaluated.into_iter().collect();
    let mut order: Vec<usize> = rewards.keys().copied().collect();
    order.sort_by(|a, b| rewards[b].total_cmp(&rewards[a]).then(a.cmp(b)));
    let chosen = order[0];

    let tau = cfg.target_rate;
    let full = ctx.reduction(&net.mask(&cands.per_layer[&chosen])?);
    let (layer, count, adjusted) = if full < tau {
        (chosen, cands.per_layer[&chosen].len(), false)
    } else {
        let mut pick = None;
        for &l in &order {
            let (m, r) = closest_prefix(ctx.base_flops, net, &cands.per_layer[&l], tau)?;
            if (r - tau).abs() <= cfg.band {
                pick = Some((l, m));
                break;
            }
        }
        match pick {
            Some((_, 0)) => {
                state.done = true;
                return Ok(state);
            }
            Some((l, m)) => (l, m, true),
            None => {
                // nothing lands in the band from here: take the largest
                // non-overshooting prefix of the best layer that has one
                let mut fallback = None;
                for &l in &order {
                    let (m, r) = closest_prefix(ctx.base_flops, net, &cands.per_layer[&l], tau)?;
                    let m = if r > tau { m - 1 } else { m };
                    if m > 0 {
                        fallback = Some((l, m));
                        break;
                    }
                }
                match fallback {
                    Some((l, m)) => (l, m, true),
                    None => {
                        let (m, r) = closest_prefix(ctx.base_flops, net, &cands.per_layer[&chosen], tau)?;
                        log::warn!("target rate {tau} cannot be met within the band; stopping at {r:.4}");
                        (chosen, m.max(1), true)
                    }
                }
            }
        }
    };
    let removed: Vec<FilterRef> = cands.per_layer[&layer][..count].to_vec();
    let flops_before = net.flops();
    let next = net.mask(&removed)?;
    let (_, logits) = collect_logits(&next, &ctx.val)?;
    state.knowledge.absorb(&logits)?;
    state.iteration += 1;
    let p = parts[&layer];
    state.trace.push(SearchRecord {
        iteration: state.iteration,
        chosen_layer: layer,
        rewards,
        val_loss: p.val_loss,
        knowledge_loss: p.knowledge_loss,
        flops_before,
        flops_after: next.flops(),
        removed,
        adjusted,
        alive: next.alive_counts(),
    });
    state.interims.push(Interim {
        iteration: state.iteration,
        subset_loss: ctx.subset_loss(&next)?,
        flops: next.flops(),
        masks: next.masks().to_vec(),
    });
    log::info!(
        "search iteration {}: layer {} removed {} filters, reduction {:.4}",
        state.iteration,
        layer,
        count,
        ctx.reduction(&next)
    );
    state.network = next;
    state.done = state.finished(ctx) || adjusted && (ctx.reduction(&state.network) - tau).abs() <= cfg.band;
    Ok(state)
}

pub struct SearchOutcome {
    pub network: PrunableNetwork,
    pub warmed: PrunableNetwork,
    pub trace: Vec<SearchRecord>,
    pub interims: Vec<Interim>,
    pub knowledge: KnowledgeSnapshot,
    pub base_flops: u64,
}

impl SearchOutcome {
    pub fn achieved_rate(&self) -> f64 {
        1.0 - self.network.flops() as f64 / self.base_flops as f64
    }
}

/// Fewest FLOPs reachable by masking: one alive filter per layer.
pub fn minimum_flops(net: &PrunableNetwork) -> Result<u64> {
    let masks = net.masks().iter().map(|m| m.iter().enumerate().map(|(i, _)| i == 0).collect()).collect();
    Ok(net.with_masks(masks)?.flops())
}

/// Warm up on the subset, then iterate until the FLOPs goal is met.
pub fn run_search(pretrained: &PrunableNetwork, data: &Dataset, splits: &Splits, config: &SearchConfig) -> Result<SearchOutcome> {
    let ctx = SearchContext::new(pretrained, data, splits, config.clone())?;
    let reachable = 1.0 - minimum_flops(pretrained)? as f64 / ctx.base_flops as f64;
    if config.target_rate > reachable + config.band {
        return Err(Error::InfeasibleTarget { target: config.target_rate, reachable });
    }
    let warmed = warm_up(pretrained, data, &splits.subset, config)?;
    let mut state = SearchState::start(&ctx, warmed.clone())?;
    while !state.done {
        state = search_step(&ctx, state)?;
    }
    Ok(SearchOutcome {
        network: state.network,
        warmed,
        trace: state.trace,
        interims: state.interims,
        knowledge: state.knowledge,
        base_flops: ctx.base_flops,
    })
}

/// Plain fine-tuning on the subset before the search starts.
pub fn warm_up(net: &PrunableNetwork, data: &Dataset, subset: &[usize], config: &SearchConfig) -> Result<PrunableNetwork> {
    let mut net = net.clone();
    let mut opt = Sgd::new(0.9, true, 5e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.warmup_epochs {
        train_epoch(
            &mut net,
            data,
            subset,
            config.warmup_batch_size,
            &AugmentationPolicy::search(),
            &mut opt,
            config.warmup_lr,
            &mut rng,
        )?;
    }
    Ok(net)
}

pub fn write_trace(path: &Path, trace: &[SearchRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in trace {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).at(path)?;
    f.write_all(&out).at(path)
}

pub fn read_trace(path: &Path) -> Result<Vec<SearchRecord>> {
    let f = std::fs::File::open(path).at(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.at(path)?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn interim_dir(run_dir: &Path, iteration: usize) -> PathBuf {
    run_dir.join("interim").join(iteration.to_string())
}

pub fn save_interims(run_dir: &Path, interims: &[Interim]) -> Result<()> {
    for it in interims {
        let dir = interim_dir(run_dir, it.iteration);
        std::fs::create_dir_all(&dir).at(&dir)?;
        let p = dir.join("interim.json");
        std::fs::write(&p, serde_json::to_vec_pretty(it)?).at(&p)?;
    }
    Ok(())
}

pub fn load_interims(run_dir: &Path) -> Result<Vec<Interim>> {
    let root = run_dir.join("interim");
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&root).at(&root)? {
        let p = entry.at(&root)?.path().join("interim.json");
        if p.exists() {
            out.push(serde_json::from_slice::<Interim>(&std::fs::read(&p).at(&p)?)?);
        }
    }
    out.sort_by_key(|i| i.iteration);
    Ok(out)
}
