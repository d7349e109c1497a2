//! Phase-by-phase execution inside a run directory.
//!
//! Phases run in a fixed order and persist their outputs before being
//! marked complete in `manifest.json`. Each completion records a hash of
//! the configuration sections the phase depends on, so a later request
//! either skips a current phase, recomputes the requested one, or refuses
//! to build on a phase computed under different settings.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{hash_json, LandscapeConfig, PretrainConfig, RunConfig};
use crate::data::{make_splits, read_index_file, write_index_file, AugmentationPolicy, Batch, Dataset, Splits, Stage};
use crate::error::{Error, IoContext, Result};
use crate::finetune::{run_finetune, write_metrics_csv, FinetuneData, StepLog};
use crate::landscape::{grid_directions, landscape_grid, traverse_cn, write_heatmap, LandscapeGrid, LandscapeReport, NetLoss, TraversalConfig};
use crate::membank::{build_bank, select_teachers, MemoryBank, BANK_FORMAT};
use crate::netcore::{load_checkpoint, save_checkpoint, Architecture, BnMode, PrunableNetwork, CHECKPOINT_FORMAT};
use crate::optim::{evaluate, train_epoch, Sgd};
use crate::search::{load_interims, run_search, save_interims, write_trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Splits,
    Search,
    Membank,
    Finetune,
    Evaluate,
    Landscape,
}

impl Phase {
    pub const ALL: [Phase; 7] =
        [Phase::Pretrain, Phase::Splits, Phase::Search, Phase::Membank, Phase::Finetune, Phase::Evaluate, Phase::Landscape];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Splits => "splits",
            Phase::Search => "search",
            Phase::Membank => "membank",
            Phase::Finetune => "finetune",
            Phase::Evaluate => "evaluate",
            Phase::Landscape => "landscape",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn v(x: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(x).expect("config serializes")
}

/// Hash of the configuration sections `phase` and its predecessors read.
pub fn phase_hash(cfg: &RunConfig, phase: Phase) -> String {
    let mut parts = vec![v(&cfg.dataset), v(&cfg.model), v(&cfg.pretrain), v(&cfg.seed)];
    if phase >= Phase::Splits {
        parts.push(v(&cfg.splits));
    }
    if phase >= Phase::Search {
        parts.push(v(&cfg.search));
    }
    if phase >= Phase::Membank {
        parts.push(v(&cfg.membank));
    }
    if phase >= Phase::Finetune {
        parts.push(v(&cfg.finetune));
    }
    if phase >= Phase::Landscape {
        parts.push(v(&cfg.landscape));
    }
    hash_json(&parts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub completed: bool,
    pub seconds: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub phases: BTreeMap<Phase, PhaseRecord>,
}

impl RunManifest {
    /// Manifest of `run_dir`, empty when none exists yet.
    pub fn load(run_dir: &Path) -> Result<Self> {
        let p = RunLayout::new(run_dir).manifest();
        if !p.exists() {
            return Ok(RunManifest::default());
        }
        Ok(serde_json::from_slice(&std::fs::read(&p).at(&p)?)?)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let p = RunLayout::new(run_dir).manifest();
        let tmp = p.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?).at(&tmp)?;
        std::fs::rename(&tmp, &p).at(&p)
    }

    pub fn is_complete(&self, phase: Phase) -> bool {
        self.phases.get(&phase).is_some_and(|r| r.completed)
    }

    /// Completed under the configuration hash `hash`.
    pub fn is_current(&self, phase: Phase, hash: &str) -> bool {
        self.phases.get(&phase).is_some_and(|r| r.completed && r.config_hash == hash)
    }
}

fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("ekg".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("membank".to_string(), BANK_FORMAT.to_string()),
    ])
}

/// Fixed file layout of a run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        RunLayout { root: root.to_path_buf() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }
    pub fn pretrained(&self) -> PathBuf {
        self.root.join("pretrained")
    }
    pub fn pretrain_history(&self) -> PathBuf {
        self.root.join("pretrained").join("history.csv")
    }
    pub fn subset(&self) -> PathBuf {
        self.root.join("splits").join("subset.txt")
    }
    pub fn val(&self) -> PathBuf {
        self.root.join("splits").join("val.txt")
    }
    pub fn warmed(&self) -> PathBuf {
        self.root.join("search").join("warmed")
    }
    pub fn pruned(&self) -> PathBuf {
        self.root.join("search").join("pruned")
    }
    pub fn trace(&self) -> PathBuf {
        self.root.join("search").join("trace.jsonl")
    }
    pub fn search_summary(&self) -> PathBuf {
        self.root.join("search").join("summary.json")
    }
    pub fn interims(&self) -> PathBuf {
        self.root.join("interim")
    }
    pub fn membank(&self) -> PathBuf {
        self.root.join("membank")
    }
    pub fn finetune_metrics(&self) -> PathBuf {
        self.root.join("finetune").join("metrics.csv")
    }
    pub fn finetune_steps(&self) -> PathBuf {
        self.root.join("finetune").join("steps.csv")
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("finetune").join("final")
    }
    pub fn eval_metrics(&self) -> PathBuf {
        self.root.join("evaluate").join("metrics.json")
    }
    pub fn cn_csv(&self) -> PathBuf {
        self.root.join("landscape").join("cn.csv")
    }
    pub fn grid_csv(&self) -> PathBuf {
        self.root.join("landscape").join("grid.csv")
    }
    pub fn grid_png(&self) -> PathBuf {
        self.root.join("landscape").join("grid.png")
    }
    pub fn landscape_summary(&self) -> PathBuf {
        self.root.join("landscape").join("summary.json")
    }

    pub fn read_splits(&self) -> Result<Splits> {
        Ok(Splits { subset: read_index_file(&self.subset())?, val: read_index_file(&self.val())? })
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir).at(run_dir)?;
        let path = RunLayout::new(run_dir).lock();
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(run_dir.to_path_buf())),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Configuration stored in an existing run directory.
pub fn load_run_config(run_dir: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&RunLayout::new(run_dir).config())?;
    cfg.run_dir = run_dir.to_path_buf();
    Ok(cfg)
}

/// Test-set metrics of the fine-tuned network. Percentages are in `[0, 100]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub method: String,
    pub target_rate: f64,
    pub accuracy: f64,
    pub test_loss: f64,
    pub base_accuracy: f64,
    pub flops: u64,
    pub base_flops: u64,
    pub params: u64,
    pub base_params: u64,
    pub flops_reduction_pct: f64,
    pub param_reduction_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub target_rate: f64,
    pub achieved_rate: f64,
    pub base_flops: u64,
    pub flops: u64,
    pub iterations: usize,
}

pub struct Pipeline {
    config: RunConfig,
    layout: RunLayout,
    manifest: RunManifest,
    data: Option<(Dataset, Dataset)>,
    _lock: RunLock,
}

impl Pipeline {
    /// Lock the run directory and record the effective configuration.
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let lock = RunLock::acquire(&config.run_dir)?;
        let layout = RunLayout::new(&config.run_dir);
        let p = layout.config();
        std::fs::write(&p, config.to_toml()?).at(&p)?;
        let mut manifest = RunManifest::load(&layout.root)?;
        manifest.config_hash = config.hash();
        manifest.versions = versions();
        manifest.save(&layout.root)?;
        Ok(Pipeline { config, layout, manifest, data: None, _lock: lock })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }
    pub fn layout(&self) -> &RunLayout {
        &self.layout
    }
    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Bring every phase up to `target` to completion. Missing predecessors
    /// are computed; `target` is recomputed when its configuration changed;
    /// a predecessor completed under different settings is an error.
    pub fn run(&mut self, target: Phase) -> Result<()> {
        for phase in Phase::ALL.into_iter().filter(|p| *p <= target) {
            let hash = phase_hash(&self.config, phase);
            if self.manifest.is_current(phase, &hash) {
                log::info!("phase {phase} is up to date");
                continue;
            }
            if phase != target && self.manifest.is_complete(phase) {
                return Err(Error::Phase {
                    phase: phase.name().into(),
                    source: Box::new(Error::Config(format!(
                        "phase {phase} was completed under a different configuration; rerun it explicitly or use a new run directory"
                    ))),
                });
            }
            if self.manifest.is_complete(phase) {
                log::warn!("recomputing phase {phase}: its configuration changed");
            }
            self.execute(phase, hash)?;
        }
        Ok(())
    }

    fn execute(&mut self, phase: Phase, hash: String) -> Result<()> {
        self.manifest.phases.retain(|p, _| *p < phase);
        self.manifest.save(&self.layout.root)?;
        log::info!("phase {phase} started");
        let start = Instant::now();
        self.body(phase).map_err(|e| Error::Phase { phase: phase.name().into(), source: Box::new(e) })?;
        let seconds = start.elapsed().as_secs_f64();
        log::info!("phase {phase} finished in {seconds:.1}s");
        self.manifest.phases.insert(phase, PhaseRecord { completed: true, seconds, config_hash: hash });
        self.manifest.save(&self.layout.root)
    }

    fn body(&mut self, phase: Phase) -> Result<()> {
        if self.data.is_none() {
            self.data = Some(self.config.dataset.load()?);
        }
        let (train, test) = self.data.as_ref().expect("loaded above");
        let (cfg, layout) = (&self.config, &self.layout);
        match phase {
            Phase::Pretrain => phase_pretrain(cfg, layout, train),
            Phase::Splits => {
                let s = make_splits(train.labels(), train.num_classes(), &cfg.splits)?;
                let dir = layout.root.join("splits");
                std::fs::create_dir_all(&dir).at(&dir)?;
                write_index_file(&layout.subset(), &s.subset)?;
                write_index_file(&layout.val(), &s.val)
            }
            Phase::Search => phase_search(cfg, layout, train),
            Phase::Membank => phase_membank(cfg, layout, train),
            Phase::Finetune => phase_finetune(cfg, layout, train),
            Phase::Evaluate => phase_evaluate(cfg, layout, test),
            Phase::Landscape => phase_landscape(cfg, layout, train),
        }
    }
}

/// Run every phase; phases already completed under this configuration are skipped.
pub fn run_pipeline(config: RunConfig) -> Result<RunManifest> {
    let mut p = Pipeline::open(config)?;
    p.run(Phase::Landscape)?;
    Ok(p.manifest().clone())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) => std::fs::create_dir_all(d).at(d),
        None => Ok(()),
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, serde_json::to_vec_pretty(v)?).at(path)
}

fn clear_dir(path: &Path) -> Result<()> {
    if path.exists() {
        std::fs::remove_dir_all(path).at(path)?;
    }
    Ok(())
}

/// Supervised training from a fresh initialisation on all of `train`.
/// Returns the network and the mean loss of each epoch.
pub fn pretrain_network(arch: Architecture, train: &Dataset, cfg: &PretrainConfig, seed: u64) -> Result<(PrunableNetwork, Vec<f64>)> {
    let mut net = PrunableNetwork::initialized(arch, seed);
    let mut opt = Sgd::new(cfg.momentum, true, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = if cfg.augment { AugmentationPolicy::finetune(4, false) } else { AugmentationPolicy::identity(Stage::FinetuneBase) };
    let ids = train.all_ids();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let loss = train_epoch(&mut net, train, &ids, cfg.batch_size, &policy, &mut opt, cfg.lr.at(epoch), &mut rng)
            .map_err(|e| match e {
                Error::Diverged { loss, .. } => Error::Diverged { epoch, loss },
                e => e,
            })?;
        log::info!("pretrain epoch {epoch}: loss {loss:.4}");
        history.push(loss);
    }
    Ok((net, history))
}

fn phase_pretrain(cfg: &RunConfig, layout: &RunLayout, train: &Dataset) -> Result<()> {
    let arch = cfg.model.architecture(train.shape(), train.num_classes())?;
    let (net, history) = match &cfg.pretrain.checkpoint {
        Some(p) => {
            let net = load_checkpoint(p)?;
            if net.architecture() != &arch {
                return Err(Error::Config(format!("checkpoint {} does not match the configured model", p.display())));
            }
            (net, Vec::new())
        }
        None => pretrain_network(arch, train, &cfg.pretrain, cfg.seed)?,
    };
    clear_dir(&layout.pretrained())?;
    save_checkpoint(&net, &layout.pretrained())?;
    let mut csv = String::from("epoch,lr,train_loss\n");
    for (e, l) in history.iter().enumerate() {
        csv.push_str(&format!("{e},{},{l}\n", cfg.pretrain.lr.at(e)));
    }
    let p = layout.pretrain_history();
    std::fs::write(&p, csv).at(&p)
}

fn phase_search(cfg: &RunConfig, layout: &RunLayout, train: &Dataset) -> Result<()> {
    let pre = load_checkpoint(&layout.pretrained())?;
    let splits = layout.read_splits()?;
    let out = run_search(&pre, train, &splits, &cfg.search)?;
    clear_dir(&layout.root.join("search"))?;
    clear_dir(&layout.interims())?;
    save_checkpoint(&out.warmed, &layout.warmed())?;
    save_checkpoint(&out.network, &layout.pruned())?;
    write_trace(&layout.trace(), &out.trace)?;
    save_interims(&layout.root, &out.interims)?;
    write_json(
        &layout.search_summary(),
        &SearchSummary {
            target_rate: cfg.search.target_rate,
            achieved_rate: out.achieved_rate(),
            base_flops: out.base_flops,
            flops: out.network.flops(),
            iterations: out.trace.len(),
        },
    )
}

fn phase_membank(cfg: &RunConfig, layout: &RunLayout, train: &Dataset) -> Result<()> {
    let warmed = load_checkpoint(&layout.warmed())?;
    let interims = load_interims(&layout.root)?;
    let (first, last) = match (interims.first(), interims.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::NoTeachers),
    };
    let losses: BTreeMap<usize, f64> = interims.iter().map(|i| (i.iteration, i.subset_loss)).collect();
    let picks = select_teachers(&losses, last.subset_loss, first.subset_loss, cfg.membank.k)?;
    log::info!("teachers at iterations {picks:?}");
    let mut cache: BTreeMap<usize, PrunableNetwork> = BTreeMap::new();
    let mut teachers = Vec::with_capacity(picks.len());
    for &i in &picks {
        if !cache.contains_key(&i) {
            let it = interims.iter().find(|x| x.iteration == i).expect("picked from these interims");
            cache.insert(i, it.network(&warmed)?.materialize());
        }
        teachers.push((i, cache[&i].clone()));
    }
    let bank = build_bank(&teachers, train, &train.all_ids(), cfg.membank.batch_size)?;
    clear_dir(&layout.membank())?;
    bank.save(&layout.membank())
}

pub fn write_steps_csv(path: &Path, steps: &[StepLog]) -> Result<()> {
    let mut out = String::from("epoch,step,gate_loss,qualifying\n");
    for s in steps {
        out.push_str(&format!("{},{},{},{}\n", s.epoch, s.step, s.gate_loss, s.qualifying));
    }
    std::fs::write(path, out).at(path)
}

fn phase_finetune(cfg: &RunConfig, layout: &RunLayout, train: &Dataset) -> Result<()> {
    let student = load_checkpoint(&layout.pruned())?.materialize();
    let splits = layout.read_splits()?;
    let ids = train.all_ids();
    let bank = if cfg.finetune.kd_weight != 0.0 { Some(MemoryBank::open(&layout.membank())?) } else { None };
    let data = FinetuneData { train, train_ids: &ids, val_ids: &splits.val, test: None };
    let out = run_finetune(&student, bank.as_ref(), &data, &cfg.finetune)?;
    clear_dir(&layout.root.join("finetune"))?;
    save_checkpoint(&out.network, &layout.final_checkpoint())?;
    write_metrics_csv(&layout.finetune_metrics(), &out.epochs)?;
    write_steps_csv(&layout.finetune_steps(), &out.steps)
}

fn pct(reduced: u64, base: u64) -> f64 {
    if base == 0 {
        0.0
    } else {
        100.0 * (1.0 - reduced as f64 / base as f64)
    }
}

fn phase_evaluate(cfg: &RunConfig, layout: &RunLayout, test: &Dataset) -> Result<()> {
    let fin = load_checkpoint(&layout.final_checkpoint())?;
    let pre = load_checkpoint(&layout.pretrained())?;
    let bs = cfg.finetune.eval_batch_size;
    let ids = test.all_ids();
    let (test_loss, acc) = evaluate(&fin, test, &ids, bs, BnMode::Eval)?;
    let (_, base_acc) = evaluate(&pre, test, &ids, bs, BnMode::Eval)?;
    let m = EvalMetrics {
        method: cfg.method.clone(),
        target_rate: cfg.search.target_rate,
        accuracy: 100.0 * acc,
        test_loss,
        base_accuracy: 100.0 * base_acc,
        flops: fin.flops(),
        base_flops: pre.flops(),
        params: fin.param_count(),
        base_params: pre.param_count(),
        flops_reduction_pct: pct(fin.flops(), pre.flops()),
        param_reduction_pct: pct(fin.param_count(), pre.param_count()),
    };
    log::info!("test accuracy {:.2}%, FLOPs reduction {:.2}%", m.accuracy, m.flops_reduction_pct);
    write_json(&layout.eval_metrics(), &m)
}

/// The first `lc.hessian_batches` validation batches.
pub fn landscape_batches(lc: &LandscapeConfig, train: &Dataset, splits: &Splits) -> Vec<Batch> {
    train.batches(&splits.val, lc.batch_size).into_iter().take(lc.hessian_batches.max(1)).collect()
}

/// Condition-number traversal of `net` on `batches`.
pub fn cn_profile(net: &PrunableNetwork, batches: Vec<Batch>, cfg: &TraversalConfig) -> Result<LandscapeReport> {
    let model = NetLoss::new(net, batches);
    traverse_cn(&model, &model.params(), cfg)
}

/// Two-dimensional loss slice of `net` through its parameters.
pub fn loss_grid(net: &PrunableNetwork, batches: Vec<Batch>, extent: f64, resolution: usize, seed: u64) -> Result<LandscapeGrid> {
    let model = NetLoss::new(net, batches);
    let p = model.params();
    let (u, v) = grid_directions(&model, &p, seed)?;
    landscape_grid(&model, &p, &u, &v, extent, resolution)
}

fn phase_landscape(cfg: &RunConfig, layout: &RunLayout, train: &Dataset) -> Result<()> {
    let net = load_checkpoint(&layout.final_checkpoint())?;
    let batches = landscape_batches(&cfg.landscape, train, &layout.read_splits()?);
    let lc = &cfg.landscape;
    let mut report = cn_profile(&net, batches.clone(), &lc.traversal)?;
    let grid = loss_grid(&net, batches, lc.grid_extent, lc.grid_resolution, cfg.seed)?;
    clear_dir(&layout.root.join("landscape"))?;
    ensure_parent(&layout.cn_csv())?;
    report.write_csv(&layout.cn_csv())?;
    grid.write_csv(&layout.grid_csv())?;
    write_heatmap(&grid, &layout.grid_png(), 16)?;
    report.grid = Some(grid);
    write_json(&layout.landscape_summary(), &report)
}
