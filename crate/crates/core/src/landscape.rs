//! Loss-landscape analysis: Hessian extremal eigenvalues and condition
//! numbers along a gradient traversal, 2-D loss grids, random
//! sub-networks and the correlation study between validation loss,
//! condition number and post-fine-tuning loss.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, Splits};
use crate::error::{Error, IoContext, Result};
use crate::finetune::{run_finetune, FinetuneConfig, FinetuneData};
use crate::loss::cross_entropy;
use crate::netcore::{BnMode, FilterRef, PrunableNetwork};
use crate::optim::evaluate;
use crate::search::{candidate_count, closest_prefix, collect_logits};
use crate::tensor::Dual;

/// A twice-differentiable scalar function of a flat parameter vector.
pub trait LossModel: Sync {
    fn dim(&self) -> usize;
    fn loss(&self, p: &[f64]) -> Result<f64>;
    fn gradient(&self, p: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// Hessian-vector product `H(p)·v`.
    fn hvp(&self, p: &[f64], v: &[f64]) -> Result<Vec<f64>>;
}

/// `½ xᵀHx + gᵀx` with an explicit symmetric Hessian.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub dim: usize,
    pub hessian: Vec<f64>,
    pub linear: Vec<f64>,
}

impl Quadratic {
    pub fn new(dim: usize, hessian: Vec<f64>) -> Self {
        assert_eq!(hessian.len(), dim * dim, "square Hessian");
        Quadratic { dim, hessian, linear: vec![0.0; dim] }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let mut h = vec![0.0; n * n];
        for (i, &v) in d.iter().enumerate() {
            h[i * n + i] = v;
        }
        Self::new(n, h)
    }

    fn mul(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|i| (0..self.dim).map(|j| self.hessian[i * self.dim + j] * v[j]).sum()).collect()
    }
}

impl LossModel for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }
    fn loss(&self, p: &[f64]) -> Result<f64> {
        let hp = self.mul(p);
        Ok(0.5 * dot(p, &hp) + dot(&self.linear, p))
    }
    fn gradient(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let hp = self.mul(p);
        let g = hp.iter().zip(&self.linear).map(|(a, b)| a + b).collect();
        Ok((0.5 * dot(p, &hp) + dot(&self.linear, p), g))
    }
    fn hvp(&self, _p: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.mul(v))
    }
}

/// Mean cross entropy of a network over fixed batches, BN in train mode.
/// Parameters are the network's flat parameter vector.
pub struct NetLoss {
    pub net: PrunableNetwork,
    pub batches: Vec<Batch>,
    pub scale: f64,
}

impl NetLoss {
    /// Materializes the network so masked filters add no flat directions.
    pub fn new(net: &PrunableNetwork, batches: Vec<Batch>) -> Self {
        NetLoss { net: net.materialize(), batches, scale: 1.0 }
    }

    pub fn params(&self) -> Vec<f64> {
        self.net.params().to_vec()
    }
}

impl LossModel for NetLoss {
    fn dim(&self) -> usize {
        self.net.params().len()
    }

    fn loss(&self, p: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for b in &self.batches {
            let logits = self.net.pass(p, &b.x, BnMode::Train)?.logits;
            total += cross_entropy(&logits, &b.labels).0;
        }
        Ok(self.scale * total / self.batches.len() as f64)
    }

    fn gradient(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut total = 0.0;
        let mut g = vec![0.0; p.len()];
        let w = self.scale / self.batches.len() as f64;
        for b in &self.batches {
            let pass = self.net.pass(p, &b.x, BnMode::Train)?;
            let (l, dl) = cross_entropy(&pass.logits, &b.labels);
            total += l;
            let back = self.net.backward(p, &pass, &dl)?;
            for (a, v) in g.iter_mut().zip(&back.params) {
                *a += w * v;
            }
        }
        Ok((w * total, g))
    }

    fn hvp(&self, p: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let dp: Vec<Dual> = p.iter().zip(v).map(|(&re, &du)| Dual { re, du }).collect();
        let mut hv = vec![0.0; p.len()];
        let w = self.scale / self.batches.len() as f64;
        for b in &self.batches {
            let x = b.x.lift::<Dual>();
            let pass = self.net.pass(&dp, &x, BnMode::Train)?;
            let (_, dl) = cross_entropy(&pass.logits, &b.labels);
            let back = self.net.backward(&dp, &pass, &dl)?;
            for (a, g) in hv.iter_mut().zip(&back.params) {
                *a += w * g.du;
            }
        }
        Ok(hv)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EigenConfig {
    /// Stop when the Ritz residual is below `tol · |λ|` for the eigenvalue sought.
    pub tol: f64,
    pub max_iter: usize,
    /// Vectors iterated together; 1 is the classical power method.
    pub block: usize,
    pub seed: u64,
}

impl Default for EigenConfig {
    fn default() -> Self {
        EigenConfig { tol: 1e-3, max_iter: 100, block: 4, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extremal {
    /// Eigenvalue of largest magnitude.
    pub lambda_max: f64,
    /// The opposite end of the spectrum, found on `λ_max·I − H`.
    pub lambda_min: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl Extremal {
    pub fn condition_number(&self) -> f64 {
        if self.lambda_max == 0.0 {
            0.0
        } else {
            (self.lambda_min / self.lambda_max).abs().min(1.0)
        }
    }
}

fn orthonormalize(vs: &mut [Vec<f64>], rng: &mut ChaCha8Rng) {
    let dim = vs.first().map_or(0, Vec::len);
    for i in 0..vs.len() {
        for _ in 0..3 {
            let (head, tail) = vs.split_at_mut(i);
            let v = &mut tail[0];
            for u in head.iter() {
                let d = dot(v, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
            }
            let n = norm(v);
            if n > 1e-150 && n.is_finite() {
                v.iter_mut().for_each(|x| *x /= n);
                break;
            }
            *v = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        }
    }
}

/// Dominant eigenpair of `op` by block power iteration with Rayleigh–Ritz.
/// `target` maps the Ritz value to the eigenvalue whose relative accuracy
/// decides convergence.
fn dominant(
    op: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    dim: usize,
    cfg: &EigenConfig,
    rng: &mut ChaCha8Rng,
    target: &dyn Fn(f64) -> f64,
) -> Result<(f64, bool, usize)> {
    let p = cfg.block.clamp(1, dim.max(1));
    let mut vs: Vec<Vec<f64>> = (0..p).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
    orthonormalize(&mut vs, rng);
    let mut best = 0.0;
    for it in 1..=cfg.max_iter.max(1) {
        let ws = vs.iter().map(|v| op(v)).collect::<Result<Vec<_>>>()?;
        let t = DMatrix::from_fn(p, p, |i, j| 0.5 * (dot(&vs[i], &ws[j]) + dot(&vs[j], &ws[i])));
        let eig = SymmetricEigen::new(t);
        let j = (0..p).fold(0, |b, k| if eig.eigenvalues[k].abs() > eig.eigenvalues[b].abs() { k } else { b });
        let theta = eig.eigenvalues[j];
        if !theta.is_finite() {
            return Err(Error::NumericFailure { batch: 0, what: "Hessian-vector product".into() });
        }
        let mut res = vec![0.0; dim];
        for k in 0..p {
            let c = eig.eigenvectors[(k, j)];
            for ((r, w), v) in res.iter_mut().zip(&ws[k]).zip(&vs[k]) {
                *r += c * (w - theta * v);
            }
        }
        best = theta;
        if norm(&res) <= cfg.tol * target(theta).abs() {
            return Ok((theta, true, it));
        }
        vs = ws;
        orthonormalize(&mut vs, rng);
    }
    Ok((best, false, cfg.max_iter))
}

pub fn extremal_eigenvalues(model: &dyn LossModel, p: &[f64], cfg: &EigenConfig) -> Result<Extremal> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = model.dim();
    let hv = |v: &[f64]| model.hvp(p, v);
    let (lmax, c1, i1) = dominant(&hv, dim, cfg, &mut rng, &|t| t)?;
    let shifted = |v: &[f64]| -> Result<Vec<f64>> { Ok(model.hvp(p, v)?.iter().zip(v).map(|(h, x)| lmax * x - h).collect()) };
    let (mu, c2, i2) = dominant(&shifted, dim, cfg, &mut rng, &|m| lmax - m)?;
    Ok(Extremal { lambda_max: lmax, lambda_min: lmax - mu, converged: c1 && c2, iterations: i1 + i2 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraversalMode {
    /// Full-space extremal eigenvalues at every point.
    #[default]
    Full,
    /// Second directional derivative along the gradient at every point.
    Directional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraversalConfig {
    pub points: usize,
    pub scale: f64,
    /// Traverse `t ∈ [0, 1]` instead of `[−1, 1]`.
    pub one_sided: bool,
    pub mode: TraversalMode,
    pub eigen: EigenConfig,
}

impl Default for TraversalConfig {
    fn default() -> Self {
        TraversalConfig { points: 21, scale: 0.1, one_sided: false, mode: TraversalMode::Full, eigen: EigenConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnSample {
    pub t: f64,
    pub loss: f64,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub cn: f64,
    pub converged: bool,
    /// Excluded from the mean (non-finite loss or curvature).
    pub excluded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub extent: f64,
    pub resolution: usize,
    /// Row-major `(2r+1)²` losses; rows follow the second direction.
    pub values: Vec<f64>,
}

impl LandscapeGrid {
    pub fn side(&self) -> usize {
        2 * self.resolution + 1
    }
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side() + col]
    }
    pub fn center(&self) -> f64 {
        self.at(self.resolution, self.resolution)
    }

    /// Lattice coordinate of index `i` along either axis.
    pub fn coord(&self, i: usize) -> f64 {
        if self.resolution == 0 {
            0.0
        } else {
            self.extent * (i as f64 - self.resolution as f64) / self.resolution as f64
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("row,col,a,b,loss\n");
        for row in 0..self.side() {
            for col in 0..self.side() {
                out.push_str(&format!("{row},{col},{},{},{}\n", self.coord(col), self.coord(row), self.at(row, col)));
            }
        }
        std::fs::write(path, out).at(path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeReport {
    pub mode: TraversalMode,
    pub traversal_scale: f64,
    pub samples: Vec<CnSample>,
    pub cn_mean: f64,
    pub grid: Option<LandscapeGrid>,
}

impl LandscapeReport {
    pub fn cn_samples(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.cn).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,loss,lambda_max,lambda_min,cn,converged,excluded\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.t, s.loss, s.lambda_max, s.lambda_min, s.cn, s.converged, s.excluded
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).at(path)
    }
}

fn traversal_ts(cfg: &TraversalConfig) -> Vec<f64> {
    let n = cfg.points.max(1);
    let lo = if cfg.one_sided { 0.0 } else { -1.0 };
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| lo + (1.0 - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Condition numbers at evenly spaced points along `p + t·scale·∇L(p)`.
pub fn traverse_cn(model: &dyn LossModel, p: &[f64], cfg: &TraversalConfig) -> Result<LandscapeReport> {
    let (_, g) = model.gradient(p)?;
    let gnorm = norm(&g);
    let ghat: Vec<f64> = if gnorm > 0.0 { g.iter().map(|x| x / gnorm).collect() } else { g.clone() };
    let mut samples = Vec::new();
    for t in traversal_ts(cfg) {
        let q: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a + t * cfg.scale * b).collect();
        let loss = model.loss(&q)?;
        let s = if !loss.is_finite() {
            CnSample { t, loss, lambda_max: f64::NAN, lambda_min: f64::NAN, cn: f64::NAN, converged: false, excluded: true }
        } else {
            match cfg.mode {
                TraversalMode::Full => {
                    let e = extremal_eigenvalues(model, &q, &cfg.eigen)?;
                    let cn = e.condition_number();
                    CnSample { t, loss, lambda_max: e.lambda_max, lambda_min: e.lambda_min, cn, converged: e.converged, excluded: !cn.is_finite() }
                }
                TraversalMode::Directional => {
                    let curv = dot(&ghat, &model.hvp(&q, &ghat)?);
                    CnSample { t, loss, lambda_max: curv, lambda_min: curv, cn: f64::NAN, converged: true, excluded: !curv.is_finite() }
                }
            }
        };
        samples.push(s);
    }
    if cfg.mode == TraversalMode::Directional {
        let top = samples.iter().filter(|s| !s.excluded).map(|s| s.lambda_max.abs()).fold(0.0, f64::max);
        for s in &mut samples {
            if !s.excluded {
                s.cn = if top > 0.0 { s.lambda_max.abs() / top } else { 0.0 };
            }
        }
    }
    let kept: Vec<f64> = samples.iter().filter(|s| !s.excluded).map(|s| s.cn).collect();
    if kept.len() < samples.len() {
        log::warn!("{} traversal points excluded from the mean", samples.len() - kept.len());
    }
    let cn_mean = kept.iter().sum::<f64>() / kept.len().max(1) as f64;
    Ok(LandscapeReport { mode: cfg.mode, traversal_scale: cfg.scale, samples, cn_mean, grid: None })
}

/// Ratio of the extreme second directional derivatives along the traversal.
pub fn directional_ratio(report: &LandscapeReport) -> Option<f64> {
    let vals: Vec<f64> = report.samples.iter().filter(|s| !s.excluded).map(|s| s.lambda_max).collect();
    let top = vals.iter().copied().fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a });
    if top == 0.0 {
        return None;
    }
    let other = if top > 0.0 { vals.iter().copied().fold(f64::INFINITY, f64::min) } else { vals.iter().copied().fold(f64::NEG_INFINITY, f64::max) };
    Some((other / top).abs())
}

/// Unit gradient direction and a random unit direction orthogonal to it.
pub fn grid_directions(model: &dyn LossModel, p: &[f64], seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, g) = model.gradient(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vs = vec![g, (0..p.len()).map(|_| rng.sample(StandardNormal)).collect()];
    orthonormalize(&mut vs, &mut rng);
    let v = vs.pop().expect("two directions");
    let u = vs.pop().expect("two directions");
    Ok((u, v))
}

/// Losses at `p + a·u + b·v` for `a, b` on a `(2r+1)²` lattice over `[−extent, extent]`.
pub fn landscape_grid(model: &dyn LossModel, p: &[f64], u: &[f64], v: &[f64], extent: f64, resolution: usize) -> Result<LandscapeGrid> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 || (dot(u, v) / (nu * nv)).abs() > 1e-6 {
        return Err(Error::Config("grid directions must be non-zero and orthogonal".into()));
    }
    let r = if extent == 0.0 { 0 } else { resolution };
    let side = 2 * r + 1;
    let coord = |i: usize| if r == 0 { 0.0 } else { extent * (i as f64 - r as f64) / r as f64 };
    let mut values = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let (a, b) = (coord(col), coord(row));
            let q: Vec<f64> = p.iter().zip(u).zip(v).map(|((x, du), dv)| x + a * du + b * dv).collect();
            values.push(model.loss(&q)?);
        }
    }
    Ok(LandscapeGrid { extent, resolution: r, values })
}

/// Grid rendered as a heat map, `cell` pixels per value.
pub fn write_heatmap(grid: &LandscapeGrid, path: &Path, cell: u32) -> Result<()> {
    let side = grid.side() as u32;
    let finite: Vec<f64> = grid.values.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let img = image::RgbImage::from_fn(side * cell, side * cell, |x, y| {
        let v = grid.at((y / cell) as usize, (x / cell) as usize);
        if !v.is_finite() {
            return image::Rgb([255, 255, 255]);
        }
        let s = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        image::Rgb(heat(s))
    });
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Dark blue through teal and green to yellow.
pub(crate) fn heat(s: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [[68.0, 1.0, 84.0], [59.0, 82.0, 139.0], [33.0, 145.0, 140.0], [94.0, 201.0, 98.0], [253.0, 231.0, 37.0]];
    let s = s.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (s.floor() as usize).min(STOPS.len() - 2);
    let f = s - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] + f * (STOPS[i + 1][c] - STOPS[i][c])).round() as u8;
    }
    out
}

pub fn pcc(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::UndefinedCorrelation);
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// One random draw: random layers lose random `ceil(r·n)` filter sets until
/// the FLOPs goal is met, truncating the last set to land near it.
fn random_draw(base: &PrunableNetwork, target: f64, ratio: f64, rng: &mut ChaCha8Rng) -> Result<PrunableNetwork> {
    let base_flops = base.flops();
    let mut net = base.clone();
    loop {
        let red = 1.0 - net.flops() as f64 / base_flops as f64;
        if red >= target {
            return Ok(net);
        }
        let layers: Vec<usize> = (0..net.num_layers()).filter(|&l| candidate_count(ratio, net.alive_count(l)) < net.alive_count(l)).collect();
        let &l = layers.choose(rng).ok_or(Error::SearchStuck)?;
        let mut alive = net.alive_filters(l);
        alive.shuffle(rng);
        let cands: Vec<FilterRef> = alive.into_iter().take(candidate_count(ratio, net.alive_count(l))).collect();
        let full = 1.0 - net.mask(&cands)?.flops() as f64 / base_flops as f64;
        if full < target {
            net = net.mask(&cands)?;
        } else {
            let (m, _) = closest_prefix(base_flops, &net, &cands, target)?;
            net = net.mask(&cands[..m.max(1)])?;
            return Ok(net);
        }
    }
}

/// Best of `trials` random sub-networks by total L1 norm of the kept filters.
pub fn random_subnetwork(pretrained: &PrunableNetwork, target: f64, ratio: f64, trials: usize, seed: u64) -> Result<PrunableNetwork> {
    if trials == 0 {
        return Err(Error::Config("random sub-network generation needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, PrunableNetwork)> = None;
    for _ in 0..trials {
        let net = random_draw(pretrained, target, ratio, &mut rng)?;
        let score: f64 = net.l1_norms().values().sum();
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, net));
        }
    }
    Ok(best.expect("at least one trial").1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub validation_loss: f64,
    pub potential_loss: f64,
    pub cn_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStudy {
    pub rows: Vec<CorrelationRow>,
    pub pcc_val_potential: f64,
    pub pcc_cn_potential: f64,
}

#[derive(Clone, Debug)]
pub struct CorrelationConfig {
    pub samples: usize,
    pub trials: usize,
    pub target_rate: f64,
    pub ratio: f64,
    pub finetune: FinetuneConfig,
    pub traversal: TraversalConfig,
    /// Batches (of the validation split) used for the Hessian estimates.
    pub hessian_batches: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Random sub-networks scored by validation loss and condition number, then
/// plainly fine-tuned to measure their potential (test) loss.
pub fn correlation_study(base: &PrunableNetwork, train: &Dataset, splits: &Splits, test: &Dataset, cfg: &CorrelationConfig) -> Result<CorrelationStudy> {
    let val = train.batches(&splits.val, cfg.batch_size);
    let labels: Vec<usize> = splits.val.iter().map(|&i| train.label(i)).collect();
    let mut rows = Vec::new();
    for s in 0..cfg.samples {
        let seed = cfg.seed.wrapping_add(s as u64 * 7919);
        let sub = random_subnetwork(base, cfg.target_rate, cfg.ratio, cfg.trials, seed)?.materialize();
        let (_, logits) = collect_logits(&sub, &val)?;
        let rows_ce = crate::loss::cross_entropy_rows(&logits, sub.num_classes(), &labels);
        let validation_loss = rows_ce.iter().sum::<f64>() / rows_ce.len().max(1) as f64;
        let model = NetLoss::new(&sub, val.iter().take(cfg.hessian_batches.max(1)).cloned().collect());
        let report = traverse_cn(&model, &model.params(), &cfg.traversal)?;
        let ft = FinetuneConfig { seed, ..cfg.finetune.clone() };
        let data = FinetuneData { train, train_ids: &splits.subset, val_ids: &[], test: None };
        let tuned = run_finetune(&sub, None, &data, &ft)?.network;
        let (potential_loss, _) = evaluate(&tuned, test, &test.all_ids(), cfg.batch_size, BnMode::Eval)?;
        log::info!("correlation sample {s}: val {validation_loss:.4} cn {:.4} potential {potential_loss:.4}", report.cn_mean);
        rows.push(CorrelationRow { validation_loss, potential_loss, cn_mean: report.cn_mean });
    }
    let pot: Vec<f64> = rows.iter().map(|r| r.potential_loss).collect();
    let pcc_val_potential = pcc(&rows.iter().map(|r| r.validation_loss).collect::<Vec<_>>(), &pot)?;
    let pcc_cn_potential = pcc(&rows.iter().map(|r| r.cn_mean).collect::<Vec<_>>(), &pot)?;
    Ok(CorrelationStudy { rows, pcc_val_potential, pcc_cn_potential })
}

impl CorrelationStudy {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("validation_loss,potential_loss,cn_mean\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.validation_loss, r.potential_loss, r.cn_mean));
        }
        out.push_str(&format!("# pcc_val_potential={}\n# pcc_cn_potential={}\n", self.pcc_val_potential, self.pcc_cn_potential));
        std::fs::write(path, out).at(path)
    }
}
