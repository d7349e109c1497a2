//! Prunable convolutional networks.
//!
//! A network is a sequence of plain conv blocks and residual basic blocks
//! followed by global average pooling and a dense classifier. Output
//! channels are organised into *prunable layers* (coupling groups): every
//! conv whose outputs are summed by a residual addition shares one group,
//! so masking a filter of the group removes that channel from each member.

mod checkpoint;
mod forward;
mod kernels;
pub mod zoo;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use forward::{Backward, ForwardPass, TapSite};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the running statistics at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// One filter of one prunable layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FilterRef {
    pub layer_index: usize,
    pub filter_index: usize,
}

impl FilterRef {
    pub fn new(layer_index: usize, filter_index: usize) -> Self {
        FilterRef { layer_index, filter_index }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvDesc {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub batch_norm: bool,
    /// Activation after BN. Ignored for the second conv of a residual block,
    /// whose activation follows the addition.
    pub relu: bool,
    /// Prunable layer owning the output channels.
    pub group: usize,
    /// Prunable layer owning the input channels; `None` for the network input.
    pub in_group: Option<usize>,
}

impl ConvDesc {
    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    Plain { conv: usize },
    Residual { conv_a: usize, conv_b: usize, shortcut: Option<usize> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDesc {
    pub in_group: usize,
    pub in_features: usize,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    input: [usize; 3],
    convs: Vec<ConvDesc>,
    blocks: Vec<Block>,
    head: HeadDesc,
    groups: Vec<usize>,
    geometry: Vec<Geometry>,
}

impl Architecture {
    /// Validate channel, group and spatial consistency.
    pub fn new(input: [usize; 3], convs: Vec<ConvDesc>, blocks: Vec<Block>, head: HeadDesc) -> Result<Self> {
        let bad = |m: String| Error::UnsupportedArchitecture(m);
        let n_groups = convs.iter().map(|c| c.group + 1).max().unwrap_or(0);
        let mut groups = vec![0usize; n_groups];
        for (i, c) in convs.iter().enumerate() {
            if c.kernel == 0 || c.stride == 0 || c.out_channels == 0 || c.in_channels == 0 {
                return Err(bad(format!("conv {i} has a zero dimension")));
            }
            if groups[c.group] != 0 && groups[c.group] != c.out_channels {
                return Err(bad(format!("conv {i} width disagrees with its coupling group")));
            }
            groups[c.group] = c.out_channels;
            if c.in_group == Some(c.group) {
                return Err(bad(format!("conv {i} reads and writes the same group")));
            }
        }
        if groups.iter().any(|&w| w == 0) {
            return Err(bad("coupling group without members".into()));
        }

        let mut geometry = vec![None; convs.len()];
        let mut place = |idx: usize, cur: (usize, Option<usize>, usize, usize)| -> Result<(usize, Option<usize>, usize, usize)> {
            let c = convs.get(idx).ok_or_else(|| bad(format!("block references missing conv {idx}")))?;
            if geometry[idx].is_some() {
                return Err(bad(format!("conv {idx} used twice")));
            }
            if c.in_channels != cur.0 || c.in_group != cur.1 {
                return Err(bad(format!("conv {idx} input does not match the preceding activation")));
            }
            if cur.2 + 2 * c.padding < c.kernel || cur.3 + 2 * c.padding < c.kernel {
                return Err(bad(format!("conv {idx} kernel larger than its input")));
            }
            let g = Geometry { in_h: cur.2, in_w: cur.3, out_h: c.out_size(cur.2), out_w: c.out_size(cur.3) };
            geometry[idx] = Some(g);
            Ok((c.out_channels, Some(c.group), g.out_h, g.out_w))
        };
        let mut cur = (input[0], None, input[1], input[2]);
        for b in &blocks {
            match *b {
                Block::Plain { conv } => cur = place(conv, cur)?,
                Block::Residual { conv_a, conv_b, shortcut } => {
                    let mid = place(conv_a, cur)?;
                    let out = place(conv_b, mid)?;
                    match shortcut {
                        Some(s) => {
                            let sc = place(s, cur)?;
                            if sc != out {
                                return Err(bad("projection shortcut does not match the residual branch".into()));
                            }
                        }
                        None => {
                            if (cur.0, cur.1, cur.2, cur.3) != out {
                                return Err(bad("identity shortcut does not match the residual branch".into()));
                            }
                        }
                    }
                    cur = out;
                }
            }
        }
        if cur.1 != Some(head.in_group) || cur.0 != head.in_features || head.classes == 0 {
            return Err(bad("classifier does not match the last activation".into()));
        }
        let geometry = geometry
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.ok_or_else(|| bad(format!("conv {i} is not used by any block"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Architecture { input, convs, blocks, head, groups, geometry })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }
    pub fn convs(&self) -> &[ConvDesc] {
        &self.convs
    }
    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }
    pub fn head(&self) -> &HeadDesc {
        &self.head
    }
    /// Width of every prunable layer.
    pub fn layer_widths(&self) -> &[usize] {
        &self.groups
    }
    pub fn num_layers(&self) -> usize {
        self.groups.len()
    }
    pub fn num_classes(&self) -> usize {
        self.head.classes
    }
    /// Conv indices whose output channels belong to `layer`.
    pub fn members(&self, layer: usize) -> Vec<usize> {
        (0..self.convs.len()).filter(|&i| self.convs[i].group == layer).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvSlots {
    pub weight: usize,
    pub bias: Option<usize>,
    /// Offsets of gamma and beta.
    pub bn: Option<(usize, usize)>,
}

/// Offsets of every parameter tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub(crate) convs: Vec<ConvSlots>,
    pub(crate) head_weight: usize,
    pub(crate) head_bias: usize,
    pub(crate) len: usize,
}

impl ParamLayout {
    pub fn new(arch: &Architecture) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let convs = arch
            .convs
            .iter()
            .map(|c| {
                let weight = take(c.out_channels * c.in_channels * c.kernel * c.kernel);
                if c.batch_norm {
                    let g = take(c.out_channels);
                    let b = take(c.out_channels);
                    ConvSlots { weight, bias: None, bn: Some((g, b)) }
                } else {
                    ConvSlots { weight, bias: Some(take(c.out_channels)), bn: None }
                }
            })
            .collect();
        let head_weight = take(arch.head.classes * arch.head.in_features);
        let head_bias = take(arch.head.classes);
        ParamLayout { convs, head_weight, head_bias, len: off }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Start of conv `i`'s `[out, in, k, k]` weight.
    pub fn conv_weight(&self, i: usize) -> usize {
        self.convs[i].weight
    }

    /// Starts of conv `i`'s BN scale and shift.
    pub fn conv_bn(&self, i: usize) -> Option<(usize, usize)> {
        self.convs[i].bn
    }

    pub fn conv_bias(&self, i: usize) -> Option<usize> {
        self.convs[i].bias
    }

    /// Start of the `[classes, in_features]` classifier weight.
    pub fn head_weight(&self) -> usize {
        self.head_weight
    }

    pub fn head_bias(&self) -> usize {
        self.head_bias
    }
}

/// BN running statistics, one (mean, var) pair per conv; empty without BN.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

impl RunningStats {
    pub fn fresh(arch: &Architecture) -> Self {
        let sized = |v: f64| {
            arch.convs
                .iter()
                .map(|c| if c.batch_norm { vec![v; c.out_channels] } else { Vec::new() })
                .collect()
        };
        RunningStats { mean: sized(0.0), var: sized(1.0) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalise with batch statistics.
    Train,
    /// Normalise with running statistics.
    Eval,
}

/// A network plus per-layer filter masks. Cloning shares the weights.
#[derive(Clone, Debug)]
pub struct PrunableNetwork {
    arch: Arc<Architecture>,
    layout: Arc<ParamLayout>,
    params: Arc<Vec<f64>>,
    running: Arc<RunningStats>,
    masks: Vec<Vec<bool>>,
}

impl PrunableNetwork {
    pub fn from_parts(arch: Architecture, params: Vec<f64>, running: RunningStats, masks: Vec<Vec<bool>>) -> Result<Self> {
        let layout = ParamLayout::new(&arch);
        if params.len() != layout.len {
            return Err(Error::ShapeMismatch(format!("expected {} parameters, got {}", layout.len, params.len())));
        }
        if masks.len() != arch.groups.len() || masks.iter().zip(&arch.groups).any(|(m, &w)| m.len() != w) {
            return Err(Error::ShapeMismatch("mask shape does not match the architecture".into()));
        }
        if let Some(l) = masks.iter().position(|m| !m.iter().any(|&a| a)) {
            return Err(Error::EmptyLayer { layer: l });
        }
        for (i, c) in arch.convs.iter().enumerate() {
            let want = if c.batch_norm { c.out_channels } else { 0 };
            if running.mean[i].len() != want || running.var[i].len() != want {
                return Err(Error::ShapeMismatch(format!("running statistics of conv {i}")));
            }
        }
        Ok(PrunableNetwork {
            arch: Arc::new(arch),
            layout: Arc::new(layout),
            params: Arc::new(params),
            running: Arc::new(running),
            masks,
        })
    }

    /// He-normal conv weights, unit BN scale, small dense weights.
    pub fn initialized(arch: Architecture, seed: u64) -> Self {
        let layout = ParamLayout::new(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.len];
        for (c, s) in arch.convs.iter().zip(&layout.convs) {
            let fan_in = (c.in_channels * c.kernel * c.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            let n = c.out_channels * c.in_channels * c.kernel * c.kernel;
            for p in &mut params[s.weight..s.weight + n] {
                *p = normal.sample(&mut rng);
            }
            if let Some((g, _)) = s.bn {
                params[g..g + c.out_channels].fill(1.0);
            }
        }
        let h = &arch.head;
        let normal = Normal::new(0.0, (1.0 / h.in_features as f64).sqrt()).expect("valid std");
        for p in &mut params[layout.head_weight..layout.head_weight + h.classes * h.in_features] {
            *p = normal.sample(&mut rng);
        }
        let running = RunningStats::fresh(&arch);
        let masks = arch.groups.iter().map(|&w| vec![true; w]).collect();
        PrunableNetwork {
            arch: Arc::new(arch),
            layout: Arc::new(layout),
            params: Arc::new(params),
            running: Arc::new(running),
            masks,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }
    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn running_stats(&self) -> &RunningStats {
        &self.running
    }
    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }
    pub fn num_layers(&self) -> usize {
        self.arch.groups.len()
    }
    pub fn num_classes(&self) -> usize {
        self.arch.head.classes
    }

    pub fn with_params(&self, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), self.layout.len, "parameter vector length");
        PrunableNetwork { params: Arc::new(params), ..self.clone() }
    }

    pub fn with_running_stats(&self, running: RunningStats) -> Self {
        PrunableNetwork { running: Arc::new(running), ..self.clone() }
    }

    /// Same weights under different masks.
    pub fn with_masks(&self, masks: Vec<Vec<bool>>) -> Result<Self> {
        PrunableNetwork::from_parts((*self.arch).clone(), (*self.params).clone(), (*self.running).clone(), masks)
            .map(|n| PrunableNetwork { params: self.params.clone(), running: self.running.clone(), ..n })
    }

    pub fn shares_weights_with(&self, other: &PrunableNetwork) -> bool {
        Arc::ptr_eq(&self.params, &other.params)
    }

    pub fn is_alive(&self, f: FilterRef) -> bool {
        self.masks.get(f.layer_index).and_then(|m| m.get(f.filter_index)).copied().unwrap_or(false)
    }

    pub fn alive_count(&self, layer: usize) -> usize {
        self.masks[layer].iter().filter(|&&a| a).count()
    }

    pub fn alive_counts(&self) -> Vec<usize> {
        (0..self.num_layers()).map(|l| self.alive_count(l)).collect()
    }

    pub fn alive_filters(&self, layer: usize) -> Vec<FilterRef> {
        self.masks[layer]
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(j, _)| FilterRef::new(layer, j))
            .collect()
    }

    pub fn total_alive(&self) -> usize {
        self.masks.iter().flatten().filter(|&&a| a).count()
    }

    fn in_alive(&self, conv: &ConvDesc) -> usize {
        match conv.in_group {
            Some(g) => self.alive_count(g),
            None => conv.in_channels,
        }
    }

    /// Multiply-accumulate count of one forward pass for a single example.
    pub fn flops(&self) -> u64 {
        let mut total = 0u64;
        for (i, c) in self.arch.convs.iter().enumerate() {
            let g = self.arch.geometry[i];
            total += (c.kernel * c.kernel * self.in_alive(c) * self.alive_count(c.group) * g.out_h * g.out_w) as u64;
        }
        let h = &self.arch.head;
        total + (self.alive_count(h.in_group) * h.classes) as u64
    }

    /// FLOPs removed by masking a single alive filter of `layer` in the current state.
    pub fn flops_per_filter(&self, layer: usize) -> u64 {
        let mut total = 0u64;
        for (i, c) in self.arch.convs.iter().enumerate() {
            let g = self.arch.geometry[i];
            let k2hw = (c.kernel * c.kernel * g.out_h * g.out_w) as u64;
            if c.group == layer {
                total += k2hw * self.in_alive(c) as u64;
            }
            if c.in_group == Some(layer) {
                total += k2hw * self.alive_count(c.group) as u64;
            }
        }
        if self.arch.head.in_group == layer {
            total += self.arch.head.classes as u64;
        }
        total
    }

    /// Trainable parameters that remain after materialisation (BN running
    /// statistics excluded).
    pub fn param_count(&self) -> u64 {
        let mut total = 0u64;
        for c in &self.arch.convs {
            let out = self.alive_count(c.group) as u64;
            total += (c.kernel * c.kernel * self.in_alive(c)) as u64 * out;
            total += if c.batch_norm { 2 * out } else { out };
        }
        let h = &self.arch.head;
        total + (self.alive_count(h.in_group) * h.classes + h.classes) as u64
    }

    /// A view with `filters` removed from the computation; weights stay shared.
    pub fn mask(&self, filters: &[FilterRef]) -> Result<PrunableNetwork> {
        let mut masks = self.masks.clone();
        for &f in filters {
            if !self.is_alive(f) || !masks[f.layer_index][f.filter_index] {
                return Err(Error::InvalidCandidate(f));
            }
            masks[f.layer_index][f.filter_index] = false;
        }
        if let Some(l) = masks.iter().position(|m| !m.iter().any(|&a| a)) {
            return Err(Error::EmptyLayer { layer: l });
        }
        Ok(PrunableNetwork { masks, ..self.clone() })
    }

    /// Copy the alive filters into physically smaller weight tensors.
    pub fn materialize(&self) -> PrunableNetwork {
        let arch = &self.arch;
        let alive: Vec<Vec<usize>> = self
            .masks
            .iter()
            .map(|m| m.iter().enumerate().filter(|(_, &a)| a).map(|(j, _)| j).collect())
            .collect();
        let in_idx = |c: &ConvDesc| -> Vec<usize> {
            match c.in_group {
                Some(g) => alive[g].clone(),
                None => (0..c.in_channels).collect(),
            }
        };
        let convs: Vec<ConvDesc> = arch
            .convs
            .iter()
            .map(|c| ConvDesc { in_channels: in_idx(c).len(), out_channels: alive[c.group].len(), ..c.clone() })
            .collect();
        let head = HeadDesc { in_features: alive[arch.head.in_group].len(), ..arch.head.clone() };
        let new_arch = Architecture::new(arch.input, convs, arch.blocks.clone(), head)
            .expect("materialised architecture stays consistent");
        let new_layout = ParamLayout::new(&new_arch);
        let mut params = vec![0.0; new_layout.len];
        let mut running = RunningStats::fresh(&new_arch);
        let src = &self.params;
        for (ci, c) in arch.convs.iter().enumerate() {
            let (old, new) = (self.layout.convs[ci], new_layout.convs[ci]);
            let ins = in_idx(c);
            let outs = &alive[c.group];
            let k2 = c.kernel * c.kernel;
            for (no, &o) in outs.iter().enumerate() {
                for (ni, &i) in ins.iter().enumerate() {
                    let s = old.weight + (o * c.in_channels + i) * k2;
                    let d = new.weight + (no * ins.len() + ni) * k2;
                    params[d..d + k2].copy_from_slice(&src[s..s + k2]);
                }
                if let (Some(ob), Some(nb)) = (old.bias, new.bias) {
                    params[nb + no] = src[ob + o];
                }
                if let (Some((og, obeta)), Some((ng, nbeta))) = (old.bn, new.bn) {
                    params[ng + no] = src[og + o];
                    params[nbeta + no] = src[obeta + o];
                    running.mean[ci][no] = self.running.mean[ci][o];
                    running.var[ci][no] = self.running.var[ci][o];
                }
            }
        }
        let h = &arch.head;
        let ins = &alive[h.in_group];
        for k in 0..h.classes {
            for (ni, &i) in ins.iter().enumerate() {
                params[new_layout.head_weight + k * ins.len() + ni] = src[self.layout.head_weight + k * h.in_features + i];
            }
            params[new_layout.head_bias + k] = src[self.layout.head_bias + k];
        }
        let masks = new_arch.groups.iter().map(|&w| vec![true; w]).collect();
        PrunableNetwork {
            arch: Arc::new(new_arch),
            layout: Arc::new(new_layout),
            params: Arc::new(params),
            running: Arc::new(running),
            masks,
        }
    }

    /// Logits for a batch.
    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        Ok(self.pass(self.params(), x, mode)?.logits)
    }

    /// Logits plus the next-layer input feature map of every alive filter,
    /// one tensor (`n×1×h×w`) per tap site in network order.
    pub fn forward_with_taps(&self, x: &Tensor, mode: BnMode) -> Result<(Tensor, BTreeMap<FilterRef, Vec<Tensor>>)> {
        let pass = self.pass(self.params(), x, mode)?;
        let mut taps: BTreeMap<FilterRef, Vec<Tensor>> = BTreeMap::new();
        for site in &pass.taps {
            let act = &pass.acts[site.act];
            for f in self.alive_filters(site.layer) {
                taps.entry(f).or_default().push(act.channel(f.filter_index));
            }
        }
        Ok((pass.logits, taps))
    }

    /// Fold the batch statistics of a train-mode pass into the running statistics.
    pub fn updated_running_stats(&self, pass: &ForwardPass<f64>) -> RunningStats {
        let mut rs = (*self.running).clone();
        for (ci, tr) in pass.convs.iter().enumerate() {
            if let Some(bn) = tr.as_ref().and_then(|t| t.bn.as_ref()) {
                if let (Some(bm), Some(bv)) = (&bn.batch_mean, &bn.batch_var) {
                    let m = &self.masks[self.arch.convs[ci].group];
                    for c in 0..bm.len() {
                        if m[c] {
                            rs.mean[ci][c] = BN_MOMENTUM * rs.mean[ci][c] + (1.0 - BN_MOMENTUM) * bm[c];
                            rs.var[ci][c] = BN_MOMENTUM * rs.var[ci][c] + (1.0 - BN_MOMENTUM) * bv[c];
                        }
                    }
                }
            }
        }
        rs
    }

    /// Incoming weights of a filter from alive input channels, concatenated
    /// over the members of its coupling group.
    pub fn filter_weights(&self, f: FilterRef) -> Vec<f64> {
        let mut out = Vec::new();
        for ci in self.arch.members(f.layer_index) {
            let c = &self.arch.convs[ci];
            let k2 = c.kernel * c.kernel;
            let base = self.layout.convs[ci].weight + f.filter_index * c.in_channels * k2;
            for i in 0..c.in_channels {
                if c.in_group.map_or(true, |g| self.masks[g][i]) {
                    out.extend_from_slice(&self.params[base + i * k2..base + (i + 1) * k2]);
                }
            }
        }
        out
    }

    /// Sum of |w| over each alive filter's incoming weights, summed over the
    /// members of its coupling group.
    pub fn l1_norms(&self) -> BTreeMap<FilterRef, f64> {
        (0..self.num_layers())
            .flat_map(|l| self.alive_filters(l))
            .map(|f| (f, self.filter_weights(f).iter().map(|v| v.abs()).sum()))
            .collect()
    }

    /// Mutable access to the flat parameters (copy-on-write when shared).
    pub fn params_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.params)
    }
}
