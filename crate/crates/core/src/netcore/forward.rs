use super::kernels::{self, BnCache};
use super::{BnMode, Block, PrunableNetwork};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A next-layer input feature map: activation `act` carries the channels of
/// prunable layer `layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapSite {
    pub layer: usize,
    pub act: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvTrace<T> {
    pub input: usize,
    pub bn: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
enum BlockTrace {
    Plain { conv: usize, out: usize, relu: bool },
    Residual { a: usize, b: usize, sc: Option<usize>, input: usize, mid: usize, out: usize },
}

/// Everything a backward pass needs.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    pub logits: Tensor<T>,
    /// `acts[0]` is the input; later entries are block outputs and the
    /// post-activation maps inside residual blocks.
    pub acts: Vec<Tensor<T>>,
    pub taps: Vec<TapSite>,
    pub(crate) convs: Vec<Option<ConvTrace<T>>>,
    blocks: Vec<BlockTrace>,
    pooled: Tensor<T>,
}

pub struct Backward<T> {
    /// Gradient over the full (unmasked) parameter layout.
    pub params: Vec<T>,
    /// Gradient with respect to each activation; `None` for the input.
    pub acts: Vec<Option<Tensor<T>>>,
}

impl PrunableNetwork {
    fn in_mask(&self, conv: usize) -> Vec<bool> {
        let c = &self.arch.convs[conv];
        match c.in_group {
            Some(g) => self.masks[g].clone(),
            None => vec![true; c.in_channels],
        }
    }

    fn conv_bn<T: Scalar>(
        &self,
        params: &[T],
        conv: usize,
        input: usize,
        x: &Tensor<T>,
        mode: BnMode,
        traces: &mut [Option<ConvTrace<T>>],
    ) -> Tensor<T> {
        let d = &self.arch.convs[conv];
        let slots = self.layout.convs[conv];
        let g = self.arch.geometry[conv];
        let nw = d.out_channels * d.in_channels * d.kernel * d.kernel;
        let out_alive = &self.masks[d.group];
        let bias = slots.bias.map(|b| &params[b..b + d.out_channels]);
        let z = kernels::conv_forward(x, &params[slots.weight..slots.weight + nw], bias, d, g, &self.in_mask(conv), out_alive);
        let (y, bn) = match slots.bn {
            Some((gi, bi)) => {
                let running = match mode {
                    BnMode::Train => None,
                    BnMode::Eval => Some((&self.running.mean[conv][..], &self.running.var[conv][..])),
                };
                let (y, c) = kernels::bn_forward(
                    &z,
                    &params[gi..gi + d.out_channels],
                    &params[bi..bi + d.out_channels],
                    out_alive,
                    running,
                );
                (y, Some(c))
            }
            None => (z, None),
        };
        traces[conv] = Some(ConvTrace { input, bn });
        y
    }

    /// Forward pass with arbitrary parameter values of scalar type `T`.
    pub fn pass<T: Scalar>(&self, params: &[T], x: &Tensor<T>, mode: BnMode) -> Result<ForwardPass<T>> {
        let [c, h, w] = self.arch.input;
        if x.c() != c || x.h() != h || x.w() != w || x.n() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not match network input {}x{}x{}",
                x.shape(),
                c,
                h,
                w
            )));
        }
        if params.len() != self.layout.len {
            return Err(Error::ShapeMismatch("parameter vector length".into()));
        }
        let mut acts = vec![x.clone()];
        let mut traces: Vec<Option<ConvTrace<T>>> = vec![None; self.arch.convs.len()];
        let mut blocks = Vec::with_capacity(self.arch.blocks.len());
        let mut taps = Vec::new();
        for b in &self.arch.blocks {
            let input = acts.len() - 1;
            match *b {
                Block::Plain { conv } => {
                    let mut y = self.conv_bn(params, conv, input, &acts[input], mode, &mut traces);
                    let relu = self.arch.convs[conv].relu;
                    if relu {
                        kernels::relu(&mut y);
                    }
                    acts.push(y);
                    taps.push(TapSite { layer: self.arch.convs[conv].group, act: acts.len() - 1 });
                    blocks.push(BlockTrace::Plain { conv, out: acts.len() - 1, relu });
                }
                Block::Residual { conv_a, conv_b, shortcut } => {
                    let mut hmid = self.conv_bn(params, conv_a, input, &acts[input], mode, &mut traces);
                    kernels::relu(&mut hmid);
                    acts.push(hmid);
                    let mid = acts.len() - 1;
                    taps.push(TapSite { layer: self.arch.convs[conv_a].group, act: mid });
                    let mut sum = self.conv_bn(params, conv_b, mid, &acts[mid], mode, &mut traces);
                    match shortcut {
                        Some(s) => {
                            let sc = self.conv_bn(params, s, input, &acts[input], mode, &mut traces);
                            sum.add_assign(&sc);
                        }
                        None => sum.add_assign(&acts[input]),
                    }
                    kernels::relu(&mut sum);
                    acts.push(sum);
                    let out = acts.len() - 1;
                    taps.push(TapSite { layer: self.arch.convs[conv_b].group, act: out });
                    blocks.push(BlockTrace::Residual { a: conv_a, b: conv_b, sc: shortcut, input, mid, out });
                }
            }
        }
        let pooled = kernels::global_avg_pool(acts.last().expect("at least the input"));
        let head = &self.arch.head;
        let lw = self.layout.head_weight;
        let lb = self.layout.head_bias;
        let logits = kernels::linear_forward(
            &pooled,
            &params[lw..lw + head.classes * head.in_features],
            &params[lb..lb + head.classes],
            &self.masks[head.in_group],
            head.classes,
        );
        Ok(ForwardPass { logits, acts, taps, convs: traces, blocks, pooled })
    }

    fn conv_bn_backward<T: Scalar>(
        &self,
        params: &[T],
        pass: &ForwardPass<T>,
        conv: usize,
        dy: Tensor<T>,
        grad: &mut [T],
        dacts: &mut [Option<Tensor<T>>],
    ) {
        let d = &self.arch.convs[conv];
        let slots = self.layout.convs[conv];
        let trace = pass.convs[conv].as_ref().expect("conv ran in the forward pass");
        let out_alive = &self.masks[d.group];
        let dz = match (slots.bn, &trace.bn) {
            (Some((gi, bi)), Some(cache)) => {
                let c = d.out_channels;
                let (dg, rest) = grad[gi..].split_at_mut(c);
                let db = &mut rest[bi - gi - c..bi - gi];
                kernels::bn_backward(&dy, cache, &params[gi..gi + c], out_alive, dg, db)
            }
            _ => dy,
        };
        let g = self.arch.geometry[conv];
        let nw = d.out_channels * d.in_channels * d.kernel * d.kernel;
        let need_dx = trace.input != 0;
        let (wgrad, bgrad) = match slots.bias {
            Some(bo) => {
                // bias slot directly follows the weight slot
                let (wg, rest) = grad[slots.weight..].split_at_mut(nw);
                (wg, Some(&mut rest[bo - slots.weight - nw..bo - slots.weight - nw + d.out_channels]))
            }
            None => (&mut grad[slots.weight..slots.weight + nw], None),
        };
        let dx = kernels::conv_backward(
            &pass.acts[trace.input],
            &params[slots.weight..slots.weight + nw],
            &dz,
            d,
            g,
            &self.in_mask(conv),
            out_alive,
            wgrad,
            bgrad,
            need_dx,
        );
        if let Some(dx) = dx {
            accumulate(&mut dacts[trace.input], dx);
        }
    }

    /// Reverse pass from the logit gradient.
    pub fn backward<T: Scalar>(&self, params: &[T], pass: &ForwardPass<T>, dlogits: &Tensor<T>) -> Result<Backward<T>> {
        if dlogits.shape() != pass.logits.shape() {
            return Err(Error::ShapeMismatch("logit gradient shape".into()));
        }
        let mut grad = vec![T::zero(); self.layout.len];
        let mut dacts: Vec<Option<Tensor<T>>> = vec![None; pass.acts.len()];
        let head = &self.arch.head;
        let (lw, lb) = (self.layout.head_weight, self.layout.head_bias);
        let nw = head.classes * head.in_features;
        let (gw, rest) = grad[lw..].split_at_mut(nw);
        let gb = &mut rest[lb - lw - nw..lb - lw - nw + head.classes];
        let dpooled = kernels::linear_backward(
            &pass.pooled,
            &params[lw..lw + nw],
            dlogits,
            &self.masks[head.in_group],
            gw,
            gb,
        );
        let last = pass.acts.len() - 1;
        dacts[last] = Some(kernels::global_avg_pool_backward(&dpooled, pass.acts[last].shape()));

        for bt in pass.blocks.iter().rev() {
            match *bt {
                BlockTrace::Plain { conv, out, relu } => {
                    let mut dy = dacts[out].clone().unwrap_or_else(|| Tensor::zeros(pass.acts[out].shape()));
                    if relu {
                        kernels::relu_backward(&mut dy, &pass.acts[out]);
                    }
                    self.conv_bn_backward(params, pass, conv, dy, &mut grad, &mut dacts);
                }
                BlockTrace::Residual { a, b, sc, input, mid, out } => {
                    let mut dsum = dacts[out].clone().unwrap_or_else(|| Tensor::zeros(pass.acts[out].shape()));
                    kernels::relu_backward(&mut dsum, &pass.acts[out]);
                    match sc {
                        Some(s) => self.conv_bn_backward(params, pass, s, dsum.clone(), &mut grad, &mut dacts),
                        None => {
                            if input != 0 {
                                accumulate(&mut dacts[input], dsum.clone());
                            }
                        }
                    }
                    self.conv_bn_backward(params, pass, b, dsum, &mut grad, &mut dacts);
                    let mut dh = dacts[mid].clone().unwrap_or_else(|| Tensor::zeros(pass.acts[mid].shape()));
                    kernels::relu_backward(&mut dh, &pass.acts[mid]);
                    self.conv_bn_backward(params, pass, a, dh, &mut grad, &mut dacts);
                }
            }
        }
        Ok(Backward { params: grad, acts: dacts })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}
