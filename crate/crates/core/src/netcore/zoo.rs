//! Model zoo: small plain CNNs for tests and CIFAR-style ResNets.

use serde::{Deserialize, Serialize};

use super::{Architecture, Block, ConvDesc, HeadDesc};
use crate::error::{Error, Result};

/// One 3×3 conv layer of a plain CNN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyLayer {
    pub filters: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "yes")]
    pub batch_norm: bool,
    #[serde(default = "yes")]
    pub relu: bool,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

impl ToyLayer {
    pub fn new(filters: usize) -> Self {
        ToyLayer { filters, stride: 1, batch_norm: true, relu: true }
    }
    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
    /// Plain conv with bias, no normalisation or activation.
    pub fn linear(mut self) -> Self {
        self.batch_norm = false;
        self.relu = false;
        self
    }
}

/// Stack of 3×3 convs (padding 1), global average pooling and a classifier.
/// Every conv is its own prunable layer.
pub fn toy_cnn(input: [usize; 3], layers: &[ToyLayer], classes: usize) -> Result<Architecture> {
    if layers.is_empty() {
        return Err(Error::UnsupportedArchitecture("a plain CNN needs at least one conv".into()));
    }
    let mut convs = Vec::new();
    let mut in_ch = input[0];
    for (i, l) in layers.iter().enumerate() {
        convs.push(ConvDesc {
            in_channels: in_ch,
            out_channels: l.filters,
            kernel: 3,
            stride: l.stride,
            padding: 1,
            batch_norm: l.batch_norm,
            relu: l.relu,
            group: i,
            in_group: i.checked_sub(1),
        });
        in_ch = l.filters;
    }
    let blocks = (0..layers.len()).map(|conv| Block::Plain { conv }).collect();
    let head = HeadDesc { in_group: layers.len() - 1, in_features: in_ch, classes };
    Architecture::new(input, convs, blocks, head)
}

/// CIFAR ResNet of depth `6n + 2`: a 16-filter stem and three stages of `n`
/// basic blocks with 16/32/64 filters. Stage transitions downsample with a
/// strided 1×1 projection shortcut.
pub fn resnet_cifar(depth: usize, classes: usize, input: [usize; 3]) -> Result<Architecture> {
    if depth < 8 || (depth - 2) % 6 != 0 {
        return Err(Error::UnsupportedArchitecture(format!("ResNet depth {depth} is not 6n+2 with n >= 1")));
    }
    let n = (depth - 2) / 6;
    let mut convs = Vec::new();
    let mut blocks = Vec::new();
    let mut next_group = 0;
    let mut new_group = || {
        next_group += 1;
        next_group - 1
    };
    let conv = |cin, cout, k, stride, group, in_group: Option<usize>, relu| ConvDesc {
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride,
        padding: k / 2,
        batch_norm: true,
        relu,
        group,
        in_group,
    };
    let mut stream = new_group();
    convs.push(conv(input[0], 16, 3, 1, stream, None, true));
    blocks.push(Block::Plain { conv: 0 });
    let mut width = 16;
    for (stage, &w) in [16usize, 32, 64].iter().enumerate() {
        for b in 0..n {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let mid = new_group();
            let out_group = if stride != 1 || w != width { new_group() } else { stream };
            let a = convs.len();
            convs.push(conv(width, w, 3, stride, mid, Some(stream), true));
            let bidx = convs.len();
            convs.push(conv(w, w, 3, 1, out_group, Some(mid), false));
            let shortcut = if out_group != stream {
                convs.push(conv(width, w, 1, stride, out_group, Some(stream), false));
                Some(convs.len() - 1)
            } else {
                None
            };
            blocks.push(Block::Residual { conv_a: a, conv_b: bidx, shortcut });
            stream = out_group;
            width = w;
        }
    }
    let head = HeadDesc { in_group: stream, in_features: width, classes };
    Architecture::new(input, convs, blocks, head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::PrunableNetwork;

    #[test]
    fn resnet56_layout() {
        let arch = resnet_cifar(56, 10, [3, 32, 32]).unwrap();
        // stem + 27 blocks * 2 + 2 projections
        assert_eq!(arch.convs().len(), 1 + 54 + 2);
        // 27 inner layers + 3 residual streams
        assert_eq!(arch.num_layers(), 30);
        let net = PrunableNetwork::initialized(arch, 0);
        // ~125M MACs for ResNet-56 on 32x32 inputs
        let f = net.flops() as f64;
        assert!((1.2e8..1.3e8).contains(&f), "{f}");
    }

    #[test]
    fn invalid_depth_is_rejected() {
        assert!(resnet_cifar(10, 10, [3, 32, 32]).is_err());
        assert!(resnet_cifar(2, 10, [3, 32, 32]).is_err());
    }
}
