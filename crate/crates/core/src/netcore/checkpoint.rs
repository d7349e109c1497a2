//! Checkpoint directories: `manifest.txt` (key = value lines describing the
//! structure and masks) plus one `.npy` file per parameter tensor.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{Architecture, Block, ConvDesc, HeadDesc, PrunableNetwork, RunningStats};
use crate::arrays::{read_npy, write_npy};
use crate::error::{Error, IoContext, Result};

pub const CHECKPOINT_FORMAT: &str = "ekg-checkpoint-1";

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "-".to_string(), |g| g.to_string())
}

pub fn save_checkpoint(net: &PrunableNetwork, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let arch = net.architecture();
    let mut m = String::new();
    let [c, h, w] = arch.input_shape();
    let _ = writeln!(m, "format = {CHECKPOINT_FORMAT}");
    let _ = writeln!(m, "input = {c} {h} {w}");
    let _ = writeln!(m, "convs = {}", arch.convs().len());
    let _ = writeln!(m, "blocks = {}", arch.blocks().len());
    let _ = writeln!(m, "layers = {}", arch.num_layers());
    for (i, d) in arch.convs().iter().enumerate() {
        let _ = writeln!(
            m,
            "conv.{i} = kind=conv in={} out={} kernel={} stride={} padding={} bn={} relu={} group={} in_group={}",
            d.in_channels,
            d.out_channels,
            d.kernel,
            d.stride,
            d.padding,
            flag(d.batch_norm),
            flag(d.relu),
            d.group,
            opt(d.in_group)
        );
    }
    for (i, b) in arch.blocks().iter().enumerate() {
        match *b {
            Block::Plain { conv } => {
                let _ = writeln!(m, "block.{i} = plain {conv}");
            }
            Block::Residual { conv_a, conv_b, shortcut } => {
                let _ = writeln!(m, "block.{i} = residual {conv_a} {conv_b} {}", opt(shortcut));
            }
        }
    }
    let hd = arch.head();
    let _ = writeln!(m, "head = kind=linear in={} classes={} in_group={}", hd.in_features, hd.classes, hd.in_group);
    for (l, mask) in net.masks().iter().enumerate() {
        let bits: String = mask.iter().map(|&a| if a { '1' } else { '0' }).collect();
        let _ = writeln!(m, "mask.{l} = {bits}");
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, m).at(&path)?;

    let p = net.params();
    let rs = net.running_stats();
    for (i, (d, s)) in arch.convs().iter().zip(&net.layout().convs).enumerate() {
        let k = d.kernel;
        let nw = d.out_channels * d.in_channels * k * k;
        write_npy(
            &dir.join(format!("conv_{i}.weight.npy")),
            &[d.out_channels, d.in_channels, k, k],
            &p[s.weight..s.weight + nw],
        )?;
        if let Some(b) = s.bias {
            write_npy(&dir.join(format!("conv_{i}.bias.npy")), &[d.out_channels], &p[b..b + d.out_channels])?;
        }
        if let Some((g, b)) = s.bn {
            let c = d.out_channels;
            write_npy(&dir.join(format!("conv_{i}.bn_gamma.npy")), &[c], &p[g..g + c])?;
            write_npy(&dir.join(format!("conv_{i}.bn_beta.npy")), &[c], &p[b..b + c])?;
            write_npy(&dir.join(format!("conv_{i}.bn_mean.npy")), &[c], &rs.mean[i])?;
            write_npy(&dir.join(format!("conv_{i}.bn_var.npy")), &[c], &rs.var[i])?;
        }
    }
    let lay = net.layout();
    write_npy(
        &dir.join("head.weight.npy"),
        &[hd.classes, hd.in_features],
        &p[lay.head_weight..lay.head_weight + hd.classes * hd.in_features],
    )?;
    write_npy(&dir.join("head.bias.npy"), &[hd.classes], &p[lay.head_bias..lay.head_bias + hd.classes])?;
    Ok(())
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line {} is not `key = value`", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn fields(v: &str) -> BTreeMap<&str, &str> {
    v.split_whitespace().filter_map(|kv| kv.split_once('=')).collect()
}

fn num(map: &BTreeMap<&str, &str>, key: &str, ctx: &str) -> Result<usize> {
    map.get(key)
        .ok_or_else(|| Error::Format(format!("{ctx}: missing `{key}`")))?
        .parse()
        .map_err(|_| Error::Format(format!("{ctx}: `{key}` is not an integer")))
}

fn parse_opt(s: &str, ctx: &str) -> Result<Option<usize>> {
    if s == "-" {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| Error::Format(format!("{ctx}: bad index `{s}`")))
    }
}

fn load_array(dir: &Path, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let (s, data) = read_npy(&dir.join(name))?;
    if s != shape {
        return Err(Error::Format(format!("{name}: shape {s:?}, expected {shape:?}")));
    }
    Ok(data)
}

pub fn load_checkpoint(dir: &Path) -> Result<PrunableNetwork> {
    let path = dir.join("manifest.txt");
    let kv = parse_manifest(&std::fs::read_to_string(&path).at(&path)?)?;
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("manifest missing `{k}`")));
    if get("format")? != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format `{}`", get("format")?)));
    }
    let input: Vec<usize> = get("input")?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format("bad input shape".into())))
        .collect::<Result<_>>()?;
    let input: [usize; 3] = input.try_into().map_err(|_| Error::Format("input needs three dimensions".into()))?;
    let count = |k: &str| get(k)?.parse::<usize>().map_err(|_| Error::Format(format!("`{k}` is not an integer")));

    let mut convs = Vec::new();
    for i in 0..count("convs")? {
        let ctx = format!("conv.{i}");
        let f = fields(get(&ctx)?);
        let kind = f.get("kind").copied().unwrap_or("conv");
        if kind != "conv" {
            return Err(Error::UnsupportedArchitecture(format!("{ctx}: layer kind `{kind}`")));
        }
        convs.push(ConvDesc {
            in_channels: num(&f, "in", &ctx)?,
            out_channels: num(&f, "out", &ctx)?,
            kernel: num(&f, "kernel", &ctx)?,
            stride: num(&f, "stride", &ctx)?,
            padding: num(&f, "padding", &ctx)?,
            batch_norm: num(&f, "bn", &ctx)? == 1,
            relu: num(&f, "relu", &ctx)? == 1,
            group: num(&f, "group", &ctx)?,
            in_group: parse_opt(f.get("in_group").copied().unwrap_or("-"), &ctx)?,
        });
    }
    let mut blocks = Vec::new();
    for i in 0..count("blocks")? {
        let ctx = format!("block.{i}");
        let toks: Vec<&str> = get(&ctx)?.split_whitespace().collect();
        let idx = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("{ctx}: bad conv index")));
        blocks.push(match toks.as_slice() {
            ["plain", c] => Block::Plain { conv: idx(c)? },
            ["residual", a, b, s] => Block::Residual { conv_a: idx(a)?, conv_b: idx(b)?, shortcut: parse_opt(s, &ctx)? },
            _ => return Err(Error::UnsupportedArchitecture(format!("{ctx}: `{}`", toks.join(" ")))),
        });
    }
    let hf = fields(get("head")?);
    if hf.get("kind").copied().unwrap_or("linear") != "linear" {
        return Err(Error::UnsupportedArchitecture("classifier must be linear".into()));
    }
    let head = HeadDesc {
        in_group: num(&hf, "in_group", "head")?,
        in_features: num(&hf, "in", "head")?,
        classes: num(&hf, "classes", "head")?,
    };
    let arch = Architecture::new(input, convs, blocks, head)?;

    let mut masks = Vec::new();
    for (l, &w) in arch.layer_widths().iter().enumerate() {
        let bits = get(&format!("mask.{l}"))?;
        let m: Vec<bool> = bits
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::Format(format!("mask.{l}: invalid character"))),
            })
            .collect::<Result<_>>()?;
        if m.len() != w {
            return Err(Error::Format(format!("mask.{l}: {} bits for {w} filters", m.len())));
        }
        masks.push(m);
    }

    let layout = super::ParamLayout::new(&arch);
    let mut params = vec![0.0; layout.len];
    let mut running = RunningStats::fresh(&arch);
    for (i, (d, s)) in arch.convs().iter().zip(&layout.convs).enumerate() {
        let k = d.kernel;
        let nw = d.out_channels * d.in_channels * k * k;
        let c = d.out_channels;
        params[s.weight..s.weight + nw]
            .copy_from_slice(&load_array(dir, &format!("conv_{i}.weight.npy"), &[c, d.in_channels, k, k])?);
        if let Some(b) = s.bias {
            params[b..b + c].copy_from_slice(&load_array(dir, &format!("conv_{i}.bias.npy"), &[c])?);
        }
        if let Some((g, b)) = s.bn {
            params[g..g + c].copy_from_slice(&load_array(dir, &format!("conv_{i}.bn_gamma.npy"), &[c])?);
            params[b..b + c].copy_from_slice(&load_array(dir, &format!("conv_{i}.bn_beta.npy"), &[c])?);
            running.mean[i] = load_array(dir, &format!("conv_{i}.bn_mean.npy"), &[c])?;
            running.var[i] = load_array(dir, &format!("conv_{i}.bn_var.npy"), &[c])?;
        }
    }
    let hd = arch.head().clone();
    params[layout.head_weight..layout.head_weight + hd.classes * hd.in_features]
        .copy_from_slice(&load_array(dir, "head.weight.npy", &[hd.classes, hd.in_features])?);
    params[layout.head_bias..layout.head_bias + hd.classes]
        .copy_from_slice(&load_array(dir, "head.bias.npy", &[hd.classes])?);
    PrunableNetwork::from_parts(arch, params, running, masks)
}
