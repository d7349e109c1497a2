#![allow(dead_code)]

use std::path::Path;

use ekg::data::{make_splits, synthetic, Dataset, SplitSpec, Splits, SyntheticSpec};
use ekg::harness::pipeline::pretrain_network;
use ekg::harness::{PretrainConfig, RunConfig};
use ekg::netcore::zoo::{toy_cnn, ToyLayer};
use ekg::optim::LrSchedule;
use ekg::PrunableNetwork;

pub fn toy_data() -> (Dataset, Dataset) {
    synthetic(&SyntheticSpec::default()).unwrap()
}

pub fn toy_splits(train: &Dataset) -> Splits {
    make_splits(train.labels(), train.num_classes(), &SplitSpec { per_class_subset: 48, per_class_val: 16, seed: 0 }).unwrap()
}

pub fn short_pretrain(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        epochs,
        batch_size: 32,
        lr: LrSchedule { initial: 0.05, decay: 0.2, milestones: vec![] },
        augment: false,
        ..PretrainConfig::default()
    }
}

pub fn trained_toy(train: &Dataset, layers: &[ToyLayer], epochs: usize, seed: u64) -> PrunableNetwork {
    let arch = toy_cnn(train.shape(), layers, train.num_classes()).unwrap();
    pretrain_network(arch, train, &short_pretrain(epochs), seed).unwrap().0
}

pub fn shipped_toy_config(run_dir: &Path) -> RunConfig {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")).unwrap();
    let mut cfg = RunConfig::from_toml(&text).unwrap();
    cfg.run_dir = run_dir.to_path_buf();
    cfg
}

/// Average ranks, ties sharing the mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (a, b) = (ranks(xs), ranks(ys));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Eigenvalues of a dense symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}
