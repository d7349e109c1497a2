//! Memory bank of interim-network outputs on the training set.
//!
//! `K` interim sub-networks are picked at evenly spaced loss levels between
//! the pruned network and the warmed original, their clean training-set
//! logits are stored once, and fine-tuning reads ensemble targets gated by
//! the student's current loss.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arrays::{write_npy, MappedMatrix};
use crate::data::Dataset;
use crate::error::{Error, IoContext, Result};
use crate::loss::cross_entropy_rows;
use crate::netcore::{BnMode, PrunableNetwork};

pub const BANK_FORMAT: &str = "ekg-membank-1";

/// Interpolated loss level of teacher `k` in `1..=K`.
pub fn teacher_target(l_star: f64, l_0: f64, k: usize, big_k: usize) -> f64 {
    let (k, kk) = (k as f64, big_k as f64);
    (kk - k) / kk * l_star + k / kk * l_0
}

/// For each `k` in `1..=K`, the interim iteration whose loss is nearest the
/// interpolated level; equal distances go to the later iteration.
pub fn select_teachers(interim_losses: &BTreeMap<usize, f64>, l_star: f64, l_0: f64, big_k: usize) -> Result<Vec<usize>> {
    if interim_losses.is_empty() || big_k == 0 {
        return Err(Error::NoTeachers);
    }
    Ok((1..=big_k)
        .map(|k| {
            let target = teacher_target(l_star, l_0, k, big_k);
            let mut best = (usize::MAX, f64::INFINITY);
            for (&i, &loss) in interim_losses {
                let d = (target - loss).abs();
                if d <= best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherEntry {
    pub k: usize,
    pub iteration: usize,
    pub teacher_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    classes: usize,
    examples: usize,
    teachers: Vec<TeacherEntry>,
}

enum Store {
    Memory(Vec<Vec<f64>>),
    Mapped(Vec<MappedMatrix>),
}

pub struct MemoryBank {
    entries: Vec<TeacherEntry>,
    classes: usize,
    ids: Vec<usize>,
    rows: BTreeMap<usize, usize>,
    store: Store,
}

impl std::fmt::Debug for MemoryBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryBank")
            .field("entries", &self.entries)
            .field("classes", &self.classes)
            .field("examples", &self.ids.len())
            .finish()
    }
}

impl MemoryBank {
    /// In-memory bank from per-teacher logit matrices (rows follow `ids`).
    pub fn from_logits(iterations: &[usize], ids: Vec<usize>, labels: &[usize], classes: usize, logits: Vec<Vec<f64>>) -> Result<Self> {
        if iterations.len() != logits.len() || (labels.len() != ids.len()) {
            return Err(Error::ShapeMismatch("one logit matrix per teacher and one label per example".into()));
        }
        let mut entries = Vec::new();
        for (k, (it, l)) in iterations.iter().zip(&logits).enumerate() {
            if l.len() != ids.len() * classes {
                return Err(Error::ShapeMismatch(format!("teacher {} logits", k + 1)));
            }
            let losses = cross_entropy_rows(l, classes, labels);
            let teacher_loss = losses.iter().sum::<f64>() / ids.len().max(1) as f64;
            entries.push(TeacherEntry { k: k + 1, iteration: *it, teacher_loss });
        }
        let rows = ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        Ok(MemoryBank { entries, classes, ids, rows, store: Store::Memory(logits) })
    }

    pub fn entries(&self) -> &[TeacherEntry] {
        &self.entries
    }
    pub fn k(&self) -> usize {
        self.entries.len()
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
    pub fn is_mapped(&self) -> bool {
        matches!(self.store, Store::Mapped(_))
    }

    /// Stored logits of teacher position `t` (0-based) for example `id`.
    pub fn logits_into(&self, t: usize, id: usize, out: &mut [f64]) -> Result<()> {
        let r = *self.rows.get(&id).ok_or(Error::Coverage(id))?;
        match &self.store {
            Store::Memory(m) => out.copy_from_slice(&m[t][r * self.classes..(r + 1) * self.classes]),
            Store::Mapped(m) => m[t].row_into(r, out),
        }
        Ok(())
    }

    /// Positions of the teachers whose loss does not exceed `current_loss`,
    /// or the strongest teacher alone when none qualify.
    pub fn qualifying(&self, current_loss: f64) -> Vec<usize> {
        let q: Vec<usize> = (0..self.entries.len()).filter(|&t| self.entries[t].teacher_loss <= current_loss).collect();
        if q.is_empty() {
            vec![self.entries.len() - 1]
        } else {
            q
        }
    }

    /// Mean stored logits over the qualifying teachers, one row per id.
    pub fn ensemble_targets(&self, current_loss: f64, ids: &[usize]) -> Result<(Vec<f64>, usize)> {
        let q = self.qualifying(current_loss);
        let mut out = vec![0.0; ids.len() * self.classes];
        let mut row = vec![0.0; self.classes];
        for (s, &id) in ids.iter().enumerate() {
            let dst = &mut out[s * self.classes..(s + 1) * self.classes];
            for &t in &q {
                self.logits_into(t, id, &mut row)?;
                for (d, v) in dst.iter_mut().zip(&row) {
                    *d += v;
                }
            }
            let n = q.len() as f64;
            dst.iter_mut().for_each(|d| *d /= n);
        }
        Ok((out, q.len()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        let mut row = vec![0.0; self.classes];
        for t in 0..self.entries.len() {
            let mut m = Vec::with_capacity(self.ids.len() * self.classes);
            for &id in &self.ids {
                self.logits_into(t, id, &mut row)?;
                m.extend_from_slice(&row);
            }
            write_npy(&teacher_path(dir, self.entries[t].k), &[self.ids.len(), self.classes], &m)?;
        }
        let ids: String = self.ids.iter().map(|i| format!("{i}\n")).collect();
        let p = dir.join("ids.txt");
        std::fs::write(&p, ids).at(&p)?;
        let manifest = Manifest {
            format: BANK_FORMAT.into(),
            classes: self.classes,
            examples: self.ids.len(),
            teachers: self.entries.clone(),
        };
        let p = dir.join("manifest.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&manifest)?).at(&p)
    }

    /// Open a saved bank with memory-mapped teacher arrays.
    pub fn open(dir: &Path) -> Result<Self> {
        let p = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(&p).at(&p)?)?;
        if manifest.format != BANK_FORMAT {
            return Err(Error::Format(format!("{}: unknown bank format {}", p.display(), manifest.format)));
        }
        let ids = crate::data::read_index_file(&dir.join("ids.txt"))?;
        let mut maps = Vec::new();
        for e in &manifest.teachers {
            let m = MappedMatrix::open(&teacher_path(dir, e.k))?;
            if m.rows() != ids.len() || m.cols() != manifest.classes {
                return Err(Error::Format(format!("teacher {} array has the wrong shape", e.k)));
            }
            maps.push(m);
        }
        let rows = ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        Ok(MemoryBank { entries: manifest.teachers, classes: manifest.classes, ids, rows, store: Store::Mapped(maps) })
    }
}

pub fn teacher_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("teacher_{k}.arr"))
}

/// Clean (unaugmented) train-mode logits of every teacher over `ids`.
pub fn build_bank(teachers: &[(usize, PrunableNetwork)], data: &Dataset, ids: &[usize], batch_size: usize) -> Result<MemoryBank> {
    if teachers.is_empty() {
        return Err(Error::NoTeachers);
    }
    let classes = data.num_classes();
    let batches = data.batches(ids, batch_size);
    let mut logits = Vec::new();
    for (t, (_, net)) in teachers.iter().enumerate() {
        let mut m = Vec::with_capacity(ids.len() * classes);
        for (bi, b) in batches.iter().enumerate() {
            let out = net.forward(&b.x, BnMode::Train).map_err(|e| Error::TeacherInference {
                teacher: t + 1,
                batch: bi,
                reason: e.to_string(),
            })?;
            if !out.data().iter().all(|v| v.is_finite()) {
                return Err(Error::TeacherInference { teacher: t + 1, batch: bi, reason: "non-finite logits".into() });
            }
            m.extend_from_slice(out.data());
        }
        logits.push(m);
    }
    let labels: Vec<usize> = ids.iter().map(|&i| data.label(i)).collect();
    let iterations: Vec<usize> = teachers.iter().map(|(i, _)| *i).collect();
    let bank = MemoryBank::from_logits(&iterations, ids.to_vec(), &labels, classes, logits)?;
    if bank.entries.windows(2).any(|w| w[1].teacher_loss > w[0].teacher_loss) {
        log::warn!("teacher losses are not monotone in k: {:?}", bank.entries);
    }
    Ok(bank)
}

/// Exponential moving average of the student's batch loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEma {
    pub decay: f64,
    pub value: Option<f64>,
}

impl LossEma {
    pub fn new(decay: f64) -> Self {
        LossEma { decay, value: None }
    }

    pub fn update(&mut self, x: f64) -> f64 {
        let v = match self.value {
            Some(v) => self.decay * v + (1.0 - self.decay) * x,
            None => x,
        };
        self.value = Some(v);
        v
    }

    /// Gate value before any update: every teacher qualifies.
    pub fn current(&self) -> f64 {
        self.value.unwrap_or(f64::INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolated_targets() {
        let t: Vec<f64> = (1..=5).map(|k| teacher_target(1.0, 0.0, k, 5)).collect();
        for (a, b) in t.iter().zip([0.8, 0.6, 0.4, 0.2, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ladder_selection_and_k_one() {
        let losses: BTreeMap<usize, f64> = [(0, 0.02), (1, 0.18), (2, 0.40), (3, 0.61), (4, 0.79)].into_iter().collect();
        assert_eq!(select_teachers(&losses, 1.0, 0.0, 5).unwrap(), vec![4, 3, 2, 1, 0]);
        assert_eq!(select_teachers(&losses, 1.0, 0.0, 1).unwrap(), vec![0]);
        assert!(matches!(select_teachers(&BTreeMap::new(), 1.0, 0.0, 5), Err(Error::NoTeachers)));
    }

    #[test]
    fn ties_go_to_later_iteration() {
        let losses: BTreeMap<usize, f64> = [(2, 0.25), (7, 0.75)].into_iter().collect();
        assert_eq!(select_teachers(&losses, 1.0, 0.0, 2).unwrap(), vec![7, 2]);
    }

    fn bank() -> MemoryBank {
        let ids = (0..10).collect::<Vec<_>>();
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let logits = (0..2).map(|t| (0..30).map(|v| ((v * 7 + t * 3) % 11) as f64 * 0.3 - 1.0).collect()).collect();
        MemoryBank::from_logits(&[4, 9], ids, &labels, 3, logits).unwrap()
    }

    #[test]
    fn bank_shape_and_recorded_losses() {
        let b = bank();
        assert_eq!((b.k(), b.ids().len(), b.classes()), (2, 10, 3));
        let mut row = [0.0; 3];
        for e in b.entries() {
            let mut all = Vec::new();
            for id in 0..10 {
                b.logits_into(e.k - 1, id, &mut row).unwrap();
                all.extend_from_slice(&row);
            }
            let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
            let l = cross_entropy_rows(&all, 3, &labels).iter().sum::<f64>() / 10.0;
            assert!((l - e.teacher_loss).abs() < 1e-6);
        }
    }

    #[test]
    fn persisted_bank_reads_back_through_the_map() {
        let b = bank();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let m = MemoryBank::open(dir.path()).unwrap();
        assert!(m.is_mapped());
        assert_eq!(m.entries(), b.entries());
        assert!(teacher_path(dir.path(), 2).exists());
        for loss in [0.0, 1.0, 10.0] {
            assert_eq!(m.ensemble_targets(loss, &[3, 0, 9]).unwrap(), b.ensemble_targets(loss, &[3, 0, 9]).unwrap());
        }
    }

    #[test]
    fn ema_updates() {
        let mut e = LossEma::new(0.99);
        assert_eq!(e.current(), f64::INFINITY);
        assert_eq!(e.update(2.0), 2.0);
        assert!((e.update(1.0) - (0.99 * 2.0 + 0.01)).abs() < 1e-15);
    }
}
