//! Teacher pre-training and triplet-distillation fine-tuning.
//!
//! One iteration: sample a PK batch, embed it with the student, mine
//! triplets, look up teacher gaps, compute the batch loss, backprop every
//! entry and take one SGD step. Per-entry forward and backward passes go
//! through [`par::map`]; gradients are summed in batch order, so a run is a
//! pure function of its inputs and seed.

pub mod model;
pub mod sgd;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{sample_pk_batch, IdentityDataset, MiningStrategy};
use crate::error::{Error, Result};
use crate::eval::{available_pairs, build_pairs, verify, PairSet};
use crate::loss::{batch_loss, MarginConfig, MarginMode};
use crate::numerics::Rng;
use crate::par;
use crate::teacher::{teacher_gap, TeacherOracle};

pub use model::{Dense, ForwardCache, Gradients, MlpModel};
pub use sgd::SgdState;

/// Consecutive batches without triplets tolerated before giving up.
pub const MAX_EMPTY_BATCHES: usize = 50;

/// Hidden widths and embedding size of an MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl MlpArch {
    pub fn teacher_default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            embed_dim: 32,
        }
    }

    pub fn student_default() -> Self {
        Self {
            hidden: vec![32, 32],
            embed_dim: 16,
        }
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.embed_dim);
        dims
    }

    /// Fresh normalized-output model with weights drawn from `rng`.
    pub fn init(&self, input_dim: usize, rng: &mut Rng) -> Result<MlpModel> {
        MlpModel::init(&self.layer_dims(input_dim), true, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub margin: f64,
    pub p: usize,
    pub k: usize,
    pub mining: MiningStrategy,
    /// Training-pair verification accuracy below which a warning is attached.
    pub accuracy_floor: f64,
    /// Positive and negative pairs (each) used for that check.
    pub eval_pairs: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            learning_rate: 0.05,
            momentum: 0.9,
            margin: 0.05,
            p: 10,
            k: 18,
            mining: MiningStrategy::SemiHard,
            accuracy_floor: 0.9,
            eval_pairs: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub margin: MarginConfig,
    pub p: usize,
    pub k: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub mining: MiningStrategy,
    pub seed: u64,
    /// Log a probe verification accuracy every this many iterations (0 = never).
    pub eval_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            margin: MarginConfig::dynamic(0.2, 0.5),
            p: 10,
            k: 18,
            iterations: 2000,
            learning_rate: 0.001,
            momentum: 0.9,
            mining: MiningStrategy::SemiHard,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.margin.validate()?;
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config(format!("P and K must be >= 2, got P={} K={}", self.p, self.k)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub loss: f64,
    pub mean_margin: f64,
    pub active_frac: f64,
    pub n_triplets: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(
                    serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?,
                );
            }
        }
        Ok(Self { records })
    }

    /// Mean loss over the non-empty records in `range`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let rs: Vec<&LogRecord> = self.records[range].iter().filter(|r| r.n_triplets > 0).collect();
        rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64
    }
}

struct StepStats {
    loss: f64,
    mean_margin: f64,
    active_frac: f64,
    n_triplets: usize,
}

/// One SGD iteration; `None` when mining found no triplets.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut MlpModel,
    sgd: &mut SgdState,
    ds: &IdentityDataset,
    teacher: Option<&TeacherOracle>,
    margin: &MarginConfig,
    p: usize,
    k: usize,
    mining: MiningStrategy,
    rng: &mut Rng,
) -> Result<Option<StepStats>> {
    let batch = sample_pk_batch(ds, p, k, rng)?;
    let passes = par::map(&batch.entries, |e| model.forward(&ds.sample(e.index).x))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (embeddings, caches): (Vec<_>, Vec<_>) = passes.into_iter().unzip();
    let triplets = crate::data::mine_triplets(&batch, &embeddings, mining, rng)?;
    if triplets.is_empty() {
        return Ok(None);
    }
    let gaps = match margin.mode {
        MarginMode::Fixed => Vec::new(),
        MarginMode::Dynamic => {
            let teacher = teacher.ok_or_else(|| Error::contract("dynamic margins need a teacher"))?;
            triplets
                .iter()
                .map(|t| {
                    let s = |i: usize| ds.sample(batch.entries[i].index);
                    teacher_gap(teacher, s(t.anchor), s(t.positive), s(t.negative))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let bl = batch_loss(&embeddings, &triplets, &gaps, margin)?;
    let entry_ids: Vec<usize> = (0..batch.len()).collect();
    let per_entry = par::map(&entry_ids, |&i| -> Result<Option<Gradients>> {
        if bl.grads[i].iter().all(|&g| g == 0.0) {
            return Ok(None);
        }
        model.backward(&caches[i], &bl.grads[i]).map(Some)
    });
    let mut total = Gradients::zeros_like(model);
    for g in per_entry {
        if let Some(g) = g? {
            total.add_assign(&g)?;
        }
    }
    sgd.step(model, &total)?;
    Ok(Some(StepStats {
        loss: bl.loss,
        mean_margin: bl.mean_margin(),
        active_frac: bl.active_fraction(),
        n_triplets: bl.n_triplets(),
    }))
}

fn record(iter: usize, stats: Option<StepStats>) -> LogRecord {
    match stats {
        Some(s) => LogRecord {
            iter,
            loss: s.loss,
            mean_margin: s.mean_margin,
            active_frac: s.active_frac,
            n_triplets: s.n_triplets,
            probe_accuracy: None,
        },
        None => LogRecord {
            iter,
            loss: 0.0,
            mean_margin: 0.0,
            active_frac: 0.0,
            n_triplets: 0,
            probe_accuracy: None,
        },
    }
}

fn check_capacity(ds: &IdentityDataset, p: usize, k: usize) -> Result<()> {
    let eligible = ds.identities().iter().filter(|&&id| ds.members(id).len() >= k).count();
    if eligible < p {
        return Err(Error::InsufficientData(format!(
            "dataset too small: {eligible} identities with >= {k} samples, batches need {p}"
        )));
    }
    Ok(())
}

fn training_pairs(ds: &IdentityDataset, per_side: usize, rng: &mut Rng) -> Result<PairSet> {
    let (ap, an) = available_pairs(ds);
    build_pairs(ds, per_side.min(ap as usize), per_side.min(an as usize), rng)
}

#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    pub model: MlpModel,
    pub train_accuracy: f64,
    pub warning: Option<String>,
    pub log: TrainingLog,
}

impl TrainedTeacher {
    pub fn oracle(&self) -> TeacherOracle {
        TeacherOracle::from_model(self.model.clone())
    }
}

/// Trains a normalized-output MLP with fixed-margin triplet loss and checks
/// its verification accuracy on training pairs.
pub fn train_teacher(ds: &IdentityDataset, arch: &MlpArch, cfg: &TeacherConfig, seed: u64) -> Result<TrainedTeacher> {
    if cfg.p < 2 || cfg.k < 2 {
        return Err(Error::Config(format!("P and K must be >= 2, got P={} K={}", cfg.p, cfg.k)));
    }
    check_capacity(ds, cfg.p, cfg.k)?;
    let margin = MarginConfig::fixed(cfg.margin);
    margin.validate()?;
    let mut model = arch.init(ds.input_dim(), &mut Rng::labeled(seed, "teacher.init"))?;
    let mut sgd = SgdState::new(&model, cfg.learning_rate, cfg.momentum)?;
    let mut rng = Rng::labeled(seed, "teacher.batches");
    let mut log = TrainingLog::default();
    let mut empty = 0;
    for iter in 0..cfg.iterations {
        let stats = train_step(&mut model, &mut sgd, ds, None, &margin, cfg.p, cfg.k, cfg.mining, &mut rng)?;
        empty = if stats.is_none() { empty + 1 } else { 0 };
        if empty > MAX_EMPTY_BATCHES {
            return Err(Error::Stagnation(empty));
        }
        log.records.push(record(iter, stats));
    }

    let pairs = training_pairs(ds, cfg.eval_pairs, &mut Rng::labeled(seed, "teacher.eval"))?;
    let train_accuracy = verify(&model, ds, &pairs)?.best_accuracy;
    let warning = if cfg.iterations == 0 {
        Some("teacher was not trained (zero iterations); its distances are uninformative".to_string())
    } else if train_accuracy < cfg.accuracy_floor {
        Some(format!(
            "under-trained teacher: training verification accuracy {train_accuracy:.4} < floor {:.4}",
            cfg.accuracy_floor
        ))
    } else {
        None
    };
    Ok(TrainedTeacher {
        model,
        train_accuracy,
        warning,
        log,
    })
}

/// Fine-tunes `student` with triplet loss whose margins come from `teacher`
/// (or a fixed margin, per `cfg.margin.mode`).
pub fn distill(
    ds: &IdentityDataset,
    teacher: &TeacherOracle,
    mut student: MlpModel,
    cfg: &DistillConfig,
) -> Result<(MlpModel, TrainingLog)> {
    cfg.validate()?;
    if student.input_dim() != ds.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: ds.input_dim(),
            found: student.input_dim(),
        });
    }
    let mut log = TrainingLog::default();
    if cfg.iterations == 0 {
        return Ok((student, log));
    }
    check_capacity(ds, cfg.p, cfg.k)?;
    let precomputed;
    let teacher = if teacher.table().is_some() {
        teacher
    } else {
        precomputed = teacher.precompute(ds)?;
        &precomputed
    };
    let probe = if cfg.eval_every > 0 {
        Some(training_pairs(ds, 200, &mut Rng::labeled(cfg.seed, "distill.probe"))?)
    } else {
        None
    };
    let mut sgd = SgdState::new(&student, cfg.learning_rate, cfg.momentum)?;
    let mut rng = Rng::labeled(cfg.seed, "distill.batches");
    let mut empty = 0;
    for iter in 0..cfg.iterations {
        let stats = train_step(
            &mut student,
            &mut sgd,
            ds,
            Some(teacher),
            &cfg.margin,
            cfg.p,
            cfg.k,
            cfg.mining,
            &mut rng,
        )?;
        empty = if stats.is_none() { empty + 1 } else { 0 };
        if empty > MAX_EMPTY_BATCHES {
            return Err(Error::Stagnation(empty));
        }
        let mut rec = record(iter, stats);
        if let Some(pairs) = &probe {
            if (iter + 1) % cfg.eval_every == 0 {
                rec.probe_accuracy = Some(verify(&student, ds, pairs)?.best_accuracy);
            }
        }
        log.records.push(rec);
    }
    Ok((student, log))
}
