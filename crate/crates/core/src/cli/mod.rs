//! The `tdistill` pipeline: one function per subcommand.
//!
//! Each stage writes into `OUT/<stage>-<hash>`, where the hash covers the
//! config keys the stage depends on. Downstream stages recompute upstream
//! directory names from the same config, so a pipeline is driven by passing
//! one config file to every command. Every stage directory gets the resolved
//! config (`config.resolved`) and a timestamp sidecar (`run.meta`); all other
//! artifacts are pure functions of the config.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::{generate_hierarchical, IdentityDataset};
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::eval::{build_pairs, centroid_distance_matrix, structure_correlation, verify, PairSet, VerificationReport};
use crate::loss::MarginConfig;
use crate::numerics::Rng;
use crate::teacher::{calibrate_margins, CalibrationReport, EmbeddingTable, TeacherOracle};
use crate::trainer::{distill, train_teacher, MlpModel, TrainingLog};

pub use config::ExperimentConfig;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const TEACHER_FILE: &str = "teacher.tfmlp";
pub const TEACHER_TABLE_FILE: &str = "teacher_embeddings.tfemb";
pub const TEACHER_LOG_FILE: &str = "teacher_log.jsonl";
pub const TEACHER_SUMMARY_FILE: &str = "teacher_summary.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const STUDENT_FILE: &str = "student.tfmlp";
pub const DISTILL_LOG_FILE: &str = "train_log.jsonl";
pub const DISTILL_SUMMARY_FILE: &str = "distill_summary.json";
pub const REPORT_FILE: &str = "report.json";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const ROC_FILE: &str = "roc.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";
pub const META_FILE: &str = "run.meta";
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Teacher,
    Calibrate,
    Distill,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Teacher => "teacher",
            Stage::Calibrate => "calibrate",
            Stage::Distill => "distill",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Config key prefixes whose values determine this stage's output.
    fn key_prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::Data => &["data."],
            Stage::Teacher => &["data.", "teacher.", "paths.dataset"],
            Stage::Calibrate => &["data.", "teacher.", "calibrate.", "paths."],
            Stage::Distill => &["data.", "teacher.", "calibrate.", "paths.", "student.", "margin.", "distill."],
            Stage::Evaluate => &[""],
        }
    }

    /// `root/<stage>-<hash>` for this config.
    pub fn dir(self, cfg: &ExperimentConfig, root: &Path) -> PathBuf {
        root.join(format!("{}-{}", self.name(), cfg.stage_hash(self.key_prefixes())))
    }
}

/// What a command wrote.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
    /// Human-readable summary lines.
    pub summary: Vec<String>,
    /// Problems worth surfacing even in quiet mode.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub train_accuracy: f64,
    pub warning: Option<String>,
    pub iterations: usize,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub margin: MarginConfig,
    pub iterations: usize,
    pub teacher_fingerprint_before: String,
    pub teacher_fingerprint_after: String,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub label: String,
    pub seed: u64,
    pub target: String,
    /// File name of the evaluated checkpoint or embedding table.
    pub model: String,
    pub structure_correlation: Option<f64>,
    pub verification: VerificationReport,
}

fn begin(stage: Stage, cfg: &ExperimentConfig, root: &Path) -> Result<PathBuf> {
    let dir = stage.dir(cfg, root);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(RESOLVED_CONFIG_FILE), cfg.resolved())?;
    Ok(dir)
}

fn finish(stage: Stage, dir: PathBuf, mut artifacts: Vec<PathBuf>, summary: Vec<String>, warnings: Vec<String>) -> Result<StageOutput> {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = serde_json::json!({
        "command": stage.name(),
        "finished_unix": now,
        "version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(dir.join(META_FILE), format!("{meta}\n"))?;
    artifacts.push(dir.join(RESOLVED_CONFIG_FILE));
    for a in &artifacts {
        if !a.is_file() {
            return Err(Error::MissingArtifact(a.clone()));
        }
    }
    Ok(StageOutput {
        dir,
        artifacts,
        summary,
        warnings,
    })
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn override_or(cfg: &ExperimentConfig, key: &str, default: PathBuf) -> Result<PathBuf> {
    match cfg.get(key) {
        "" => require(default),
        p => require(PathBuf::from(p)),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn dataset_path(cfg: &ExperimentConfig, root: &Path) -> Result<PathBuf> {
    override_or(cfg, "paths.dataset", Stage::Data.dir(cfg, root).join(DATASET_FILE))
}

pub fn teacher_path(cfg: &ExperimentConfig, root: &Path) -> Result<PathBuf> {
    override_or(cfg, "paths.teacher", Stage::Teacher.dir(cfg, root).join(TEACHER_FILE))
}

pub fn load_dataset(cfg: &ExperimentConfig, root: &Path) -> Result<IdentityDataset> {
    IdentityDataset::read_jsonl(&dataset_path(cfg, root)?)
}

/// A checkpoint or an embedding table, told apart by content.
pub enum LoadedEmbedder {
    Model(MlpModel),
    Table(TeacherOracle),
}

impl LoadedEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        if bytes.starts_with(b"TFMLP") {
            Ok(Self::Model(MlpModel::from_checkpoint_bytes(&bytes, path)?))
        } else {
            Ok(Self::Table(TeacherOracle::from_table(EmbeddingTable::read(path)?)?))
        }
    }

    pub fn embedder(&self) -> &dyn Embedder {
        match self {
            Self::Model(m) => m,
            Self::Table(t) => t,
        }
    }

    pub fn into_oracle(self) -> TeacherOracle {
        match self {
            Self::Model(m) => TeacherOracle::from_model(m),
            Self::Table(t) => t,
        }
    }
}

pub fn load_teacher(cfg: &ExperimentConfig, root: &Path) -> Result<TeacherOracle> {
    Ok(LoadedEmbedder::load(&teacher_path(cfg, root)?)?.into_oracle())
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, root: &Path) -> Result<StageOutput> {
    let spec = cfg.hierarchy()?;
    let ds = generate_hierarchical(&spec)?;
    let dir = begin(Stage::Data, cfg, root)?;
    let path = dir.join(DATASET_FILE);
    ds.write_jsonl(&path)?;
    let back = IdentityDataset::read_jsonl(&path)?;
    if back.samples() != ds.samples() {
        return Err(Error::format(&path, "dataset did not read back identically"));
    }
    let summary = vec![format!(
        "wrote {} samples, {} identities, input_dim {} to {}",
        ds.len(),
        ds.identity_count(),
        ds.input_dim(),
        path.display()
    )];
    finish(Stage::Data, dir, vec![path], summary, Vec::new())
}

pub fn cmd_train_teacher(cfg: &ExperimentConfig, root: &Path) -> Result<StageOutput> {
    let ds = load_dataset(cfg, root)?;
    let arch = cfg.teacher_arch()?;
    let tcfg = cfg.teacher_config()?;
    let trained = train_teacher(&ds, &arch, &tcfg, cfg.stage_seed("teacher")?)?;
    let dir = begin(Stage::Teacher, cfg, root)?;
    let ckpt = dir.join(TEACHER_FILE);
    trained.model.save(&ckpt)?;
    // Everything downstream sees the checkpoint, so describe that.
    let saved = MlpModel::load(&ckpt)?;
    if saved != trained.model.rounded_to_f32() {
        return Err(Error::format(&ckpt, "checkpoint did not read back identically"));
    }
    let oracle = TeacherOracle::from_model(saved);
    let table_path = dir.join(TEACHER_TABLE_FILE);
    EmbeddingTable::from_embedder(&oracle, &ds)?.write_binary(&table_path)?;
    EmbeddingTable::read(&table_path)?;
    let log_path = dir.join(TEACHER_LOG_FILE);
    trained.log.write_jsonl(&log_path)?;
    let summary_path = dir.join(TEACHER_SUMMARY_FILE);
    write_json(
        &summary_path,
        &TeacherSummary {
            train_accuracy: trained.train_accuracy,
            warning: trained.warning.clone(),
            iterations: tcfg.iterations,
            fingerprint: oracle.fingerprint(&ds)?,
        },
    )?;
    let summary = vec![format!(
        "teacher {:?} trained {} iterations, training-pair accuracy {:.4}; wrote {}",
        arch.layer_dims(ds.input_dim()),
        tcfg.iterations,
        trained.train_accuracy,
        ckpt.display()
    )];
    let warnings = trained.warning.into_iter().collect();
    finish(Stage::Teacher, dir, vec![ckpt, table_path, log_path, summary_path], summary, warnings)
}

pub fn cmd_calibrate(cfg: &ExperimentConfig, root: &Path) -> Result<StageOutput> {
    let ds = load_dataset(cfg, root)?;
    let teacher = load_teacher(cfg, root)?.precompute(&ds)?;
    let n = cfg.usize("calibrate.n_triplets")?;
    let report = calibrate_margins(&teacher, &ds, n, &mut Rng::new(cfg.stage_seed("calibrate")?))?;
    let dir = begin(Stage::Calibrate, cfg, root)?;
    let path = dir.join(CALIBRATION_FILE);
    write_json(&path, &report)?;
    read_json::<CalibrationReport>(&path)?;
    let summary = vec![format!(
        "{} triplets: teacher gap d in [{:.6}, {:.6}]; wrote {}",
        report.sample_count,
        report.d_min_observed,
        report.d_max_observed,
        path.display()
    )];
    finish(Stage::Calibrate, dir, vec![path], summary, Vec::new())
}

/// Margin settings for distillation, with calibrated bounds when requested.
pub fn resolved_margin(cfg: &ExperimentConfig, root: &Path) -> Result<MarginConfig> {
    let mut margin = cfg.margin()?;
    if cfg.from_calibration()? {
        let path = override_or(cfg, "paths.calibration", Stage::Calibrate.dir(cfg, root).join(CALIBRATION_FILE))?;
        let report: CalibrationReport = read_json(&path)?;
        margin.m_min = report.suggested_m_min;
        margin.m_max = report.suggested_m_max;
        margin.validate()?;
    }
    Ok(margin)
}

pub fn cmd_distill(cfg: &ExperimentConfig, root: &Path) -> Result<StageOutput> {
    let ds = load_dataset(cfg, root)?;
    let teacher = load_teacher(cfg, root)?;
    let mut dcfg = cfg.distill_config()?;
    dcfg.margin = resolved_margin(cfg, root)?;
    let student = cfg
        .student_arch()?
        .init(ds.input_dim(), &mut Rng::labeled(dcfg.seed, "student.init"))?;
    let before = teacher.fingerprint(&ds)?;
    let (student, log) = distill(&ds, &teacher, student, &dcfg)?;
    let after = teacher.fingerprint(&ds)?;
    if before != after {
        return Err(Error::contract("teacher outputs changed during distillation"));
    }
    let dir = begin(Stage::Distill, cfg, root)?;
    let ckpt = dir.join(STUDENT_FILE);
    student.save(&ckpt)?;
    MlpModel::load(&ckpt)?;
    let log_path = dir.join(DISTILL_LOG_FILE);
    log.write_jsonl(&log_path)?;
    TrainingLog::read_jsonl(&log_path)?;
    let n = log.records.len();
    let window = n.min(20);
    let (initial_loss, final_loss) = if n == 0 {
        (None, None)
    } else {
        (Some(log.mean_loss(0..window)), Some(log.mean_loss(n - window..n)))
    };
    let summary_path = dir.join(DISTILL_SUMMARY_FILE);
    write_json(
        &summary_path,
        &DistillSummary {
            margin: dcfg.margin,
            iterations: dcfg.iterations,
            teacher_fingerprint_before: before,
            teacher_fingerprint_after: after,
            initial_loss,
            final_loss,
        },
    )?;
    let mut summary = vec![format!(
        "distilled {} iterations with {:?} margins; wrote {}",
        dcfg.iterations,
        dcfg.margin.mode,
        ckpt.display()
    )];
    if let (Some(a), Some(b)) = (initial_loss, final_loss) {
        summary.push(format!("mean loss first {window} iterations {a:.6}, last {window} {b:.6}"));
    }
    finish(Stage::Distill, dir, vec![ckpt, log_path, summary_path], summary, Vec::new())
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, root: &Path) -> Result<StageOutput> {
    let ds = load_dataset(cfg, root)?;
    let target = cfg.get("eval.target");
    let model_path = match (cfg.get("eval.model"), target) {
        ("", "student") => require(Stage::Distill.dir(cfg, root).join(STUDENT_FILE))?,
        ("", "teacher") => teacher_path(cfg, root)?,
        ("", other) => return Err(Error::Config(format!("eval.target = {other:?}: expected student or teacher"))),
        (p, _) => require(PathBuf::from(p))?,
    };
    let model = LoadedEmbedder::load(&model_path)?;
    let pairs = match cfg.get("eval.pairs") {
        "" => build_pairs(
            &ds,
            cfg.usize("eval.n_pos")?,
            cfg.usize("eval.n_neg")?,
            &mut Rng::new(cfg.stage_seed("eval")?),
        )?,
        p => PairSet::read_jsonl(&require(PathBuf::from(p))?)?,
    };
    let verification = verify(model.embedder(), &ds, &pairs)?;

    let reference = match cfg.get("eval.teacher") {
        "none" => None,
        "auto" => {
            let p = Stage::Teacher.dir(cfg, root).join(TEACHER_FILE);
            match cfg.get("paths.teacher") {
                "" if p.is_file() => Some(p),
                "" => None,
                explicit => Some(require(PathBuf::from(explicit))?),
            }
        }
        explicit => Some(require(PathBuf::from(explicit))?),
    };
    let structure = match reference {
        Some(p) => {
            let teacher = LoadedEmbedder::load(&p)?;
            let tm = centroid_distance_matrix(teacher.embedder(), &ds)?;
            let sm = centroid_distance_matrix(model.embedder(), &ds)?;
            Some(structure_correlation(&tm, &sm)?)
        }
        None => None,
    };

    let report = EvaluationReport {
        label: cfg.label()?,
        seed: cfg.seed()?,
        target: target.to_string(),
        model: model_path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        structure_correlation: structure,
        verification,
    };
    let dir = begin(Stage::Evaluate, cfg, root)?;
    let pairs_path = dir.join(PAIRS_FILE);
    pairs.write_jsonl(&pairs_path)?;
    let report_path = dir.join(REPORT_FILE);
    write_json(&report_path, &report)?;
    read_json::<EvaluationReport>(&report_path)?;
    let roc_path = dir.join(ROC_FILE);
    report.verification.write_roc_csv(&roc_path)?;
    let mut line = format!(
        "{}: best_accuracy {:.4} at threshold {:.6} over {} pairs",
        report.label, report.verification.best_accuracy, report.verification.best_threshold, report.verification.n_pairs
    );
    if let Some(c) = structure {
        let _ = write!(line, ", structure_correlation {c:.4}");
    }
    finish(Stage::Evaluate, dir, vec![report_path, pairs_path, roc_path], vec![line], Vec::new())
}

/// One row of the comparison table. Mean rows carry `seed = "mean"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub seed: String,
    pub best_accuracy: f64,
    pub structure_correlation: Option<f64>,
    pub n_runs: usize,
}

/// Reports found under `dirs`, in sorted path order.
pub fn find_reports(dirs: &[PathBuf]) -> Result<Vec<(PathBuf, EvaluationReport)>> {
    let mut paths = Vec::new();
    for d in dirs {
        if !d.exists() {
            return Err(Error::MissingArtifact(d.clone()));
        }
        for entry in walkdir::WalkDir::new(d).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::Io(e.into()))?;
            if entry.file_type().is_file() && entry.file_name() == REPORT_FILE {
                paths.push(entry.into_path());
            }
        }
    }
    paths.sort();
    paths.dedup();
    paths
        .into_iter()
        .map(|p| {
            let r = read_json(&p)?;
            Ok((p, r))
        })
        .collect()
}

/// Per-run rows sorted by label then seed, then one mean row per label.
pub fn comparison_rows(reports: &[EvaluationReport]) -> Vec<ComparisonRow> {
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            seed: r.seed.to_string(),
            best_accuracy: r.verification.best_accuracy,
            structure_correlation: r.structure_correlation,
            n_runs: 1,
        })
        .collect();
    rows.sort_by(|a, b| a.label.cmp(&b.label).then(a.seed.parse::<u64>().ok().cmp(&b.seed.parse::<u64>().ok())));
    let mut groups: BTreeMap<&str, Vec<&EvaluationReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(&r.label).or_default().push(r);
    }
    for (label, rs) in groups {
        let n = rs.len() as f64;
        let acc = rs.iter().map(|r| r.verification.best_accuracy).sum::<f64>() / n;
        let sc = rs
            .iter()
            .map(|r| r.structure_correlation)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        rows.push(ComparisonRow {
            label: label.to_string(),
            seed: "mean".into(),
            best_accuracy: acc,
            structure_correlation: sc,
            n_runs: rs.len(),
        });
    }
    rows
}

pub fn write_comparison_csv(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_comparison_csv(path: &Path) -> Result<Vec<ComparisonRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn format_comparison(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}  {:>6}  {:>13}  {:>21}\n", "label", "seed", "best_accuracy", "structure_correlation");
    for r in rows {
        let sc = r.structure_correlation.map(|c| format!("{c:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(out, "{:<width$}  {:>6}  {:>13.4}  {:>21}", r.label, r.seed, r.best_accuracy, sc);
    }
    out
}

/// Tabulates every `report.json` under `dirs` and writes `out/comparison.csv`.
pub fn cmd_compare(dirs: &[PathBuf], out: &Path) -> Result<(Vec<ComparisonRow>, PathBuf)> {
    let found = find_reports(dirs)?;
    if found.len() < 2 {
        let roots: Vec<String> = dirs.iter().map(|d| d.display().to_string()).collect();
        return Err(Error::InsufficientData(format!(
            "compare needs at least 2 evaluation reports, found {} under {}",
            found.len(),
            roots.join(", ")
        )));
    }
    let reports: Vec<EvaluationReport> = found.into_iter().map(|(_, r)| r).collect();
    let rows = comparison_rows(&reports);
    fs::create_dir_all(out)?;
    let path = out.join(COMPARISON_FILE);
    write_comparison_csv(&rows, &path)?;
    if read_comparison_csv(&path)? != rows {
        return Err(Error::format(&path, "comparison table did not read back identically"));
    }
    Ok((rows, path))
}
