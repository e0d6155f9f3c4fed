//! Flat `key = value` experiment configuration.
//!
//! Every key has a default; unknown or repeated keys are errors. Lines
//! starting with `#` are comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{HierarchySpec, MiningStrategy};
use crate::error::{Error, Result};
use crate::loss::{MarginConfig, MarginMode};
use crate::numerics::derive_seed;
use crate::trainer::{DistillConfig, MlpArch, TeacherConfig};

/// `(key, default, description)` for every recognized key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed; stage seeds are derived from it by label"),
    ("label", "", "run label for comparison tables (empty: derived from target and margin)"),
    ("data.seed", "", "dataset seed override (empty: derived from seed)"),
    ("data.n_superclusters", "4", "number of superclusters"),
    ("data.identities_per_supercluster", "8", "identities per supercluster"),
    ("data.samples_per_identity", "30", "samples per identity"),
    ("data.input_dim", "16", "feature dimension"),
    ("data.supercluster_spread", "1.5", "std-dev of supercluster centers"),
    ("data.identity_spread", "0.6", "std-dev of identity centers around their supercluster"),
    ("data.sample_noise", "0.25", "std-dev of samples around their identity"),
    ("teacher.seed", "", "teacher seed override (empty: derived from seed)"),
    ("teacher.hidden", "128,128,128", "teacher hidden layer widths"),
    ("teacher.embed_dim", "32", "teacher embedding size"),
    ("teacher.iterations", "100", "teacher training iterations"),
    ("teacher.learning_rate", "0.05", "teacher learning rate"),
    ("teacher.momentum", "0.9", "teacher SGD momentum"),
    ("teacher.margin", "0.05", "fixed margin used to train the teacher"),
    ("teacher.p", "10", "identities per teacher batch"),
    ("teacher.k", "18", "samples per identity in a teacher batch"),
    ("teacher.mining", "semi_hard", "teacher mining strategy: all | random_per_anchor | semi_hard"),
    ("teacher.accuracy_floor", "0.9", "warn when teacher training-pair accuracy is below this"),
    ("teacher.eval_pairs", "1000", "positive and negative pairs (each) for the teacher check"),
    ("calibrate.seed", "", "calibration seed override (empty: derived from seed)"),
    ("calibrate.n_triplets", "1000", "random triplets sampled for calibration"),
    ("student.hidden", "32,32", "student hidden layer widths"),
    ("student.embed_dim", "16", "student embedding size"),
    ("margin.mode", "dynamic", "fixed | dynamic"),
    ("margin.m", "0.4", "fixed margin"),
    ("margin.m_min", "0.2", "smallest dynamic margin"),
    ("margin.m_max", "0.5", "largest dynamic margin"),
    ("margin.from_calibration", "false", "take m_min/m_max from the calibration report"),
    ("distill.seed", "", "distillation seed override (empty: derived from seed)"),
    ("distill.p", "10", "identities per batch"),
    ("distill.k", "18", "samples per identity in a batch"),
    ("distill.iterations", "2000", "fine-tuning iterations"),
    ("distill.learning_rate", "0.001", "fine-tuning learning rate"),
    ("distill.momentum", "0.9", "fine-tuning SGD momentum"),
    ("distill.mining", "semi_hard", "all | random_per_anchor | semi_hard"),
    ("distill.eval_every", "0", "log probe accuracy every N iterations (0: never)"),
    ("eval.seed", "", "evaluation seed override (empty: derived from seed)"),
    ("eval.n_pos", "3000", "positive verification pairs"),
    ("eval.n_neg", "3000", "negative verification pairs"),
    ("eval.target", "student", "student | teacher"),
    ("eval.model", "", "checkpoint or embedding table to evaluate (empty: pipeline artifact)"),
    ("eval.teacher", "auto", "reference for structure correlation: auto | none | path"),
    ("eval.pairs", "", "pair file to use instead of sampling pairs"),
    ("paths.dataset", "", "dataset file override"),
    ("paths.teacher", "", "teacher checkpoint override"),
    ("paths.calibration", "", "calibration report override"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), i + 1).is_some() {
                return Err(Error::Config(format!("line {}: key {k:?} given twice", i + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        text.parse()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| s.trim().parse().map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))))
            .collect()
    }

    /// The fully resolved config, one `key = value` per line in key order.
    pub fn resolved(&self) -> String {
        self.render(|_| true)
    }

    fn render(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut out = String::new();
        for (k, v) in self.values.iter().filter(|(k, _)| keep(k)) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Short content hash of the keys under the given prefixes plus `seed`.
    pub fn stage_hash(&self, prefixes: &[&str]) -> String {
        let text = self.render(|k| k == "seed" || prefixes.iter().any(|p| k.starts_with(p)));
        hex::encode(&Sha256::digest(text.as_bytes())[..6])
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    /// Seed for a stage: its explicit override, else derived from `seed`.
    pub fn stage_seed(&self, stage: &str) -> Result<u64> {
        let key = format!("{stage}.seed");
        if self.get(&key).is_empty() {
            Ok(derive_seed(self.seed()?, stage))
        } else {
            self.parse(&key)
        }
    }

    pub fn hierarchy(&self) -> Result<HierarchySpec> {
        let spec = HierarchySpec {
            n_superclusters: self.parse("data.n_superclusters")?,
            identities_per_supercluster: self.parse("data.identities_per_supercluster")?,
            samples_per_identity: self.parse("data.samples_per_identity")?,
            input_dim: self.parse("data.input_dim")?,
            supercluster_spread: self.parse("data.supercluster_spread")?,
            identity_spread: self.parse("data.identity_spread")?,
            sample_noise: self.parse("data.sample_noise")?,
            seed: self.stage_seed("data")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn teacher_arch(&self) -> Result<MlpArch> {
        Ok(MlpArch {
            hidden: self.list("teacher.hidden")?,
            embed_dim: self.parse("teacher.embed_dim")?,
        })
    }

    pub fn student_arch(&self) -> Result<MlpArch> {
        Ok(MlpArch {
            hidden: self.list("student.hidden")?,
            embed_dim: self.parse("student.embed_dim")?,
        })
    }

    pub fn teacher_config(&self) -> Result<TeacherConfig> {
        Ok(TeacherConfig {
            iterations: self.parse("teacher.iterations")?,
            learning_rate: self.parse("teacher.learning_rate")?,
            momentum: self.parse("teacher.momentum")?,
            margin: self.parse("teacher.margin")?,
            p: self.parse("teacher.p")?,
            k: self.parse("teacher.k")?,
            mining: self.parse("teacher.mining")?,
            accuracy_floor: self.parse("teacher.accuracy_floor")?,
            eval_pairs: self.parse("teacher.eval_pairs")?,
        })
    }

    pub fn margin_mode(&self) -> Result<MarginMode> {
        match self.get("margin.mode") {
            "fixed" => Ok(MarginMode::Fixed),
            "dynamic" => Ok(MarginMode::Dynamic),
            other => Err(Error::Config(format!("margin.mode = {other:?}: expected fixed or dynamic"))),
        }
    }

    pub fn from_calibration(&self) -> Result<bool> {
        self.parse("margin.from_calibration")
    }

    /// Margin settings as written in the config (before any calibration).
    pub fn margin(&self) -> Result<MarginConfig> {
        let cfg = MarginConfig {
            mode: self.margin_mode()?,
            m: self.parse("margin.m")?,
            m_min: self.parse("margin.m_min")?,
            m_max: self.parse("margin.m_max")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn distill_config(&self) -> Result<DistillConfig> {
        let cfg = DistillConfig {
            margin: self.margin()?,
            p: self.parse("distill.p")?,
            k: self.parse("distill.k")?,
            iterations: self.parse("distill.iterations")?,
            learning_rate: self.parse("distill.learning_rate")?,
            momentum: self.parse("distill.momentum")?,
            mining: self.parse::<MiningStrategy>("distill.mining")?,
            seed: self.stage_seed("distill")?,
            eval_every: self.parse("distill.eval_every")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    /// Label used in comparison tables.
    pub fn label(&self) -> Result<String> {
        let explicit = self.get("label");
        if !explicit.is_empty() {
            return Ok(explicit.to_string());
        }
        if self.get("eval.target") == "teacher" {
            return Ok("teacher".into());
        }
        Ok(match self.margin_mode()? {
            MarginMode::Dynamic => "dynamic".into(),
            MarginMode::Fixed => format!("fixed-m{}", self.get("margin.m")),
        })
    }

    /// Commented listing of every key with its default.
    pub fn documented_defaults() -> String {
        let mut out = String::new();
        for (k, v, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{k} = {v}\n");
        }
        out
    }
}
