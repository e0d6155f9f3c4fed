//! Synthetic identity datasets, PK batch sampling and in-batch triplet mining.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Triplet;
use crate::numerics::{sq_euclidean, Rng, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u32,
    pub identity: u32,
    pub x: Vector,
}

/// Immutable set of labelled feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityDataset {
    input_dim: usize,
    samples: Vec<Sample>,
    by_identity: BTreeMap<u32, Vec<usize>>,
    by_id: HashMap<u32, usize>,
    spec: Option<HierarchySpec>,
}

impl IdentityDataset {
    pub fn new(input_dim: usize, samples: Vec<Sample>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::contract("input_dim must be positive"));
        }
        let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut by_id = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != input_dim {
                return Err(Error::DimensionMismatch {
                    expected: input_dim,
                    found: s.x.len(),
                });
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Degenerate(format!("sample {} has non-finite features", s.id)));
            }
            if by_id.insert(s.id, i).is_some() {
                return Err(Error::contract(format!("duplicate sample id {}", s.id)));
            }
            by_identity.entry(s.identity).or_default().push(i);
        }
        Ok(Self {
            input_dim,
            samples,
            by_identity,
            by_id,
            spec: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn by_id(&self, id: u32) -> Result<&Sample> {
        self.by_id.get(&id).map(|&i| &self.samples[i]).ok_or(Error::UnknownSample(id))
    }

    /// Identity ids in ascending order.
    pub fn identities(&self) -> Vec<u32> {
        self.by_identity.keys().copied().collect()
    }

    pub fn identity_count(&self) -> usize {
        self.by_identity.len()
    }

    /// Sample indices (into [`samples`](Self::samples)) of one identity.
    pub fn members(&self, identity: u32) -> &[usize] {
        self.by_identity.get(&identity).map_or(&[], Vec::as_slice)
    }

    pub fn spec(&self) -> Option<&HierarchySpec> {
        self.spec.as_ref()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = DatasetHeader {
            input_dim: self.input_dim,
            n_samples: self.samples.len(),
            n_identities: self.by_identity.len(),
            seed: self.spec.as_ref().map(|s| s.seed),
            spec: self.spec.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for s in &self.samples {
            serde_json::to_writer(
                &mut w,
                &SampleRecord {
                    sample: s.id,
                    identity: s.identity,
                    x: s.x.clone(),
                },
            )?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header_line = lines.next().ok_or_else(|| Error::format(path, "empty dataset file"))??;
        let header: DatasetHeader =
            serde_json::from_str(&header_line).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        let mut samples = Vec::with_capacity(header.n_samples);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("record {}: {e}", lineno + 1)))?;
            samples.push(Sample {
                id: r.sample,
                identity: r.identity,
                x: r.x,
            });
        }
        if samples.len() != header.n_samples {
            return Err(Error::format(
                path,
                format!("header declares {} samples, found {}", header.n_samples, samples.len()),
            ));
        }
        let mut ds = Self::new(header.input_dim, samples)?;
        if ds.identity_count() != header.n_identities {
            return Err(Error::format(
                path,
                format!("header declares {} identities, found {}", header.n_identities, ds.identity_count()),
            ));
        }
        ds.spec = header.spec;
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    input_dim: usize,
    n_samples: usize,
    n_identities: usize,
    seed: Option<u64>,
    spec: Option<HierarchySpec>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    sample: u32,
    identity: u32,
    x: Vector,
}

/// Parameters of the three-level Gaussian hierarchy
/// (supercluster → identity → sample).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub n_superclusters: usize,
    pub identities_per_supercluster: usize,
    pub samples_per_identity: usize,
    pub input_dim: usize,
    pub supercluster_spread: f64,
    pub identity_spread: f64,
    pub sample_noise: f64,
    pub seed: u64,
}

impl Default for HierarchySpec {
    fn default() -> Self {
        Self {
            n_superclusters: 4,
            identities_per_supercluster: 8,
            samples_per_identity: 30,
            input_dim: 16,
            supercluster_spread: 1.5,
            identity_spread: 0.6,
            sample_noise: 0.25,
            seed: 0,
        }
    }
}

impl HierarchySpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_superclusters", self.n_superclusters),
            ("identities_per_supercluster", self.identities_per_supercluster),
            ("samples_per_identity", self.samples_per_identity),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.sample_noise > 0.0 && self.sample_noise.is_finite()) {
            return Err(Error::Config("sample_noise must be > 0".into()));
        }
        if !(self.sample_noise < self.identity_spread) {
            return Err(Error::Config(format!(
                "sample_noise ({}) must be < identity_spread ({})",
                self.sample_noise, self.identity_spread
            )));
        }
        if !(self.identity_spread < self.supercluster_spread && self.supercluster_spread.is_finite()) {
            return Err(Error::Config(format!(
                "identity_spread ({}) must be < supercluster_spread ({})",
                self.identity_spread, self.supercluster_spread
            )));
        }
        let total = self.n_superclusters * self.identities_per_supercluster * self.samples_per_identity;
        if total > u32::MAX as usize {
            return Err(Error::Config(format!("{total} samples exceed the u32 id space")));
        }
        Ok(())
    }
}

/// Generated dataset plus the latent centers it was drawn from.
#[derive(Debug, Clone)]
pub struct GeneratedHierarchy {
    pub dataset: IdentityDataset,
    pub supercluster_centers: Vec<Vector>,
    pub identity_centers: Vec<Vector>,
    /// Supercluster index of each identity (identity id = position).
    pub supercluster_of: Vec<usize>,
}

pub fn generate_hierarchical(spec: &HierarchySpec) -> Result<IdentityDataset> {
    Ok(generate_hierarchy(spec)?.dataset)
}

/// Draws supercluster centers `~ N(0, σ_s²I)`, identity centers around them
/// with `σ_i`, and samples around identities with `σ_n`.
pub fn generate_hierarchy(spec: &HierarchySpec) -> Result<GeneratedHierarchy> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let dim = spec.input_dim;
    let around = |center: &[f64], spread: f64, rng: &mut Rng| -> Vector {
        center.iter().map(|c| c + spread * rng.normal()).collect()
    };
    let origin = vec![0.0; dim];
    let mut supercluster_centers = Vec::with_capacity(spec.n_superclusters);
    let mut identity_centers = Vec::new();
    let mut supercluster_of = Vec::new();
    let mut samples = Vec::new();
    let mut next_id = 0u32;
    for s in 0..spec.n_superclusters {
        let sc = around(&origin, spec.supercluster_spread, &mut rng);
        for _ in 0..spec.identities_per_supercluster {
            let identity = identity_centers.len() as u32;
            let ic = around(&sc, spec.identity_spread, &mut rng);
            for _ in 0..spec.samples_per_identity {
                samples.push(Sample {
                    id: next_id,
                    identity,
                    x: around(&ic, spec.sample_noise, &mut rng),
                });
                next_id += 1;
            }
            identity_centers.push(ic);
            supercluster_of.push(s);
        }
        supercluster_centers.push(sc);
    }
    let mut dataset = IdentityDataset::new(dim, samples)?;
    dataset.spec = Some(spec.clone());
    Ok(GeneratedHierarchy {
        dataset,
        supercluster_centers,
        identity_centers,
        supercluster_of,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchEntry {
    /// Index into the dataset's sample list.
    pub index: usize,
    pub sample: u32,
    pub identity: u32,
}

/// `p` identities × `k` samples, grouped by identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    pub p: usize,
    pub k: usize,
    pub entries: Vec<BatchEntry>,
}

impl PkBatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.identity).collect()
    }
}

/// Picks `p` identities uniformly among those with at least `k` samples,
/// then `k` of their samples, all without replacement.
pub fn sample_pk_batch(ds: &IdentityDataset, p: usize, k: usize, rng: &mut Rng) -> Result<PkBatch> {
    if p == 0 || k == 0 {
        return Err(Error::contract("P and K must be >= 1"));
    }
    let eligible: Vec<u32> = ds
        .by_identity
        .iter()
        .filter(|(_, m)| m.len() >= k)
        .map(|(&id, _)| id)
        .collect();
    if eligible.len() < p {
        return Err(Error::Capacity(format!(
            "need {p} identities with >= {k} samples, dataset has {}",
            eligible.len()
        )));
    }
    let mut entries = Vec::with_capacity(p * k);
    for pick in rng.sample_distinct(eligible.len(), p)? {
        let identity = eligible[pick];
        let members = ds.members(identity);
        for j in rng.sample_distinct(members.len(), k)? {
            let index = members[j];
            entries.push(BatchEntry {
                index,
                sample: ds.samples[index].id,
                identity,
            });
        }
    }
    Ok(PkBatch { p, k, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningStrategy {
    /// Every valid (a, p, n) in the batch.
    All,
    /// One random positive and one random negative per anchor.
    RandomPerAnchor,
    /// Per (a, p): the closest negative farther than p, else the farthest.
    SemiHard,
}

impl FromStr for MiningStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "random_per_anchor" => Ok(Self::RandomPerAnchor),
            "semi_hard" => Ok(Self::SemiHard),
            other => Err(Error::Config(format!(
                "unknown mining strategy {other:?} (expected all, random_per_anchor, semi_hard)"
            ))),
        }
    }
}

impl fmt::Display for MiningStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::RandomPerAnchor => "random_per_anchor",
            Self::SemiHard => "semi_hard",
        })
    }
}

/// Mines triplets of batch positions from `embeddings[i]` for entry `i`.
pub fn mine_triplets(
    batch: &PkBatch,
    embeddings: &[Vector],
    strategy: MiningStrategy,
    rng: &mut Rng,
) -> Result<Vec<Triplet>> {
    if embeddings.len() != batch.len() {
        return Err(Error::contract(format!(
            "{} embeddings for a batch of {}",
            embeddings.len(),
            batch.len()
        )));
    }
    let labels = batch.labels();
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InsufficientData("batch needs at least two identities to form triplets".into()));
    }
    let n = labels.len();
    let labels = labels.as_slice();
    let positives = |a: usize| (0..n).filter(move |&p| p != a && labels[p] == labels[a]);
    let negatives = |a: usize| (0..n).filter(move |&q| labels[q] != labels[a]);

    let mut out = Vec::new();
    match strategy {
        MiningStrategy::All => {
            for a in 0..n {
                for p in positives(a) {
                    out.extend(negatives(a).map(|q| Triplet::new(a, p, q)));
                }
            }
        }
        MiningStrategy::RandomPerAnchor => {
            for a in 0..n {
                let pos: Vec<usize> = positives(a).collect();
                if pos.is_empty() {
                    continue;
                }
                let neg: Vec<usize> = negatives(a).collect();
                let p = pos[rng.index(pos.len())?];
                let q = neg[rng.index(neg.len())?];
                out.push(Triplet::new(a, p, q));
            }
        }
        MiningStrategy::SemiHard => {
            let dist = pairwise_sq_distances(embeddings)?;
            for a in 0..n {
                for p in positives(a) {
                    let d_ap = dist[a][p];
                    let mut semi: Option<(usize, f64)> = None;
                    let mut far: Option<(usize, f64)> = None;
                    for q in negatives(a) {
                        let d = dist[a][q];
                        if d > d_ap && semi.is_none_or(|(_, best)| d < best) {
                            semi = Some((q, d));
                        }
                        if far.is_none_or(|(_, best)| d > best) {
                            far = Some((q, d));
                        }
                    }
                    if let Some((q, _)) = semi.or(far) {
                        out.push(Triplet::new(a, p, q));
                    }
                }
            }
        }
    }
    Ok(out)
}

fn pairwise_sq_distances(embeddings: &[Vector]) -> Result<Vec<Vec<f64>>> {
    let n = embeddings.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_euclidean(&embeddings[i], &embeddings[j])?;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}
