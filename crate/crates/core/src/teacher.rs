//! Frozen teacher oracle, the teacher gap, and margin calibration.
//!
//! Teacher distance is squared Euclidean between unit-norm teacher
//! embeddings, the same convention the student loss uses.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{IdentityDataset, Sample};
use crate::embedding::{embed_indices, Embedder};
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, sq_euclidean, Rng, Vector};
use crate::trainer::model::{read_f32_le, read_u32_le, MlpModel};

const TABLE_MAGIC: &[u8; 6] = b"TFEMB1";

/// Embeddings keyed by sample id, each tagged with its identity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<u32, (u32, Vector)>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, identity: u32, sample: u32, vector: Vector) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if self.entries.insert(sample, (identity, vector)).is_some() {
            return Err(Error::contract(format!("duplicate sample {sample} in embedding table")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, sample: u32) -> Option<(u32, &[f64])> {
        self.entries.get(&sample).map(|(id, v)| (*id, v.as_slice()))
    }

    /// `(identity, sample, vector)` in ascending sample order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, u32, &[f64])> {
        self.entries.iter().map(|(&s, (id, v))| (*id, s, v.as_slice()))
    }

    /// Embeds every sample of `ds`.
    pub fn from_embedder<E: Embedder + ?Sized>(embedder: &E, ds: &IdentityDataset) -> Result<Self> {
        let indices: Vec<usize> = (0..ds.len()).collect();
        let vectors = embed_indices(embedder, ds, &indices)?;
        let mut table = Self::new(embedder.embed_dim());
        for (s, v) in ds.samples().iter().zip(vectors) {
            table.insert(s.identity, s.id, v)?;
        }
        Ok(table)
    }

    /// `TFEMB1`: magic, u32 count, u32 dim, then per record u32 identity,
    /// u32 sample and `dim` f32 values, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.entries.len() * (8 + 4 * self.dim));
        out.extend_from_slice(TABLE_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (identity, sample, v) in self.iter() {
            out.extend_from_slice(&identity.to_le_bytes());
            out.extend_from_slice(&sample.to_le_bytes());
            for &x in v {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..6] != TABLE_MAGIC {
            return Err(Error::format(origin, "not a TFEMB1 embedding table (bad magic)"));
        }
        let mut pos = 6;
        let count = read_u32_le(bytes, &mut pos, origin)? as usize;
        let dim = read_u32_le(bytes, &mut pos, origin)? as usize;
        if dim == 0 {
            return Err(Error::format(origin, "embedding dim is zero"));
        }
        let mut table = Self::new(dim);
        for _ in 0..count {
            let identity = read_u32_le(bytes, &mut pos, origin)?;
            let sample = read_u32_le(bytes, &mut pos, origin)?;
            let v = (0..dim)
                .map(|_| read_f32_le(bytes, &mut pos, origin).map(f64::from))
                .collect::<Result<Vector>>()?;
            table
                .insert(identity, sample, v)
                .map_err(|e| Error::format(origin, e.to_string()))?;
        }
        if pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after embedding table"));
        }
        Ok(table)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (identity, sample, v) in self.iter() {
            serde_json::to_writer(
                &mut w,
                &TableRecord {
                    identity,
                    sample,
                    vector: v.to_vec(),
                },
            )?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads either format, chosen by the leading magic bytes.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(TABLE_MAGIC) {
            return Self::from_bytes(&bytes, path);
        }
        let mut table: Option<Self> = None;
        for (lineno, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: TableRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
            let t = table.get_or_insert_with(|| Self::new(r.vector.len()));
            t.insert(r.identity, r.sample, r.vector)
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        table
            .filter(|t| t.dim > 0)
            .ok_or_else(|| Error::format(path, "embedding table is empty"))
    }
}

#[derive(Serialize, Deserialize)]
struct TableRecord {
    identity: u32,
    sample: u32,
    vector: Vector,
}

#[derive(Debug, Clone, PartialEq)]
enum Backing {
    Table(EmbeddingTable),
    Model(MlpModel),
}

/// Read-only teacher: a frozen model or a precomputed table of unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOracle {
    backing: Backing,
}

impl TeacherOracle {
    /// Every stored vector is L2-normalized on construction.
    pub fn from_table(table: EmbeddingTable) -> Result<Self> {
        let mut normalized = EmbeddingTable::new(table.dim);
        for (identity, sample, v) in table.iter() {
            normalized.insert(identity, sample, l2_normalize(v)?)?;
        }
        Ok(Self {
            backing: Backing::Table(normalized),
        })
    }

    pub fn from_model(model: MlpModel) -> Self {
        Self {
            backing: Backing::Model(model),
        }
    }

    pub fn model(&self) -> Option<&MlpModel> {
        match &self.backing {
            Backing::Model(m) => Some(m),
            Backing::Table(_) => None,
        }
    }

    pub fn table(&self) -> Option<&EmbeddingTable> {
        match &self.backing {
            Backing::Table(t) => Some(t),
            Backing::Model(_) => None,
        }
    }

    /// Table-backed oracle holding this oracle's embedding of every sample.
    ///
    /// Vectors are stored exactly as this oracle returns them (already unit
    /// norm), so both oracles give bitwise-identical answers.
    pub fn precompute(&self, ds: &IdentityDataset) -> Result<Self> {
        Ok(Self {
            backing: Backing::Table(EmbeddingTable::from_embedder(self, ds)?),
        })
    }

    /// Teacher distance `T(a, b)`.
    pub fn distance(&self, a: &Sample, b: &Sample) -> Result<f64> {
        sq_euclidean(&self.embed(a)?, &self.embed(b)?)
    }

    /// SHA-256 over the bit patterns of every embedding of `ds`.
    pub fn fingerprint(&self, ds: &IdentityDataset) -> Result<String> {
        let mut h = Sha256::new();
        for s in ds.samples() {
            h.update(s.id.to_le_bytes());
            for v in self.embed(s)? {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

impl Embedder for TeacherOracle {
    fn embed(&self, sample: &Sample) -> Result<Vector> {
        match &self.backing {
            Backing::Table(t) => {
                let (identity, v) = t.get(sample.id).ok_or(Error::UnknownSample(sample.id))?;
                if identity != sample.identity {
                    return Err(Error::contract(format!(
                        "sample {} has identity {} but the table says {identity}",
                        sample.id, sample.identity
                    )));
                }
                Ok(v.to_vec())
            }
            Backing::Model(m) => {
                let e = m.forward(&sample.x)?.0;
                if m.normalize_output() {
                    Ok(e)
                } else {
                    l2_normalize(&e)
                }
            }
        }
    }

    fn embed_dim(&self) -> usize {
        match &self.backing {
            Backing::Table(t) => t.dim(),
            Backing::Model(m) => m.output_dim(),
        }
    }
}

/// `max(T(a,n) − T(a,p), 0)`.
pub fn teacher_gap(oracle: &TeacherOracle, a: &Sample, p: &Sample, n: &Sample) -> Result<f64> {
    if p.identity != a.identity {
        return Err(Error::contract(format!(
            "positive {} has identity {}, anchor {} has {}",
            p.id, p.identity, a.id, a.identity
        )));
    }
    if n.identity == a.identity {
        return Err(Error::contract(format!("negative {} shares the anchor's identity {}", n.id, a.identity)));
    }
    let ea = oracle.embed(a)?;
    let t_ap = sq_euclidean(&ea, &oracle.embed(p)?)?;
    let t_an = sq_euclidean(&ea, &oracle.embed(n)?)?;
    Ok(gap(t_ap, t_an))
}

/// The clamp inside [`teacher_gap`], on raw teacher distances.
pub fn gap(t_ap: f64, t_an: f64) -> f64 {
    (t_an - t_ap).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub sample_count: usize,
    pub d_values: Vec<f64>,
    pub d_min_observed: f64,
    pub d_max_observed: f64,
    pub suggested_m_min: f64,
    pub suggested_m_max: f64,
    /// Sample ids `[anchor, positive, negative]` behind each `d_values[i]`.
    pub triplets: Vec<[u32; 3]>,
}

/// Draws triplets uniformly over all valid `(a, p, n)` of a dataset.
pub struct TripletSampler<'a> {
    ds: &'a IdentityDataset,
    cumulative: Vec<u64>,
}

impl<'a> TripletSampler<'a> {
    pub fn new(ds: &'a IdentityDataset) -> Result<Self> {
        let total = ds.len() as u64;
        let mut acc = 0u64;
        let cumulative = ds
            .samples()
            .iter()
            .map(|s| {
                let same = ds.members(s.identity).len() as u64;
                acc += (same - 1) * (total - same);
                acc
            })
            .collect();
        if acc == 0 {
            return Err(Error::InsufficientData(
                "dataset needs two identities and an identity with two samples to form a triplet".into(),
            ));
        }
        Ok(Self { ds, cumulative })
    }

    /// Number of valid ordered triplets.
    pub fn total(&self) -> u64 {
        *self.cumulative.last().expect("non-empty")
    }

    pub fn draw(&self, rng: &mut Rng) -> Result<[&'a Sample; 3]> {
        let r = rng.index(self.total() as usize)? as u64;
        let ai = self.cumulative.partition_point(|&c| c <= r);
        let a = self.ds.sample(ai);
        let members = self.ds.members(a.identity);
        let others: Vec<usize> = members.iter().copied().filter(|&i| i != ai).collect();
        let p = self.ds.sample(others[rng.index(others.len())?]);
        let n_neg = self.ds.len() - members.len();
        let k = rng.index(n_neg)?;
        // k-th sample (in dataset order) outside the anchor's identity.
        let n = self
            .ds
            .samples()
            .iter()
            .filter(|s| s.identity != a.identity)
            .nth(k)
            .expect("index within negatives");
        Ok([a, p, n])
    }
}

/// Samples `n_triplets` valid triplets and summarizes their teacher gaps.
/// Suggested bounds are the observed extremes.
pub fn calibrate_margins(
    oracle: &TeacherOracle,
    ds: &IdentityDataset,
    n_triplets: usize,
    rng: &mut Rng,
) -> Result<CalibrationReport> {
    if n_triplets == 0 {
        return Err(Error::contract("n_triplets must be >= 1"));
    }
    let sampler = TripletSampler::new(ds)?;
    let mut d_values = Vec::with_capacity(n_triplets);
    let mut triplets = Vec::with_capacity(n_triplets);
    for _ in 0..n_triplets {
        let [a, p, n] = sampler.draw(rng)?;
        d_values.push(teacher_gap(oracle, a, p, n)?);
        triplets.push([a.id, p.id, n.id]);
    }
    let d_min_observed = d_values.iter().copied().fold(f64::INFINITY, f64::min);
    let d_max_observed = d_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(CalibrationReport {
        sample_count: n_triplets,
        d_values,
        d_min_observed,
        d_max_observed,
        suggested_m_min: d_min_observed,
        suggested_m_max: d_max_observed,
        triplets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_hierarchical, HierarchySpec};

    fn s(id: u32, identity: u32) -> Sample {
        Sample {
            id,
            identity,
            x: vec![0.0],
        }
    }

    fn table_oracle(rows: &[(u32, u32, Vector)]) -> TeacherOracle {
        let mut t = EmbeddingTable::new(rows[0].2.len());
        for (identity, sample, v) in rows {
            t.insert(*identity, *sample, v.clone()).unwrap();
        }
        TeacherOracle::from_table(t).unwrap()
    }

    #[test]
    fn table_lookup() {
        let o = table_oracle(&[(0, 7, vec![0.6, 0.8])]);
        let e = o.embed(&s(7, 0)).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-15 && (e[1] - 0.8).abs() < 1e-15);
        assert_eq!(e, o.embed(&s(7, 0)).unwrap());
        assert!(matches!(o.embed(&s(8, 0)), Err(Error::UnknownSample(8))));
        assert!(o.embed(&s(7, 1)).is_err());
    }

    #[test]
    fn gap_examples() {
        // a=(1,0); p at sq distance 0.3, n at 0.9 on the unit circle.
        let on_circle = |d: f64| {
            let c = 1.0 - d / 2.0;
            vec![c, (1.0 - c * c).sqrt()]
        };
        let o = table_oracle(&[(0, 0, vec![1.0, 0.0]), (0, 1, on_circle(0.3)), (1, 2, on_circle(0.9))]);
        let g = teacher_gap(&o, &s(0, 0), &s(1, 0), &s(2, 1)).unwrap();
        assert!((g - 0.6).abs() < 1e-12);

        let o = table_oracle(&[(0, 0, vec![1.0, 0.0]), (0, 1, on_circle(0.5)), (1, 2, on_circle(0.2))]);
        assert_eq!(teacher_gap(&o, &s(0, 0), &s(1, 0), &s(2, 1)).unwrap(), 0.0);

        assert!(matches!(teacher_gap(&o, &s(0, 0), &s(2, 1), &s(1, 0)), Err(Error::Contract(_))));
        assert!(matches!(teacher_gap(&o, &s(0, 0), &s(1, 0), &s(1, 0)), Err(Error::Contract(_))));
    }

    fn ds() -> IdentityDataset {
        generate_hierarchical(&HierarchySpec {
            n_superclusters: 2,
            identities_per_supercluster: 3,
            samples_per_identity: 4,
            input_dim: 6,
            seed: 4,
            ..HierarchySpec::default()
        })
        .unwrap()
    }

    fn model_oracle(ds: &IdentityDataset) -> TeacherOracle {
        let m = MlpModel::init(&[ds.input_dim(), 12, 5], true, &mut Rng::new(0)).unwrap();
        TeacherOracle::from_model(m)
    }

    #[test]
    fn gaps_match_raw_recomputation() {
        let ds = ds();
        let o = model_oracle(&ds).precompute(&ds).unwrap();
        let t = o.table().unwrap();
        let sampler = TripletSampler::new(&ds).unwrap();
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let [a, p, n] = sampler.draw(&mut rng).unwrap();
            let raw = |id: u32| t.get(id).unwrap().1.to_vec();
            let (va, vp, vn) = (raw(a.id), raw(p.id), raw(n.id));
            let d = |x: &Vector, y: &Vector| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
            let expected = (d(&va, &vn) - d(&va, &vp)).max(0.0);
            assert_eq!(teacher_gap(&o, a, p, n).unwrap(), expected);
        }
    }

    #[test]
    fn model_oracle_is_unit_and_matches_table() {
        let ds = ds();
        let o = model_oracle(&ds);
        let table = o.precompute(&ds).unwrap();
        for smp in ds.samples() {
            let e = o.embed(smp).unwrap();
            assert!((crate::numerics::norm(&e) - 1.0).abs() < 1e-6);
            let t = table.embed(smp).unwrap();
            for (x, y) in e.iter().zip(&t) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let before = o.fingerprint(&ds).unwrap();
        for _ in 0..3 {
            for smp in ds.samples() {
                o.embed(smp).unwrap();
            }
        }
        assert_eq!(before, o.fingerprint(&ds).unwrap());
    }

    #[test]
    fn sampler_draws_valid_triplets_uniformly() {
        let ds = ds();
        let sampler = TripletSampler::new(&ds).unwrap();
        // 6 identities × 4 samples: each of 24 anchors has 3 positives and 20 negatives.
        assert_eq!(sampler.total(), 24 * 3 * 20);
        let mut rng = Rng::new(3);
        let mut anchor_counts = vec![0usize; ds.len()];
        for _ in 0..24_000 {
            let [a, p, n] = sampler.draw(&mut rng).unwrap();
            assert_eq!(a.identity, p.identity);
            assert_ne!(a.id, p.id);
            assert_ne!(a.identity, n.identity);
            anchor_counts[a.id as usize] += 1;
        }
        // Equal weights per anchor: chi-square with 23 dof, 0.001 quantile 49.73.
        let chi2: f64 = anchor_counts.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
        assert!(chi2 < 49.73, "{chi2}");
    }

    #[test]
    fn calibration_edge_cases() {
        // Two identities whose samples coincide, identities orthogonal.
        let samples = vec![
            Sample { id: 0, identity: 0, x: vec![1.0, 0.0] },
            Sample { id: 1, identity: 0, x: vec![1.0, 0.0] },
            Sample { id: 2, identity: 1, x: vec![0.0, 1.0] },
            Sample { id: 3, identity: 1, x: vec![0.0, 1.0] },
        ];
        let ds = IdentityDataset::new(2, samples).unwrap();
        let mut t = EmbeddingTable::new(2);
        for smp in ds.samples() {
            t.insert(smp.identity, smp.id, smp.x.clone()).unwrap();
        }
        let o = TeacherOracle::from_table(t).unwrap();
        let r = calibrate_margins(&o, &ds, 50, &mut Rng::new(0)).unwrap();
        assert!(r.d_values.iter().all(|&d| d == 2.0));
        assert_eq!(r.d_min_observed, r.d_max_observed);

        let r = calibrate_margins(&o, &ds, 1, &mut Rng::new(0)).unwrap();
        assert_eq!(r.d_values.len(), 1);
        assert_eq!(r.d_min_observed, r.d_max_observed);
        assert!(r.suggested_m_min <= r.suggested_m_max);

        let lonely = IdentityDataset::new(2, vec![Sample { id: 0, identity: 0, x: vec![1.0, 0.0] }]).unwrap();
        assert!(matches!(
            calibrate_margins(&o, &lonely, 5, &mut Rng::new(0)),
            Err(Error::InsufficientData(_))
        ));
        assert!(calibrate_margins(&o, &ds, 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn table_formats_round_trip() {
        let ds = ds();
        let table = EmbeddingTable::from_embedder(&model_oracle(&ds), &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("t.bin");
        let jsonl = dir.path().join("t.jsonl");
        table.write_binary(&bin).unwrap();
        table.write_jsonl(&jsonl).unwrap();
        let from_bin = EmbeddingTable::read(&bin).unwrap();
        assert_eq!(from_bin.len(), ds.len());
        for ((_, _, a), (_, _, b)) in from_bin.iter().zip(table.iter()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
        assert_eq!(EmbeddingTable::read(&jsonl).unwrap(), table);

        let bytes = fs::read(&bin).unwrap();
        assert_eq!(&bytes[..6], b"TFEMB1");
        assert_eq!(bytes.len(), 14 + ds.len() * (8 + 4 * 5));
        assert!(EmbeddingTable::from_bytes(&bytes[..bytes.len() - 2], &bin).is_err());
    }
}
