//! Pair verification with a full threshold sweep, and teacher/student
//! geometry comparison through identity-centroid distance matrices.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::IdentityDataset;
use crate::embedding::{embed_indices, Embedder};
use crate::error::{Error, Result};
use crate::numerics::{cosine_distance, l2_normalize, sq_euclidean, Rng, Vector};
use crate::par;

/// Enumerate negative pairs when there are at most this many; otherwise
/// sample them by rejection.
const ENUMERATE_NEGATIVES_LIMIT: u64 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub a: u32,
    pub b: u32,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.same).count()
    }

    /// Every pair refers to known samples and its label matches the dataset.
    pub fn validate(&self, ds: &IdentityDataset) -> Result<()> {
        for p in &self.pairs {
            let same = ds.by_id(p.a)?.identity == ds.by_id(p.b)?.identity;
            if same != p.same {
                return Err(Error::contract(format!(
                    "pair ({}, {}) labelled same={} but identities say {same}",
                    p.a, p.b, p.same
                )));
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for p in &self.pairs {
            serde_json::to_writer(&mut w, p)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            pairs.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
        }
        Ok(Self { pairs })
    }
}

/// Number of distinct unordered (same-identity, different-identity) pairs.
pub fn available_pairs(ds: &IdentityDataset) -> (u64, u64) {
    let n = ds.len() as u64;
    let pos: u64 = ds
        .identities()
        .iter()
        .map(|&id| {
            let m = ds.members(id).len() as u64;
            m * m.saturating_sub(1) / 2
        })
        .sum();
    (pos, n * n.saturating_sub(1) / 2 - pos)
}

/// `n_pos` positive then `n_neg` negative pairs, no unordered pair repeated.
pub fn build_pairs(ds: &IdentityDataset, n_pos: usize, n_neg: usize, rng: &mut Rng) -> Result<PairSet> {
    let (avail_pos, avail_neg) = available_pairs(ds);
    if n_pos as u64 > avail_pos || n_neg as u64 > avail_neg {
        return Err(Error::InsufficientData(format!(
            "requested {n_pos} positive / {n_neg} negative pairs, dataset offers {avail_pos} / {avail_neg}"
        )));
    }
    let samples = ds.samples();
    let mut pairs = Vec::with_capacity(n_pos + n_neg);

    if n_pos > 0 {
        let mut all = Vec::with_capacity(avail_pos as usize);
        for id in ds.identities() {
            let m = ds.members(id);
            for (x, &i) in m.iter().enumerate() {
                for &j in &m[x + 1..] {
                    all.push((i, j));
                }
            }
        }
        for k in rng.sample_distinct(all.len(), n_pos)? {
            let (i, j) = all[k];
            pairs.push(Pair {
                a: samples[i].id,
                b: samples[j].id,
                same: true,
            });
        }
    }

    if n_neg > 0 {
        if avail_neg <= ENUMERATE_NEGATIVES_LIMIT {
            let mut all = Vec::with_capacity(avail_neg as usize);
            for i in 0..samples.len() {
                for j in (i + 1)..samples.len() {
                    if samples[i].identity != samples[j].identity {
                        all.push((i, j));
                    }
                }
            }
            for k in rng.sample_distinct(all.len(), n_neg)? {
                let (i, j) = all[k];
                pairs.push(Pair {
                    a: samples[i].id,
                    b: samples[j].id,
                    same: false,
                });
            }
        } else {
            let mut seen = HashSet::with_capacity(n_neg);
            while seen.len() < n_neg {
                let i = rng.index(samples.len())?;
                let j = rng.index(samples.len())?;
                if samples[i].identity == samples[j].identity {
                    continue;
                }
                let key = (i.min(j), i.max(j));
                if seen.insert(key) {
                    pairs.push(Pair {
                        a: samples[key.0].id,
                        b: samples[key.1].id,
                        same: false,
                    });
                }
            }
        }
    }
    Ok(PairSet { pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub false_accept_rate: f64,
    pub true_accept_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub best_accuracy: f64,
    pub best_threshold: f64,
    pub n_pairs: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub roc_points: Vec<RocPoint>,
}

impl VerificationReport {
    pub fn write_roc_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.roc_points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Threshold sweep over pair distances; a pair is declared "same" when its
/// distance is strictly below the threshold.
///
/// Candidates are the smallest distance (accept nothing), every midpoint
/// between consecutive sorted distances, and the next float above the
/// largest distance (accept everything). The first candidate reaching the
/// best accuracy wins, so ties go to the smaller threshold.
pub fn sweep_thresholds(distances: &[f64], same: &[bool]) -> Result<VerificationReport> {
    if distances.is_empty() {
        return Err(Error::InsufficientData("no pairs to verify".into()));
    }
    if distances.len() != same.len() {
        return Err(Error::DimensionMismatch {
            expected: distances.len(),
            found: same.len(),
        });
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::Degenerate("non-finite pair distance".into()));
    }
    let n = distances.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| distances[i].total_cmp(&distances[j]));
    let sorted: Vec<f64> = order.iter().map(|&i| distances[i]).collect();
    let mut pos_prefix = Vec::with_capacity(n + 1);
    pos_prefix.push(0usize);
    for &i in &order {
        pos_prefix.push(pos_prefix.last().copied().unwrap_or(0) + usize::from(same[i]));
    }
    let n_pos = pos_prefix[n];
    let n_neg = n - n_pos;

    let mut candidates = Vec::with_capacity(n + 1);
    candidates.push(sorted[0]);
    candidates.extend(sorted.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    candidates.push(sorted[n - 1].next_up());

    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    let mut roc_points = Vec::with_capacity(candidates.len());
    for &t in &candidates {
        let accepted = sorted.partition_point(|&d| d < t);
        let true_accepts = pos_prefix[accepted];
        let false_accepts = accepted - true_accepts;
        let correct = true_accepts + (n_neg - false_accepts);
        let acc = correct as f64 / n as f64;
        if acc > best.0 {
            best = (acc, t);
        }
        roc_points.push(RocPoint {
            threshold: t,
            false_accept_rate: rate(false_accepts, n_neg),
            true_accept_rate: rate(true_accepts, n_pos),
        });
    }
    Ok(VerificationReport {
        best_accuracy: best.0,
        best_threshold: best.1,
        n_pairs: n,
        n_positive: n_pos,
        n_negative: n_neg,
        roc_points,
    })
}

/// Cosine-distance verification of `pairs` under `embedder`.
pub fn verify<E: Embedder + ?Sized>(embedder: &E, ds: &IdentityDataset, pairs: &PairSet) -> Result<VerificationReport> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("pair set is empty".into()));
    }
    let ids: BTreeSet<u32> = pairs.pairs.iter().flat_map(|p| [p.a, p.b]).collect();
    let ids: Vec<u32> = ids.into_iter().collect();
    let embeddings = par::map(&ids, |&id| embedder.embed(ds.by_id(id)?));
    let mut lookup = BTreeMap::new();
    for (id, e) in ids.iter().zip(embeddings) {
        lookup.insert(*id, e?);
    }
    let distances = pairs
        .pairs
        .iter()
        .map(|p| cosine_distance(&lookup[&p.a], &lookup[&p.b]))
        .collect::<Result<Vec<_>>>()?;
    let same: Vec<bool> = pairs.pairs.iter().map(|p| p.same).collect();
    sweep_thresholds(&distances, &same)
}

/// Square matrix indexed by identity (ascending id order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub identities: Vec<u32>,
    pub values: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    /// Entries strictly above the diagonal, row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.identities.len();
        (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| self.values[i][j]).collect()
    }
}

/// Mean of the L2-normalized embeddings of each identity, then pairwise
/// squared Euclidean distances between those means.
pub fn centroid_distance_matrix<E: Embedder + ?Sized>(embedder: &E, ds: &IdentityDataset) -> Result<DistanceMatrix> {
    let identities = ds.identities();
    let mut centroids: Vec<Vector> = Vec::with_capacity(identities.len());
    for &id in &identities {
        let members = ds.members(id);
        let embs = embed_indices(embedder, ds, members)?;
        let mut c = vec![0.0; embedder.embed_dim()];
        for e in &embs {
            for (ci, ei) in c.iter_mut().zip(l2_normalize(e)?) {
                *ci += ei;
            }
        }
        c.iter_mut().for_each(|v| *v /= members.len() as f64);
        centroids.push(c);
    }
    let n = identities.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_euclidean(&centroids[i], &centroids[j])?;
            values[i][j] = d;
            values[j][i] = d;
        }
    }
    Ok(DistanceMatrix { identities, values })
}

/// Ranks starting at 1; tied values share the mean of their ranks.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("rank correlation undefined for constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::InsufficientData(format!("need >= 3 values for rank correlation, got {}", x.len())));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Spearman correlation between the upper triangles of two centroid
/// distance matrices over the same identities.
pub fn structure_correlation(teacher: &DistanceMatrix, student: &DistanceMatrix) -> Result<f64> {
    if teacher.identities != student.identities {
        return Err(Error::contract("distance matrices cover different identities"));
    }
    if teacher.identities.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "structure correlation needs >= 3 identities, got {}",
            teacher.identities.len()
        )));
    }
    spearman(&teacher.upper_triangle(), &student.upper_triangle())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_hierarchical, HierarchySpec, Sample};
    use crate::teacher::{EmbeddingTable, TeacherOracle};
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn spec() -> HierarchySpec {
        HierarchySpec {
            n_superclusters: 2,
            identities_per_supercluster: 3,
            samples_per_identity: 5,
            input_dim: 4,
            seed: 2,
            ..HierarchySpec::default()
        }
    }

    #[test]
    fn forced_and_empty_pair_sets() {
        let ds = IdentityDataset::new(
            1,
            vec![Sample { id: 10, identity: 0, x: vec![1.0] }, Sample { id: 11, identity: 0, x: vec![2.0] }],
        )
        .unwrap();
        let ps = build_pairs(&ds, 1, 0, &mut Rng::new(0)).unwrap();
        assert_eq!(ps.pairs, vec![Pair { a: 10, b: 11, same: true }]);
        assert!(build_pairs(&ds, 2, 0, &mut Rng::new(0)).is_err());
        assert!(build_pairs(&ds, 0, 1, &mut Rng::new(0)).is_err());
        let empty = build_pairs(&ds, 0, 0, &mut Rng::new(0)).unwrap();
        assert!(empty.is_empty());
        assert!(verify(&identity_table(&ds), &ds, &empty).is_err());
    }

    fn identity_table(ds: &IdentityDataset) -> TeacherOracle {
        let mut t = EmbeddingTable::new(ds.input_dim());
        for s in ds.samples() {
            t.insert(s.identity, s.id, s.x.clone()).unwrap();
        }
        TeacherOracle::from_table(t).unwrap()
    }

    #[test]
    fn pair_counts_and_labels_recount() {
        let ds = generate_hierarchical(&spec()).unwrap();
        let (ap, an) = available_pairs(&ds);
        assert_eq!(ap, 6 * 10);
        assert_eq!(an, 30 * 29 / 2 - 60);
        let ps = build_pairs(&ds, 40, 200, &mut Rng::new(1)).unwrap();
        assert_eq!(ps.positives(), 40);
        assert_eq!(ps.len(), 240);
        ps.validate(&ds).unwrap();
        let mut seen = HashSet::new();
        for p in &ps.pairs {
            assert!(seen.insert((p.a.min(p.b), p.a.max(p.b))));
        }
        assert_eq!(ps, build_pairs(&ds, 40, 200, &mut Rng::new(1)).unwrap());
    }

    #[test]
    fn pair_file_round_trip() {
        let ds = generate_hierarchical(&spec()).unwrap();
        let ps = build_pairs(&ds, 5, 5, &mut Rng::new(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        ps.write_jsonl(&path).unwrap();
        assert_eq!(PairSet::read_jsonl(&path).unwrap(), ps);
    }

    #[test]
    fn sweep_examples() {
        let r = sweep_thresholds(&[0.1, 0.9], &[true, false]).unwrap();
        assert_eq!(r.best_accuracy, 1.0);
        assert!(r.best_threshold > 0.1 && r.best_threshold <= 0.9);

        let r = sweep_thresholds(&[0.3, 0.1, 0.7], &[true, true, true]).unwrap();
        assert_eq!(r.best_accuracy, 1.0);
        assert!(r.best_threshold > 0.7);

        let r = sweep_thresholds(&[0.3, 0.1], &[false, false]).unwrap();
        assert_eq!(r.best_accuracy, 1.0);
        assert_eq!(r.best_threshold, 0.1);

        assert!(sweep_thresholds(&[], &[]).is_err());
    }

    /// Every possible accept-set is `{d < t}` for `t` in the distances or +inf.
    fn brute_force_best(d: &[f64], same: &[bool]) -> f64 {
        let mut ts: Vec<f64> = d.to_vec();
        ts.push(f64::INFINITY);
        ts.iter()
            .map(|&t| {
                let correct = d.iter().zip(same).filter(|(&di, &s)| (di < t) == s).count();
                correct as f64 / d.len() as f64
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn sweep_matches_exhaustive_oracle() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let same: Vec<bool> = (0..40).map(|_| rng.index(2).unwrap() == 1).collect();
            // Coarse grid to force ties.
            let d: Vec<f64> = same
                .iter()
                .map(|&s| ((rng.uniform(0.0, 1.0) + if s { 0.0 } else { 0.4 }) * 10.0).round() / 10.0)
                .collect();
            let r = sweep_thresholds(&d, &same).unwrap();
            assert_eq!(r.best_accuracy, brute_force_best(&d, &same));
            let realized = d.iter().zip(&same).filter(|(&di, &s)| (di < r.best_threshold) == s).count();
            assert_eq!(realized as f64 / 40.0, r.best_accuracy);
        }
    }

    #[test]
    fn verify_embeds_and_sweeps() {
        let ds = generate_hierarchical(&spec()).unwrap();
        let oracle = identity_table(&ds);
        let ps = build_pairs(&ds, 30, 30, &mut Rng::new(3)).unwrap();
        let r = verify(&oracle, &ds, &ps).unwrap();
        let d: Vec<f64> = ps
            .pairs
            .iter()
            .map(|p| cosine_distance(&ds.by_id(p.a).unwrap().x, &ds.by_id(p.b).unwrap().x).unwrap())
            .collect();
        let same: Vec<bool> = ps.pairs.iter().map(|p| p.same).collect();
        assert!((r.best_accuracy - brute_force_best(&d, &same)).abs() < 1e-12);
        assert_eq!(r.n_positive, 30);
        assert_eq!(r.n_negative, 30);
    }

    #[test]
    fn verify_is_rotation_invariant() {
        let ds = generate_hierarchical(&spec()).unwrap();
        let ps = build_pairs(&ds, 30, 30, &mut Rng::new(3)).unwrap();
        let base = verify(&identity_table(&ds), &ds, &ps).unwrap();
        // Rotate every feature vector by a Givens rotation on coordinates 0 and 2.
        let (c, s) = (0.6f64, 0.8f64);
        let rotated: Vec<Sample> = ds
            .samples()
            .iter()
            .map(|smp| {
                let mut x = smp.x.clone();
                let (a, b) = (x[0], x[2]);
                x[0] = c * a - s * b;
                x[2] = s * a + c * b;
                Sample { x, ..smp.clone() }
            })
            .collect();
        let rds = IdentityDataset::new(ds.input_dim(), rotated).unwrap();
        let rot = verify(&identity_table(&rds), &rds, &ps).unwrap();
        assert_eq!(base.best_accuracy, rot.best_accuracy);
    }

    fn table_from(rows: &[(u32, u32, Vector)]) -> (IdentityDataset, TeacherOracle) {
        let samples = rows.iter().map(|(i, s, v)| Sample { id: *s, identity: *i, x: v.clone() }).collect();
        let ds = IdentityDataset::new(rows[0].2.len(), samples).unwrap();
        let o = identity_table(&ds);
        (ds, o)
    }

    #[test]
    fn centroid_matrix_examples() {
        let (ds, o) = table_from(&[(0, 0, vec![1.0, 1.0]), (1, 1, vec![1.0, 1.0]), (2, 2, vec![2.0, 2.0])]);
        let m = centroid_distance_matrix(&o, &ds).unwrap();
        assert!(m.values.iter().flatten().all(|&v| v == 0.0));
        assert!(structure_correlation(&m, &m).is_err());

        let (ds, o) = table_from(&[(0, 0, vec![1.0, 0.0]), (0, 1, vec![1.0, 0.0]), (1, 2, vec![0.0, 3.0])]);
        let m = centroid_distance_matrix(&o, &ds).unwrap();
        assert_eq!(m.values, vec![vec![0.0, 2.0], vec![2.0, 0.0]]);
    }

    #[test]
    fn centroid_matrix_matches_double_loop() {
        let spec = HierarchySpec {
            n_superclusters: 1,
            identities_per_supercluster: 5,
            ..spec()
        };
        let ds = generate_hierarchical(&spec).unwrap();
        let o = identity_table(&ds);
        let m = centroid_distance_matrix(&o, &ds).unwrap();
        let ids = ds.identities();
        for (i, &a) in ids.iter().enumerate() {
            for (j, &b) in ids.iter().enumerate() {
                let centroid = |id: u32| {
                    let ms: Vec<&Sample> = ds.samples().iter().filter(|s| s.identity == id).collect();
                    let mut c = vec![0.0; ds.input_dim()];
                    for s in &ms {
                        let n = s.x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        for k in 0..c.len() {
                            c[k] += s.x[k] / n;
                        }
                    }
                    c.iter().map(|v| v / ms.len() as f64).collect::<Vec<_>>()
                };
                let (ca, cb) = (centroid(a), centroid(b));
                let d: f64 = ca.iter().zip(&cb).map(|(x, y)| (x - y) * (x - y)).sum();
                assert!((m.values[i][j] - d).abs() < 1e-12);
                assert_eq!(m.values[i][j], m.values[j][i]);
            }
            assert_eq!(m.values[i][i], 0.0);
        }
    }

    fn matrix(ids: usize, upper: &[f64]) -> DistanceMatrix {
        let mut values = vec![vec![0.0; ids]; ids];
        let mut k = 0;
        for i in 0..ids {
            for j in (i + 1)..ids {
                values[i][j] = upper[k];
                values[j][i] = upper[k];
                k += 1;
            }
        }
        DistanceMatrix {
            identities: (0..ids as u32).collect(),
            values,
        }
    }

    #[test]
    fn correlation_extremes() {
        let a = matrix(4, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = matrix(4, &[6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        assert!((structure_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((structure_correlation(&a, &b).unwrap() + 1.0).abs() < 1e-15);
        let two = matrix(2, &[1.0]);
        assert!(matches!(structure_correlation(&two, &two), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    /// Rank by counting, then textbook Pearson.
    fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&a| {
                    let less = v.iter().filter(|&&b| b < a).count() as f64;
                    let equal = v.iter().filter(|&&b| b == a).count() as f64;
                    less + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(x), rank(y));
        let n = rx.len() as f64;
        let sx: f64 = rx.iter().sum();
        let sy: f64 = ry.iter().sum();
        let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
        let sxx: f64 = rx.iter().map(|a| a * a).sum();
        let syy: f64 = ry.iter().map(|a| a * a).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn correlation_matches_independent_oracle() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let up_a: Vec<f64> = (0..15).map(|_| (rng.uniform(0.0, 5.0) * 2.0).round()).collect();
            let up_b: Vec<f64> = (0..15).map(|_| (rng.uniform(0.0, 5.0) * 2.0).round()).collect();
            let (a, b) = (matrix(6, &up_a), matrix(6, &up_b));
            let got = structure_correlation(&a, &b).unwrap();
            assert!((got - oracle_spearman(&up_a, &up_b)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn accuracy_is_rank_statistic(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let same: Vec<bool> = (0..30).map(|_| rng.index(2).unwrap() == 1).collect();
            let d: Vec<f64> = (0..30).map(|_| rng.uniform(0.0, 2.0)).collect();
            let warped: Vec<f64> = d.iter().map(|x| (3.0 * x).exp() + x.powi(3)).collect();
            prop_assert_eq!(
                sweep_thresholds(&d, &same).unwrap().best_accuracy,
                sweep_thresholds(&warped, &same).unwrap().best_accuracy
            );
        }

        #[test]
        fn correlation_symmetric_and_affine_invariant(seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let mut rng = Rng::new(seed);
            let up_a: Vec<f64> = (0..10).map(|_| rng.uniform(0.0, 1.0)).collect();
            let up_b: Vec<f64> = (0..10).map(|_| rng.uniform(0.0, 1.0)).collect();
            let (a, b) = (matrix(5, &up_a), matrix(5, &up_b));
            let ab = structure_correlation(&a, &b).unwrap();
            prop_assert!((ab - structure_correlation(&b, &a).unwrap()).abs() < 1e-12);
            let moved: Vec<f64> = up_b.iter().map(|v| scale * v + shift).collect();
            prop_assert!((ab - structure_correlation(&a, &matrix(5, &moved)).unwrap()).abs() < 1e-12);
        }
    }
}
