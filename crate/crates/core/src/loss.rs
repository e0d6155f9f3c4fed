//! Triplet hinge loss with fixed or teacher-driven margins.
//!
//! Distances between student embeddings are squared Euclidean. The loss
//! treats its inputs as given, so normalization belongs to the model.
//! Teacher gaps enter only through the margin and carry no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sq_euclidean, Vector};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    Fixed,
    Dynamic,
}

/// Fixed mode reads only `m`; dynamic mode reads only `m_min` and `m_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub mode: MarginMode,
    pub m: f64,
    pub m_min: f64,
    pub m_max: f64,
}

impl MarginConfig {
    pub fn fixed(m: f64) -> Self {
        Self {
            mode: MarginMode::Fixed,
            m,
            m_min: m,
            m_max: m,
        }
    }

    pub fn dynamic(m_min: f64, m_max: f64) -> Self {
        Self {
            mode: MarginMode::Dynamic,
            m: m_max,
            m_min,
            m_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.m) {
            return Err(Error::contract(format!("margin m must be >= 0, got {}", self.m)));
        }
        if !ok(self.m_min) || !ok(self.m_max) || self.m_min > self.m_max {
            return Err(Error::contract(format!(
                "margin bounds must satisfy 0 <= m_min <= m_max, got [{}, {}]",
                self.m_min, self.m_max
            )));
        }
        Ok(())
    }

    /// Margin for one triplet given its teacher gap and the batch maximum gap.
    pub fn margin_for(&self, d_teacher: f64, d_max: f64) -> Result<f64> {
        match self.mode {
            MarginMode::Fixed => Ok(self.m),
            MarginMode::Dynamic => margin_fn(d_teacher, self.m_min, self.m_max, d_max),
        }
    }
}

/// Plain hinge `max(d_ap − d_an + m, 0)`.
pub fn triplet_loss(d_ap: f64, d_an: f64, m: f64) -> Result<f64> {
    for (name, v) in [("d_ap", d_ap), ("d_an", d_an), ("m", m)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::contract(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    Ok(hinge(d_ap, d_an, m))
}

#[inline]
fn hinge(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// Linear map from teacher gap to margin: `(m_max − m_min)/d_max · d + m_min`.
///
/// A batch whose gaps are all zero (`d_max == 0`) gets `m_min`. The result is
/// clamped to `[m_min, m_max]` so rounding at `d == d_max` cannot overshoot.
pub fn margin_fn(d: f64, m_min: f64, m_max: f64, d_max: f64) -> Result<f64> {
    if !(m_min.is_finite() && m_max.is_finite() && 0.0 <= m_min && m_min <= m_max) {
        return Err(Error::contract(format!(
            "margin bounds must satisfy 0 <= m_min <= m_max, got [{m_min}, {m_max}]"
        )));
    }
    if !(d.is_finite() && d_max.is_finite() && d >= 0.0 && d_max >= 0.0) {
        return Err(Error::contract(format!("gaps must be finite and >= 0, got d={d}, d_max={d_max}")));
    }
    if d > d_max {
        return Err(Error::contract(format!("gap {d} exceeds batch maximum {d_max}")));
    }
    if d_max == 0.0 {
        return Ok(m_min);
    }
    let slope = (m_max - m_min) / d_max;
    Ok((slope * d + m_min).clamp(m_min, m_max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLossResult {
    pub loss: f64,
    pub active: bool,
    pub grad_a: Vector,
    pub grad_p: Vector,
    pub grad_n: Vector,
    pub margin_used: f64,
}

/// Subgradients of `‖a−p‖² − ‖a−n‖² + margin` with respect to each
/// embedding; all zero when the hinge is off (including exactly at the kink).
pub fn triplet_grads(a: &[f64], p: &[f64], n: &[f64], active: bool) -> Result<(Vector, Vector, Vector)> {
    check_same_dim(a, p, n)?;
    let dim = a.len();
    if !active {
        return Ok((vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]));
    }
    let grad_a = n.iter().zip(p).map(|(ni, pi)| 2.0 * (ni - pi)).collect();
    let grad_p = a.iter().zip(p).map(|(ai, pi)| -2.0 * (ai - pi)).collect();
    let grad_n = a.iter().zip(n).map(|(ai, ni)| 2.0 * (ai - ni)).collect();
    Ok((grad_a, grad_p, grad_n))
}

fn check_same_dim(a: &[f64], p: &[f64], n: &[f64]) -> Result<()> {
    for other in [p, n] {
        if other.len() != a.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                found: other.len(),
            });
        }
    }
    Ok(())
}

/// Loss and gradients for one triplet with an already-chosen margin.
pub fn triplet_loss_with_margin(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<TripletLossResult> {
    check_same_dim(a, p, n)?;
    let d_ap = sq_euclidean(a, p)?;
    let d_an = sq_euclidean(a, n)?;
    let loss = triplet_loss(d_ap, d_an, margin)?;
    let active = loss > 0.0;
    let (grad_a, grad_p, grad_n) = triplet_grads(a, p, n, active)?;
    Ok(TripletLossResult {
        loss,
        active,
        grad_a,
        grad_p,
        grad_n,
        margin_used: margin,
    })
}

/// Triplet loss whose margin comes from the teacher gap of this triplet.
pub fn triplet_loss_dynamic(
    a: &[f64],
    p: &[f64],
    n: &[f64],
    d_teacher: f64,
    d_max: f64,
    cfg: &MarginConfig,
) -> Result<TripletLossResult> {
    if cfg.mode != MarginMode::Dynamic {
        return Err(Error::contract("triplet_loss_dynamic requires a dynamic margin config"));
    }
    cfg.validate()?;
    let margin = margin_fn(d_teacher, cfg.m_min, cfg.m_max, d_max)?;
    triplet_loss_with_margin(a, p, n, margin)
}

/// Indices of anchor, positive and negative within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Self {
        Self {
            anchor,
            positive,
            negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// Mean hinge loss over the triplets.
    pub loss: f64,
    /// `∂loss/∂embedding` for every batch entry.
    pub grads: Vec<Vector>,
    pub margins: Vec<f64>,
    pub active: usize,
    /// Largest teacher gap in the batch (0 in fixed mode).
    pub d_max: f64,
}

impl BatchLoss {
    pub fn n_triplets(&self) -> usize {
        self.margins.len()
    }

    pub fn mean_margin(&self) -> f64 {
        self.margins.iter().sum::<f64>() / self.margins.len() as f64
    }

    pub fn active_fraction(&self) -> f64 {
        self.active as f64 / self.margins.len() as f64
    }
}

/// Mean triplet loss over a batch and the per-embedding gradients.
///
/// In dynamic mode `teacher_gaps[i]` is the teacher gap of `triplets[i]` and
/// `d_max` is taken as their maximum. In fixed mode the gaps are ignored and
/// may be empty. Per-triplet terms are evaluated with [`par::map`]; the
/// accumulation runs in triplet order.
pub fn batch_loss(
    embeddings: &[Vector],
    triplets: &[Triplet],
    teacher_gaps: &[f64],
    cfg: &MarginConfig,
) -> Result<BatchLoss> {
    if triplets.is_empty() {
        return Err(Error::InsufficientData("batch has no triplets".into()));
    }
    cfg.validate()?;
    let d_max = match cfg.mode {
        MarginMode::Fixed => 0.0,
        MarginMode::Dynamic => {
            if teacher_gaps.len() != triplets.len() {
                return Err(Error::contract(format!(
                    "{} teacher gaps for {} triplets",
                    teacher_gaps.len(),
                    triplets.len()
                )));
            }
            teacher_gaps.iter().copied().fold(0.0, f64::max)
        }
    };
    let dim = embeddings.first().map_or(0, Vec::len);
    for t in triplets {
        for i in [t.anchor, t.positive, t.negative] {
            if i >= embeddings.len() {
                return Err(Error::contract(format!("triplet index {i} outside batch of {}", embeddings.len())));
            }
        }
    }

    let indexed: Vec<usize> = (0..triplets.len()).collect();
    let per_triplet = par::map(&indexed, |&i| -> Result<TripletLossResult> {
        let t = triplets[i];
        let gap = teacher_gaps.get(i).copied().unwrap_or(0.0);
        let margin = cfg.margin_for(gap, d_max)?;
        triplet_loss_with_margin(&embeddings[t.anchor], &embeddings[t.positive], &embeddings[t.negative], margin)
    });

    let inv_n = 1.0 / triplets.len() as f64;
    let mut grads = vec![vec![0.0; dim]; embeddings.len()];
    let mut total = 0.0;
    let mut margins = Vec::with_capacity(triplets.len());
    let mut active = 0;
    for (t, r) in triplets.iter().zip(per_triplet) {
        let r = r?;
        total += r.loss;
        margins.push(r.margin_used);
        if r.active {
            active += 1;
            for (idx, g) in [(t.anchor, &r.grad_a), (t.positive, &r.grad_p), (t.negative, &r.grad_n)] {
                for (acc, gi) in grads[idx].iter_mut().zip(g) {
                    *acc += gi * inv_n;
                }
            }
        }
    }
    Ok(BatchLoss {
        loss: total * inv_n,
        grads,
        margins,
        active,
        d_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{l2_normalize, Rng};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn fixed_loss_examples() {
        assert!(close(triplet_loss(0.6, 0.8, 0.3).unwrap(), 0.1, 1e-12));
        assert_eq!(triplet_loss(0.2, 0.9, 0.3).unwrap(), 0.0);
        assert_eq!(triplet_loss(0.5, 0.5, 0.0).unwrap(), 0.0);
        assert!(triplet_loss(-0.1, 0.5, 0.3).is_err());
        assert!(triplet_loss(0.1, 0.5, -0.3).is_err());
    }

    #[test]
    fn margin_fn_examples() {
        assert_eq!(margin_fn(0.0, 0.2, 0.5, 1.0).unwrap(), 0.2);
        assert_eq!(margin_fn(1.0, 0.2, 0.5, 1.0).unwrap(), 0.5);
        assert!(close(margin_fn(0.5, 0.2, 0.5, 1.0).unwrap(), 0.35, 1e-12));
        assert_eq!(margin_fn(0.0, 0.2, 0.5, 0.0).unwrap(), 0.2);
        assert!(margin_fn(1.5, 0.2, 0.5, 1.0).is_err());
        assert!(margin_fn(0.1, 0.5, 0.2, 1.0).is_err());
    }

    #[test]
    fn dynamic_loss_examples() {
        let cfg = MarginConfig::dynamic(0.2, 0.5);
        let x = [0.3, -0.1];
        let r = triplet_loss_dynamic(&x, &x, &x, 0.4, 1.0, &cfg).unwrap();
        let m = margin_fn(0.4, 0.2, 0.5, 1.0).unwrap();
        assert_eq!(r.loss, m);
        assert_eq!(r.margin_used, m);
        assert!(r.active);

        let r = triplet_loss_dynamic(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0], 0.0, 1.0, &cfg).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(!r.active);
        assert_eq!(r.grad_a, vec![0.0, 0.0]);
        assert_eq!(r.margin_used, 0.2);

        assert!(triplet_loss_dynamic(&x, &x, &x, 2.0, 1.0, &cfg).is_err());
        assert!(triplet_loss_dynamic(&x, &x, &x, 0.0, 1.0, &MarginConfig::fixed(0.3)).is_err());
        assert!(matches!(
            triplet_loss_dynamic(&x, &[1.0], &x, 0.0, 1.0, &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn grads_closed_form() {
        let (ga, gp, gn) = triplet_grads(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], true).unwrap();
        assert_eq!(ga, vec![-2.0, 2.0]);
        assert_eq!(gp, vec![2.0, 0.0]);
        assert_eq!(gn, vec![0.0, -2.0]);
        let (ga, gp, gn) = triplet_grads(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], false).unwrap();
        assert!(ga.iter().chain(&gp).chain(&gn).all(|&g| g == 0.0));
    }

    #[test]
    fn kink_is_inactive() {
        // d_ap = 1, d_an = 1.25, margin 0.25 puts the hinge exactly at zero.
        let r = triplet_loss_with_margin(&[0.0], &[1.0], &[-1.5], 0.25).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(!r.active);
    }

    fn unit(dim: usize, rng: &mut Rng) -> Vector {
        l2_normalize(&(0..dim).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn batch_single_and_duplicated() {
        let mut rng = Rng::new(3);
        let embs: Vec<Vector> = (0..3).map(|_| unit(4, &mut rng)).collect();
        let cfg = MarginConfig::dynamic(0.2, 0.5);
        let t = Triplet::new(0, 1, 2);
        let one = batch_loss(&embs, &[t], &[0.3], &cfg).unwrap();
        let single = triplet_loss_dynamic(&embs[0], &embs[1], &embs[2], 0.3, 0.3, &cfg).unwrap();
        assert_eq!(one.loss, single.loss);
        assert_eq!(one.grads[0], single.grad_a);
        assert_eq!(one.grads[1], single.grad_p);
        assert_eq!(one.grads[2], single.grad_n);

        let two = batch_loss(&embs, &[t, t], &[0.3, 0.3], &cfg).unwrap();
        assert_eq!(two.loss, one.loss);
        assert_eq!(two.grads, one.grads);

        assert!(batch_loss(&embs, &[], &[], &cfg).is_err());
        assert!(batch_loss(&embs, &[t], &[], &cfg).is_err());
    }

    #[test]
    fn batch_matches_naive_loop() {
        let mut rng = Rng::new(11);
        let embs: Vec<Vector> = (0..20).map(|_| unit(6, &mut rng)).collect();
        let mut triplets = Vec::new();
        let mut gaps = Vec::new();
        for _ in 0..50 {
            triplets.push(Triplet::new(rng.index(20).unwrap(), rng.index(20).unwrap(), rng.index(20).unwrap()));
            gaps.push(rng.uniform(0.0, 1.3));
        }
        let cfg = MarginConfig::dynamic(0.2, 0.5);
        let got = batch_loss(&embs, &triplets, &gaps, &cfg).unwrap();

        // Naive recomputation straight from the formulas.
        let d_max = gaps.iter().cloned().fold(0.0, f64::max);
        let n = triplets.len() as f64;
        let mut loss = 0.0;
        let mut grads = vec![vec![0.0; 6]; 20];
        for (t, &g) in triplets.iter().zip(&gaps) {
            let (a, p, q) = (&embs[t.anchor], &embs[t.positive], &embs[t.negative]);
            let dap: f64 = (0..6).map(|k| (a[k] - p[k]).powi(2)).sum();
            let dan: f64 = (0..6).map(|k| (a[k] - q[k]).powi(2)).sum();
            let margin = 0.2 + 0.3 * g / d_max;
            let l = dap - dan + margin;
            if l > 0.0 {
                loss += l / n;
                for k in 0..6 {
                    grads[t.anchor][k] += 2.0 * (q[k] - p[k]) / n;
                    grads[t.positive][k] += -2.0 * (a[k] - p[k]) / n;
                    grads[t.negative][k] += 2.0 * (a[k] - q[k]) / n;
                }
            }
        }
        assert!(close(got.loss, loss, 1e-12));
        for (g1, g2) in got.grads.iter().zip(&grads) {
            for (x, y) in g1.iter().zip(g2) {
                assert!(close(*x, *y, 1e-12));
            }
        }
    }

    fn fd_grad(f: &dyn Fn(&[f64], &[f64], &[f64]) -> f64, a: &[f64], p: &[f64], n: &[f64], h: f64) -> [Vector; 3] {
        let mut out = [a.to_vec(), p.to_vec(), n.to_vec()];
        for which in 0..3 {
            for k in 0..a.len() {
                let mut args = [a.to_vec(), p.to_vec(), n.to_vec()];
                args[which][k] += h;
                let up = f(&args[0], &args[1], &args[2]);
                args[which][k] -= 2.0 * h;
                let down = f(&args[0], &args[1], &args[2]);
                out[which][k] = (up - down) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn dynamic_matches_recomputation_and_finite_differences() {
        let cfg = MarginConfig::dynamic(0.2, 0.5);
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let (a, p, n) = (unit(8, &mut rng), unit(8, &mut rng), unit(8, &mut rng));
            let d_max = 1.0;
            let d_t = rng.uniform(0.0, d_max);
            let r = triplet_loss_dynamic(&a, &p, &n, d_t, d_max, &cfg).unwrap();
            let f = |a: &[f64], p: &[f64], n: &[f64]| -> f64 {
                let dap: f64 = a.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum();
                let dan: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum();
                (dap - dan + 0.2 + 0.3 * d_t / d_max).max(0.0)
            };
            assert!(close(r.loss, f(&a, &p, &n), 1e-12));
            let fd = fd_grad(&f, &a, &p, &n, 1e-5);
            for (an, num) in [&r.grad_a, &r.grad_p, &r.grad_n].into_iter().zip(fd.iter()) {
                for (x, y) in an.iter().zip(num) {
                    assert!(close(*x, *y, 1e-6), "seed {seed}: {x} vs {y}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn hinge_characterization(d_ap in 0.0f64..4.0, d_an in 0.0f64..4.0, m in 0.0f64..1.0) {
            let l = triplet_loss(d_ap, d_an, m).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, d_an - d_ap >= m);
        }

        #[test]
        fn fixed_margin_reduction(seed in any::<u64>(), m in 0.0f64..1.0, gap in 0.0f64..1.0) {
            let mut rng = Rng::new(seed);
            let (a, p, n) = (unit(5, &mut rng), unit(5, &mut rng), unit(5, &mut rng));
            let dynamic = triplet_loss_dynamic(&a, &p, &n, gap, 1.0, &MarginConfig::dynamic(m, m)).unwrap();
            let fixed = triplet_loss(sq_euclidean(&a, &p).unwrap(), sq_euclidean(&a, &n).unwrap(), m).unwrap();
            prop_assert_eq!(dynamic.loss, fixed);
        }

        #[test]
        fn translation_invariant(seed in any::<u64>(), shift in -3.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let (a, p, n) = (unit(5, &mut rng), unit(5, &mut rng), unit(5, &mut rng));
            let s = |v: &Vector| -> Vector { v.iter().map(|x| x + shift).collect() };
            let base = triplet_loss_with_margin(&a, &p, &n, 0.4).unwrap().loss;
            let moved = triplet_loss_with_margin(&s(&a), &s(&p), &s(&n), 0.4).unwrap().loss;
            prop_assert!((base - moved).abs() < 1e-9);
        }
    }
}
