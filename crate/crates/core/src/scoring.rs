//! Zero-shot classification and the MCM / NegLabel OOD scores.
//!
//! All functions take unit-norm inputs, so cosines are plain dot products.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{check_temperature, dot, softmax_temp, FeatureMatrix};

/// Environment variable capping the number of scoring threads.
pub const THREADS_ENV: &str = "OODPROMPT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    pub tau_score: f64,
    #[serde(default)]
    pub gamma: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            tau_score: 0.01,
            gamma: 0.5,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.tau_score)?;
        if !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Id,
    Ood,
}

/// Cosines between `v` and every row of `rows`.
pub fn cosines(v: &[f64], rows: &FeatureMatrix) -> Result<Vec<f64>> {
    if v.len() != rows.dim() {
        return Err(Error::dims(rows.dim(), v.len()));
    }
    Ok(rows.rows().map(|r| dot(v, r)).collect())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn zero_shot_classify(
    v: &[f64],
    id_rows: &FeatureMatrix,
    tau: f64,
) -> Result<(Vec<f64>, usize)> {
    if id_rows.is_empty() {
        return Err(Error::EmptyInput("ID class rows"));
    }
    let cos = cosines(v, id_rows)?;
    let p = softmax_temp(&cos, tau)?;
    let k = argmax(&cos);
    Ok((p, k))
}

pub fn mcm_score(v: &[f64], id_rows: &FeatureMatrix, tau: f64) -> Result<f64> {
    let (p, _) = zero_shot_classify(v, id_rows, tau)?;
    Ok(p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// NegLabel score from precomputed cosines.
pub fn neglabel_from_cosines(id_cos: &[f64], neg_cos: &[f64], tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    if id_cos.is_empty() {
        return Err(Error::EmptyInput("ID class rows"));
    }
    if neg_cos.is_empty() {
        return Err(Error::EmptyInput("negative class rows"));
    }
    let max = id_cos
        .iter()
        .chain(neg_cos)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("cosines"));
    }
    let mass = |xs: &[f64]| xs.iter().map(|c| ((c - max) / tau).exp()).sum::<f64>();
    let id = mass(id_cos);
    let neg = mass(neg_cos);
    Ok(id / (id + neg))
}

pub fn neglabel_score(
    v: &[f64],
    id_rows: &FeatureMatrix,
    neg_rows: &FeatureMatrix,
    tau: f64,
) -> Result<f64> {
    neglabel_from_cosines(&cosines(v, id_rows)?, &cosines(v, neg_rows)?, tau)
}

pub fn detect(score: f64, gamma: f64) -> Decision {
    if score >= gamma {
        Decision::Id
    } else {
        Decision::Ood
    }
}

/// Per-row output of [`score_rows`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowScore {
    pub neglabel: f64,
    pub prediction: usize,
}

/// Worker count from `OODPROMPT_THREADS`, falling back to the available
/// parallelism.
pub fn thread_budget() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
    {
        Some(n) if n >= 1 => n.min(available.max(1)),
        _ => available,
    }
}

/// Scores every row of `features` against `class_rows`, whose first
/// `num_id` rows are the ID classes. Output order follows the input.
pub fn score_rows(
    features: &FeatureMatrix,
    class_rows: &FeatureMatrix,
    num_id: usize,
    tau: f64,
    threads: usize,
) -> Result<Vec<RowScore>> {
    check_temperature(tau)?;
    if features.dim() != class_rows.dim() {
        return Err(Error::dims(class_rows.dim(), features.dim()));
    }
    if num_id == 0 || num_id > class_rows.len() {
        return Err(Error::IndexOutOfRange {
            index: num_id,
            len: class_rows.len(),
        });
    }
    let score_one = |v: &[f64]| -> Result<RowScore> {
        let cos = cosines(v, class_rows)?;
        let (id, neg) = cos.split_at(num_id);
        Ok(RowScore {
            neglabel: neglabel_from_cosines(id, neg, tau)?,
            prediction: argmax(id),
        })
    };
    let n = features.len();
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return features.rows().map(score_one).collect();
    }
    let chunk = n.div_ceil(threads);
    let dim = features.dim();
    let data = features.as_slice();
    std::thread::scope(|scope| {
        let handles: Vec<_> = data
            .chunks(chunk * dim)
            .map(|block| {
                let score_one = &score_one;
                scope.spawn(move || {
                    block
                        .chunks_exact(dim)
                        .map(score_one)
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().expect("scoring worker panicked")?);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{l2_normalize, RngStream, StreamTag};
    use proptest::prelude::*;

    fn basis(dim: usize, i: usize) -> Vec<f64> {
        let mut e = vec![0.0; dim];
        e[i] = 1.0;
        e
    }

    fn rows(dim: usize, rs: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(dim, rs).unwrap()
    }

    #[test]
    fn classify_examples() {
        let id = rows(4, &[basis(4, 0), basis(4, 1), basis(4, 2)]);
        for tau in [0.01, 1.0, 10.0] {
            assert_eq!(zero_shot_classify(&basis(4, 2), &id, tau).unwrap().1, 2);
        }
        // all cosines zero
        let (p, k) = zero_shot_classify(&basis(4, 3), &id, 0.5).unwrap();
        assert_eq!(k, 0);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));

        // e0 has cosine 0.8 with row 0 and 0.2 with row 1
        let two = rows(3, &[vec![0.8, 0.6, 0.0], vec![0.2, 0.0, 0.96f64.sqrt()]]);
        let (p, k) = zero_shot_classify(&basis(3, 0), &two, 1.0).unwrap();
        assert_eq!(k, 0);
        assert!((p[0] - 0.64566).abs() < 1e-5 && (p[1] - 0.35434).abs() < 1e-5);
    }

    #[test]
    fn mcm_examples() {
        let id = rows(5, &(0..4).map(|i| basis(5, i)).collect::<Vec<_>>());
        assert!((mcm_score(&basis(5, 4), &id, 0.01).unwrap() - 0.25).abs() < 1e-12);
        let id = rows(2, &[basis(2, 0), basis(2, 1)]);
        assert!(
            (mcm_score(&basis(2, 0), &id, 1.0).unwrap() - 0.731_058_578_630_004_9).abs() < 1e-12
        );
        let p = softmax_temp(&[0.9, 0.1, 0.1], 0.01).unwrap();
        assert!(p[0] >= 1.0 - 1e-10);
    }

    #[test]
    fn neglabel_examples() {
        assert!((neglabel_from_cosines(&[0.3; 2], &[0.3; 8], 0.01).unwrap() - 0.2).abs() < 1e-12);
        assert!(
            (neglabel_from_cosines(&[1.0], &[0.0], 1.0).unwrap() - 0.731_058_578_630_004_9).abs()
                < 1e-12
        );
        let s = neglabel_from_cosines(&[0.9, 0.2], &[0.5, 0.1, -0.3], 0.01).unwrap();
        assert!(s >= 1.0 - 1e-10);
        // logits of 100 stay finite through max-subtraction
        assert!(neglabel_from_cosines(&[1.0], &[1.0], 0.001).unwrap() == 0.5);
        assert!(neglabel_from_cosines(&[1.0], &[], 1.0).is_err());
        assert!(neglabel_from_cosines(&[1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn detect_boundary() {
        assert_eq!(detect(0.5, 0.5), Decision::Id);
        assert_eq!(detect(0.5 - 1e-12, 0.5), Decision::Ood);
        assert_eq!(detect(0.0, f64::MIN), Decision::Id);
    }

    #[test]
    fn dimension_mismatch() {
        let id = rows(3, &[basis(3, 0)]);
        assert!(matches!(
            mcm_score(&[1.0, 0.0], &id, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn threaded_scoring_matches_serial() {
        let mut rng = RngStream::new(3, StreamTag::Mixing);
        let class_rows = rows(6, &(0..7).map(|_| rng.unit_vector(6)).collect::<Vec<_>>());
        let feats = rows(6, &(0..103).map(|_| rng.unit_vector(6)).collect::<Vec<_>>());
        let serial = score_rows(&feats, &class_rows, 3, 0.05, 1).unwrap();
        for t in [2, 4, 16, 500] {
            assert_eq!(score_rows(&feats, &class_rows, 3, 0.05, t).unwrap(), serial);
        }
        assert_eq!(serial.len(), 103);
        let id = class_rows.select(&[0, 1, 2]);
        let neg = class_rows.select(&[3, 4, 5, 6]);
        let direct = neglabel_score(feats.row(10), &id, &neg, 0.05).unwrap();
        assert_eq!(serial[10].neglabel, direct);
    }

    /// Random orthogonal map via Gram-Schmidt on a Gaussian matrix.
    fn random_rotation(dim: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while q.len() < dim {
            let mut v = rng.gaussian_vec(dim, 1.0);
            for b in &q {
                let d = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            if let Ok(u) = l2_normalize(&v) {
                q.push(u);
            }
        }
        q
    }

    fn apply(q: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
        q.iter().map(|r| dot(r, v)).collect()
    }

    proptest! {
        #[test]
        fn scores_are_rotation_invariant(seed in any::<u64>(), dim in 2usize..=8, c in 1usize..5, m in 1usize..6) {
            let mut rng = RngStream::new(seed, StreamTag::Mixing);
            let id: Vec<Vec<f64>> = (0..c).map(|_| rng.unit_vector(dim)).collect();
            let neg: Vec<Vec<f64>> = (0..m).map(|_| rng.unit_vector(dim)).collect();
            let v = rng.unit_vector(dim);
            let q = random_rotation(dim, &mut rng);
            let rot = |xs: &[Vec<f64>]| rows(dim, &xs.iter().map(|x| apply(&q, x)).collect::<Vec<_>>());
            let tau = 0.1;
            let a = neglabel_score(&v, &rows(dim, &id), &rows(dim, &neg), tau).unwrap();
            let b = neglabel_score(&apply(&q, &v), &rot(&id), &rot(&neg), tau).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            let a = mcm_score(&v, &rows(dim, &id), tau).unwrap();
            let b = mcm_score(&apply(&q, &v), &rot(&id), tau).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn neglabel_is_monotone(
            id in prop::collection::vec(-1.0f64..1.0, 1..6),
            neg in prop::collection::vec(-1.0f64..1.0, 1..8),
            pick in any::<prop::sample::Index>(),
            bump in 0.0f64..0.5,
            tau in 0.01f64..2.0,
        ) {
            let base = neglabel_from_cosines(&id, &neg, tau).unwrap();
            let mut up = id.clone();
            let i = pick.index(up.len());
            up[i] += bump;
            prop_assert!(neglabel_from_cosines(&up, &neg, tau).unwrap() >= base);
            let mut worse = neg.clone();
            let j = pick.index(worse.len());
            worse[j] += bump;
            prop_assert!(neglabel_from_cosines(&id, &worse, tau).unwrap() <= base);
            prop_assert!((0.0..=1.0).contains(&base));
        }

        #[test]
        fn mcm_monotone_in_max_and_bounded(
            cos in prop::collection::vec(-1.0f64..1.0, 1..8),
            bump in 0.0f64..0.5,
            tau in 0.01f64..2.0,
        ) {
            let mcm = |c: &[f64]| softmax_temp(c, tau).unwrap().into_iter().fold(f64::NEG_INFINITY, f64::max);
            let base = mcm(&cos);
            let k = argmax(&cos);
            let mut up = cos.clone();
            up[k] += bump;
            prop_assert!(mcm(&up) >= base - 1e-15);
            let c = cos.len() as f64;
            prop_assert!(base >= 1.0 / c - 1e-12 && base <= 1.0 + 1e-12);
        }

        #[test]
        fn argmax_ignores_temperature(cos in prop::collection::vec(-1.0f64..1.0, 1..8), t1 in 0.01f64..5.0, t2 in 0.01f64..5.0) {
            let dim = cos.len() + 1;
            // build rows whose cosine with e_last equals cos[i]
            let rs: Vec<Vec<f64>> = cos.iter().enumerate().map(|(i, &c)| {
                let mut r = vec![0.0; dim];
                r[dim - 1] = c;
                r[i] = (1.0 - c * c).sqrt();
                r
            }).collect();
            let id = rows(dim, &rs);
            let v = basis(dim, dim - 1);
            prop_assert_eq!(zero_shot_classify(&v, &id, t1).unwrap().1, zero_shot_classify(&v, &id, t2).unwrap().1);
        }
    }
}
