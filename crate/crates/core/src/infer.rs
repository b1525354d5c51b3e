//! Composition scoring rules.
//!
//! Every rule ranks closed-world pairs by the composition cosine plus some
//! blend of the two component cosines:
//!
//! | rule    | score of `(s, o)`                                 |
//! |---------|---------------------------------------------------|
//! | `must`  | `ω·d_s[s] + (1−ω)·d_o[o] + d_pair[(s,o)]`          |
//! | `base`  | `d_pair[(s,o)]`                                   |
//! | `max`   | `max(d_s[s], d_o[o]) + d_pair[(s,o)]`             |
//! | `equal` | `½(d_s[s] + d_o[o]) + d_pair[(s,o)]`              |
//! | `fixed` | `α·d_s[s] + β·d_o[o] + d_pair[(s,o)]`             |
//!
//! `ω` is a per-sample confidence ratio, see [`omega`].

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::space::{CompositionSpace, PairId};

/// Below this total confidence `ω` falls back to ½.
pub const OMEGA_EPS: f64 = 1e-9;

/// Component and composition cosines for a batch of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub d_state: Tensor,
    pub d_object: Tensor,
    pub d_pair: Tensor,
}

impl ScoreSet {
    pub fn new(d_state: Tensor, d_object: Tensor, d_pair: Tensor) -> Result<Self> {
        for (name, t) in [("d_state", &d_state), ("d_object", &d_object), ("d_pair", &d_pair)] {
            t.expect_matrix(name)?;
            if !t.is_finite() {
                return Err(Error::Numerical(format!("{name} has non-finite entries")));
            }
        }
        if d_state.rows() != d_object.rows() || d_state.rows() != d_pair.rows() {
            return Err(Error::Shape(format!(
                "score sets disagree on sample count: {} / {} / {}",
                d_state.rows(),
                d_object.rows(),
                d_pair.rows()
            )));
        }
        Ok(ScoreSet {
            d_state,
            d_object,
            d_pair,
        })
    }

    pub fn len(&self) -> usize {
        self.d_state.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_space(&self, space: &CompositionSpace) -> Result<()> {
        if self.d_state.cols() != space.n_states()
            || self.d_object.cols() != space.n_objects()
            || self.d_pair.cols() != space.n_pairs()
        {
            return Err(Error::Shape(format!(
                "score columns ({}, {}, {}) do not match space ({}, {}, {})",
                self.d_state.cols(),
                self.d_object.cols(),
                self.d_pair.cols(),
                space.n_states(),
                space.n_objects(),
                space.n_pairs()
            )));
        }
        Ok(())
    }
}

/// Confidence ratio of sample `i`: `m_s / (m_s + m_o)` where `m_s` is the
/// best state cosine and `m_o` the best object cosine, both floored at 0.
pub fn omega(scores: &ScoreSet, i: usize) -> f64 {
    let best = |row: &[f64]| row.iter().copied().fold(0.0f64, f64::max);
    let m_s = best(scores.d_state.row(i));
    let m_o = best(scores.d_object.row(i));
    if m_s + m_o < OMEGA_EPS {
        0.5
    } else {
        m_s / (m_s + m_o)
    }
}

pub fn omegas(scores: &ScoreSet) -> Vec<f64> {
    (0..scores.len()).map(|i| omega(scores, i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum InferenceRule {
    Must,
    Base,
    Max,
    Equal,
    Fixed { alpha: f64, beta: f64 },
}

impl InferenceRule {
    pub const VARIANTS: [&'static str; 5] = ["must", "base", "max", "equal", "fixed"];

    pub fn fixed(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::Config(format!(
                "fixed inference needs finite alpha, beta >= 0 (got {alpha}, {beta})"
            )));
        }
        Ok(InferenceRule::Fixed { alpha, beta })
    }

    /// Parses a variant name; `fixed` needs both weights.
    pub fn parse(name: &str, alpha: Option<f64>, beta: Option<f64>) -> Result<Self> {
        match name {
            "must" => Ok(InferenceRule::Must),
            "base" => Ok(InferenceRule::Base),
            "max" => Ok(InferenceRule::Max),
            "equal" => Ok(InferenceRule::Equal),
            "fixed" => match (alpha, beta) {
                (Some(a), Some(b)) => InferenceRule::fixed(a, b),
                _ => Err(Error::Config(
                    "fixed inference requires both --alpha and --beta".into(),
                )),
            },
            other => Err(Error::Config(format!(
                "unknown inference variant {other:?} (expected one of {:?})",
                Self::VARIANTS
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InferenceRule::Must => "must",
            InferenceRule::Base => "base",
            InferenceRule::Max => "max",
            InferenceRule::Equal => "equal",
            InferenceRule::Fixed { .. } => "fixed",
        }
    }
}

impl fmt::Display for InferenceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferenceRule::Fixed { alpha, beta } => write!(f, "fixed(alpha={alpha}, beta={beta})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for InferenceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InferenceRule::parse(s, None, None)
    }
}

/// Scores every closed-world pair for every sample under `rule`.
pub fn score_pairs(rule: InferenceRule, scores: &ScoreSet, space: &CompositionSpace) -> Result<Tensor> {
    scores.check_space(space)?;
    match rule {
        InferenceRule::Must => score_pairs_with_omega(scores, space, &omegas(scores)),
        InferenceRule::Base => Ok(scores.d_pair.clone()),
        InferenceRule::Max => blend(scores, space, |_, s, o| s.max(o)),
        InferenceRule::Equal => blend(scores, space, |_, s, o| 0.5 * (s + o)),
        InferenceRule::Fixed { alpha, beta } => {
            InferenceRule::fixed(alpha, beta)?;
            blend(scores, space, |_, s, o| alpha * s + beta * o)
        }
    }
}

/// The `must` rule with caller-supplied per-sample `ω`.
pub fn score_pairs_with_omega(
    scores: &ScoreSet,
    space: &CompositionSpace,
    omega: &[f64],
) -> Result<Tensor> {
    scores.check_space(space)?;
    if omega.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} omega values for {} samples",
            omega.len(),
            scores.len()
        )));
    }
    blend(scores, space, |i, s, o| omega[i] * s + (1.0 - omega[i]) * o)
}

fn blend(
    scores: &ScoreSet,
    space: &CompositionSpace,
    component: impl Fn(usize, f64, f64) -> f64,
) -> Result<Tensor> {
    let mut out = scores.d_pair.clone();
    for i in 0..scores.len() {
        let ds = scores.d_state.row(i);
        let d_o = scores.d_object.row(i);
        for (v, p) in out.row_mut(i).iter_mut().zip(space.closed_pairs()) {
            *v += component(i, ds[p.state], d_o[p.object]);
        }
    }
    Ok(out)
}

/// Orders `(pair id, score)` entries under a calibration bias on unseen
/// pairs: higher biased score first, lower pair id on ties. Infinite biases
/// put one group strictly ahead of the other.
pub(crate) fn biased_cmp(
    space: &CompositionSpace,
    bias: f64,
    (a, sa): (usize, f64),
    (b, sb): (usize, f64),
) -> Ordering {
    let key = |id: usize, s: f64| -> (i8, f64) {
        let unseen = !space.is_seen_id(PairId(id));
        if bias == f64::INFINITY {
            (unseen as i8, s)
        } else if bias == f64::NEG_INFINITY {
            (!unseen as i8, s)
        } else if unseen {
            (0, s + bias)
        } else {
            (0, s)
        }
    };
    // +0.0 folds -0.0 into 0.0
    let (ta, va) = key(a, sa + 0.0);
    let (tb, vb) = key(b, sb + 0.0);
    tb.cmp(&ta)
        .then_with(|| vb.total_cmp(&va))
        .then_with(|| a.cmp(&b))
}

/// Top-`k` pair ids per sample after adding `bias` to every unseen pair.
pub fn predict_topk(
    pair_scores: &Tensor,
    space: &CompositionSpace,
    k: usize,
    bias: f64,
) -> Result<Vec<Vec<PairId>>> {
    pair_scores.expect_matrix("pair scores")?;
    if pair_scores.cols() != space.n_pairs() {
        return Err(Error::Shape(format!(
            "{} score columns for {} pairs",
            pair_scores.cols(),
            space.n_pairs()
        )));
    }
    if k == 0 || k > space.n_pairs() {
        return Err(Error::Config(format!(
            "k must be in 1..={} (got {k})",
            space.n_pairs()
        )));
    }
    if bias.is_nan() {
        return Err(Error::Config("bias is NaN".into()));
    }
    let mut out = Vec::with_capacity(pair_scores.rows());
    for i in 0..pair_scores.rows() {
        let mut entries: Vec<(usize, f64)> = pair_scores.row(i).iter().copied().enumerate().collect();
        entries.sort_by(|&a, &b| biased_cmp(space, bias, a, b));
        out.push(entries.into_iter().take(k).map(|(id, _)| PairId(id)).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::Pair;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space() -> CompositionSpace {
        CompositionSpace::from_indices(
            2,
            3,
            &[Pair::new(0, 0), Pair::new(1, 1), Pair::new(0, 2)],
            &[Pair::new(1, 0), Pair::new(0, 1)],
        )
        .unwrap()
    }

    #[test]
    fn signed_zeros_tie_by_id() {
        let sp = space();
        let ps = Tensor::from_vec(&[1, 5], vec![-0.0, 0.0, -1.0, -1.0, -1.0]).unwrap();
        assert_eq!(predict_topk(&ps, &sp, 1, 0.0).unwrap(), vec![vec![PairId(0)]]);
    }

    fn random_scores(n: usize, space: &CompositionSpace, rng: &mut ChaCha8Rng) -> ScoreSet {
        let mut m = |c: usize| {
            Tensor::from_vec(&[n, c], (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        ScoreSet::new(m(space.n_states()), m(space.n_objects()), m(space.n_pairs())).unwrap()
    }

    #[test]
    fn omega_examples() {
        let s = |ds: Vec<f64>, d_o: Vec<f64>| {
            let (ns, no) = (ds.len(), d_o.len());
            ScoreSet::new(
                Tensor::from_vec(&[1, ns], ds).unwrap(),
                Tensor::from_vec(&[1, no], d_o).unwrap(),
                Tensor::zeros(&[1, 1]),
            )
            .unwrap()
        };
        assert_eq!(omega(&s(vec![0.3, 0.1], vec![0.3, -0.2]), 0), 0.5);
        assert_eq!(omega(&s(vec![0.6], vec![0.0, -0.4]), 0), 1.0);
        let w = omega(&s(vec![0.8, 0.2], vec![0.4, 0.4, 0.1]), 0);
        assert!((w - 2.0 / 3.0).abs() < 1e-15);
        // degenerate: nothing positive
        assert_eq!(omega(&s(vec![-0.8, -0.2], vec![-0.4]), 0), 0.5);
    }

    #[test]
    fn rules_on_hand_scores() {
        let sp = space();
        let scores = ScoreSet::new(
            Tensor::from_rows(&[vec![0.8, 0.2]]).unwrap(),
            Tensor::from_rows(&[vec![0.4, 0.4, 0.1]]).unwrap(),
            Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4, 0.5]]).unwrap(),
        )
        .unwrap();
        let base = score_pairs(InferenceRule::Base, &scores, &sp).unwrap();
        assert_eq!(base, scores.d_pair);

        let max = score_pairs(InferenceRule::Max, &scores, &sp).unwrap();
        // pairs: (0,0) (1,1) (0,2) (1,0) (0,1)
        let expect = [0.1 + 0.8, 0.2 + 0.4, 0.3 + 0.8, 0.4 + 0.4, 0.5 + 0.8];
        for (a, b) in max.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }

        let must = score_pairs(InferenceRule::Must, &scores, &sp).unwrap();
        let w = 2.0 / 3.0;
        let expect_00 = w * 0.8 + (1.0 - w) * 0.4 + 0.1;
        assert!((must.get(0, 0) - expect_00).abs() < 1e-15);

        let fixed = score_pairs(InferenceRule::fixed(0.4, 0.6).unwrap(), &scores, &sp).unwrap();
        assert!((fixed.get(0, 2) - (0.4 * 0.8 + 0.6 * 0.1 + 0.3)).abs() < 1e-15);
    }

    #[test]
    fn must_at_half_equals_equal() {
        let sp = space();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores = random_scores(20, &sp, &mut rng);
        let half = vec![0.5; 20];
        let a = score_pairs_with_omega(&scores, &sp, &half).unwrap();
        let b = score_pairs(InferenceRule::Equal, &scores, &sp).unwrap();
        let c = score_pairs(InferenceRule::fixed(0.5, 0.5).unwrap(), &scores, &sp).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn rule_parsing() {
        assert_eq!("must".parse::<InferenceRule>().unwrap(), InferenceRule::Must);
        assert!(matches!("fixed".parse::<InferenceRule>(), Err(Error::Config(_))));
        assert!(matches!("median".parse::<InferenceRule>(), Err(Error::Config(_))));
        // best weights reported for two datasets are valid configurations
        assert!(InferenceRule::parse("fixed", Some(0.4), Some(0.6)).is_ok());
        assert!(InferenceRule::parse("fixed", Some(0.8), Some(0.2)).is_ok());
        assert!(InferenceRule::fixed(-0.1, 0.2).is_err());
    }

    #[test]
    fn topk_bias_extremes() {
        let sp = space();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores = random_scores(10, &sp, &mut rng);
        let ps = score_pairs(InferenceRule::Must, &scores, &sp).unwrap();
        // scores live in [-3, 3], so a bias of 6 dominates
        for p in predict_topk(&ps, &sp, 1, 6.0).unwrap() {
            assert!(!sp.is_seen_id(p[0]));
        }
        for p in predict_topk(&ps, &sp, 1, -6.0).unwrap() {
            assert!(sp.is_seen_id(p[0]));
        }
        for p in predict_topk(&ps, &sp, 2, f64::INFINITY).unwrap() {
            assert!(p.iter().all(|&id| !sp.is_seen_id(id)));
        }
        assert!(matches!(predict_topk(&ps, &sp, 6, 0.0), Err(Error::Config(_))));
        assert!(matches!(predict_topk(&ps, &sp, 0, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn topk_matches_exhaustive_scan() {
        let sp = space();
        let ps = Tensor::from_rows(&[
            vec![0.1, 0.9, 0.3, 0.2, 0.9],
            vec![0.5, 0.4, 0.7, 0.6, 0.0],
        ])
        .unwrap();
        let pred = predict_topk(&ps, &sp, 1, 0.0).unwrap();
        // row 0 ties between ids 1 and 4: lower id wins
        assert_eq!(pred[0], vec![PairId(1)]);
        assert_eq!(pred[1], vec![PairId(2)]);
        let pred = predict_topk(&ps, &sp, 1, 0.25).unwrap();
        assert_eq!(pred[0], vec![PairId(4)]);
        assert_eq!(pred[1], vec![PairId(3)]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn omega_in_unit_interval(seed in any::<u64>()) {
                let sp = space();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let scores = random_scores(8, &sp, &mut rng);
                for w in omegas(&scores) {
                    prop_assert!((0.0..=1.0).contains(&w));
                }
            }

            #[test]
            fn topk_shift_invariant(seed in any::<u64>(), shift in -5.0f64..5.0, bias in -1.0f64..1.0) {
                let sp = space();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ps = random_scores(6, &sp, &mut rng).d_pair;
                let mut shifted = ps.clone();
                shifted.data_mut().iter_mut().for_each(|v| *v += shift);
                let a = predict_topk(&ps, &sp, 2, bias).unwrap();
                let b = predict_topk(&shifted, &sp, 2, bias).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
