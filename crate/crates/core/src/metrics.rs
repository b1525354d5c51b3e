//! Generalized evaluation: a calibration bias is added to every unseen pair
//! and swept over all values that change a prediction, tracing the
//! seen/unseen accuracy trade-off.

use std::cmp::Ordering;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::infer::{biased_cmp, predict_topk};
use crate::numerics::Tensor;
use crate::space::{CompositionSpace, Pair, PairId};

/// `2·a_s·a_u / (a_s + a_u)`, and 0 when both are 0.
pub fn harmonic_mean(a_s: f64, a_u: f64) -> f64 {
    if a_s + a_u == 0.0 {
        return 0.0;
    }
    2.0 * a_s * a_u / (a_u + a_s)
}

/// Fractions of predictions whose state and object match the label.
pub fn component_accuracy(pred: &[Pair], truth: &[Pair]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Ok((0.0, 0.0));
    }
    let n = truth.len() as f64;
    let adj = pred.iter().zip(truth).filter(|(p, t)| p.state == t.state).count();
    let obj = pred.iter().zip(truth).filter(|(p, t)| p.object == t.object).count();
    Ok((adj as f64 / n, obj as f64 / n))
}

fn serialize_bias<S: Serializer>(b: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if *b == f64::INFINITY {
        s.serialize_str("inf")
    } else if *b == f64::NEG_INFINITY {
        s.serialize_str("-inf")
    } else {
        s.serialize_f64(*b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    #[serde(serialize_with = "serialize_bias")]
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
    pub hm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub k: usize,
    pub auc: f64,
    pub best_hm: f64,
    pub best_seen: f64,
    pub best_unseen: f64,
    pub acc_adj: f64,
    pub acc_obj: f64,
    #[serde(serialize_with = "serialize_bias")]
    pub operating_bias: f64,
    pub curve: Vec<CurvePoint>,
}

impl EvalReport {
    /// Curve as CSV with header `bias,seen_acc,unseen_acc`.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("bias,seen_acc,unseen_acc\n");
        for p in &self.curve {
            out.push_str(&format!("{},{},{}\n", p.bias, p.seen_acc, p.unseen_acc));
        }
        out
    }
}

/// Per-sample data sufficient to decide top-k correctness at any bias.
struct SampleRank {
    label: (usize, f64),
    label_seen: bool,
    /// Pairs of the label's own group ranked above it.
    ahead_same: usize,
    /// Best `k` pairs of the other group, best first.
    other_top: Vec<(usize, f64)>,
}

impl SampleRank {
    fn correct(&self, space: &CompositionSpace, bias: f64, k: usize) -> bool {
        if self.ahead_same >= k {
            return false;
        }
        let ahead_other = self
            .other_top
            .iter()
            .take_while(|&&e| biased_cmp(space, bias, e, self.label) == Ordering::Less)
            .count();
        self.ahead_same + ahead_other < k
    }
}

fn top_scores(space: &CompositionSpace, mut entries: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    entries.sort_by(|&a, &b| biased_cmp(space, 0.0, a, b));
    entries.truncate(k);
    entries
}

/// Sweeps the calibration bias over every interval between per-sample
/// score margins and summarizes the seen/unseen accuracy curve at top-`k`.
///
/// Candidate biases are the differences between each sample's `j`-th best
/// seen score and `l`-th best unseen score (`j, l < k`); the curve is
/// evaluated at `−∞`, the midpoint of each gap between consecutive
/// candidates, and `+∞`. The area uses the trapezoid rule in bias order.
pub fn bias_sweep(
    pair_scores: &Tensor,
    labels: &[PairId],
    space: &CompositionSpace,
    k: usize,
) -> Result<EvalReport> {
    pair_scores.expect_matrix("pair scores")?;
    if pair_scores.rows() != labels.len() || pair_scores.cols() != space.n_pairs() {
        return Err(Error::Shape(format!(
            "scores {:?} for {} labels and {} pairs",
            pair_scores.shape(),
            labels.len(),
            space.n_pairs()
        )));
    }
    if k == 0 || k > space.n_pairs() {
        return Err(Error::Config(format!("k must be in 1..={}, got {k}", space.n_pairs())));
    }
    if !pair_scores.is_finite() {
        return Err(Error::Numerical("non-finite pair scores".into()));
    }
    if let Some(bad) = labels.iter().find(|l| l.0 >= space.n_pairs()) {
        return Err(Error::UnknownComponent(format!("pair id {}", bad.0)));
    }
    let n_seen_labels = labels.iter().filter(|&&l| space.is_seen_id(l)).count();
    let n_unseen_labels = labels.len() - n_seen_labels;
    if n_unseen_labels == 0 {
        return Err(Error::Protocol("no unseen-labeled samples".into()));
    }
    if n_seen_labels == 0 {
        return Err(Error::Protocol("no seen-labeled samples".into()));
    }

    let mut ranks = Vec::with_capacity(labels.len());
    let mut breakpoints = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        let row = pair_scores.row(i);
        let label_seen = space.is_seen_id(label);
        let entry = (label.0, row[label.0]);
        let (mut same, mut other) = (Vec::new(), Vec::new());
        for (id, &s) in row.iter().enumerate() {
            if space.is_seen_id(PairId(id)) == label_seen {
                same.push((id, s));
            } else {
                other.push((id, s));
            }
        }
        let ahead_same = same
            .iter()
            .filter(|&&e| biased_cmp(space, 0.0, e, entry) == Ordering::Less)
            .count();
        let same_top = top_scores(space, same, k);
        let other_top = top_scores(space, other, k);
        let (seen_top, unseen_top) = if label_seen {
            (&same_top, &other_top)
        } else {
            (&other_top, &same_top)
        };
        for s in seen_top {
            for u in unseen_top {
                breakpoints.push(s.1 - u.1 + 0.0);
            }
        }
        ranks.push(SampleRank {
            label: entry,
            label_seen,
            ahead_same,
            other_top,
        });
    }
    breakpoints.sort_by(f64::total_cmp);
    breakpoints.dedup();

    let mut biases = Vec::with_capacity(breakpoints.len() + 1);
    biases.push(f64::NEG_INFINITY);
    biases.extend(breakpoints.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    biases.push(f64::INFINITY);

    let curve: Vec<CurvePoint> = biases
        .iter()
        .map(|&bias| {
            let (mut cs, mut cu) = (0usize, 0usize);
            for r in &ranks {
                if r.correct(space, bias, k) {
                    if r.label_seen {
                        cs += 1;
                    } else {
                        cu += 1;
                    }
                }
            }
            let seen_acc = cs as f64 / n_seen_labels as f64;
            let unseen_acc = cu as f64 / n_unseen_labels as f64;
            CurvePoint {
                bias,
                seen_acc,
                unseen_acc,
                hm: harmonic_mean(seen_acc, unseen_acc),
            }
        })
        .collect();

    let auc = curve
        .windows(2)
        .map(|w| (w[1].unseen_acc - w[0].unseen_acc) * (w[0].seen_acc + w[1].seen_acc) / 2.0)
        .sum::<f64>();
    let mut best = curve[0];
    for p in &curve[1..] {
        if p.hm > best.hm {
            best = *p;
        }
    }
    let best_seen = curve.iter().map(|p| p.seen_acc).fold(0.0, f64::max);
    let best_unseen = curve.iter().map(|p| p.unseen_acc).fold(0.0, f64::max);

    let top1 = predict_topk(pair_scores, space, 1, best.bias)?;
    let pred = top1
        .iter()
        .map(|p| space.pair(p[0]))
        .collect::<Result<Vec<_>>>()?;
    let truth = labels.iter().map(|&l| space.pair(l)).collect::<Result<Vec<_>>>()?;
    let (acc_adj, acc_obj) = component_accuracy(&pred, &truth)?;

    Ok(EvalReport {
        k,
        auc,
        best_hm: best.hm,
        best_seen,
        best_unseen,
        acc_adj,
        acc_obj,
        operating_bias: best.bias,
        curve,
    })
}
