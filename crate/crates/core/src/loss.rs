//! Re-weighted training objectives.
//!
//! Each component loss is a cross-entropy whose per-sample weight is
//! `(1 − d)^γ`, where `d` is the ground-truth cosine of the *other*
//! component: a sample whose counterpart is already matched confidently
//! contributes less. The composition loss uses the product
//! `μ = (1 − d_s)(1 − d_o)` raised to `γ`. The total objective is
//! `L = L_pair + λ (L_state + L_object)`; every term is a batch mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MustModel, PairEmbedder};
use crate::numerics::{log_softmax, log_softmax_backward, Objective, Param, Tensor};
use crate::space::{CompositionSpace, Pair, PairId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompositionObjective {
    /// `μ^γ`-weighted cross-entropy.
    #[default]
    Reweighted,
    /// Class-level focal loss `−(1 − p_t)^γ log p_t`, the comparison
    /// baseline.
    Focal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    /// Overrides `gamma` for the composition term.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_pair: Option<f64>,
    pub lambda: f64,
    pub temperature: f64,
    /// Treat weights as constants in the backward pass.
    pub weight_detached: bool,
    /// Clamp similarities to [0, 1] before weighting.
    pub clamp_weights: bool,
    #[serde(default)]
    pub composition: CompositionObjective,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 1.0,
            gamma_pair: None,
            lambda: 1.0,
            temperature: 1.0,
            weight_detached: true,
            clamp_weights: true,
            composition: CompositionObjective::Reweighted,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.gamma) || !self.gamma_pair.is_none_or(ok) {
            return Err(Error::Config(format!(
                "gamma must be finite and >= 0 (gamma={}, gamma_pair={:?})",
                self.gamma, self.gamma_pair
            )));
        }
        if !ok(self.lambda) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn pair_gamma(&self) -> f64 {
        self.gamma_pair.unwrap_or(self.gamma)
    }
}

/// `(1 − d)^γ`, with `d` clamped to [0, 1] first when `clamp` is set.
pub fn modulating_weight(d: f64, gamma: f64, clamp: bool) -> Result<f64> {
    if d.is_nan() || gamma.is_nan() {
        return Err(Error::Numerical("NaN fed to modulating weight".into()));
    }
    let d = if clamp { d.clamp(0.0, 1.0) } else { d };
    Ok((1.0 - d).powf(gamma))
}

/// `∂/∂d (1 − d)^γ`; zero where the clamp is active.
fn modulating_weight_grad(d: f64, gamma: f64, clamp: bool) -> f64 {
    if gamma == 0.0 || (clamp && !(d > 0.0 && d < 1.0)) {
        return 0.0;
    }
    let base = 1.0 - d;
    if base <= 0.0 {
        return if gamma >= 1.0 { -gamma * base.max(0.0).powf(gamma - 1.0) } else { 0.0 };
    }
    -gamma * base.powf(gamma - 1.0)
}

/// One component objective with gradients for both score matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentLoss {
    pub value: f64,
    pub weights: Vec<f64>,
    /// Gradient with respect to the classified component's scores.
    pub grad_scores: Tensor,
    /// Gradient with respect to the counterpart scores (zero when weights
    /// are detached).
    pub grad_counterpart: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionLoss {
    pub value: f64,
    pub weights: Vec<f64>,
    pub grad_pair: Tensor,
    pub grad_state: Tensor,
    pub grad_object: Tensor,
}

fn check_scores(t: &Tensor, rows: usize, cols: usize, what: &str) -> Result<()> {
    t.expect_matrix(what)?;
    if t.rows() != rows || t.cols() != cols {
        return Err(Error::Shape(format!(
            "{what}: expected [{rows}x{cols}], got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Mean of `w_i · CE_i` plus the gradient of that mean w.r.t. the logits.
fn weighted_ce(scores: &Tensor, targets: &[usize], weights: &[f64], temperature: f64) -> Result<(f64, Vec<f64>, Tensor)> {
    let b = targets.len();
    let logp = log_softmax(scores, temperature)?;
    let ce: Vec<f64> = targets.iter().enumerate().map(|(i, &t)| -logp.get(i, t)).collect();
    let value = ce.iter().zip(weights).map(|(c, w)| c * w).sum::<f64>() / b as f64;
    let mut g = Tensor::zeros(scores.shape());
    for (i, &t) in targets.iter().enumerate() {
        g.set(i, t, -weights[i] / b as f64);
    }
    let grad = log_softmax_backward(&logp, &g, temperature)?;
    Ok((value, ce, grad))
}

#[allow(clippy::too_many_arguments)]
fn component_loss(
    scores: &Tensor,
    counterpart: &Tensor,
    targets: &[usize],
    counterpart_targets: &[usize],
    psi: &[u8],
    cfg: &LossConfig,
    gamma: f64,
    fixed: Option<&[f64]>,
) -> Result<ComponentLoss> {
    let b = targets.len();
    let dbar: Vec<f64> = (0..b)
        .map(|i| psi[i] as f64 * counterpart.get(i, counterpart_targets[i]))
        .collect();
    let weights = match fixed {
        Some(w) => check_fixed(w, b)?,
        None => dbar
            .iter()
            .map(|&d| modulating_weight(d, gamma, cfg.clamp_weights))
            .collect::<Result<Vec<_>>>()?,
    };
    let (value, ce, grad_scores) = weighted_ce(scores, targets, &weights, cfg.temperature)?;
    let mut grad_counterpart = Tensor::zeros(counterpart.shape());
    if !cfg.weight_detached && fixed.is_none() {
        for i in 0..b {
            if psi[i] == 1 {
                let dw = modulating_weight_grad(dbar[i], gamma, cfg.clamp_weights);
                grad_counterpart.set(i, counterpart_targets[i], ce[i] * dw / b as f64);
            }
        }
    }
    Ok(ComponentLoss {
        value,
        weights,
        grad_scores,
        grad_counterpart,
    })
}

fn check_fixed(w: &[f64], b: usize) -> Result<Vec<f64>> {
    if w.len() != b {
        return Err(Error::Shape(format!("{} frozen weights for {b} samples", w.len())));
    }
    Ok(w.to_vec())
}

fn check_labels(space: &CompositionSpace, labels: &[Pair]) -> Result<Vec<u8>> {
    labels.iter().map(|p| space.psi(p.state, p.object)).collect()
}

/// Object cross-entropy weighted by `(1 − ψ(s,o)·D_s[i][s])^γ`.
pub fn loss_object(
    d_object: &Tensor,
    d_state: &Tensor,
    labels: &[Pair],
    space: &CompositionSpace,
    cfg: &LossConfig,
) -> Result<ComponentLoss> {
    let b = labels.len();
    check_scores(d_object, b, space.n_objects(), "object scores")?;
    check_scores(d_state, b, space.n_states(), "state scores")?;
    let psi = check_labels(space, labels)?;
    let objects: Vec<usize> = labels.iter().map(|p| p.object).collect();
    let states: Vec<usize> = labels.iter().map(|p| p.state).collect();
    component_loss(d_object, d_state, &objects, &states, &psi, cfg, cfg.gamma, None)
}

/// State cross-entropy weighted by `(1 − ψ(s,o)·D_o[i][o])^γ`.
pub fn loss_state(
    d_state: &Tensor,
    d_object: &Tensor,
    labels: &[Pair],
    space: &CompositionSpace,
    cfg: &LossConfig,
) -> Result<ComponentLoss> {
    let b = labels.len();
    check_scores(d_state, b, space.n_states(), "state scores")?;
    check_scores(d_object, b, space.n_objects(), "object scores")?;
    let psi = check_labels(space, labels)?;
    let objects: Vec<usize> = labels.iter().map(|p| p.object).collect();
    let states: Vec<usize> = labels.iter().map(|p| p.state).collect();
    component_loss(d_state, d_object, &states, &objects, &psi, cfg, cfg.gamma, None)
}

/// Composition cross-entropy over seen pairs weighted by `μ^γ`, or the focal
/// baseline when configured. `d_pair` columns follow the seen-pair order.
pub fn loss_composition(
    d_pair: &Tensor,
    d_state: &Tensor,
    d_object: &Tensor,
    labels: &[Pair],
    space: &CompositionSpace,
    cfg: &LossConfig,
) -> Result<CompositionLoss> {
    composition_loss(d_pair, d_state, d_object, labels, space, cfg, None)
}

fn composition_loss(
    d_pair: &Tensor,
    d_state: &Tensor,
    d_object: &Tensor,
    labels: &[Pair],
    space: &CompositionSpace,
    cfg: &LossConfig,
    fixed: Option<&[f64]>,
) -> Result<CompositionLoss> {
    let b = labels.len();
    check_scores(d_pair, b, space.n_seen(), "pair scores")?;
    check_scores(d_state, b, space.n_states(), "state scores")?;
    check_scores(d_object, b, space.n_objects(), "object scores")?;
    let targets = labels
        .iter()
        .map(|&p| {
            space.seen_column(p)?.ok_or_else(|| {
                Error::SplitViolation(format!(
                    "training label ({}, {}) is not a seen pair",
                    space.state_names()[p.state],
                    space.object_names()[p.object]
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gamma = cfg.pair_gamma();

    let mut grad_state = Tensor::zeros(d_state.shape());
    let mut grad_object = Tensor::zeros(d_object.shape());
    if cfg.composition == CompositionObjective::Focal {
        let (value, grad_pair) = focal_ce_baseline(d_pair, &targets, gamma, cfg.temperature)?;
        return Ok(CompositionLoss {
            value,
            weights: vec![1.0; b],
            grad_pair,
            grad_state,
            grad_object,
        });
    }

    let mut weights = Vec::with_capacity(b);
    let mut factors = Vec::with_capacity(b);
    for (i, p) in labels.iter().enumerate() {
        // ψ̂ reduces d̂ to the label's own component cosines
        let ds = d_state.get(i, p.state);
        let d_o = d_object.get(i, p.object);
        let ws = modulating_weight(ds, gamma, cfg.clamp_weights)?;
        let wo = modulating_weight(d_o, gamma, cfg.clamp_weights)?;
        weights.push(ws * wo);
        factors.push((ds, d_o, ws, wo));
    }
    if let Some(w) = fixed {
        weights = check_fixed(w, b)?;
    }
    let (value, ce, grad_pair) = weighted_ce(d_pair, &targets, &weights, cfg.temperature)?;
    if !cfg.weight_detached && fixed.is_none() {
        for (i, p) in labels.iter().enumerate() {
            let (ds, d_o, ws, wo) = factors[i];
            let scale = ce[i] / b as f64;
            let gs = modulating_weight_grad(ds, gamma, cfg.clamp_weights) * wo;
            let go = modulating_weight_grad(d_o, gamma, cfg.clamp_weights) * ws;
            grad_state.set(i, p.state, scale * gs);
            grad_object.set(i, p.object, scale * go);
        }
    }
    Ok(CompositionLoss {
        value,
        weights,
        grad_pair,
        grad_state,
        grad_object,
    })
}

/// Mean focal loss `−(1 − p_t)^γ log p_t` over `softmax(logits / T)` and
/// its gradient w.r.t. the logits.
pub fn focal_ce_baseline(
    logits: &Tensor,
    targets: &[usize],
    gamma: f64,
    temperature: f64,
) -> Result<(f64, Tensor)> {
    logits.expect_matrix("logits")?;
    if targets.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} targets for {} rows",
            targets.len(),
            logits.rows()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::UnknownComponent(format!("target class {t}")));
    }
    let b = targets.len() as f64;
    let logp = log_softmax(logits, temperature)?;
    let mut value = 0.0;
    let mut g = Tensor::zeros(logits.shape());
    for (i, &t) in targets.iter().enumerate() {
        let lp = logp.get(i, t);
        let pt = lp.exp();
        let q = 1.0 - pt;
        value -= q.powf(gamma) * lp;
        // dL/d(log p_t) = γ (1−p_t)^(γ−1) p_t log p_t − (1−p_t)^γ
        let focus = if gamma == 0.0 || q <= 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * pt * lp };
        g.set(i, t, (focus - q.powf(gamma)) / b);
    }
    let grad = log_softmax_backward(&logp, &g, temperature)?;
    Ok((value / b, grad))
}

/// Scalar values and per-sample weights of one evaluation of the total
/// objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_pair: f64,
    pub l_state: f64,
    pub l_object: f64,
    pub w_state: Vec<f64>,
    pub w_object: Vec<f64>,
    /// Applied composition weight `μ^γ` per sample.
    pub w_pair: Vec<f64>,
}

/// Loss values and score gradients for a batch, before the model backward.
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    pub grad_state: Tensor,
    pub grad_object: Tensor,
    pub grad_pair: Tensor,
}

/// Per-sample weights held constant, for checking the detached gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenWeights {
    pub state: Vec<f64>,
    pub object: Vec<f64>,
    pub pair: Vec<f64>,
}

impl From<&LossBreakdown> for FrozenWeights {
    fn from(b: &LossBreakdown) -> Self {
        FrozenWeights {
            state: b.w_state.clone(),
            object: b.w_object.clone(),
            pair: b.w_pair.clone(),
        }
    }
}

/// Combines the three terms from precomputed scores. `d_pair` covers the
/// seen pairs only.
pub fn combine(
    d_state: &Tensor,
    d_object: &Tensor,
    d_pair: &Tensor,
    labels: &[Pair],
    space: &CompositionSpace,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    combine_with(d_state, d_object, d_pair, labels, space, cfg, None)
}

/// [`combine`] with every per-sample weight replaced by `frozen`.
pub fn combine_frozen(
    d_state: &Tensor,
    d_object: &Tensor,
    d_pair: &Tensor,
    labels: &[Pair],
    space: &CompositionSpace,
    cfg: &LossConfig,
    frozen: &FrozenWeights,
) -> Result<BatchLoss> {
    combine_with(d_state, d_object, d_pair, labels, space, cfg, Some(frozen))
}

fn combine_with(
    d_state: &Tensor,
    d_object: &Tensor,
    d_pair: &Tensor,
    labels: &[Pair],
    space: &CompositionSpace,
    cfg: &LossConfig,
    frozen: Option<&FrozenWeights>,
) -> Result<BatchLoss> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let b = labels.len();
    check_scores(d_state, b, space.n_states(), "state scores")?;
    check_scores(d_object, b, space.n_objects(), "object scores")?;
    let psi = check_labels(space, labels)?;
    let objects: Vec<usize> = labels.iter().map(|p| p.object).collect();
    let states: Vec<usize> = labels.iter().map(|p| p.state).collect();
    let ls = component_loss(d_state, d_object, &states, &objects, &psi, cfg, cfg.gamma, frozen.map(|f| f.state.as_slice()))?;
    let lo = component_loss(d_object, d_state, &objects, &states, &psi, cfg, cfg.gamma, frozen.map(|f| f.object.as_slice()))?;
    let lp = composition_loss(d_pair, d_state, d_object, labels, space, cfg, frozen.map(|f| f.pair.as_slice()))?;
    let lambda = cfg.lambda;

    let mut grad_state = lp.grad_state;
    let mut grad_object = lp.grad_object;
    for (g, parts) in [
        (&mut grad_state, [&ls.grad_scores, &lo.grad_counterpart]),
        (&mut grad_object, [&lo.grad_scores, &ls.grad_counterpart]),
    ] {
        for part in parts {
            g.data_mut()
                .iter_mut()
                .zip(part.data())
                .for_each(|(a, b)| *a += lambda * b);
        }
    }

    let total = lp.value + lambda * (ls.value + lo.value);
    if !total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss (pair {}, state {}, object {})",
            lp.value, ls.value, lo.value
        )));
    }
    Ok(BatchLoss {
        breakdown: LossBreakdown {
            total,
            l_pair: lp.value,
            l_state: ls.value,
            l_object: lo.value,
            w_state: ls.weights,
            w_object: lo.weights,
            w_pair: lp.weights,
        },
        grad_state,
        grad_object,
        grad_pair: lp.grad_pair,
    })
}

fn seen_candidates(space: &CompositionSpace) -> Vec<PairId> {
    (0..space.n_seen()).map(PairId).collect()
}

/// Evaluates `L = L_pair + λ(L_state + L_object)` on a batch and
/// accumulates its gradient into the model parameters.
pub fn total_loss<E: PairEmbedder>(
    model: &mut MustModel<E>,
    x: &Tensor,
    labels: &[Pair],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let fwd = model.forward(x, &seen_candidates(&model.space))?;
    let batch = combine(&fwd.d_state, &fwd.d_object, &fwd.d_pair, labels, &model.space, cfg)?;
    model.backward(&fwd, &batch.grad_state, &batch.grad_object, &batch.grad_pair)?;
    Ok(batch.breakdown)
}

/// Forward-only variant of [`total_loss`].
pub fn evaluate_loss<E: PairEmbedder>(
    model: &MustModel<E>,
    x: &Tensor,
    labels: &[Pair],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let fwd = model.forward(x, &seen_candidates(&model.space))?;
    Ok(combine(&fwd.d_state, &fwd.d_object, &fwd.d_pair, labels, &model.space, cfg)?.breakdown)
}

/// The total objective on a fixed batch as a function of the model
/// parameters. With detached weights the weights are frozen at the
/// construction point, so finite differences see the same function the
/// analytic gradient describes.
pub struct LossObjective {
    pub model: MustModel,
    x: Tensor,
    labels: Vec<Pair>,
    cfg: LossConfig,
    frozen: Option<FrozenWeights>,
}

impl LossObjective {
    pub fn new(model: MustModel, x: Tensor, labels: Vec<Pair>, cfg: LossConfig) -> Result<Self> {
        let frozen = if cfg.weight_detached {
            Some(FrozenWeights::from(&evaluate_loss(&model, &x, &labels, &cfg)?))
        } else {
            None
        };
        Ok(LossObjective {
            model,
            x,
            labels,
            cfg,
            frozen,
        })
    }
}

impl Objective for LossObjective {
    fn params(&self) -> Vec<&Param> {
        self.model.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.model.params_mut()
    }

    fn evaluate(&mut self, grad: bool) -> Result<f64> {
        let fwd = self.model.forward(&self.x, &seen_candidates(&self.model.space))?;
        let out = combine_with(
            &fwd.d_state,
            &fwd.d_object,
            &fwd.d_pair,
            &self.labels,
            &self.model.space,
            &self.cfg,
            self.frozen.as_ref(),
        )?;
        if grad {
            self.model.zero_grad();
            self.model.backward(&fwd, &out.grad_state, &out.grad_object, &out.grad_pair)?;
        }
        Ok(out.breakdown.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::numeric_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space() -> CompositionSpace {
        CompositionSpace::from_indices(
            3,
            4,
            &[Pair::new(0, 0), Pair::new(0, 1), Pair::new(1, 2), Pair::new(2, 3), Pair::new(2, 0), Pair::new(1, 1)],
            &[Pair::new(1, 0), Pair::new(2, 2)],
        )
        .unwrap()
    }

    fn cosines(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn labels(n: usize, sp: &CompositionSpace, rng: &mut ChaCha8Rng) -> Vec<Pair> {
        (0..n).map(|_| sp.seen_pairs()[rng.random_range(0..sp.n_seen())]).collect()
    }

    struct Batch {
        ds: Tensor,
        d_o: Tensor,
        dp: Tensor,
        labels: Vec<Pair>,
    }

    fn batch(seed: u64) -> Batch {
        let sp = space();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 7;
        Batch {
            ds: cosines(n, 3, &mut rng),
            d_o: cosines(n, 4, &mut rng),
            dp: cosines(n, sp.n_seen(), &mut rng),
            labels: labels(n, &sp, &mut rng),
        }
    }

    // Scalar transcription of the objectives, one sample at a time.
    fn naive_ce(row: &[f64], t: usize, temp: f64) -> f64 {
        let z: f64 = row.iter().map(|v| (v / temp).exp()).sum();
        -((row[t] / temp).exp() / z).ln()
    }

    fn naive_weight(d: f64, gamma: f64, clamp: bool) -> f64 {
        let d = if clamp { d.clamp(0.0, 1.0) } else { d };
        (1.0 - d).powf(gamma)
    }

    fn naive_object_loss(b: &Batch, sp: &CompositionSpace, gamma: f64, clamp: bool) -> f64 {
        let n = b.labels.len();
        (0..n)
            .map(|i| {
                let p = b.labels[i];
                let psi = if sp.seen_pairs().contains(&p) { 1.0 } else { 0.0 };
                naive_weight(psi * b.ds.get(i, p.state), gamma, clamp) * naive_ce(b.d_o.row(i), p.object, 1.0)
            })
            .sum::<f64>()
            / n as f64
    }

    fn naive_pair_loss(b: &Batch, sp: &CompositionSpace, gamma: f64, clamp: bool) -> f64 {
        let n = b.labels.len();
        (0..n)
            .map(|i| {
                let p = b.labels[i];
                let col = sp.seen_pairs().iter().position(|q| *q == p).unwrap();
                let mu = naive_weight(b.ds.get(i, p.state), 1.0, clamp) * naive_weight(b.d_o.get(i, p.object), 1.0, clamp);
                mu.powf(gamma) * naive_ce(b.dp.row(i), col, 1.0)
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn modulating_weight_examples() {
        for g in [0.0, 1.0, 2.5, 6.0] {
            if g > 0.0 {
                assert_eq!(modulating_weight(1.0, g, true).unwrap(), 0.0);
            }
        }
        for d in [-0.7, 0.0, 0.3, 1.0] {
            assert_eq!(modulating_weight(d, 0.0, true).unwrap(), 1.0);
            assert_eq!(modulating_weight(d, 0.0, false).unwrap(), 1.0);
        }
        assert_eq!(modulating_weight(0.5, 1.0, true).unwrap(), 0.5);
        assert_eq!(modulating_weight(-0.5, 1.0, true).unwrap(), 1.0);
        assert_eq!(modulating_weight(-0.5, 1.0, false).unwrap(), 1.5);
        assert_eq!(modulating_weight(-1.0, 6.0, false).unwrap(), 64.0);
        assert!(matches!(modulating_weight(f64::NAN, 1.0, true), Err(Error::Numerical(_))));
    }

    #[test]
    fn object_and_pair_loss_match_scalar_loop() {
        let sp = space();
        for seed in 0..5 {
            let b = batch(seed);
            for (gamma, clamp) in [(0.0, true), (1.0, true), (2.0, false), (6.0, true)] {
                let cfg = LossConfig { gamma, clamp_weights: clamp, ..Default::default() };
                let lo = loss_object(&b.d_o, &b.ds, &b.labels, &sp, &cfg).unwrap();
                assert!((lo.value - naive_object_loss(&b, &sp, gamma, clamp)).abs() < 1e-12);
                let lp = loss_composition(&b.dp, &b.ds, &b.d_o, &b.labels, &sp, &cfg).unwrap();
                assert!((lp.value - naive_pair_loss(&b, &sp, gamma, clamp)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gamma_zero_is_plain_cross_entropy() {
        let sp = space();
        let b = batch(11);
        let cfg = LossConfig { gamma: 0.0, ..Default::default() };
        let n = b.labels.len() as f64;
        let ce_o: f64 = b.labels.iter().enumerate().map(|(i, p)| naive_ce(b.d_o.row(i), p.object, 1.0)).sum::<f64>() / n;
        let ce_s: f64 = b.labels.iter().enumerate().map(|(i, p)| naive_ce(b.ds.row(i), p.state, 1.0)).sum::<f64>() / n;
        let lo = loss_object(&b.d_o, &b.ds, &b.labels, &sp, &cfg).unwrap();
        let ls = loss_state(&b.ds, &b.d_o, &b.labels, &sp, &cfg).unwrap();
        assert!((lo.value - ce_o).abs() < 1e-12);
        assert!((ls.value - ce_s).abs() < 1e-12);
    }

    #[test]
    fn confident_counterpart_masks_sample() {
        let sp = space();
        let mut b = batch(12);
        let p = b.labels[0];
        b.ds.set(0, p.state, 1.0);
        b.d_o.set(0, p.object, 0.0);
        let cfg = LossConfig::default();
        let lo = loss_object(&b.d_o, &b.ds, &b.labels, &sp, &cfg).unwrap();
        assert_eq!(lo.weights[0], 0.0);
        assert!(lo.grad_scores.row(0).iter().all(|&g| g == 0.0));
        let lp = loss_composition(&b.dp, &b.ds, &b.d_o, &b.labels, &sp, &cfg).unwrap();
        assert_eq!(lp.weights[0], 0.0);

        // both components at zero similarity: μ = 1
        b.ds.set(0, p.state, 0.0);
        let lp = loss_composition(&b.dp, &b.ds, &b.d_o, &b.labels, &sp, &cfg).unwrap();
        assert_eq!(lp.weights[0], 1.0);
        b.ds.set(0, p.state, 0.5);
        b.d_o.set(0, p.object, 0.5);
        let lp = loss_composition(&b.dp, &b.ds, &b.d_o, &b.labels, &sp, &cfg).unwrap();
        assert_eq!(lp.weights[0], 0.25);
    }

    #[test]
    fn state_object_mirror_symmetry() {
        let sp = space();
        // transpose the space: states become objects and vice versa
        let flip = |ps: &[Pair]| ps.iter().map(|p| Pair::new(p.object, p.state)).collect::<Vec<_>>();
        let mirrored = CompositionSpace::from_indices(4, 3, &flip(sp.seen_pairs()), &flip(sp.unseen_pairs())).unwrap();
        for seed in 0..4 {
            let b = batch(20 + seed);
            for detached in [true, false] {
                let cfg = LossConfig { gamma: 2.0, weight_detached: detached, ..Default::default() };
                let ls = loss_state(&b.ds, &b.d_o, &b.labels, &sp, &cfg).unwrap();
                let lo_m = loss_object(&b.ds, &b.d_o, &flip(&b.labels), &mirrored, &cfg).unwrap();
                assert_eq!(ls, lo_m);
            }
        }
    }

    #[test]
    fn unseen_label_in_composition_loss() {
        let sp = space();
        let mut b = batch(3);
        b.labels[2] = Pair::new(1, 0);
        let err = loss_composition(&b.dp, &b.ds, &b.d_o, &b.labels, &sp, &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::SplitViolation(_)));
        // component losses fall back to weight 1 via ψ = 0
        let lo = loss_object(&b.d_o, &b.ds, &b.labels, &sp, &LossConfig::default()).unwrap();
        assert_eq!(lo.weights[2], 1.0);
        b.labels[2] = Pair::new(5, 0);
        assert!(matches!(
            loss_object(&b.d_o, &b.ds, &b.labels, &sp, &LossConfig::default()),
            Err(Error::UnknownComponent(_))
        ));
    }

    #[test]
    fn lambda_zero_total_is_pair_loss() {
        let sp = space();
        let b = batch(5);
        let cfg = LossConfig { lambda: 0.0, ..Default::default() };
        let out = combine(&b.ds, &b.d_o, &b.dp, &b.labels, &sp, &cfg).unwrap();
        assert_eq!(out.breakdown.total, out.breakdown.l_pair);

        let cfg = LossConfig { lambda: 1.5, ..Default::default() };
        let bd = combine(&b.ds, &b.d_o, &b.dp, &b.labels, &sp, &cfg).unwrap().breakdown;
        assert!((bd.total - (bd.l_pair + 1.5 * (bd.l_state + bd.l_object))).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { gamma: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(LossConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { gamma_pair: Some(-2.0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn focal_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = cosines(6, 5, &mut rng);
        let targets = [0usize, 4, 2, 2, 1, 3];
        let (fl, _) = focal_ce_baseline(&logits, &targets, 0.0, 1.0).unwrap();
        let ce: f64 = targets.iter().enumerate().map(|(i, &t)| naive_ce(logits.row(i), t, 1.0)).sum::<f64>() / 6.0;
        assert!((fl - ce).abs() < 1e-12);

        for gamma in [0.5, 2.0] {
            let (fl, g) = focal_ce_baseline(&logits, &targets, gamma, 1.0).unwrap();
            let naive: f64 = targets
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let lp = -naive_ce(logits.row(i), t, 1.0);
                    -(1.0 - lp.exp()).powf(gamma) * lp
                })
                .sum::<f64>()
                / 6.0;
            assert!((fl - naive).abs() < 1e-12);
            let n = numeric_grad(&logits, 1e-5, |x| focal_ce_baseline(x, &targets, gamma, 1.0).unwrap().0);
            assert!(g.max_abs_diff(&n) < 1e-8);
        }

        // p_t = 1: a single class
        let one = Tensor::from_vec(&[1, 1], vec![0.3]).unwrap();
        assert_eq!(focal_ce_baseline(&one, &[0], 2.0, 1.0).unwrap().0, 0.0);
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        let sp = space();
        for seed in 0..3 {
            let b = batch(40 + seed);
            for detached in [true, false] {
                for clamp in [true, false] {
                    let cfg = LossConfig { gamma: 2.0, lambda: 1.3, weight_detached: detached, clamp_weights: clamp, ..Default::default() };
                    let out = combine(&b.ds, &b.d_o, &b.dp, &b.labels, &sp, &cfg).unwrap();
                    // detached weights are constants: freeze them for the oracle
                    let frozen = |ds: &Tensor, d_o: &Tensor, dp: &Tensor| -> f64 {
                        if detached {
                            let bd = &out.breakdown;
                            let n = b.labels.len() as f64;
                            let mut l_s = 0.0;
                            let mut l_o = 0.0;
                            let mut l_p = 0.0;
                            for (i, p) in b.labels.iter().enumerate() {
                                let col = sp.seen_pairs().iter().position(|q| q == p).unwrap();
                                l_s += bd.w_state[i] * naive_ce(ds.row(i), p.state, 1.0);
                                l_o += bd.w_object[i] * naive_ce(d_o.row(i), p.object, 1.0);
                                l_p += bd.w_pair[i] * naive_ce(dp.row(i), col, 1.0);
                            }
                            (l_p + 1.3 * (l_s + l_o)) / n
                        } else {
                            combine(ds, d_o, dp, &b.labels, &sp, &cfg).unwrap().breakdown.total
                        }
                    };
                    let ns = numeric_grad(&b.ds, 1e-6, |t| frozen(t, &b.d_o, &b.dp));
                    let no = numeric_grad(&b.d_o, 1e-6, |t| frozen(&b.ds, t, &b.dp));
                    let np = numeric_grad(&b.dp, 1e-6, |t| frozen(&b.ds, &b.d_o, t));
                    assert!(out.grad_state.max_abs_diff(&ns) < 1e-7, "state {detached} {clamp}");
                    assert!(out.grad_object.max_abs_diff(&no) < 1e-7, "object {detached} {clamp}");
                    assert!(out.grad_pair.max_abs_diff(&np) < 1e-7, "pair {detached} {clamp}");
                }
            }
        }
    }

    #[test]
    fn model_gradients_pass_gradcheck() {
        use crate::model::{ModelConfig, WordVectors};
        use crate::numerics::{finite_diff_check, CheckConfig};
        let sp = space();
        for seed in 0..2 {
            for detached in [true, false] {
                let words = WordVectors::hashed(&sp, 6, seed);
                let cfg = ModelConfig { feat_dim: 5, hidden_dim: 7, embed_dim: 4, seed };
                let model = MustModel::new(sp.clone(), words, cfg).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
                let x = cosines(6, 5, &mut rng);
                let labels = labels(6, &sp, &mut rng);
                let loss = LossConfig { gamma: 2.0, lambda: 1.5, weight_detached: detached, ..Default::default() };
                let mut obj = LossObjective::new(model, x, labels, loss).unwrap();
                let report = finite_diff_check(&mut obj, &CheckConfig::default()).unwrap();
                assert!(report.passed(), "{report:?}");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn clamped_weights_in_unit_interval(d in -1.0f64..=1.0, e in -1.0f64..=1.0, gamma in 0.0f64..8.0) {
                let w = modulating_weight(d, gamma, true).unwrap();
                prop_assert!((0.0..=1.0).contains(&w));
                let mu = w * modulating_weight(e, gamma, true).unwrap();
                prop_assert!((0.0..=1.0).contains(&mu));
            }

            #[test]
            fn weights_non_increasing(d in -1.0f64..=1.0, step in 0.0f64..0.5, gamma in 0.0f64..8.0, clamp: bool) {
                let d2 = (d + step).min(1.0);
                prop_assert!(modulating_weight(d2, gamma, clamp).unwrap() <= modulating_weight(d, gamma, clamp).unwrap());
            }

            #[test]
            fn breakdown_identity(seed in any::<u64>(), lambda in 0.0f64..3.0, gamma in 0.0f64..6.0) {
                let sp = space();
                let b = batch(seed);
                let cfg = LossConfig { gamma, lambda, ..Default::default() };
                let bd = combine(&b.ds, &b.d_o, &b.dp, &b.labels, &sp, &cfg).unwrap().breakdown;
                prop_assert!((bd.total - (bd.l_pair + lambda * (bd.l_state + bd.l_object))).abs() < 1e-12);
            }
        }
    }
}
