//! Mini-batch training with validation-driven model selection.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, Partition, Split};
use crate::error::{Error, Result};
use crate::infer::{score_pairs, InferenceRule};
use crate::loss::{total_loss, LossConfig};
use crate::metrics::{bias_sweep, EvalReport};
use crate::model::{ModelConfig, MustModel};
use crate::numerics::{AdamState, DEFAULT_LR};

/// Named hyperparameter presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    MitStates,
    UtZappos,
    Cgqa,
    Synth,
}

impl Profile {
    pub const ALL: [Profile; 4] = [Profile::MitStates, Profile::UtZappos, Profile::Cgqa, Profile::Synth];

    pub fn name(self) -> &'static str {
        match self {
            Profile::MitStates => "mit-states",
            Profile::UtZappos => "ut-zappos",
            Profile::Cgqa => "cgqa",
            Profile::Synth => "synth",
        }
    }

    /// Full training configuration for this preset.
    pub fn defaults(self) -> TrainConfig {
        let (gamma, lambda) = match self {
            Profile::MitStates => (1.0, 1.5),
            Profile::UtZappos | Profile::Synth => (1.0, 1.0),
            Profile::Cgqa => (6.0, 1.0),
        };
        let loss = LossConfig {
            gamma,
            lambda,
            ..LossConfig::default()
        };
        let base = TrainConfig {
            profile: self,
            loss,
            ..TrainConfig::default()
        };
        match self {
            Profile::Synth => TrainConfig {
                epochs: 80,
                lr: 1e-3,
                hidden_dim: 128,
                embed_dim: 64,
                eval_every: 5,
                patience: 6,
                ..base
            },
            _ => base,
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown profile {s:?}, expected one of mit-states, ut-zappos, cgqa, synth")))
    }
}

/// Which terms of the objective are re-weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Plain cross-entropy everywhere.
    Base,
    /// Re-weighted component losses, plain composition loss.
    Components,
    /// Plain component losses, re-weighted composition loss.
    Composition,
    #[default]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Base, Ablation::Components, Ablation::Composition, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Base => "base",
            Ablation::Components => "components",
            Ablation::Composition => "composition",
            Ablation::Full => "full",
        }
    }

    /// Zeroes the focusing exponent of the terms this variant leaves plain.
    pub fn apply(self, loss: &LossConfig) -> LossConfig {
        let pair = loss.pair_gamma();
        let (gamma, gamma_pair) = match self {
            Ablation::Base => (0.0, 0.0),
            Ablation::Components => (loss.gamma, 0.0),
            Ablation::Composition => (0.0, pair),
            Ablation::Full => (loss.gamma, pair),
        };
        LossConfig {
            gamma,
            gamma_pair: (gamma_pair != gamma).then_some(gamma_pair),
            ..loss.clone()
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}, expected one of base, components, composition, full")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: Profile,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub loss: LossConfig,
    pub ablation: Ablation,
    /// Evaluate on validation every this many epochs (and after the last).
    pub eval_every: usize,
    /// Stop after this many evaluations without improvement; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            profile: Profile::UtZappos,
            epochs: 300,
            batch_size: 128,
            lr: DEFAULT_LR,
            hidden_dim: 512,
            embed_dim: 512,
            loss: LossConfig::default(),
            ablation: Ablation::Full,
            eval_every: 1,
            patience: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.loss.validate()?;
        self.model_config(1).validate()
    }

    /// Loss configuration after applying the ablation variant.
    pub fn effective_loss(&self) -> LossConfig {
        self.ablation.apply(&self.loss)
    }

    pub fn model_config(&self, feat_dim: usize) -> ModelConfig {
        ModelConfig {
            feat_dim,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            seed: self.seed,
        }
    }
}

/// One line of the training log. Validation columns are empty on epochs
/// without evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub l_pair: f64,
    pub l_state: f64,
    pub l_object: f64,
    pub val_auc: Option<f64>,
    pub val_hm: Option<f64>,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,l_pair,l_state,l_object,val_auc,val_hm\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.l_pair,
            r.l_state,
            r.l_object,
            opt(r.val_auc),
            opt(r.val_hm)
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the highest validation AUC (the initial model if no
    /// evaluation ran).
    pub best: MustModel,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub history: Vec<HistoryRow>,
}

/// Scores a validation or test partition with `rule` and sweeps the bias.
pub fn evaluate(
    model: &MustModel,
    bundle: &DatasetBundle,
    part: Partition,
    rule: InferenceRule,
    k: usize,
) -> Result<EvalReport> {
    let (x, labels) = bundle.partition(part)?;
    let scores = model.score_set(&x)?;
    let pair_scores = score_pairs(rule, &scores, &model.space)?;
    bias_sweep(&pair_scores, &labels, &model.space, k)
}

pub fn train(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let loss_cfg = cfg.effective_loss();
    let mut model = MustModel::new(
        bundle.space.clone(),
        bundle.words.clone(),
        cfg.model_config(bundle.feat_dim()),
    )?;
    let mut train_idx = bundle.indices(&[Split::Train]);
    if train_idx.is_empty() && cfg.epochs > 0 {
        return Err(Error::Config("bundle has no training samples".into()));
    }

    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_val_auc: Option<f64> = None;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut adam = AdamState::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let (mut sp, mut ss, mut so) = (0.0, 0.0, 0.0);
        for (step, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = bundle.gather(chunk)?;
            model.zero_grad();
            let bd = total_loss(&mut model, &x, &labels, &loss_cfg).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch} step {step}: {m}")),
                other => other,
            })?;
            adam.step(&mut model.params_mut()).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch} step {step}: {m}")),
                other => other,
            })?;
            let w = chunk.len() as f64;
            sp += bd.l_pair * w;
            ss += bd.l_state * w;
            so += bd.l_object * w;
        }
        let n = train_idx.len() as f64;
        let mut row = HistoryRow {
            epoch,
            l_pair: sp / n,
            l_state: ss / n,
            l_object: so / n,
            val_auc: None,
            val_hm: None,
        };
        let mut stop = false;
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let report = evaluate(&model, bundle, Partition::Val, InferenceRule::Must, 1)?;
            row.val_auc = Some(report.auc);
            row.val_hm = Some(report.best_hm);
            if best_val_auc.is_none_or(|b| report.auc > b) {
                best_val_auc = Some(report.auc);
                best_epoch = epoch;
                best = model.clone();
                stale = 0;
            } else {
                stale += 1;
                stop = cfg.patience > 0 && stale >= cfg.patience;
            }
        }
        history.push(row);
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_auc,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_resolve_published_values() {
        let expect = [
            (Profile::MitStates, 1.0, 1.5),
            (Profile::UtZappos, 1.0, 1.0),
            (Profile::Cgqa, 6.0, 1.0),
        ];
        for (p, gamma, lambda) in expect {
            let c = p.defaults();
            assert_eq!((c.loss.gamma, c.loss.lambda), (gamma, lambda));
            assert_eq!((c.lr, c.batch_size, c.embed_dim), (5e-5, 128, 512));
            assert_eq!(c.profile, p);
            assert_eq!(p.name().parse::<Profile>().unwrap(), p);
        }
        assert!("imagenet".parse::<Profile>().is_err());
    }

    #[test]
    fn ablation_variants() {
        let loss = LossConfig {
            gamma: 2.0,
            ..LossConfig::default()
        };
        let g = |a: Ablation| {
            let l = a.apply(&loss);
            (l.gamma, l.pair_gamma())
        };
        assert_eq!(g(Ablation::Base), (0.0, 0.0));
        assert_eq!(g(Ablation::Components), (2.0, 0.0));
        assert_eq!(g(Ablation::Composition), (0.0, 2.0));
        assert_eq!(g(Ablation::Full), (2.0, 2.0));
        assert_eq!(Ablation::Full.apply(&loss), loss);
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
    }

    #[test]
    fn history_csv_leaves_missing_evaluations_blank() {
        let rows = [
            HistoryRow { epoch: 1, l_pair: 1.5, l_state: 2.0, l_object: 0.25, val_auc: None, val_hm: None },
            HistoryRow { epoch: 2, l_pair: 1.0, l_state: 1.0, l_object: 0.125, val_auc: Some(0.5), val_hm: Some(0.25) },
        ];
        assert_eq!(
            history_csv(&rows),
            "epoch,l_pair,l_state,l_object,val_auc,val_hm\n1,1.5,2,0.25,,\n2,1,1,0.125,0.5,0.25\n"
        );
    }

    #[test]
    fn invalid_train_config() {
        for c in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { embed_dim: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }
}
