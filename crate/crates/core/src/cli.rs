//! Command-line front end: `synth`, `train`, `eval` and `gradcheck`.
//!
//! Settings resolve in three layers: profile defaults, then the TOML run
//! config given by `--config`, then individual flags. The resolved
//! configuration is written next to every output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_bundle, load_checkpoint_for, save_bundle, save_checkpoint, synth_generate, Checkpoint, Partition, Split,
    SynthConfig,
};
use crate::error::{Error, Result};
use crate::infer::{score_pairs, InferenceRule};
use crate::loss::{CompositionObjective, LossConfig, LossObjective};
use crate::metrics::{bias_sweep, EvalReport};
use crate::model::MustModel;
use crate::numerics::{finite_diff_check, CheckConfig, GradReport};
use crate::train::{history_csv, train, Ablation, Profile, TrainConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Parser)]
#[command(name = "must", version, about = "Compositional zero-shot learning with component-aware re-weighting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset bundle.
    Synth(SynthArgs),
    /// Train a model on a bundle.
    Train(TrainArgs),
    /// Evaluate a checkpoint with one or all inference rules.
    Eval(EvalArgs),
    /// Compare analytic and numerical gradients of the full objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_profile)]
    pub profile: Option<Profile>,
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// must, base, max, equal, fixed or all.
    #[arg(long)]
    pub inference: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Report top-1 through top-k.
    #[arg(long, default_value_t = 1)]
    pub topk: usize,
    #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
    pub split: EvalSplit,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub curve_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradMode {
    Detached,
    Attached,
    Both,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, value_enum, default_value_t = GradMode::Detached)]
    pub mode: GradMode,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Coordinates sampled per parameter tensor; 0 checks all of them.
    #[arg(long, default_value_t = 64)]
    pub coords: usize,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

// ---------------------------------------------------------------------------
// run configuration file

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_pair: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_detached: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamp_weights: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub composition: Option<CompositionObjective>,
}

/// Contents of a `--config` file. Every section and key is optional;
/// unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<Profile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inference: Option<InferenceRule>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|reason| Error::format(path, reason))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string().trim_end().to_owned())
    }

    fn load_opt(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    /// Training configuration from the profile and this file's sections.
    pub fn resolve_train(&self, profile: Option<Profile>) -> TrainConfig {
        let profile = profile.or(self.profile).unwrap_or(Profile::Synth);
        let mut c = profile.defaults();
        if let Some(t) = &self.train {
            c.epochs = t.epochs.unwrap_or(c.epochs);
            c.batch_size = t.batch_size.unwrap_or(c.batch_size);
            c.lr = t.lr.unwrap_or(c.lr);
            c.hidden_dim = t.hidden_dim.unwrap_or(c.hidden_dim);
            c.embed_dim = t.embed_dim.unwrap_or(c.embed_dim);
            c.ablation = t.ablation.unwrap_or(c.ablation);
            c.eval_every = t.eval_every.unwrap_or(c.eval_every);
            c.patience = t.patience.unwrap_or(c.patience);
            c.seed = t.seed.unwrap_or(c.seed);
        }
        if let Some(l) = &self.loss {
            let d = &mut c.loss;
            d.gamma = l.gamma.unwrap_or(d.gamma);
            d.gamma_pair = l.gamma_pair.or(d.gamma_pair);
            d.lambda = l.lambda.unwrap_or(d.lambda);
            d.temperature = l.temperature.unwrap_or(d.temperature);
            d.weight_detached = l.weight_detached.unwrap_or(d.weight_detached);
            d.clamp_weights = l.clamp_weights.unwrap_or(d.clamp_weights);
            d.composition = l.composition.unwrap_or(d.composition);
        }
        c
    }

    /// The fully specified file for a resolved training configuration.
    pub fn from_train(c: &TrainConfig) -> Self {
        RunConfig {
            profile: Some(c.profile),
            synth: None,
            train: Some(TrainSection {
                epochs: Some(c.epochs),
                batch_size: Some(c.batch_size),
                lr: Some(c.lr),
                hidden_dim: Some(c.hidden_dim),
                embed_dim: Some(c.embed_dim),
                ablation: Some(c.ablation),
                eval_every: Some(c.eval_every),
                patience: Some(c.patience),
                seed: Some(c.seed),
            }),
            loss: Some(LossSection {
                gamma: Some(c.loss.gamma),
                gamma_pair: c.loss.gamma_pair,
                lambda: Some(c.loss.lambda),
                temperature: Some(c.loss.temperature),
                weight_detached: Some(c.loss.weight_detached),
                clamp_weights: Some(c.loss.clamp_weights),
                composition: Some(c.loss.composition),
            }),
            inference: None,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Training configuration after applying profile, file and flags.
pub fn resolve_train_args(args: &TrainArgs) -> Result<TrainConfig> {
    let file = RunConfig::load_opt(args.config.as_deref())?;
    let mut c = file.resolve_train(args.profile);
    c.ablation = args.ablation.unwrap_or(c.ablation);
    c.epochs = args.epochs.unwrap_or(c.epochs);
    c.batch_size = args.batch_size.unwrap_or(c.batch_size);
    c.lr = args.lr.unwrap_or(c.lr);
    c.loss.gamma = args.gamma.unwrap_or(c.loss.gamma);
    c.loss.lambda = args.lambda.unwrap_or(c.loss.lambda);
    c.eval_every = args.eval_every.unwrap_or(c.eval_every);
    c.patience = args.patience.unwrap_or(c.patience);
    c.seed = args.seed.unwrap_or(c.seed);
    c.validate()?;
    Ok(c)
}

// ---------------------------------------------------------------------------
// commands

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    }
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let file = RunConfig::load_opt(args.config.as_deref())?;
    let mut cfg = file.synth.unwrap_or_default();
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    let bundle = synth_generate(&cfg)?;
    save_bundle(&bundle, &args.out)?;
    let resolved = RunConfig {
        synth: Some(cfg),
        ..RunConfig::default()
    };
    write_file(&args.out.join(CONFIG_FILE), resolved.to_toml()?)?;
    let counts: Vec<String> = Split::ALL
        .iter()
        .map(|&s| format!("{}={}", s.name(), bundle.count(s)))
        .collect();
    writeln!(
        out,
        "wrote {} samples ({} seen / {} unseen pairs) to {}: {}",
        bundle.samples.len(),
        bundle.space.n_seen(),
        bundle.space.n_unseen(),
        args.out.display(),
        counts.join(" ")
    )
    .map_err(out_err)?;
    Ok(0)
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = resolve_train_args(args)?;
    let bundle = load_bundle(&args.data)?;
    let outcome = train(&bundle, &cfg)?;
    let resolved = RunConfig::from_train(&cfg);
    let snapshot = serde_json::to_value(&resolved).map_err(|e| Error::Config(e.to_string()))?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    save_checkpoint(&Checkpoint::new(outcome.best, snapshot), &args.out.join(CHECKPOINT_FILE))?;
    write_file(&args.out.join(HISTORY_FILE), history_csv(&outcome.history))?;
    write_file(&args.out.join(CONFIG_FILE), resolved.to_toml()?)?;
    let auc = outcome.best_val_auc.map_or("n/a".to_owned(), |a| format!("{a:.4}"));
    writeln!(
        out,
        "profile {} ablation {}: {} epochs run, best validation AUC {} at epoch {}",
        cfg.profile,
        cfg.ablation.name(),
        outcome.history.len(),
        auc,
        outcome.best_epoch
    )
    .map_err(out_err)?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct VariantReport {
    rule: InferenceRule,
    topk: Vec<EvalReport>,
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    split: &'static str,
    samples: usize,
    variants: Vec<VariantReport>,
}

fn eval_rules(args: &EvalArgs, file: &RunConfig) -> Result<Vec<InferenceRule>> {
    let from_file = file.inference;
    let alpha = args.alpha.or(match from_file {
        Some(InferenceRule::Fixed { alpha, .. }) => Some(alpha),
        _ => None,
    });
    let beta = args.beta.or(match from_file {
        Some(InferenceRule::Fixed { beta, .. }) => Some(beta),
        _ => None,
    });
    match args.inference.as_deref() {
        Some("all") => {
            let mut rules = vec![InferenceRule::Must, InferenceRule::Base, InferenceRule::Max, InferenceRule::Equal];
            if let (Some(a), Some(b)) = (alpha, beta) {
                rules.push(InferenceRule::fixed(a, b)?);
            }
            Ok(rules)
        }
        Some(name) => Ok(vec![InferenceRule::parse(name, alpha, beta)?]),
        None => match from_file {
            Some(InferenceRule::Fixed { .. }) => Ok(vec![InferenceRule::parse("fixed", alpha, beta)?]),
            Some(rule) => Ok(vec![rule]),
            None => Ok(vec![InferenceRule::Must]),
        },
    }
}

/// `curve.csv` becomes `curve-<rule>.csv` when several rules are reported.
fn variant_path(path: &Path, rule: &str, many: bool) -> PathBuf {
    if !many {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-{rule}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{rule}"),
    };
    path.with_file_name(name)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let file = RunConfig::load_opt(args.config.as_deref())?;
    let rules = eval_rules(args, &file)?;
    let bundle = load_bundle(&args.data)?;
    let ckpt = load_checkpoint_for(&args.ckpt, &bundle.space, None)?;
    let model: &MustModel = &ckpt.model;
    if args.topk == 0 || args.topk > bundle.space.n_pairs() {
        return Err(Error::Config(format!(
            "--topk must be in 1..={}, got {}",
            bundle.space.n_pairs(),
            args.topk
        )));
    }
    let part = match args.split {
        EvalSplit::Val => Partition::Val,
        EvalSplit::Test => Partition::Test,
    };
    let (x, labels) = bundle.partition(part)?;
    let scores = model.score_set(&x)?;

    writeln!(out, "{:<8} {:>2} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "rule", "k", "auc", "best_hm", "seen", "unseen", "acc_adj", "acc_obj")
        .map_err(out_err)?;
    let mut variants = Vec::with_capacity(rules.len());
    for rule in rules {
        let pair_scores = score_pairs(rule, &scores, &model.space)?;
        let mut topk = Vec::with_capacity(args.topk);
        for k in 1..=args.topk {
            let r = bias_sweep(&pair_scores, &labels, &model.space, k)?;
            writeln!(
                out,
                "{:<8} {:>2} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                rule.name(),
                k,
                r.auc,
                r.best_hm,
                r.best_seen,
                r.best_unseen,
                r.acc_adj,
                r.acc_obj
            )
            .map_err(out_err)?;
            topk.push(r);
        }
        variants.push(VariantReport { rule, topk });
    }
    let many = variants.len() > 1;
    if let Some(curve) = &args.curve_csv {
        for v in &variants {
            write_file(&variant_path(curve, v.rule.name(), many), v.topk[0].curve_csv())?;
        }
    }
    let report = EvalOutput {
        split: match part {
            Partition::Val => "val",
            Partition::Test => "test",
        },
        samples: labels.len(),
        variants,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&args.report, json + "\n")?;
    Ok(0)
}

/// Runs the gradient check on a desk-sized synthetic batch and model.
pub fn gradcheck_reports(args: &GradcheckArgs) -> Result<Vec<(&'static str, GradReport)>> {
    let synth = SynthConfig {
        seed: args.seed,
        ..SynthConfig::default()
    };
    let bundle = synth_generate(&synth)?;
    let train_idx = bundle.indices(&[Split::Train]);
    if args.batch == 0 || args.batch > train_idx.len() {
        return Err(Error::Config(format!("--batch must be in 1..={}", train_idx.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut pick: Vec<usize> = index::sample(&mut rng, train_idx.len(), args.batch)
        .into_iter()
        .map(|i| train_idx[i])
        .collect();
    pick.sort_unstable();
    let (x, labels) = bundle.gather(&pick)?;

    let mut tc = Profile::Synth.defaults();
    tc.seed = args.seed;
    let modes: &[(&'static str, bool)] = match args.mode {
        GradMode::Detached => &[("detached", true)],
        GradMode::Attached => &[("attached", false)],
        GradMode::Both => &[("detached", true), ("attached", false)],
    };
    let check = CheckConfig {
        tol: args.tol,
        max_coords: args.coords,
        seed: args.seed,
        ..CheckConfig::default()
    };
    let mut reports = Vec::with_capacity(modes.len());
    for &(name, detached) in modes {
        let loss = LossConfig {
            gamma: args.gamma,
            lambda: args.lambda,
            weight_detached: detached,
            ..LossConfig::default()
        };
        let model = MustModel::new(bundle.space.clone(), bundle.words.clone(), tc.model_config(bundle.feat_dim()))?;
        let mut obj = LossObjective::new(model, x.clone(), labels.clone(), loss)?;
        reports.push((name, finite_diff_check(&mut obj, &check)?));
    }
    Ok(reports)
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let reports = gradcheck_reports(args)?;
    let mut ok = true;
    for (mode, report) in &reports {
        writeln!(
            out,
            "gradcheck mode={mode} seed={} batch={} coords={} tol={:e} loss={:.6}",
            args.seed, args.batch, args.coords, args.tol, report.loss
        )
        .map_err(out_err)?;
        writeln!(out, "{:<28} {:>6} {:>12}  status", "parameter", "coords", "max_rel_err").map_err(out_err)?;
        for p in &report.params {
            let status = if p.passed { "ok" } else { "FAIL" };
            writeln!(out, "{:<28} {:>6} {:>12.3e}  {status}", p.name, p.coords, p.max_rel_err).map_err(out_err)?;
        }
        let failed: Vec<&str> = report.params.iter().filter(|p| !p.passed).map(|p| p.name.as_str()).collect();
        if failed.is_empty() {
            writeln!(out, "result: PASS ({} parameters)", report.params.len()).map_err(out_err)?;
        } else {
            ok = false;
            writeln!(out, "result: FAIL in {}", failed.join(", ")).map_err(out_err)?;
        }
    }
    Ok(if ok { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = RunConfig::parse("profile = \"synth\"\n[train]\nepochz = 3\n").unwrap_err();
        assert!(err.contains("epochz"), "{err}");
        assert!(err.contains("line 3"), "{err}");
        assert!(RunConfig::parse("profile = \"imagenet\"\n").is_err());
    }

    #[test]
    fn layers_apply_in_order() {
        let file = RunConfig::parse("profile = \"cgqa\"\n[train]\nepochs = 7\n[loss]\nlambda = 2.5\n").unwrap();
        let c = file.resolve_train(None);
        assert_eq!((c.profile, c.epochs, c.loss.gamma, c.loss.lambda), (Profile::Cgqa, 7, 6.0, 2.5));
        let c = file.resolve_train(Some(Profile::MitStates));
        assert_eq!((c.loss.gamma, c.loss.lambda), (1.0, 2.5));
    }

    #[test]
    fn resolved_config_round_trips() {
        for p in Profile::ALL {
            let c = p.defaults();
            let text = RunConfig::from_train(&c).to_toml().unwrap();
            let back = RunConfig::parse(&text).unwrap().resolve_train(None);
            assert_eq!(back, c);
        }
    }

    #[test]
    fn inference_section_parses() {
        let f = RunConfig::parse("[inference]\nrule = \"fixed\"\nalpha = 0.25\nbeta = 0.75\n").unwrap();
        assert_eq!(f.inference, Some(InferenceRule::Fixed { alpha: 0.25, beta: 0.75 }));
    }

    #[test]
    fn variant_paths() {
        let p = Path::new("out/curve.csv");
        assert_eq!(variant_path(p, "must", false), PathBuf::from("out/curve.csv"));
        assert_eq!(variant_path(p, "max", true), PathBuf::from("out/curve-max.csv"));
    }
}
