//! Dataset bundles, the synthetic generator and checkpoint files.
//!
//! A bundle directory holds three files:
//!
//! * `metadata.toml`: class names, pairs with their split and samples.
//! * `features.bin`: one visual feature row per sample.
//! * `embeddings.bin`: word vectors, state rows first, then object rows.
//!
//! Both binary files use the same layout: the magic `MUSTFEAT`, a `u32`
//! version (1), a `u64` row count, a `u32` row width, then `f32` values in
//! row-major order. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MustModel, WordVectors};
use crate::numerics::{norm, Tensor};
use crate::space::{hex_string, CompositionSpace, Pair, PairId, PairSplit};

pub const METADATA_FILE: &str = "metadata.toml";
pub const FEATURES_FILE: &str = "features.bin";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";

const MATRIX_MAGIC: &[u8; 8] = b"MUSTFEAT";
const MATRIX_VERSION: u32 = 1;
const BUNDLE_FORMAT: &str = "must-bundle";
const BUNDLE_VERSION: u32 = 1;
const CKPT_MAGIC: &[u8; 8] = b"MUSTCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::ValSeen,
        Split::ValUnseen,
        Split::TestSeen,
        Split::TestUnseen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValSeen => "val_seen",
            Split::ValUnseen => "val_unseen",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }

    /// Whether samples of this split must carry a seen pair.
    pub fn expects_seen(self) -> bool {
        matches!(self, Split::Train | Split::ValSeen | Split::TestSeen)
    }
}

/// Evaluation partitions, each covering both its seen and unseen split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Val,
    Test,
}

impl Partition {
    fn splits(self) -> [Split; 2] {
        match self {
            Partition::Val => [Split::ValSeen, Split::ValUnseen],
            Partition::Test => [Split::TestSeen, Split::TestUnseen],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub feature: usize,
    pub pair: Pair,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub features: Tensor,
    pub samples: Vec<Sample>,
    pub space: CompositionSpace,
    pub words: WordVectors,
}

impl DatasetBundle {
    /// Validates indices and split hygiene.
    pub fn new(features: Tensor, samples: Vec<Sample>, space: CompositionSpace, words: WordVectors) -> Result<Self> {
        features.expect_matrix("features")?;
        if words.states.rows() != space.n_states() || words.objects.rows() != space.n_objects() {
            return Err(Error::MissingEmbedding(format!(
                "{} + {} word vectors for {} states and {} objects",
                words.states.rows(),
                words.objects.rows(),
                space.n_states(),
                space.n_objects()
            )));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.feature >= features.rows() {
                return Err(Error::Shape(format!(
                    "sample {i} points at feature row {} of {}",
                    s.feature,
                    features.rows()
                )));
            }
            let id = space.pair_id(s.pair)?.ok_or_else(|| {
                Error::SplitViolation(format!("sample {i} carries a pair outside the closed world"))
            })?;
            if space.is_seen_id(id) != s.split.expects_seen() {
                let p = space.pair(id)?;
                return Err(Error::SplitViolation(format!(
                    "sample {i} in split {} carries {} pair ({}, {})",
                    s.split.name(),
                    if space.is_seen_id(id) { "seen" } else { "unseen" },
                    space.state_names()[p.state],
                    space.object_names()[p.object]
                )));
            }
        }
        Ok(DatasetBundle {
            features,
            samples,
            space,
            words,
        })
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn indices(&self, splits: &[Split]) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| splits.contains(&self.samples[i].split))
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    /// Feature rows and labels for a list of sample indices.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<Pair>)> {
        let rows: Vec<usize> = idx.iter().map(|&i| self.samples[i].feature).collect();
        let labels = idx.iter().map(|&i| self.samples[i].pair).collect();
        Ok((self.features.select_rows(&rows)?, labels))
    }

    /// Features and closed-world pair ids of a validation or test partition.
    pub fn partition(&self, part: Partition) -> Result<(Tensor, Vec<PairId>)> {
        let (x, pairs) = self.gather(&self.indices(&part.splits()))?;
        let ids = pairs
            .into_iter()
            .map(|p| {
                self.space
                    .pair_id(p)?
                    .ok_or_else(|| Error::SplitViolation("label outside the closed world".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((x, ids))
    }
}

// ---------------------------------------------------------------------------
// binary matrices

/// Writes a matrix in the `MUSTFEAT` layout; values are narrowed to `f32`.
pub fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    t.expect_matrix("matrix")?;
    let mut buf = Vec::with_capacity(24 + t.len() * 4);
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 {
        return Err(Error::format(path, "file shorter than its header"));
    }
    if &bytes[..8] != MATRIX_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
    let expected = n
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format(path, "header sizes overflow"))?;
    let body = &bytes[24..];
    if body.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} payload bytes for {n}x{dim}, found {}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::from_vec(&[n, dim], data)
}

// ---------------------------------------------------------------------------
// metadata

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    format: String,
    version: u32,
    states: Vec<String>,
    objects: Vec<String>,
    pairs: Vec<(String, String, PairSplit)>,
    samples: Vec<(usize, usize, usize, Split)>,
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_owned()).to_string()
}

fn render_metadata(b: &DatasetBundle) -> String {
    let list = |names: &[String]| names.iter().map(|n| toml_string(n)).collect::<Vec<_>>().join(", ");
    let sp = &b.space;
    let mut out = format!(
        "format = \"{BUNDLE_FORMAT}\"\nversion = {BUNDLE_VERSION}\nstates = [{}]\nobjects = [{}]\n\npairs = [\n",
        list(sp.state_names()),
        list(sp.object_names())
    );
    for (i, p) in sp.closed_pairs().iter().enumerate() {
        let tag = if sp.is_seen_id(PairId(i)) { "seen" } else { "unseen" };
        out.push_str(&format!(
            "  [{}, {}, \"{tag}\"],\n",
            toml_string(&sp.state_names()[p.state]),
            toml_string(&sp.object_names()[p.object])
        ));
    }
    out.push_str("]\n\nsamples = [\n");
    for s in &b.samples {
        out.push_str(&format!(
            "  [{}, {}, {}, \"{}\"],\n",
            s.feature,
            s.pair.state,
            s.pair.object,
            s.split.name()
        ));
    }
    out.push_str("]\n");
    out
}

pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = dir.join(METADATA_FILE);
    fs::write(&meta, render_metadata(bundle)).map_err(|e| Error::io(&meta, e))?;
    write_matrix(&dir.join(FEATURES_FILE), &bundle.features)?;
    let words = Tensor::from_vec(
        &[bundle.space.n_states() + bundle.space.n_objects(), bundle.words.dim()],
        [bundle.words.states.data(), bundle.words.objects.data()].concat(),
    )?;
    write_matrix(&dir.join(EMBEDDINGS_FILE), &words)
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let meta_path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Metadata = toml::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if meta.format != BUNDLE_FORMAT || meta.version != BUNDLE_VERSION {
        return Err(Error::format(
            &meta_path,
            format!("expected {BUNDLE_FORMAT} version {BUNDLE_VERSION}, found {} version {}", meta.format, meta.version),
        ));
    }
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for (s, o, tag) in &meta.pairs {
        match tag {
            PairSplit::Seen => seen.push((s.as_str(), o.as_str())),
            PairSplit::Unseen => unseen.push((s.as_str(), o.as_str())),
        }
    }
    let space = CompositionSpace::new(meta.states.clone(), meta.objects.clone(), &seen, &unseen)?;

    let features = read_matrix(&dir.join(FEATURES_FILE))?;
    let emb_path = dir.join(EMBEDDINGS_FILE);
    let emb = read_matrix(&emb_path)?;
    let (ns, no) = (space.n_states(), space.n_objects());
    if emb.rows() != ns + no {
        return Err(Error::format(
            &emb_path,
            format!("{} word vectors for {ns} states and {no} objects", emb.rows()),
        ));
    }
    let d = emb.cols();
    let words = WordVectors {
        states: Tensor::from_vec(&[ns, d], emb.data()[..ns * d].to_vec())?,
        objects: Tensor::from_vec(&[no, d], emb.data()[ns * d..].to_vec())?,
    };

    let mut samples = Vec::with_capacity(meta.samples.len());
    for (i, &(feature, state, object, split)) in meta.samples.iter().enumerate() {
        if feature >= features.rows() {
            return Err(Error::format(
                &meta_path,
                format!("sample {i}: feature index {feature} but only {} rows", features.rows()),
            ));
        }
        if state >= ns || object >= no {
            return Err(Error::format(
                &meta_path,
                format!("sample {i}: component index ({state}, {object}) out of range"),
            ));
        }
        samples.push(Sample {
            feature,
            pair: Pair::new(state, object),
            split,
        });
    }
    DatasetBundle::new(features, samples, space, words)
}

// ---------------------------------------------------------------------------
// synthetic generator

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_states: usize,
    pub n_objects: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub samples_per_pair: usize,
    pub feat_dim: usize,
    pub word_dim: usize,
    /// Per-state deviation scales; heavy-tailed quantiles when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_sigma: Option<Vec<f64>>,
    /// Per-object deviation scales; `object_sigma_default` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object_sigma: Option<Vec<f64>>,
    pub state_sigma_scale: f64,
    pub state_sigma_tail: f64,
    pub object_sigma_default: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_states: 12,
            n_objects: 10,
            n_seen: 60,
            n_unseen: 20,
            samples_per_pair: 30,
            feat_dim: 64,
            word_dim: 32,
            state_sigma: None,
            object_sigma: None,
            state_sigma_scale: 0.2,
            state_sigma_tail: 1.5,
            object_sigma_default: 0.35,
            noise: 1.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Pareto quantiles `scale · (1 − q)^(−1/tail)` at `q = (s + ½) / n`.
    pub fn state_sigmas(&self) -> Vec<f64> {
        self.state_sigma.clone().unwrap_or_else(|| {
            (0..self.n_states)
                .map(|s| {
                    let q = (s as f64 + 0.5) / self.n_states as f64;
                    self.state_sigma_scale * (1.0 - q).powf(-1.0 / self.state_sigma_tail)
                })
                .collect()
        })
    }

    pub fn object_sigmas(&self) -> Vec<f64> {
        self.object_sigma
            .clone()
            .unwrap_or_else(|| vec![self.object_sigma_default; self.n_objects])
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_states == 0 || self.n_objects == 0 || self.feat_dim == 0 || self.word_dim == 0 {
            return err("class counts and dimensions must be positive".into());
        }
        if self.samples_per_pair < 2 {
            return err("samples_per_pair must be at least 2".into());
        }
        if self.n_seen == 0 || self.n_unseen == 0 {
            return err("both seen and unseen pair counts must be positive".into());
        }
        if self.n_seen + self.n_unseen > self.n_states * self.n_objects {
            return err(format!(
                "{} pairs requested but only {} exist",
                self.n_seen + self.n_unseen,
                self.n_states * self.n_objects
            ));
        }
        let (ss, os) = (self.state_sigmas(), self.object_sigmas());
        if ss.len() != self.n_states || os.len() != self.n_objects {
            return err(format!(
                "{} state and {} object deviation scales for {} states and {} objects",
                ss.len(),
                os.len(),
                self.n_states,
                self.n_objects
            ));
        }
        if ss.iter().chain(&os).any(|s| !(s.is_finite() && *s >= 0.0)) {
            return err("deviation scales must be finite and >= 0".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return err(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if !(self.state_sigma_tail > 0.0) {
            return err("state_sigma_tail must be positive".into());
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v = gaussian(rng, dim, 1.0);
    let n = norm(&v);
    v.iter().map(|x| x / n).collect()
}

/// Seen pairs first cover every state and object, then fill up in shuffled
/// order; unseen pairs are drawn from what remains.
fn choose_pairs(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<Pair>, Vec<Pair>)> {
    let mut all: Vec<Pair> = (0..cfg.n_states)
        .flat_map(|s| (0..cfg.n_objects).map(move |o| Pair::new(s, o)))
        .collect();
    all.shuffle(rng);
    let mut has_state = vec![false; cfg.n_states];
    let mut has_object = vec![false; cfg.n_objects];
    let mut taken = vec![false; all.len()];
    let mut seen = Vec::with_capacity(cfg.n_seen);
    for (i, p) in all.iter().enumerate() {
        if !has_state[p.state] || !has_object[p.object] {
            has_state[p.state] = true;
            has_object[p.object] = true;
            taken[i] = true;
            seen.push(*p);
        }
    }
    if seen.len() > cfg.n_seen {
        return Err(Error::SplitViolation(format!(
            "{} seen pairs cannot cover {} states and {} objects",
            cfg.n_seen, cfg.n_states, cfg.n_objects
        )));
    }
    let mut rest = all.iter().zip(&taken).filter(|(_, &t)| !t).map(|(p, _)| *p);
    seen.extend(rest.by_ref().take(cfg.n_seen - seen.len()));
    let unseen: Vec<Pair> = rest.take(cfg.n_unseen).collect();
    Ok((seen, unseen))
}

/// Generates a bundle where each pair's samples share a fixed perturbation
/// of the two component prototypes, scaled per class.
pub fn synth_generate(cfg: &SynthConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (seen, unseen) = choose_pairs(cfg, &mut rng)?;
    let width = |n: usize| n.saturating_sub(1).max(1).to_string().len();
    let states: Vec<String> = (0..cfg.n_states).map(|s| format!("state{s:0w$}", w = width(cfg.n_states))).collect();
    let objects: Vec<String> = (0..cfg.n_objects).map(|o| format!("object{o:0w$}", w = width(cfg.n_objects))).collect();
    let name_pairs = |ps: &[Pair]| -> Vec<(String, String)> {
        ps.iter().map(|p| (states[p.state].clone(), objects[p.object].clone())).collect()
    };
    let space = CompositionSpace::new(states.clone(), objects.clone(), &name_pairs(&seen), &name_pairs(&unseen))?;

    let d = cfg.feat_dim;
    let proto_s: Vec<Vec<f64>> = (0..cfg.n_states).map(|_| unit(&mut rng, d)).collect();
    let proto_o: Vec<Vec<f64>> = (0..cfg.n_objects).map(|_| unit(&mut rng, d)).collect();
    let (sig_s, sig_o) = (cfg.state_sigmas(), cfg.object_sigmas());
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let n = space.n_pairs() * cfg.samples_per_pair;
    let mut features = Vec::with_capacity(n * d);
    let mut samples = Vec::with_capacity(n);
    for (id, &p) in space.closed_pairs().iter().enumerate() {
        let eps_s = gaussian(&mut rng, d, inv_sqrt_d);
        let eps_o = gaussian(&mut rng, d, inv_sqrt_d);
        let mut base: Vec<f64> = (0..d)
            .map(|j| proto_s[p.state][j] + sig_s[p.state] * eps_s[j] + proto_o[p.object][j] + sig_o[p.object] * eps_o[j])
            .collect();
        let bn = norm(&base);
        if bn > 0.0 {
            base.iter_mut().for_each(|v| *v /= bn);
        }
        let mut order: Vec<usize> = (0..cfg.samples_per_pair).collect();
        order.shuffle(&mut rng);
        let seen_pair = space.is_seen_id(PairId(id));
        for &slot in &order {
            let noise = gaussian(&mut rng, d, cfg.noise * inv_sqrt_d);
            features.extend(base.iter().zip(&noise).map(|(b, e)| (b + e) as f32 as f64));
            let frac = slot as f64 / cfg.samples_per_pair as f64;
            let split = if seen_pair {
                if frac < 0.6 {
                    Split::Train
                } else if frac < 0.8 {
                    Split::ValSeen
                } else {
                    Split::TestSeen
                }
            } else if frac < 0.5 {
                Split::ValUnseen
            } else {
                Split::TestUnseen
            };
            samples.push(Sample {
                feature: samples.len(),
                pair: p,
                split,
            });
        }
    }
    let features = Tensor::from_vec(&[n, d], features)?;
    let words = WordVectors::hashed(&space, cfg.word_dim, cfg.seed);
    DatasetBundle::new(features, samples, space, words)
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    model: ModelConfig,
    states: Vec<String>,
    objects: Vec<String>,
    seen: Vec<(usize, usize)>,
    unseen: Vec<(usize, usize)>,
    space_fingerprint: String,
    config_hash: String,
    snapshot: serde_json::Value,
}

/// A trained model plus the resolved run configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MustModel,
    pub snapshot: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: MustModel, snapshot: serde_json::Value) -> Self {
        Checkpoint { model, snapshot }
    }

    /// SHA-256 over the model configuration and the run snapshot.
    pub fn config_hash(&self) -> String {
        config_hash(&self.model.config, &self.snapshot)
    }
}

fn config_hash(model: &ModelConfig, snapshot: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model).expect("model config serializes"));
    h.update([0u8]);
    h.update(serde_json::to_vec(snapshot).expect("snapshot serializes"));
    hex_string(&h.finalize())
}

fn named_tensors(model: &MustModel) -> Vec<(String, &Tensor)> {
    let mut out = vec![
        ("words.states".to_owned(), &model.embed_state.words),
        ("words.objects".to_owned(), &model.embed_object.words),
    ];
    out.extend(model.params().into_iter().map(|p| (p.name.clone(), &p.value)));
    out
}

fn pair_list(ps: &[Pair]) -> Vec<(usize, usize)> {
    ps.iter().map(|p| (p.state, p.object)).collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let m = &ckpt.model;
    let header = CheckpointHeader {
        model: m.config.clone(),
        states: m.space.state_names().to_vec(),
        objects: m.space.object_names().to_vec(),
        seen: pair_list(m.space.seen_pairs()),
        unseen: pair_list(m.space.unseen_pairs()),
        space_fingerprint: m.space.fingerprint(),
        config_hash: ckpt.config_hash(),
        snapshot: ckpt.snapshot.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
    let tensors = named_tensors(m);
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let hlen = r.u64()?;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(path, e.to_string()))?;
    let to_pairs = |v: &[(usize, usize)]| v.iter().map(|&(s, o)| Pair::new(s, o)).collect::<Vec<_>>();
    let space = CompositionSpace::new(
        header.states.clone(),
        header.objects.clone(),
        &name_pairs(&header.states, &header.objects, &to_pairs(&header.seen))?,
        &name_pairs(&header.states, &header.objects, &to_pairs(&header.unseen))?,
    )?;
    if space.fingerprint() != header.space_fingerprint {
        return Err(Error::format(path, "space fingerprint does not match its pairs"));
    }

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = r
            .take(len.checked_mul(8).ok_or_else(|| Error::format(path, "tensor size overflows"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensors"));
    }
    let mut tensors = tensors.into_iter();
    let mut next = |expect: &str| -> Result<Tensor> {
        match tensors.next() {
            Some((name, t)) if name == expect => Ok(t),
            Some((name, _)) => Err(Error::format(path, format!("expected tensor {expect}, found {name}"))),
            None => Err(Error::format(path, format!("missing tensor {expect}"))),
        }
    };
    let words = WordVectors {
        states: next("words.states")?,
        objects: next("words.objects")?,
    };
    let mut model = MustModel::new(space, words, header.model)?;
    for p in model.params_mut() {
        let t = next(&p.name)?;
        if t.shape() != p.value.shape() {
            return Err(Error::format(
                path,
                format!("tensor {} has shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape()),
            ));
        }
        p.value = t;
    }
    if tensors.next().is_some() {
        return Err(Error::format(path, "unexpected extra tensors"));
    }
    let ckpt = Checkpoint {
        model,
        snapshot: header.snapshot,
    };
    if ckpt.config_hash() != header.config_hash {
        return Err(Error::format(path, "stored config hash does not match its contents"));
    }
    Ok(ckpt)
}

fn name_pairs(states: &[String], objects: &[String], ps: &[Pair]) -> Result<Vec<(String, String)>> {
    ps.iter()
        .map(|p| match (states.get(p.state), objects.get(p.object)) {
            (Some(s), Some(o)) => Ok((s.clone(), o.clone())),
            _ => Err(Error::UnknownComponent(format!("pair index ({}, {})", p.state, p.object))),
        })
        .collect()
}

/// Loads a checkpoint and checks it against the space it will be used
/// with and, optionally, the configuration hash of a run to resume.
pub fn load_checkpoint_for(path: &Path, space: &CompositionSpace, config_hash: Option<&str>) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.model.space.fingerprint() != space.fingerprint() {
        return Err(Error::Compat(format!(
            "{} was trained on a different composition space",
            path.display()
        )));
    }
    if let Some(h) = config_hash {
        if ckpt.config_hash() != h {
            return Err(Error::Compat(format!(
                "{} was written with a different configuration",
                path.display()
            )));
        }
    }
    Ok(ckpt)
}
