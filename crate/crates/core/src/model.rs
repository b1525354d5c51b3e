//! Embedding heads, label embedders and the three score matrices.
//!
//! Visual features go through three two-layer heads (state, object,
//! composition). Class prototypes come from frozen word vectors through
//! trainable projections; composition prototypes come from the concatenated
//! component word vectors through a pluggable [`PairEmbedder`]. Scores are
//! cosine similarities in the shared `k`-dimensional space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::infer::ScoreSet;
use crate::numerics::{
    cosine_rows, linear, linear_backward, norm, relu, relu_backward, Cosine, Param, Tensor,
};
use crate::space::{CompositionSpace, Pair, PairId};

/// Output width of every head and embedder by default.
pub const DEFAULT_EMBED_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 512,
            hidden_dim: DEFAULT_EMBED_DIM,
            embed_dim: DEFAULT_EMBED_DIM,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// A fully connected layer `y = xW + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    /// Kaiming-uniform weights (`±√(6/fan_in)`), bias in `±1/√fan_in`.
    pub fn init(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let wb = (6.0 / fan_in as f64).sqrt();
        let bb = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-wb..wb)).collect();
        let b = (0..fan_out).map(|_| rng.random_range(-bb..bb)).collect();
        Dense {
            weight: Param::new(format!("{name}.weight"), Tensor::from_vec(&[fan_in, fan_out], w).unwrap()),
            bias: Param::new(format!("{name}.bias"), Tensor::from_vec(&[fan_out], b).unwrap()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, &self.bias)
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        linear_backward(x, &mut self.weight, &mut self.bias, grad_out)
    }

    fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Linear → ReLU → Linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Dense,
    pub fc2: Dense,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl Mlp {
    pub fn init(name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            fc1: Dense::init(&format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Dense::init(&format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let pre = self.fc1.forward(x)?;
        let act = relu(&pre);
        let out = self.fc2.forward(&act)?;
        Ok((
            out,
            MlpCache {
                input: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MlpCache, grad_out: &Tensor) -> Result<Tensor> {
        let g_act = self.fc2.backward(&cache.act, grad_out)?;
        let g_pre = relu_backward(&cache.pre, &g_act)?;
        self.fc1.backward(&cache.input, &g_pre)
    }

    fn params(&self) -> Vec<&Param> {
        self.fc1.params().into_iter().chain(self.fc2.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.fc1
            .params_mut()
            .into_iter()
            .chain(self.fc2.params_mut())
            .collect()
    }
}

/// Maps visual features into the joint space.
pub type EmbeddingHead = Mlp;

/// Frozen word vectors for one component vocabulary plus a trainable
/// projection into the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbedder {
    pub words: Tensor,
    pub proj: Dense,
}

impl LabelEmbedder {
    pub fn prototypes(&self) -> Result<Tensor> {
        self.proj.forward(&self.words)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<()> {
        self.proj.backward(&self.words, grad).map(|_| ())
    }
}

/// Produces composition prototypes from component word vectors.
pub trait PairEmbedder {
    type Cache;

    fn embed(
        &self,
        state_words: &Tensor,
        object_words: &Tensor,
        pairs: &[Pair],
    ) -> Result<(Tensor, Self::Cache)>;

    fn backward(&mut self, cache: &Self::Cache, grad: &Tensor) -> Result<()>;

    fn params(&self) -> Vec<&Param>;

    fn params_mut(&mut self) -> Vec<&mut Param>;
}

/// Two-layer MLP over `[w_s ; w_o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPairEmbedder {
    pub mlp: Mlp,
}

impl MlpPairEmbedder {
    pub fn init(word_dim: usize, hidden: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        MlpPairEmbedder {
            mlp: Mlp::init("embed_pair", 2 * word_dim, hidden, k, rng),
        }
    }
}

impl PairEmbedder for MlpPairEmbedder {
    type Cache = MlpCache;

    fn embed(
        &self,
        state_words: &Tensor,
        object_words: &Tensor,
        pairs: &[Pair],
    ) -> Result<(Tensor, MlpCache)> {
        let wd = state_words.cols();
        let mut input = Vec::with_capacity(pairs.len() * 2 * wd);
        for p in pairs {
            if p.state >= state_words.rows() || p.object >= object_words.rows() {
                return Err(Error::MissingEmbedding(format!(
                    "no word vector for pair ({}, {})",
                    p.state, p.object
                )));
            }
            input.extend_from_slice(state_words.row(p.state));
            input.extend_from_slice(object_words.row(p.object));
        }
        let x = Tensor::from_vec(&[pairs.len(), 2 * wd], input)?;
        self.mlp.forward(&x)
    }

    fn backward(&mut self, cache: &MlpCache, grad: &Tensor) -> Result<()> {
        self.mlp.backward(cache, grad).map(|_| ())
    }

    fn params(&self) -> Vec<&Param> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.mlp.params_mut()
    }
}

/// Raw word vectors, one row per state / object in space order.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    pub states: Tensor,
    pub objects: Tensor,
}

impl WordVectors {
    pub fn dim(&self) -> usize {
        self.states.cols()
    }

    /// Deterministic unit vectors keyed by class name, see
    /// [`hashed_word_vector`].
    pub fn hashed(space: &CompositionSpace, dim: usize, seed: u64) -> Self {
        let table = |names: &[String]| {
            let rows: Vec<Vec<f64>> = names.iter().map(|n| hashed_word_vector(n, dim, seed)).collect();
            Tensor::from_vec(&[names.len(), dim], rows.concat()).unwrap()
        };
        WordVectors {
            states: table(space.state_names()),
            objects: table(space.object_names()),
        }
    }
}

/// Unit-norm Gaussian direction seeded by SHA-256 of `(seed, name)`.
/// Entries are rounded to `f32` so the vector survives the on-disk format
/// unchanged.
pub fn hashed_word_vector(name: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&v).max(f64::MIN_POSITIVE);
    v.iter_mut().for_each(|x| *x = (*x / n) as f32 as f64);
    v
}

/// Everything the backward pass needs from one forward pass.
pub struct Forward<C> {
    pub d_state: Tensor,
    pub d_object: Tensor,
    pub d_pair: Tensor,
    head_state: MlpCache,
    head_object: MlpCache,
    head_pair: MlpCache,
    cos_state: Cosine,
    cos_object: Cosine,
    cos_pair: Cosine,
    pair_cache: C,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MustModel<E = MlpPairEmbedder> {
    pub config: ModelConfig,
    pub space: CompositionSpace,
    pub head_state: EmbeddingHead,
    pub head_object: EmbeddingHead,
    pub head_pair: EmbeddingHead,
    pub embed_state: LabelEmbedder,
    pub embed_object: LabelEmbedder,
    pub embed_pair: E,
}

impl MustModel<MlpPairEmbedder> {
    /// Randomly initialised model with the MLP composition embedder.
    pub fn new(space: CompositionSpace, words: WordVectors, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        check_words(&space, &words)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, h, k, wd) = (config.feat_dim, config.hidden_dim, config.embed_dim, words.dim());
        let head_state = Mlp::init("head_state", d, h, k, &mut rng);
        let head_object = Mlp::init("head_object", d, h, k, &mut rng);
        let head_pair = Mlp::init("head_pair", d, h, k, &mut rng);
        let embed_state = LabelEmbedder {
            words: words.states,
            proj: Dense::init("embed_state.proj", wd, k, &mut rng),
        };
        let embed_object = LabelEmbedder {
            words: words.objects,
            proj: Dense::init("embed_object.proj", wd, k, &mut rng),
        };
        let embed_pair = MlpPairEmbedder::init(wd, h, k, &mut rng);
        Ok(MustModel {
            config,
            space,
            head_state,
            head_object,
            head_pair,
            embed_state,
            embed_object,
            embed_pair,
        })
    }
}

fn check_words(space: &CompositionSpace, words: &WordVectors) -> Result<()> {
    if words.states.rows() != space.n_states() {
        return Err(Error::MissingEmbedding(format!(
            "{} state word vectors for {} states",
            words.states.rows(),
            space.n_states()
        )));
    }
    if words.objects.rows() != space.n_objects() {
        return Err(Error::MissingEmbedding(format!(
            "{} object word vectors for {} objects",
            words.objects.rows(),
            space.n_objects()
        )));
    }
    if words.states.cols() != words.objects.cols() || words.dim() == 0 {
        return Err(Error::Shape(format!(
            "word vector widths differ: {} vs {}",
            words.states.cols(),
            words.objects.cols()
        )));
    }
    Ok(())
}

impl<E: PairEmbedder> MustModel<E> {
    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.head_state.params();
        v.extend(self.head_object.params());
        v.extend(self.head_pair.params());
        v.extend(self.embed_state.proj.params());
        v.extend(self.embed_object.proj.params());
        v.extend(self.embed_pair.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.head_state.params_mut();
        v.extend(self.head_object.params_mut());
        v.extend(self.head_pair.params_mut());
        v.extend(self.embed_state.proj.params_mut());
        v.extend(self.embed_object.proj.params_mut());
        v.extend(self.embed_pair.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    fn check_features(&self, x: &Tensor) -> Result<()> {
        x.expect_matrix("features")?;
        if x.cols() != self.config.feat_dim {
            return Err(Error::Shape(format!(
                "features have {} columns, model expects {}",
                x.cols(),
                self.config.feat_dim
            )));
        }
        Ok(())
    }

    fn resolve(&self, candidates: &[PairId]) -> Result<Vec<Pair>> {
        candidates.iter().map(|&id| self.space.pair(id)).collect()
    }

    /// Full forward pass: state and object scores over every class,
    /// composition scores over `candidates`.
    pub fn forward(&self, x: &Tensor, candidates: &[PairId]) -> Result<Forward<E::Cache>> {
        self.check_features(x)?;
        let pairs = self.resolve(candidates)?;

        let (h_s, head_state) = self.head_state.forward(x)?;
        let (h_o, head_object) = self.head_object.forward(x)?;
        let (h_p, head_pair) = self.head_pair.forward(x)?;

        let cos_state = cosine_rows(&h_s, &self.embed_state.prototypes()?)?;
        let cos_object = cosine_rows(&h_o, &self.embed_object.prototypes()?)?;
        let (protos, pair_cache) =
            self.embed_pair
                .embed(&self.embed_state.words, &self.embed_object.words, &pairs)?;
        let cos_pair = cosine_rows(&h_p, &protos)?;

        Ok(Forward {
            d_state: cos_state.out.clone(),
            d_object: cos_object.out.clone(),
            d_pair: cos_pair.out.clone(),
            head_state,
            head_object,
            head_pair,
            cos_state,
            cos_object,
            cos_pair,
            pair_cache,
        })
    }

    /// Accumulates parameter gradients given gradients of a scalar loss
    /// with respect to the three score matrices.
    pub fn backward(
        &mut self,
        fwd: &Forward<E::Cache>,
        grad_state: &Tensor,
        grad_object: &Tensor,
        grad_pair: &Tensor,
    ) -> Result<()> {
        let (gh, gp) = fwd.cos_state.backward(grad_state)?;
        self.head_state.backward(&fwd.head_state, &gh)?;
        self.embed_state.backward(&gp)?;

        let (gh, gp) = fwd.cos_object.backward(grad_object)?;
        self.head_object.backward(&fwd.head_object, &gh)?;
        self.embed_object.backward(&gp)?;

        let (gh, gp) = fwd.cos_pair.backward(grad_pair)?;
        self.head_pair.backward(&fwd.head_pair, &gh)?;
        self.embed_pair.backward(&fwd.pair_cache, &gp)?;
        Ok(())
    }

    /// `(D_s, D_o)`: cosine of each sample's state/object embedding with
    /// every state/object prototype.
    pub fn component_scores(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_features(x)?;
        let (h_s, _) = self.head_state.forward(x)?;
        let (h_o, _) = self.head_object.forward(x)?;
        let d_s = cosine_rows(&h_s, &self.embed_state.prototypes()?)?.out;
        let d_o = cosine_rows(&h_o, &self.embed_object.prototypes()?)?.out;
        Ok((d_s, d_o))
    }

    /// Composition scores against the given candidate pairs.
    pub fn composition_scores(&self, x: &Tensor, candidates: &[PairId]) -> Result<Tensor> {
        self.check_features(x)?;
        let pairs = self.resolve(candidates)?;
        let (h_p, _) = self.head_pair.forward(x)?;
        let (protos, _) =
            self.embed_pair
                .embed(&self.embed_state.words, &self.embed_object.words, &pairs)?;
        Ok(cosine_rows(&h_p, &protos)?.out)
    }

    /// Projected prototype of one composition.
    pub fn pair_prototype(&self, pair: Pair) -> Result<Tensor> {
        let (p, _) =
            self.embed_pair
                .embed(&self.embed_state.words, &self.embed_object.words, &[pair])?;
        let k = p.cols();
        Tensor::from_vec(&[k], p.into_data())
    }

    /// Scores of every sample against all states, objects and closed-world
    /// pairs.
    pub fn score_set(&self, x: &Tensor) -> Result<ScoreSet> {
        let all: Vec<PairId> = (0..self.space.n_pairs()).map(PairId).collect();
        let (d_state, d_object) = self.component_scores(x)?;
        let d_pair = self.composition_scores(x, &all)?;
        ScoreSet::new(d_state, d_object, d_pair)
    }
}
