//! The set autoencoder, its fixed-order baseline and the classification head.
//!
//! Sets enter as `d_in × n` matrices (one column per element). Every model
//! shares the same encoder shape: a two-layer per-element MLP, a pooling
//! step (FSPool or sum/mean/max), and a two-layer MLP down to the latent
//! column. The equivariant decoder mirrors it with a two-layer MLP,
//! FSUnpool, an unsort through the encoder's stored permutations and a
//! per-element MLP; the baseline decoder is one MLP that emits all
//! `n_max` elements in a fixed order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fspool::{self, BaselinePool, CalibratorWeights, StoredPerm, WeightInit};
use crate::sortops::{self, SortMode};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in registration order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }
}

/// Parameters registered as leaves of one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Registers every parameter; those rejected by `trainable` become constants.
    pub fn new(g: &mut Graph, params: &ParamSet, trainable: impl Fn(ParamId) -> bool) -> Self {
        let vars = params
            .ids()
            .map(|id| {
                let v = params.get(id).clone();
                if trainable(id) {
                    g.leaf(v)
                } else {
                    g.constant(v)
                }
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Substitutes `v` for one parameter.
    pub fn with_var(mut self, id: ParamId, v: Var) -> Self {
        self.vars[id.0] = v;
        self
    }
}

fn glorot(out: usize, inp: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (inp + out) as f64).sqrt();
    Tensor::new(
        vec![out, inp],
        (0..out * inp)
            .map(|_| rng.random_range(-limit..limit))
            .collect(),
    )
    .expect("positive dims")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new(
        ps: &mut ParamSet,
        name: &str,
        layer: usize,
        inp: usize,
        out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.add(format!("{name}.w{layer}"), glorot(out, inp, rng));
        let b = ps.add(format!("{name}.b{layer}"), Tensor::zeros(&[out, 1]));
        Self { w, b }
    }

    /// `W x + b`, applied to every column of `x`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(p.var(self.w), x)?;
        g.add(h, p.var(self.b))
    }
}

/// Linear, relu, linear.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    fn new(ps: &mut ParamSet, name: &str, dims: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            first: Linear::new(ps, name, 0, dims[0], dims[1], rng),
            second: Linear::new(ps, name, 1, dims[1], dims[2], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.second.forward(g, p, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    Fspool,
    Sum,
    Mean,
    Max,
}

impl PoolKind {
    fn baseline(self) -> Option<BaselinePool> {
        match self {
            PoolKind::Fspool => None,
            PoolKind::Sum => Some(BaselinePool::Sum),
            PoolKind::Mean => Some(BaselinePool::Mean),
            PoolKind::Max => Some(BaselinePool::Max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    /// FSUnpool decoder that unsorts through the encoder's permutations.
    Equivariant,
    /// MLP emitting `d_out × n_max` in a fixed order.
    Mlp,
    /// Encoder only (classification).
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub decoder: DecoderKind,
    pub pool: PoolKind,
    pub d_in: usize,
    pub d_out: usize,
    pub hidden: usize,
    pub latent: usize,
    /// Calibrator knots for FSPool / FSUnpool.
    pub knots: usize,
    /// Output size of the MLP decoder.
    pub n_max: usize,
    pub w_init: WeightInit,
    /// Decoder unsorts only the first `m` feature rows when set.
    pub perm_subset: Option<usize>,
    /// Hidden width of the classification head; no head when `None`.
    pub classifier_hidden: Option<usize>,
    pub classes: usize,
}

impl ModelConfig {
    /// Polygon autoencoder: hidden 16, latent 1.
    pub fn polygon(decoder: DecoderKind, pool: PoolKind, n: usize) -> Self {
        Self {
            decoder,
            pool,
            d_in: 2,
            d_out: 2,
            hidden: 16,
            latent: 1,
            knots: fspool::DEFAULT_KNOTS,
            n_max: n,
            w_init: WeightInit::Ones,
            perm_subset: None,
            classifier_hidden: None,
            classes: 10,
        }
    }

    /// MNIST set models: hidden 32, latent 16, `n_max` 342.
    pub fn mnist(decoder: DecoderKind, pool: PoolKind, mask_feature: bool) -> Self {
        let d = if mask_feature { 3 } else { 2 };
        Self {
            decoder,
            pool,
            d_in: d,
            d_out: d,
            hidden: 32,
            latent: 16,
            knots: fspool::DEFAULT_KNOTS,
            n_max: crate::data::MNIST_N_MAX,
            w_init: WeightInit::Ones,
            perm_subset: None,
            classifier_hidden: None,
            classes: 10,
        }
    }

    pub fn with_classifier(mut self, hidden: usize) -> Self {
        self.classifier_hidden = Some(hidden);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_in,
            self.d_out,
            self.hidden,
            self.latent,
            self.n_max,
            self.classes,
        ];
        if positive.contains(&0) {
            return Err(Error::Invalid(format!("zero-sized layer in {self:?}")));
        }
        if self.knots < 2
            && (self.pool == PoolKind::Fspool || self.decoder == DecoderKind::Equivariant)
        {
            return Err(Error::Invalid("calibrator needs at least 2 knots".into()));
        }
        if self.decoder == DecoderKind::Equivariant && self.pool != PoolKind::Fspool {
            return Err(Error::Invalid(
                "the equivariant decoder needs the permutations of an FSPool encoder".into(),
            ));
        }
        if let Some(m) = self.perm_subset {
            if m > self.hidden {
                return Err(Error::Invalid(format!(
                    "perm subset {m} exceeds {} features",
                    self.hidden
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Encoder {
    pub element: Mlp2,
    pub pool: Option<ParamId>,
    pub post: Mlp2,
}

#[derive(Debug, Clone, Copy)]
pub enum Decoder {
    Equivariant {
        pre: Mlp2,
        unpool: ParamId,
        element: Mlp2,
    },
    Mlp(Mlp2),
    None,
}

/// Sort settings used by the FSPool encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardOptions {
    pub sort: SortMode,
    pub tau: f64,
    /// Replace the latent column with zeros before decoding.
    pub zero_latent: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            sort: SortMode::Hard,
            tau: 1.0,
            zero_latent: false,
        }
    }
}

pub struct Encoded {
    pub latent: Var,
    pub perm: Option<StoredPerm>,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct SetModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub classifier: Option<Mlp2>,
}

impl SetModel {
    /// Glorot-uniform weights, zero biases, calibrators per `config.w_init`;
    /// deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::default();
        let c = &config;
        let element = Mlp2::new(
            &mut ps,
            "encoder.mlp1",
            [c.d_in, c.hidden, c.hidden],
            &mut rng,
        );
        let pool = match c.pool {
            PoolKind::Fspool => {
                let w = CalibratorWeights::init(c.hidden, c.knots, c.w_init, &mut rng)?;
                Some(ps.add("encoder.pool.w", w.w))
            }
            _ => None,
        };
        let post = Mlp2::new(
            &mut ps,
            "encoder.mlp2",
            [c.hidden, c.hidden, c.latent],
            &mut rng,
        );
        let decoder = match c.decoder {
            DecoderKind::Equivariant => {
                let pre = Mlp2::new(
                    &mut ps,
                    "decoder.mlp1",
                    [c.latent, c.hidden, c.hidden],
                    &mut rng,
                );
                let w = CalibratorWeights::init(c.hidden, c.knots, c.w_init, &mut rng)?;
                let unpool = ps.add("decoder.unpool.w", w.w);
                let element = Mlp2::new(
                    &mut ps,
                    "decoder.mlp2",
                    [c.hidden, c.hidden, c.d_out],
                    &mut rng,
                );
                Decoder::Equivariant {
                    pre,
                    unpool,
                    element,
                }
            }
            DecoderKind::Mlp => Decoder::Mlp(Mlp2::new(
                &mut ps,
                "decoder.mlp",
                [c.latent, c.hidden, c.d_out * c.n_max],
                &mut rng,
            )),
            DecoderKind::None => Decoder::None,
        };
        let classifier = c.classifier_hidden.map(|h| {
            Mlp2::new(
                &mut ps,
                "classifier.mlp",
                [c.latent, h, c.classes],
                &mut rng,
            )
        });
        Ok(Self {
            config,
            params: ps,
            encoder: Encoder {
                element,
                pool,
                post,
            },
            decoder,
            classifier,
        })
    }

    pub fn is_encoder_param(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with("encoder.")
    }

    /// Encodes one set `x` (`d_in × n`); every column is an element.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<Encoded> {
        let (d, n) = g.value(x).dims2()?;
        if d != self.config.d_in {
            return Err(Error::Shape(format!(
                "model expects {}-d elements, got {d}",
                self.config.d_in
            )));
        }
        let h = self.encoder.element.forward(g, p, x)?;
        let (pooled, perm) = match (self.encoder.pool, self.config.pool.baseline()) {
            (Some(w), _) => {
                let (y, perm) = fspool::fspool_var(g, h, p.var(w), n, opts.sort, opts.tau)?;
                (y, Some(perm))
            }
            (None, Some(kind)) => (fspool::baseline_pool_var(g, h, &vec![1.0; n], kind)?, None),
            (None, None) => unreachable!("fspool pooling always registers weights"),
        };
        let latent = self.encoder.post.forward(g, p, pooled)?;
        let latent = if opts.zero_latent {
            g.scale(latent, 0.0)?
        } else {
            latent
        };
        Ok(Encoded { latent, perm, n })
    }

    /// Equivariant decode to `d_out × n`; column `j` answers input column `j`.
    pub fn decode_equivariant(&self, g: &mut Graph, p: &Bound, enc: &Encoded) -> Result<Var> {
        let Decoder::Equivariant {
            pre,
            unpool,
            element,
        } = &self.decoder
        else {
            return Err(Error::Invalid("model has no equivariant decoder".into()));
        };
        let perm = enc
            .perm
            .as_ref()
            .ok_or_else(|| Error::Invalid("decoder needs the encoder's permutations".into()))?;
        let y = pre.forward(g, p, enc.latent)?;
        let spread = fspool::fsunpool_var(g, y, p.var(*unpool), enc.n)?;
        let active = self.config.perm_subset.unwrap_or(self.config.hidden);
        let unsorted = match perm {
            StoredPerm::Hard(perms) => sortops::unsort_hard_var(g, spread, perms, active)?,
            StoredPerm::Relaxed(pm) => {
                if g.shape(*pm) != [self.config.hidden, enc.n, enc.n] {
                    return Err(Error::Shape(
                        "stored permutations do not match this set".into(),
                    ));
                }
                sortops::unsort_relaxed_var(g, spread, *pm, active)?
            }
        };
        element.forward(g, p, unsorted)
    }

    /// Fixed-order decode to `d_out × n_max`.
    pub fn decode_baseline(&self, g: &mut Graph, p: &Bound, latent: Var) -> Result<Var> {
        let Decoder::Mlp(mlp) = &self.decoder else {
            return Err(Error::Invalid("model has no MLP decoder".into()));
        };
        let flat = mlp.forward(g, p, latent)?;
        g.reshape(flat, &[self.config.d_out, self.config.n_max])
    }

    /// Runs encoder and whichever decoder the model has.
    pub fn reconstruct_var(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let enc = self.encode(g, p, x, opts)?;
        match self.decoder {
            Decoder::Equivariant { .. } => self.decode_equivariant(g, p, &enc),
            Decoder::Mlp(_) => self.decode_baseline(g, p, enc.latent),
            Decoder::None => Err(Error::Invalid("model has no decoder".into())),
        }
    }

    /// Logits (`classes × 1`) of the classification head.
    pub fn classify(&self, g: &mut Graph, p: &Bound, latent: Var) -> Result<Var> {
        let head = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Invalid("model has no classifier head".into()))?;
        head.forward(g, p, latent)
    }

    fn with_graph<T>(&self, f: impl FnOnce(&mut Graph, &Bound) -> Result<T>) -> Result<T> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params, |_| false);
        f(&mut g, &p)
    }

    /// Latent vector of one set.
    pub fn encode_tensor(&self, x: &Tensor, opts: &ForwardOptions) -> Result<Vec<f64>> {
        self.with_graph(|g, p| {
            let xv = g.constant(x.clone());
            let enc = self.encode(g, p, xv, opts)?;
            Ok(g.value(enc.latent).data().to_vec())
        })
    }

    /// Model output for one set.
    pub fn reconstruct(&self, x: &Tensor, opts: &ForwardOptions) -> Result<Tensor> {
        self.with_graph(|g, p| {
            let xv = g.constant(x.clone());
            let out = self.reconstruct_var(g, p, xv, opts)?;
            Ok(g.value(out).clone())
        })
    }

    pub fn logits(&self, x: &Tensor, opts: &ForwardOptions) -> Result<Vec<f64>> {
        self.with_graph(|g, p| {
            let xv = g.constant(x.clone());
            let enc = self.encode(g, p, xv, opts)?;
            let z = self.classify(g, p, enc.latent)?;
            Ok(g.value(z).data().to_vec())
        })
    }

    pub fn checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let arrays = self
            .params
            .ids()
            .map(|id| {
                let t = self.params.get(id);
                (
                    self.params.name(id).to_string(),
                    StoredArray {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: CheckpointConfig {
                model: self.config.clone(),
                run: extra,
            },
            arrays,
        }
    }

    /// Rebuilds a model from a checkpoint; every array must be present with
    /// the shape the configuration implies.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                ckpt.format_version
            )));
        }
        let mut model = Self::init(ckpt.config.model.clone(), 0)?;
        if ckpt.arrays.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                model.params.len(),
                ckpt.arrays.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let stored = ckpt
                .arrays
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            let t = Tensor::new(stored.shape.clone(), stored.data.clone())
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("{name}: non-finite values")));
            }
            *model.params.get_mut(id) = t;
        }
        Ok(model)
    }

    /// Copies every array whose name starts with `prefix` from `other`.
    pub fn copy_params_from(&mut self, other: &SetModel, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            if !name.starts_with(prefix) {
                continue;
            }
            let src = other
                .params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("source lacks {name}")))?;
            if other.params.get(src).shape() != self.params.get(id).shape() {
                return Err(Error::Checkpoint(format!("{name}: shape mismatch")));
            }
            *self.params.get_mut(id) = other.params.get(src).clone();
            copied += 1;
        }
        Ok(copied)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    /// Free-form description of the run that produced the weights.
    #[serde(default)]
    pub run: serde_json::Value,
}

/// JSON checkpoint: `{format_version, config, arrays: {name: {shape, data}}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: CheckpointConfig,
    pub arrays: BTreeMap<String, StoredArray>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
