//! Adam, the autoencoder and classifier loops, evaluation and the random
//! rotation baseline.
//!
//! Every step builds one graph per example, fans the examples out through
//! [`exec::map_indexed`](crate::exec::map_indexed) and averages the
//! gradients in index order, so parallel and sequential runs agree bit for
//! bit.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{self, MnistSetConfig, MnistSets, MnistSplits, PolygonConfig, SetBatch};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::fspool::WeightInit;
use crate::losses;
use crate::models::{
    Bound, DecoderKind, ForwardOptions, ModelConfig, ParamId, ParamSet, PoolKind, SetModel,
};
use crate::sortops::{SortMode, TemperatureSchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Parameters whose gradient is `None` are left alone.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != params.get(id).shape() {
                    return Err(Error::Shape(format!(
                        "gradient shape for {}",
                        params.name(id)
                    )));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
                }
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.values_mut()[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Mean loss and mean gradients of a batch.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub loss: f64,
    pub grads: Vec<Option<Tensor>>,
}

/// Runs `f` once per example on its own graph and averages the results.
pub fn batch_gradients<T, F>(
    exec: Execution,
    params: &ParamSet,
    batch: usize,
    trainable: T,
    f: F,
) -> Result<BatchGrad>
where
    T: Fn(ParamId) -> bool + Sync + Send,
    F: Fn(usize, &mut Graph, &Bound) -> Result<Var> + Sync + Send,
{
    if batch == 0 {
        return Err(Error::EmptySet("empty batch".into()));
    }
    let per_example = map_indexed(exec, batch, |i| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, params, &trainable);
        let loss = f(i, &mut g, &p)?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let out = params
            .ids()
            .map(|id| {
                if trainable(id) {
                    grads.take(p.var(id))
                } else {
                    None
                }
            })
            .collect();
        Ok((value, out))
    });
    let mut loss = 0.0;
    let mut total: Vec<Option<Tensor>> = vec![None; params.len()];
    for r in per_example {
        let (l, grads) = r?;
        loss += l;
        for (acc, g) in total.iter_mut().zip(grads) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(&g),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    let scale = 1.0 / batch as f64;
    for t in total.iter_mut().flatten() {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok(BatchGrad {
        loss: loss * scale,
        grads: total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Polygon,
    Mnist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    /// FSPool encoder with the equivariant FSUnpool decoder.
    FspoolAe,
    /// Any encoder with the fixed-order MLP decoder.
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Direct,
    Chamfer,
    Hungarian,
}

/// Autoencoder run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub task: Task,
    pub model: ModelChoice,
    pub loss: LossKind,
    /// Polygon size.
    pub n_points: usize,
    /// Encoder pooling; the FSPool autoencoder always uses FSPool.
    pub pool: PoolKind,
    pub knots: usize,
    pub w_init: WeightInit,
    pub sort: SortMode,
    pub temperature: TemperatureSchedule,
    /// Polygon steps.
    pub steps: usize,
    /// MNIST epochs.
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub sigma: f64,
    pub mask_feature: bool,
    pub perm_subset: Option<usize>,
    pub zero_latent: bool,
    /// Fresh polygons drawn for the final evaluation.
    pub eval_samples: usize,
    /// Compute the Hungarian loss when evaluating MNIST sets.
    pub mnist_hungarian: bool,
    /// Write a training-loss row every this many steps.
    pub log_every: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            task: Task::Polygon,
            model: ModelChoice::FspoolAe,
            loss: LossKind::Direct,
            n_points: 4,
            pool: PoolKind::Fspool,
            knots: crate::fspool::DEFAULT_KNOTS,
            w_init: WeightInit::Ones,
            sort: SortMode::Relaxed,
            temperature: TemperatureSchedule::default(),
            steps: 10240,
            epochs: 10,
            batch: 16,
            adam: AdamConfig::default(),
            seed: 0,
            sigma: 0.0,
            mask_feature: false,
            perm_subset: None,
            zero_latent: false,
            eval_samples: 1024,
            mnist_hungarian: false,
            log_every: 10,
        }
    }
}

impl AeConfig {
    pub fn polygon(model: ModelChoice, loss: LossKind, n: usize) -> Self {
        Self {
            model,
            loss,
            n_points: n,
            ..Self::default()
        }
    }

    /// MNIST denoising defaults: hard sort (sets vary in size), σ = 0.05.
    pub fn mnist(model: ModelChoice, loss: LossKind, pool: PoolKind) -> Self {
        Self {
            task: Task::Mnist,
            model,
            loss,
            pool,
            sort: SortMode::Hard,
            sigma: 0.05,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.model, self.loss) {
            (ModelChoice::FspoolAe, LossKind::Direct) => {}
            (ModelChoice::Baseline, LossKind::Chamfer | LossKind::Hungarian) => {}
            (m, l) => {
                return Err(Error::Incompatible(format!(
                    "{m:?} cannot be trained with the {l:?} loss; the equivariant model uses direct, the baseline chamfer or hungarian"
                )))
            }
        }
        if self.model == ModelChoice::FspoolAe && self.pool != PoolKind::Fspool {
            return Err(Error::Incompatible(
                "the FSPool autoencoder needs FSPool pooling".into(),
            ));
        }
        if self.batch == 0 || self.log_every == 0 {
            return Err(Error::Invalid(
                "batch and log interval must be positive".into(),
            ));
        }
        if self.task == Task::Polygon && self.n_points < 2 {
            return Err(Error::Invalid("polygons need at least 2 points".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Invalid(format!("noise stddev {}", self.sigma)));
        }
        let t = &self.temperature;
        if !(t.start > 0.0 && t.floor > 0.0) {
            return Err(Error::Invalid("temperatures must be positive".into()));
        }
        if self.task == Task::Mnist && self.sort == SortMode::Relaxed && !self.mask_feature {
            return Err(Error::Invalid(
                "relaxed sort needs equal set sizes; use --mask-feature or the hard sort on MNIST"
                    .into(),
            ));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let decoder = match self.model {
            ModelChoice::FspoolAe => DecoderKind::Equivariant,
            ModelChoice::Baseline => DecoderKind::Mlp,
        };
        let mut c = match self.task {
            Task::Polygon => ModelConfig::polygon(decoder, self.pool, self.n_points),
            Task::Mnist => ModelConfig::mnist(decoder, self.pool, self.mask_feature),
        };
        c.knots = self.knots;
        c.w_init = self.w_init;
        c.perm_subset = self.perm_subset;
        c
    }

    fn mnist_sets(&self) -> MnistSetConfig {
        MnistSetConfig {
            sigma: self.sigma,
            mask_feature: self.mask_feature,
            ..MnistSetConfig::default()
        }
    }

    /// Forward settings at the end of training (used for evaluation).
    pub fn final_forward(&self, total_steps: usize) -> ForwardOptions {
        ForwardOptions {
            sort: self.sort,
            tau: self
                .temperature
                .at(total_steps.saturating_sub(1), total_steps),
            zero_latent: self.zero_latent,
        }
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Evaluation losses normalised per coordinate (divided by `d · n`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub direct_mse: Option<f64>,
    pub chamfer: f64,
    pub hungarian: Option<f64>,
    pub samples: usize,
}

impl EvalMetrics {
    /// `(name, raw, hundredths)` for every computed metric.
    pub fn table(&self) -> Vec<(&'static str, f64, f64)> {
        let mut out = Vec::new();
        if let Some(v) = self.direct_mse {
            out.push(("direct_mse", v, v * 100.0));
        }
        out.push(("chamfer", self.chamfer, self.chamfer * 100.0));
        if let Some(v) = self.hungarian {
            out.push(("hungarian", v, v * 100.0));
        }
        out
    }

    fn rows(&self, step: usize, split: &str) -> Vec<MetricRow> {
        self.table()
            .into_iter()
            .map(|(name, v, _)| MetricRow {
                step,
                split: split.into(),
                metric: name.into(),
                value: v,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub rows: Vec<MetricRow>,
    /// Mean training loss of every step.
    pub train_loss: Vec<f64>,
    pub eval: Option<EvalMetrics>,
    pub accuracy: Option<f64>,
    pub wall_clock_s: f64,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,split,metric,value\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.step, r.split, r.metric, r.value
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Mean training loss over steps `[from, to)`.
    pub fn mean_train_loss(&self, from: usize, to: usize) -> f64 {
        let s = &self.train_loss[from.min(self.train_loss.len())..to.min(self.train_loss.len())];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "training loss diverged at step {step}"
        )))
    }
}

/// What the model sees for example `i`: padded sets keep all columns when
/// the mask is a feature; otherwise only the valid columns.
fn example_input(batch: &SetBatch, i: usize) -> Tensor {
    if batch.mask_feature {
        batch.x[i].clone()
    } else {
        batch.valid(i)
    }
}

/// Reconstruction loss of one example, normalised like the tables.
pub fn reconstruction_loss(
    model: &SetModel,
    g: &mut Graph,
    p: &Bound,
    input: Tensor,
    target: Tensor,
    loss: LossKind,
    opts: &ForwardOptions,
) -> Result<Var> {
    let x = g.constant(input);
    let out = model.reconstruct_var(g, p, x, opts)?;
    let (d, n) = target.dims2()?;
    let t = g.constant(target);
    let l = match loss {
        LossKind::Direct => return losses::mse_direct_var(g, out, t),
        LossKind::Chamfer => losses::chamfer_var(g, out, t)?,
        LossKind::Hungarian => losses::hungarian_loss_var(g, out, t)?,
    };
    g.scale(l, 1.0 / (d * n) as f64)
}

fn loss_target(batch: &SetBatch, i: usize, loss: LossKind) -> Tensor {
    match loss {
        LossKind::Hungarian => batch.x[i].clone(),
        _ => example_input(batch, i),
    }
}

/// Trains an autoencoder; MNIST runs need `mnist`.
pub fn train_autoencoder(
    cfg: &AeConfig,
    mnist: Option<&MnistSplits>,
    exec: Execution,
) -> Result<(SetModel, RunMetrics)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = SetModel::init(cfg.model_config(), cfg.seed)?;
    let mut adam = Adam::new(&model.params, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut metrics = RunMetrics::default();

    let mnist = match cfg.task {
        Task::Mnist => {
            Some(mnist.ok_or_else(|| Error::Invalid("MNIST task needs loaded data".into()))?)
        }
        Task::Polygon => None,
    };
    let steps_per_epoch = mnist.map(|m| m.train.len().div_ceil(cfg.batch));
    let total = match steps_per_epoch {
        Some(s) => s * cfg.epochs,
        None => cfg.steps,
    };
    let set_cfg = cfg.mnist_sets();
    let mut order: Vec<usize> = mnist
        .map(|m| (0..m.train.len()).collect())
        .unwrap_or_default();

    for step in 0..total {
        let (input, target) = match (mnist, steps_per_epoch) {
            (Some(m), Some(spe)) => {
                if step % spe == 0 {
                    order.shuffle(&mut rng);
                }
                let k = step % spe;
                let idx = &order[k * cfg.batch..((k + 1) * cfg.batch).min(order.len())];
                let clean = m.train.batch(idx, &set_cfg)?;
                (data::add_noise(&clean, cfg.sigma, &mut rng)?, clean)
            }
            _ => {
                let pc = PolygonConfig {
                    n_points: cfg.n_points,
                    batch: cfg.batch,
                    seed: cfg.seed,
                };
                data::gen_polygon_batch(&pc, &mut rng)?
            }
        };
        let opts = ForwardOptions {
            sort: cfg.sort,
            tau: cfg.temperature.at(step, total),
            zero_latent: cfg.zero_latent,
        };
        let bg = batch_gradients(
            exec,
            &model.params,
            input.len(),
            |_| true,
            |i, g, p| {
                reconstruction_loss(
                    &model,
                    g,
                    p,
                    example_input(&input, i),
                    loss_target(&target, i, cfg.loss),
                    cfg.loss,
                    &opts,
                )
            },
        )?;
        check_finite(bg.loss, step)?;
        adam.step(&mut model.params, &bg.grads)?;
        metrics.train_loss.push(bg.loss);
        if step % cfg.log_every == 0 || step + 1 == total {
            metrics.rows.push(MetricRow {
                step,
                split: "train".into(),
                metric: "loss".into(),
                value: bg.loss,
            });
        }
        if step % 1000 == 0 {
            log::info!("step {step}/{total} loss {:.6e}", bg.loss);
        }
    }

    let opts = cfg.final_forward(total);
    let eval = match mnist {
        Some(m) => evaluate_mnist(
            &model,
            &m.test,
            &set_cfg,
            cfg.mnist_hungarian,
            &opts,
            cfg.seed,
            exec,
        )?,
        None => evaluate_polygon(
            &model,
            cfg.n_points,
            cfg.eval_samples,
            cfg.seed.wrapping_add(2),
            &opts,
            exec,
        )?,
    };
    metrics.rows.extend(eval.rows(total, "test"));
    metrics.eval = Some(eval);
    metrics.wall_clock_s = start.elapsed().as_secs_f64();
    Ok((model, metrics))
}

/// Checkpoint metadata for an autoencoder run.
pub fn autoencoder_run_info(cfg: &AeConfig, total_steps: usize) -> serde_json::Value {
    serde_json::json!({
        "kind": "autoencoder",
        "train": cfg,
        "forward": cfg.final_forward(total_steps),
    })
}

/// Per-example losses between a model's reconstructions and their targets.
fn example_metrics(
    model: &SetModel,
    input: &Tensor,
    target: &Tensor,
    hungarian_target: Option<&Tensor>,
    opts: &ForwardOptions,
) -> Result<(Option<f64>, f64, Option<f64>)> {
    let out = model.reconstruct(input, opts)?;
    let (d, n) = target.dims2()?;
    let direct =
        if out.shape() == target.shape() && model.config.decoder == DecoderKind::Equivariant {
            Some(losses::mse_direct(&out, target, &vec![1.0; n])?)
        } else {
            None
        };
    let chamfer = losses::per_coordinate(losses::chamfer(&out, target)?, d, n);
    let hungarian = match hungarian_target {
        Some(t) => {
            let (hd, hn) = t.dims2()?;
            Some(losses::per_coordinate(
                losses::hungarian_loss(&out, t)?,
                hd,
                hn,
            ))
        }
        None => None,
    };
    Ok((direct, chamfer, hungarian))
}

fn average(results: Vec<Result<(Option<f64>, f64, Option<f64>)>>) -> Result<EvalMetrics> {
    let n = results.len();
    let (mut d, mut c, mut h) = (Some(0.0), 0.0, Some(0.0));
    for r in results {
        let (rd, rc, rh) = r?;
        d = d.zip(rd).map(|(a, b)| a + b);
        c += rc;
        h = h.zip(rh).map(|(a, b)| a + b);
    }
    let k = n as f64;
    Ok(EvalMetrics {
        direct_mse: d.map(|v| v / k),
        chamfer: c / k,
        hungarian: h.map(|v| v / k),
        samples: n,
    })
}

/// Losses on `samples` fresh polygons.
pub fn evaluate_polygon(
    model: &SetModel,
    n: usize,
    samples: usize,
    seed: u64,
    opts: &ForwardOptions,
    exec: Execution,
) -> Result<EvalMetrics> {
    if samples == 0 {
        return Err(Error::Invalid(
            "evaluation needs at least one sample".into(),
        ));
    }
    if model.config.d_in != 2 {
        return Err(Error::Incompatible(format!(
            "model expects {}-d elements, polygons are 2-d",
            model.config.d_in
        )));
    }
    if model.config.decoder == DecoderKind::Mlp && model.config.n_max != n {
        return Err(Error::Incompatible(format!(
            "baseline decodes {} points, evaluation asks for {n}",
            model.config.n_max
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets: Vec<Tensor> = (0..samples)
        .map(|_| data::random_polygon(n, &mut rng))
        .collect();
    let results = map_indexed(exec, samples, |i| {
        example_metrics(model, &sets[i], &sets[i], Some(&sets[i]), opts)
    });
    average(results)
}

/// Denoising losses on the MNIST test sets; inputs get noise of `cfg.sigma`.
pub fn evaluate_mnist(
    model: &SetModel,
    test: &MnistSets,
    cfg: &MnistSetConfig,
    hungarian: bool,
    opts: &ForwardOptions,
    seed: u64,
    exec: Execution,
) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(Error::EmptySet("empty test split".into()));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let clean = test.batch(&idx, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let noisy = data::add_noise(&clean, cfg.sigma, &mut rng)?;
    let results = map_indexed(exec, clean.len(), |i| {
        let padded = clean.x[i].clone();
        example_metrics(
            model,
            &example_input(&noisy, i),
            &example_input(&clean, i),
            hungarian.then_some(&padded),
            opts,
        )
    });
    average(results)
}

/// Losses of a predictor that outputs the right polygon at a random
/// rotation.
pub fn random_rotation_baseline(
    n: usize,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<EvalMetrics> {
    if n < 2 || samples == 0 {
        return Err(Error::Invalid(format!(
            "random baseline needs n >= 2 and samples > 0 (n = {n})"
        )));
    }
    let mut results = Vec::with_capacity(samples);
    for _ in 0..samples {
        let theta = rng.random_range(0.0..TAU);
        let other = rng.random_range(0.0..TAU);
        results.push(rotation_pair_metrics(n, theta, other));
    }
    average(results)
}

/// All three losses between the `n`-gons at rotations `a` and `b`.
pub fn rotation_pair_metrics(n: usize, a: f64, b: f64) -> Result<(Option<f64>, f64, Option<f64>)> {
    let t = data::polygon(n, a);
    let p = data::polygon(n, b);
    let d = 2;
    Ok((
        Some(losses::mse_direct(&p, &t, &vec![1.0; n])?),
        losses::per_coordinate(losses::chamfer(&p, &t)?, d, n),
        Some(losses::per_coordinate(
            losses::hungarian_loss(&p, &t)?,
            d,
            n,
        )),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Pre-trained encoder, not updated.
    Frozen,
    /// Pre-trained encoder, fine-tuned.
    Unfrozen,
    /// Everything trained from scratch.
    RandomInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub pool: PoolKind,
    pub regime: Regime,
    pub sigma: f64,
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub knots: usize,
    /// Gaussian by default: with all-ones weights the pooled sums over
    /// hundreds of pixels saturate the head and training stalls at chance.
    pub w_init: WeightInit,
    /// Hidden width of the classification head.
    pub head_hidden: usize,
    pub sort: SortMode,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            pool: PoolKind::Fspool,
            regime: Regime::RandomInit,
            sigma: 0.05,
            epochs: 10,
            batch: 16,
            adam: AdamConfig::default(),
            seed: 0,
            knots: crate::fspool::DEFAULT_KNOTS,
            w_init: WeightInit::Gaussian,
            head_hidden: 16,
            sort: SortMode::Hard,
        }
    }
}

impl ClassifierConfig {
    pub fn model_config(&self) -> ModelConfig {
        let mut c = ModelConfig::mnist(DecoderKind::None, self.pool, false)
            .with_classifier(self.head_hidden);
        c.knots = self.knots;
        c.w_init = self.w_init;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Invalid("batch must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Invalid(format!("noise stddev {}", self.sigma)));
        }
        if self.sort == SortMode::Relaxed {
            return Err(Error::Invalid("classification uses the hard sort".into()));
        }
        Ok(())
    }
}

/// Cross-entropy training of the classification head (and the encoder
/// unless frozen) on noisy MNIST sets.
pub fn train_classifier(
    cfg: &ClassifierConfig,
    pretrained: Option<&SetModel>,
    data: &MnistSplits,
    exec: Execution,
) -> Result<(SetModel, RunMetrics)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = SetModel::init(cfg.model_config(), cfg.seed)?;
    match (cfg.regime, pretrained) {
        (Regime::RandomInit, _) => {}
        (_, None) => {
            return Err(Error::Invalid(format!(
                "{:?} regime needs a pre-trained checkpoint",
                cfg.regime
            )))
        }
        (_, Some(src)) => {
            if src.config.pool != cfg.pool || src.config.d_in != model.config.d_in {
                return Err(Error::Incompatible(
                    "pre-trained encoder differs in pooling or input size".into(),
                ));
            }
            model.copy_params_from(src, "encoder.")?;
        }
    }
    let frozen = cfg.regime == Regime::Frozen;
    let trainable: Vec<bool> = model
        .params
        .ids()
        .map(|id| !(frozen && model.is_encoder_param(id)))
        .collect();
    let mut adam = Adam::new(&model.params, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let set_cfg = MnistSetConfig {
        sigma: cfg.sigma,
        ..MnistSetConfig::default()
    };
    let opts = ForwardOptions {
        sort: cfg.sort,
        ..ForwardOptions::default()
    };
    let mut metrics = RunMetrics::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch) {
            let clean = data.train.batch(idx, &set_cfg)?;
            let noisy = data::add_noise(&clean, cfg.sigma, &mut rng)?;
            let bg = batch_gradients(
                exec,
                &model.params,
                noisy.len(),
                |id| trainable[id.index()],
                |i, g, p| {
                    let x = g.constant(noisy.valid(i));
                    let enc = model.encode(g, p, x, &opts)?;
                    let z = model.classify(g, p, enc.latent)?;
                    losses::cross_entropy_var(g, z, noisy.labels[i])
                },
            )?;
            check_finite(bg.loss, step)?;
            adam.step(&mut model.params, &bg.grads)?;
            metrics.train_loss.push(bg.loss);
            if step % 10 == 0 {
                metrics.rows.push(MetricRow {
                    step,
                    split: "train".into(),
                    metric: "loss".into(),
                    value: bg.loss,
                });
            }
            step += 1;
        }
        let acc = accuracy(&model, &data.test, cfg.sigma, cfg.seed, &opts, exec)?;
        log::info!("epoch {} accuracy {:.2}%", epoch + 1, acc * 100.0);
        metrics.rows.push(MetricRow {
            step,
            split: "test".into(),
            metric: "accuracy".into(),
            value: acc,
        });
        metrics.accuracy = Some(acc);
    }
    metrics.wall_clock_s = start.elapsed().as_secs_f64();
    Ok((model, metrics))
}

/// Test accuracy with inputs perturbed by `sigma`.
pub fn accuracy(
    model: &SetModel,
    test: &MnistSets,
    sigma: f64,
    seed: u64,
    opts: &ForwardOptions,
    exec: Execution,
) -> Result<f64> {
    let idx: Vec<usize> = (0..test.len()).collect();
    let cfg = MnistSetConfig {
        sigma,
        ..MnistSetConfig::default()
    };
    let clean = test.batch(&idx, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let noisy = data::add_noise(&clean, sigma, &mut rng)?;
    let hits = map_indexed(exec, noisy.len(), |i| -> Result<bool> {
        let z = model.logits(&noisy.valid(i), opts)?;
        let pred = z
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                if v > best.1 {
                    (k, v)
                } else {
                    best
                }
            })
            .0;
        Ok(pred == noisy.labels[i])
    });
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / noisy.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient() {
        let mut ps = ParamSet::default();
        ps.add("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut adam = Adam::new(&ps, AdamConfig::default());
        let g = Tensor::new(vec![3], vec![0.5, -2.0, 1e-3]).unwrap();
        adam.step(&mut ps, &[Some(g.clone())]).unwrap();
        for ((&p, &p0), &gv) in ps.values()[0]
            .data()
            .iter()
            .zip(&[1.0, 2.0, 3.0])
            .zip(g.data())
        {
            let want = p0 - 1e-3 * gv / (gv.abs() + 1e-8);
            assert!((p - want).abs() < 1e-12, "{p} vs {want}");
            assert!(((p - p0).abs() - 1e-3).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut ps = ParamSet::default();
        ps.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let before = ps.clone();
        let mut adam = Adam::new(&ps, AdamConfig::default());
        adam.step(&mut ps, &[Some(Tensor::zeros(&[2]))]).unwrap();
        assert_eq!(ps, before);
        assert_eq!(adam.steps(), 1);
        let bad = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            adam.step(&mut ps, &[Some(bad)]),
            Err(Error::NonFinite(_))
        ));
        assert!(adam.step(&mut ps, &[Some(Tensor::zeros(&[3]))]).is_err());
    }

    #[test]
    fn model_loss_gate() {
        assert!(
            AeConfig::polygon(ModelChoice::FspoolAe, LossKind::Chamfer, 4)
                .validate()
                .is_err()
        );
        assert!(
            AeConfig::polygon(ModelChoice::Baseline, LossKind::Direct, 4)
                .validate()
                .is_err()
        );
        assert!(
            AeConfig::polygon(ModelChoice::Baseline, LossKind::Hungarian, 4)
                .validate()
                .is_ok()
        );
        let r = train_autoencoder(
            &AeConfig::polygon(ModelChoice::FspoolAe, LossKind::Hungarian, 4),
            None,
            Execution::Sequential,
        );
        assert!(matches!(r, Err(Error::Incompatible(_))));
    }

    #[test]
    fn random_baseline_forced_equal_rotation_is_zero() {
        let (d, c, h) = rotation_pair_metrics(5, 0.7, 0.7).unwrap();
        assert!(d.unwrap() < 1e-28 && c < 1e-28 && h.unwrap() < 1e-28);
    }

    #[test]
    fn random_baseline_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m2 = random_rotation_baseline(2, 20000, &mut rng).unwrap();
        assert!((m2.direct_mse.unwrap() * 100.0 - 100.323).abs() < 0.05 * 100.323);
        let m4 = random_rotation_baseline(4, 20000, &mut rng).unwrap();
        assert!((m4.chamfer * 100.0 - 19.866).abs() < 0.1 * 19.866);
        assert!(random_rotation_baseline(1, 10, &mut rng).is_err());
    }

    #[test]
    fn short_polygon_run_is_deterministic_and_parallel_matches_sequential() {
        let mut cfg = AeConfig::polygon(ModelChoice::FspoolAe, LossKind::Direct, 4);
        cfg.steps = 30;
        cfg.eval_samples = 16;
        let (ma, ra) = train_autoencoder(&cfg, None, Execution::Sequential).unwrap();
        let (mb, rb) = train_autoencoder(&cfg, None, Execution::Sequential).unwrap();
        let (mc, rc) = train_autoencoder(&cfg, None, Execution::default()).unwrap();
        assert_eq!(ma.params, mb.params);
        assert_eq!(ma.params, mc.params);
        assert_eq!(ra.to_csv(), rb.to_csv());
        assert_eq!(ra.to_csv(), rc.to_csv());
        assert!(ra.to_csv().starts_with("step,split,metric,value\n"));
        assert_eq!(ra.train_loss.len(), 30);
        assert!(ra.eval.unwrap().direct_mse.is_some());
    }

    #[test]
    fn perfect_reconstructor_scores_zero() {
        let (d, c, h) = rotation_pair_metrics(6, 1.0, 1.0 + TAU / 6.0).unwrap();
        assert!(c < 1e-20 && h.unwrap() < 1e-20);
        assert!(d.unwrap() > 0.1);
    }

    #[test]
    fn baseline_evaluation_needs_matching_size() {
        let model = SetModel::init(
            ModelConfig::polygon(DecoderKind::Mlp, PoolKind::Fspool, 4),
            0,
        )
        .unwrap();
        let opts = ForwardOptions::default();
        assert!(evaluate_polygon(&model, 8, 4, 0, &opts, Execution::Sequential).is_err());
        let m = evaluate_polygon(&model, 4, 4, 0, &opts, Execution::Sequential).unwrap();
        assert!(m.direct_mse.is_none() && m.hungarian.is_some());
    }

    fn toy_mnist() -> MnistSplits {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut make = |count: usize| {
            let mut sets = Vec::new();
            let mut labels = Vec::new();
            for i in 0..count {
                let label = i % 2;
                let mut img = vec![0.0; 784];
                for r in 5..20 {
                    let c = if label == 0 { 8 } else { 8 + r - 5 };
                    img[r * 28 + c] = 1.0;
                }
                sets.push(data::image_to_set(&img, data::MNIST_THRESHOLD, &mut rng).unwrap());
                labels.push(label);
            }
            MnistSets { sets, labels }
        };
        MnistSplits {
            train: make(32),
            test: make(8),
        }
    }

    #[test]
    fn frozen_encoder_is_untouched() {
        let splits = toy_mnist();
        let pre = SetModel::init(
            ModelConfig::mnist(DecoderKind::Equivariant, PoolKind::Fspool, false),
            5,
        )
        .unwrap();
        let cfg = ClassifierConfig {
            regime: Regime::Frozen,
            epochs: 1,
            ..ClassifierConfig::default()
        };
        let (model, metrics) =
            train_classifier(&cfg, Some(&pre), &splits, Execution::default()).unwrap();
        for id in model.params.ids() {
            let name = model.params.name(id);
            if name.starts_with("encoder.") {
                let src = pre.params.get(pre.params.find(name).unwrap());
                assert_eq!(model.params.get(id), src, "{name}");
            }
        }
        assert!(metrics.accuracy.is_some());
        let missing = ClassifierConfig {
            regime: Regime::Unfrozen,
            ..ClassifierConfig::default()
        };
        assert!(train_classifier(&missing, None, &splits, Execution::default()).is_err());
    }

    #[test]
    fn mnist_autoencoder_smoke() {
        let splits = toy_mnist();
        for (model, loss, pool, mask) in [
            (
                ModelChoice::FspoolAe,
                LossKind::Direct,
                PoolKind::Fspool,
                false,
            ),
            (
                ModelChoice::FspoolAe,
                LossKind::Direct,
                PoolKind::Fspool,
                true,
            ),
            (
                ModelChoice::Baseline,
                LossKind::Chamfer,
                PoolKind::Sum,
                false,
            ),
            (
                ModelChoice::Baseline,
                LossKind::Chamfer,
                PoolKind::Max,
                true,
            ),
        ] {
            let mut cfg = AeConfig::mnist(model, loss, pool);
            cfg.mask_feature = mask;
            cfg.epochs = 1;
            let (_, m) = train_autoencoder(&cfg, Some(&splits), Execution::default()).unwrap();
            assert_eq!(m.train_loss.len(), 2);
            assert!(m.eval.unwrap().chamfer.is_finite());
        }
        assert!(train_autoencoder(
            &AeConfig::mnist(ModelChoice::FspoolAe, LossKind::Direct, PoolKind::Fspool),
            None,
            Execution::default()
        )
        .is_err());
    }
}
