//! Optimization loop, prediction emission and the λ_lg sweep.

use std::path::PathBuf;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, FeatureBundle, QuerySample};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::metrics::{self, EvalReport, QueryPrediction};
use crate::model::{batch_loss, step_pair_seed, LossSettings, Model, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps when set, regardless of epochs.
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    pub lambda_lg: f64,
    pub d: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub loss: LossWeights,
    pub raw_eq11: bool,
    pub temperature: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 32,
            epochs: 200,
            max_steps: None,
            learning_rate: 1e-4,
            lambda_lg: 0.3,
            d: 256,
            num_queries: 10,
            decoder_layers: 2,
            heads: 4,
            loss: LossWeights::default(),
            raw_eq11: false,
            temperature: 1.0,
            grad_clip: 0.1,
            train_data: None,
            eval_data: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lambda_lg >= 0.0 && self.lambda_lg.is_finite()) {
            return bad(format!("lambda_lg = {} must be finite and >= 0", self.lambda_lg));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate = {} must be finite and >= 0", self.learning_rate));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature = {} must be positive", self.temperature));
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0".into());
        }
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self, d_visual: usize, d_text: usize) -> ModelConfig {
        ModelConfig {
            d_visual,
            d_text,
            d: self.d,
            num_queries: self.num_queries,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            raw_eq11: self.raw_eq11,
        }
    }

    pub fn loss_settings(&self, step: usize) -> LossSettings {
        LossSettings {
            weights: self.loss,
            lambda_lg: self.lambda_lg,
            temperature: self.temperature,
            pair_seed: step_pair_seed(self.seed, step),
        }
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, lr: f64) -> Self {
        let zeros: Vec<Tensor<F>> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, Tensor<F>)]) {
        self.t += 1;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let c1 = F::one() - F::lit(self.beta1.powf(self.t as f64));
        let c2 = F::one() - F::lit(self.beta2.powf(self.t as f64));
        let (lr, eps) = (F::lit(self.lr), F::lit(self.eps));
        for (id, grad) in grads {
            let i = id.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(*id).data_mut();
            for k in 0..p.len() {
                let gk = grad.data()[k];
                m[k] = b1 * m[k] + (F::one() - b1) * gk;
                v[k] = b2 * v[k] + (F::one() - b2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] = p[k] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

pub fn global_norm<F: Scalar>(grads: &[(ParamId, Tensor<F>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients down so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm<F: Scalar>(grads: &mut [(ParamId, Tensor<F>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = F::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

/// Batch gradients of the training objective, before clipping.
pub fn batch_gradients<F: Scalar>(
    model: &Model<F>,
    batch: &[(&QuerySample, &FeatureBundle<F>)],
    settings: &LossSettings,
) -> Result<(LossBreakdown, Vec<(ParamId, Tensor<F>)>)> {
    let mut g = Graph::new();
    let bl = batch_loss(&mut g, model, batch, settings)?;
    let breakdown = bl.breakdown(&g, settings.lambda_lg);
    g.backward(bl.total)?;
    Ok((breakdown, g.param_grads()))
}

pub struct Trainer<F> {
    pub config: TrainConfig,
    pub model: Model<F>,
    pub optimizer: Adam<F>,
    pub step: usize,
    pub history: Vec<LossBreakdown>,
    data: Vec<(QuerySample, FeatureBundle<F>)>,
    shuffle: ChaCha8Rng,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let (dv, dt) = dataset.dims()?;
        let model = Model::new(config.model_config(dv, dt), config.seed)?;
        Self::from_model(config, model, dataset)
    }

    /// Continues from an existing model with a fresh optimizer.
    pub fn from_model(config: TrainConfig, model: Model<F>, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        for (s, b) in &dataset.samples {
            s.validate().map_err(|m| Error::Config(format!("qid {}: {m}", s.qid)))?;
            b.validate(s.num_clips())
                .map_err(|m| Error::Config(format!("qid {}: {m}", s.qid)))?;
        }
        let data: Vec<_> = dataset
            .samples
            .iter()
            .map(|(s, b)| (s.clone(), FeatureBundle::from_f64(b)))
            .collect();
        for (s, b) in &data {
            model.check_dims(b, s.qid)?;
        }
        let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle.set_stream(1);
        let optimizer = Adam::new(&model.store, config.learning_rate);
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
            history: Vec::new(),
            data,
            shuffle,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.config
            .max_steps
            .unwrap_or(self.config.epochs * self.steps_per_epoch())
    }

    /// One optimizer step on the given sample indices.
    pub fn step_on(&mut self, indices: &[usize]) -> Result<LossBreakdown> {
        let batch: Vec<(&QuerySample, &FeatureBundle<F>)> =
            indices.iter().map(|&i| (&self.data[i].0, &self.data[i].1)).collect();
        let settings = self.config.loss_settings(self.step);
        let (breakdown, mut grads) = batch_gradients(&self.model, &batch, &settings)?;
        if !breakdown.is_finite() {
            return Err(Error::NonFinite { step: self.step, breakdown: breakdown.to_string() });
        }
        let norm = clip_global_norm(&mut grads, self.config.grad_clip);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                breakdown: format!("{breakdown}; gradient norm {norm}"),
            });
        }
        self.optimizer.step(&mut self.model.store, &grads);
        debug!("step {} {breakdown} grad_norm {norm:.4}", self.step);
        self.step += 1;
        self.history.push(breakdown);
        Ok(breakdown)
    }

    /// One pass over a freshly shuffled order, stopping early at `limit` steps.
    pub fn run_epoch(&mut self, limit: usize) -> Result<()> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.shuffle);
        let first = self.history.len();
        for chunk in order.chunks(self.config.batch_size) {
            if self.step >= limit {
                break;
            }
            self.step_on(chunk)?;
        }
        let done = &self.history[first..];
        if !done.is_empty() {
            let mean = done.iter().map(|b| b.total).sum::<f64>() / done.len() as f64;
            info!("step {} mean loss {mean:.6}", self.step);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
        }
    }

    pub fn run(&mut self) -> Result<()> {
        let limit = self.total_steps();
        if self.data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        while self.step < limit {
            self.run_epoch(limit)?;
        }
        Ok(())
    }
}

/// Trains a fresh model from the config's seed on `dataset`.
pub fn train<F: Scalar>(config: &TrainConfig, dataset: &Dataset) -> Result<Trainer<F>> {
    let mut t = Trainer::new(config.clone(), dataset)?;
    info!(
        "training {} parameters ({} scalars) for {} steps",
        t.model.store.len(),
        t.model.store.num_scalars(),
        t.total_steps()
    );
    t.run()?;
    Ok(t)
}

/// One prediction line per sample, in dataset order.
pub fn predict<F: Scalar>(model: &Model<F>, dataset: &Dataset) -> Result<Vec<QueryPrediction>> {
    dataset
        .samples
        .iter()
        .map(|(s, b)| {
            let p = model.predict_sample(s, &FeatureBundle::from_f64(b))?;
            Ok(QueryPrediction::from_moment(s.qid, &p))
        })
        .collect()
}

pub fn evaluate_model<F: Scalar>(model: &Model<F>, dataset: &Dataset) -> Result<EvalReport> {
    let preds = predict(model, dataset)?;
    let samples: Vec<QuerySample> = dataset.queries().cloned().collect();
    metrics::evaluate(&preds, &samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_lg: f64,
    #[serde(flatten)]
    pub report: EvalReport,
    /// `λ_lg · (local + global)` at the last training step.
    pub align_contribution: f64,
    pub final_loss: f64,
}

/// Trains one model per λ_lg value from the same seed and evaluates each on
/// `eval`.
pub fn sweep_lambda<F: Scalar>(
    config: &TrainConfig,
    train_set: &Dataset,
    eval: &Dataset,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Config(format!("lambda value {v} must be finite and >= 0")));
    }
    values
        .iter()
        .map(|&lambda_lg| {
            info!("sweep: lambda_lg = {lambda_lg}");
            let cfg = TrainConfig { lambda_lg, ..config.clone() };
            let t = train::<F>(&cfg, train_set)?;
            let last = t.history.last().copied();
            Ok(SweepRow {
                lambda_lg,
                report: evaluate_model(&t.model, eval)?,
                align_contribution: last.map_or(0.0, |b| b.alignment_contribution()),
                final_loss: last.map_or(f64::NAN, |b| b.total),
            })
        })
        .collect()
}
