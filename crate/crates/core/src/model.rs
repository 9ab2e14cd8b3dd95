//! Full model assembly and the per-sample / per-batch forward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{self, AlignParams, ProjectedFeatures};
use crate::cooperate::{self, CooperateParams, DecoderOutput, MomentPrediction};
use crate::data::{clip_labels, FeatureBundle, QuerySample};
use crate::error::{Error, Result};
use crate::losses::{self, window_to_cw, LossBreakdown, LossWeights, MatchResult};
use crate::params::ParamStore;
use crate::refine::{self, JointFeatures, RefineParams};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Architecture hyperparameters. Input widths come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_visual: usize,
    pub d_text: usize,
    pub d: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Use the attention output alone as `Z`, without residual and norm.
    pub raw_eq11: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_visual == 0 || self.d_text == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.num_queries == 0 {
            return Err(Error::Config("need at least one decoder query".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub align: AlignParams,
    pub refine: RefineParams,
    pub cooperate: CooperateParams,
}

/// Graph handles of one sample's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub projected: ProjectedFeatures,
    pub s_hat: Var,
    pub joint: JointFeatures,
    pub h: Var,
    pub z_hat: Var,
    pub decoder: DecoderOutput,
    pub h_bar: Var,
    pub prediction: MomentPrediction,
}

/// Per-sample loss terms; the contrastive term is formed per batch from the
/// pooled features.
#[derive(Debug, Clone)]
pub struct SampleLosses {
    pub local: Var,
    pub mom: Var,
    pub high: Var,
    pub v_global: Var,
    pub t_global: Var,
    pub matching: MatchResult,
}

/// Loss settings of a training forward.
#[derive(Debug, Clone, Copy)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub lambda_lg: f64,
    pub temperature: f64,
    /// Mixed with the qid to draw saliency pairs.
    pub pair_seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Train(&'a LossSettings),
    Infer,
}

/// Base seed for saliency pairs at one optimizer step.
pub fn step_pair_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn sample_pair_seed(base: u64, qid: u64) -> u64 {
    base ^ qid.wrapping_add(1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let align = AlignParams::new(&mut store, config.d_visual, config.d_text, config.d, &mut rng)?;
        let refine = RefineParams::new(&mut store, config.d, &mut rng)?;
        let cooperate = CooperateParams::new(
            &mut store,
            config.d,
            config.num_queries,
            config.decoder_layers,
            config.heads,
            &mut rng,
        )?;
        Ok(Self { config, store, align, refine, cooperate })
    }

    /// Rejects samples whose feature widths differ from the model's.
    pub fn check_dims(&self, bundle: &FeatureBundle<F>, qid: u64) -> Result<()> {
        let got = (bundle.visual_input_dim(), bundle.text_dim());
        let want = (self.config.d_visual, self.config.d_text);
        if got != want {
            return Err(Error::Config(format!(
                "qid {qid}: feature widths (visual, text) = {got:?}, model expects {want:?}"
            )));
        }
        Ok(())
    }

    /// Runs the pipeline on one sample. In training mode the local alignment
    /// loss and pooled features are recorded right after projection and the
    /// moment and saliency losses at the end.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        sample: &QuerySample,
        bundle: &FeatureBundle<F>,
        mode: Mode<'_>,
    ) -> Result<(ForwardOutput, Option<SampleLosses>)> {
        self.check_dims(bundle, sample.qid)?;
        let store = &self.store;
        let projected = align::project(g, store, &self.align, bundle)?;
        let (_, s_hat) = align::local_similarity(g, &projected)?;
        let early = match mode {
            Mode::Train(_) => {
                let local = align::local_loss(g, s_hat, &clip_labels(sample))?;
                let (v_global, t_global) = align::pooled_globals(g, &projected)?;
                Some((local, v_global, t_global))
            }
            Mode::Infer => None,
        };

        let joint = refine::refine(g, store, &self.refine, &projected, self.config.raw_eq11)?;
        let c = &self.cooperate;
        let h = cooperate::highlight_head(g, store, &c.shared, &c.highlight, &joint)?;
        let z_hat = cooperate::hd2mr(g, store, &c.shared, &joint, h)?;
        let decoder = c.decoder.forward(g, store, z_hat)?;
        let spans = cooperate::decoder_spans(g, &decoder, sample.duration);
        let top = spans
            .first()
            .ok_or_else(|| Error::Contract("decoder produced no spans".into()))?;
        let h_bar = cooperate::mr2hd(
            g,
            store,
            &c.mr2hd,
            projected.v_hat,
            &joint,
            z_hat,
            (top.start, top.end),
            sample.clip_len,
        )?;
        let highlight = g.value(h_bar).data().iter().map(|x| x.as_f64()).collect();
        let out = ForwardOutput {
            projected,
            s_hat,
            joint,
            h,
            z_hat,
            decoder,
            h_bar,
            prediction: MomentPrediction { spans, highlight },
        };

        let losses = match (mode, early) {
            (Mode::Train(settings), Some((local, v_global, t_global))) => {
                let gt: Vec<(f64, f64)> = sample
                    .relevant_windows
                    .iter()
                    .map(|&w| window_to_cw(w, sample.duration))
                    .collect();
                let (mom, matching) = losses::moment_loss(g, &decoder, &gt, &settings.weights)?;
                let pairs = losses::saliency_pairs(
                    sample,
                    settings.weights.saliency_min_gap,
                    settings.weights.saliency_max_pairs,
                    sample_pair_seed(settings.pair_seed, sample.qid),
                );
                let high = losses::saliency_loss(g, h, h_bar, &pairs, &settings.weights)?;
                Some(SampleLosses { local, mom, high, v_global, t_global, matching })
            }
            _ => None,
        };
        Ok((out, losses))
    }

    /// Prediction for one sample on a fresh graph.
    pub fn predict_sample(&self, sample: &QuerySample, bundle: &FeatureBundle<F>) -> Result<MomentPrediction> {
        let mut g = Graph::new();
        Ok(self.forward(&mut g, sample, bundle, Mode::Infer)?.0.prediction)
    }
}

/// Batch objective on one graph.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub mom: Var,
    pub high: Var,
    pub local: Var,
    pub global: Var,
    pub outputs: Vec<ForwardOutput>,
}

impl BatchLoss {
    pub fn breakdown<F: Scalar>(&self, g: &Graph<F>, lambda_lg: f64) -> LossBreakdown {
        LossBreakdown {
            mom: g.item(self.mom).as_f64(),
            high: g.item(self.high).as_f64(),
            local: g.item(self.local).as_f64(),
            global: g.item(self.global).as_f64(),
            total: g.item(self.total).as_f64(),
            lambda_lg,
        }
    }
}

/// Forward over every sample of a batch, then
/// `mean(mom) + mean(high) + λ_lg · (mean(local) + global)`, where the
/// contrastive term spans the whole batch.
pub fn batch_loss<F: Scalar>(
    g: &mut Graph<F>,
    model: &Model<F>,
    batch: &[(&QuerySample, &FeatureBundle<F>)],
    settings: &LossSettings,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut outputs = Vec::with_capacity(batch.len());
    let mut parts = Vec::with_capacity(batch.len());
    for &(s, b) in batch {
        let (out, l) = model.forward(g, s, b, Mode::Train(settings))?;
        outputs.push(out);
        parts.push(l.expect("training forward returns losses"));
    }
    let inv_b = F::one() / F::from_usize_lossy(batch.len());
    let mean_of = |g: &mut Graph<F>, pick: fn(&SampleLosses) -> Var| -> Result<Var> {
        let mut acc = pick(&parts[0]);
        for p in &parts[1..] {
            acc = g.add(acc, pick(p))?;
        }
        Ok(g.scale(acc, inv_b))
    };
    let mom = mean_of(g, |p| p.mom)?;
    let high = mean_of(g, |p| p.high)?;
    let local = mean_of(g, |p| p.local)?;
    let vs: Vec<Var> = parts.iter().map(|p| p.v_global).collect();
    let ts: Vec<Var> = parts.iter().map(|p| p.t_global).collect();
    let vg = g.concat(&vs, 0)?;
    let tg = g.concat(&ts, 0)?;
    let global = align::global_loss(g, vg, tg, F::lit(settings.temperature))?;
    let total = losses::total_loss_graph(g, mom, high, local, global, settings.lambda_lg)?;
    Ok(BatchLoss { total, mom, high, local, global, outputs })
}
