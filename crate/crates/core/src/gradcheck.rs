//! Central-difference gradient checks for every differentiable kernel and for
//! the full training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align;
use crate::cooperate::DecoderOutput;
use crate::data::synth::{synth_generate, SynthConfig};
use crate::data::FeatureBundle;
use crate::error::Result;
use crate::layers::attend;
use crate::losses::{self, LossWeights};
use crate::model::{batch_loss, LossSettings, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

pub const KERNEL_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error, so gradients that are zero up
/// to rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;
const KERNEL_STEP: f64 = 1e-5;
const END_TO_END_STEP: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub trials: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub kernel_tolerance: f64,
    pub end_to_end_tolerance: f64,
    pub kernels: Vec<CheckResult>,
    pub end_to_end: CheckResult,
    pub passed: bool,
}

type Inputs = fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;
type Body = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

pub struct Kernel {
    pub name: &'static str,
    pub inputs: Inputs,
    pub body: Body,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("shape matches length")
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut t = uniform(rng, shape, lo, hi);
    for x in t.data_mut() {
        if rng.random_bool(0.5) {
            *x = -*x;
        }
    }
    t
}

fn std_in(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

/// A pair of same-shape tensors whose entries differ by at least `gap`.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Vec<Tensor<f64>> {
    let a = std_in(rng, shape);
    let d = signed(rng, shape, gap, 1.0);
    let b = Tensor::new(
        shape.to_vec(),
        a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect(),
    )
    .expect("same shape");
    vec![a, b]
}

const HINGE_PAIRS: [(usize, usize); 4] = [(0, 1), (0, 2), (3, 1), (4, 2)];
const HINGE_MARGIN: f64 = 0.2;

fn kernels() -> Vec<Kernel> {
    vec![
        Kernel { name: "matmul", inputs: |r| vec![std_in(r, &[3, 4]), std_in(r, &[4, 2])], body: |g, x| g.matmul(x[0], x[1]) },
        Kernel { name: "add", inputs: |r| vec![std_in(r, &[3, 4]), std_in(r, &[3, 4])], body: |g, x| g.add(x[0], x[1]) },
        Kernel { name: "sub", inputs: |r| vec![std_in(r, &[3, 4]), std_in(r, &[3, 4])], body: |g, x| g.sub(x[0], x[1]) },
        Kernel { name: "mul", inputs: |r| vec![std_in(r, &[3, 4]), std_in(r, &[3, 4])], body: |g, x| g.mul(x[0], x[1]) },
        Kernel { name: "div", inputs: |r| vec![std_in(r, &[3, 4]), signed(r, &[3, 4], 0.5, 2.0)], body: |g, x| g.div(x[0], x[1]) },
        Kernel { name: "maximum", inputs: |r| separated(r, &[3, 4], 0.05), body: |g, x| g.maximum(x[0], x[1]) },
        Kernel { name: "minimum", inputs: |r| separated(r, &[3, 4], 0.05), body: |g, x| g.minimum(x[0], x[1]) },
        Kernel { name: "scale", inputs: |r| vec![std_in(r, &[5])], body: |g, x| Ok(g.scale(x[0], -2.5)) },
        Kernel { name: "add_scalar", inputs: |r| vec![std_in(r, &[5])], body: |g, x| Ok(g.add_scalar(x[0], 0.7)) },
        Kernel { name: "neg", inputs: |r| vec![std_in(r, &[5])], body: |g, x| Ok(g.neg(x[0])) },
        Kernel { name: "exp", inputs: |r| vec![std_in(r, &[2, 3])], body: |g, x| Ok(g.exp(x[0])) },
        Kernel { name: "log", inputs: |r| vec![uniform(r, &[2, 3], 0.3, 3.0)], body: |g, x| Ok(g.log(x[0])) },
        Kernel { name: "tanh", inputs: |r| vec![std_in(r, &[2, 3])], body: |g, x| Ok(g.tanh(x[0])) },
        Kernel { name: "relu", inputs: |r| vec![signed(r, &[2, 3], 0.05, 1.0)], body: |g, x| Ok(g.relu(x[0])) },
        Kernel { name: "sigmoid", inputs: |r| vec![uniform(r, &[2, 3], -3.0, 3.0)], body: |g, x| Ok(g.sigmoid(x[0])) },
        Kernel { name: "sqrt", inputs: |r| vec![uniform(r, &[2, 3], 0.3, 3.0)], body: |g, x| Ok(g.sqrt(x[0])) },
        Kernel { name: "abs", inputs: |r| vec![signed(r, &[2, 3], 0.05, 1.0)], body: |g, x| Ok(g.abs(x[0])) },
        Kernel {
            name: "clamp",
            // Entries sit at least 0.05 away from both bounds.
            inputs: |r| vec![uniform(r, &[2, 3], -1.0, 1.0).map(|x| if (x.abs() - 0.5).abs() < 0.05 { x * 0.8 } else { x })],
            body: |g, x| Ok(g.clamp(x[0], -0.5, 0.5)),
        },
        Kernel { name: "sum", inputs: |r| vec![std_in(r, &[3, 2])], body: |g, x| Ok(g.sum(x[0])) },
        Kernel { name: "mean", inputs: |r| vec![std_in(r, &[3, 2])], body: |g, x| Ok(g.mean(x[0])) },
        Kernel { name: "sum_axis0", inputs: |r| vec![std_in(r, &[3, 4])], body: |g, x| g.sum_axis(x[0], 0) },
        Kernel { name: "sum_axis1", inputs: |r| vec![std_in(r, &[3, 4])], body: |g, x| g.sum_axis(x[0], 1) },
        Kernel { name: "mean_axis0", inputs: |r| vec![std_in(r, &[3, 4])], body: |g, x| g.mean_axis(x[0], 0) },
        Kernel { name: "mean_axis1", inputs: |r| vec![std_in(r, &[3, 4])], body: |g, x| g.mean_axis(x[0], 1) },
        Kernel { name: "softmax_rows", inputs: |r| vec![uniform(r, &[3, 4], -2.0, 2.0)], body: |g, x| g.softmax(x[0], 1) },
        Kernel { name: "softmax_cols", inputs: |r| vec![uniform(r, &[3, 4], -2.0, 2.0)], body: |g, x| g.softmax(x[0], 0) },
        Kernel { name: "softmax_vector", inputs: |r| vec![uniform(r, &[5], -2.0, 2.0)], body: |g, x| g.softmax(x[0], 0) },
        Kernel {
            name: "layer_norm",
            inputs: |r| vec![uniform(r, &[3, 5], -2.0, 2.0), uniform(r, &[5], 0.5, 1.5), std_in(r, &[5])],
            body: |g, x| g.layer_norm(x[0], x[1], x[2]),
        },
        Kernel { name: "concat_rows", inputs: |r| vec![std_in(r, &[2, 3]), std_in(r, &[1, 3])], body: |g, x| g.concat(&[x[0], x[1]], 0) },
        Kernel { name: "concat_cols", inputs: |r| vec![std_in(r, &[2, 3]), std_in(r, &[2, 1])], body: |g, x| g.concat(&[x[0], x[1]], 1) },
        Kernel { name: "slice", inputs: |r| vec![std_in(r, &[4, 3])], body: |g, x| g.slice(x[0], 0, 1, 3) },
        Kernel { name: "slice_cols", inputs: |r| vec![std_in(r, &[4, 3])], body: |g, x| g.slice(x[0], 1, 1, 2) },
        Kernel { name: "gather_rows", inputs: |r| vec![std_in(r, &[4, 2])], body: |g, x| g.gather_rows(x[0], &[3, 0, 3, 1]) },
        Kernel { name: "transpose", inputs: |r| vec![std_in(r, &[2, 3])], body: |g, x| g.transpose(x[0]) },
        Kernel { name: "reshape", inputs: |r| vec![std_in(r, &[2, 3])], body: |g, x| g.reshape(x[0], &[3, 2]) },
        Kernel { name: "broadcast_rows", inputs: |r| vec![std_in(r, &[3])], body: |g, x| g.broadcast_rows(x[0], 4) },
        Kernel { name: "add_row", inputs: |r| vec![std_in(r, &[4, 3]), std_in(r, &[3])], body: |g, x| g.add_row(x[0], x[1]) },
        Kernel { name: "scale_rows", inputs: |r| vec![std_in(r, &[4, 3]), std_in(r, &[4])], body: |g, x| g.scale_rows(x[0], x[1]) },
        Kernel { name: "l2_normalize_rows", inputs: |r| vec![uniform(r, &[3, 4], -2.0, 2.0)], body: |g, x| align::l2_normalize_rows(g, x[0]) },
        Kernel {
            name: "local_alignment",
            inputs: |r| vec![std_in(r, &[5, 4]), std_in(r, &[3, 4])],
            body: |g, x| {
                let p = align::ProjectedFeatures { v_hat: x[0], t_hat: x[1] };
                let (_, s_hat) = align::local_similarity(g, &p)?;
                align::local_loss(g, s_hat, &[true, false, false, true, true])
            },
        },
        Kernel {
            name: "global_contrastive",
            inputs: |r| vec![std_in(r, &[3, 4]), std_in(r, &[3, 4])],
            body: |g, x| align::global_loss(g, x[0], x[1], 0.7),
        },
        Kernel {
            name: "attention",
            inputs: |r| vec![std_in(r, &[3, 4]), std_in(r, &[5, 4]), std_in(r, &[5, 4])],
            body: |g, x| Ok(attend(g, x[0], x[1], x[2], 2)?.0),
        },
        Kernel {
            name: "moment_loss",
            inputs: |r| vec![
                Tensor::new(vec![3, 2], (0..3).flat_map(|_| [r.random_range(0.2..0.8), r.random_range(0.1..0.4)]).collect()).expect("3 x 2"),
                std_in(r, &[3]),
            ],
            body: |g, x| {
                let scores = g.sigmoid(x[1]);
                let out = DecoderOutput { cw: x[0], logits: x[1], scores };
                let gt = [(0.3, 0.2), (0.65, 0.3)];
                Ok(losses::moment_loss(g, &out, &gt, &LossWeights::default())?.0)
            },
        },
        Kernel {
            name: "saliency_hinge",
            inputs: |r| loop {
                let s = std_in(r, &[5]);
                let d = s.data();
                if HINGE_PAIRS.iter().all(|&(hi, lo)| (HINGE_MARGIN + d[lo] - d[hi]).abs() > 0.05) {
                    break vec![s];
                }
            },
            body: |g, x| losses::pair_hinge(g, x[0], &HINGE_PAIRS, HINGE_MARGIN),
        },
    ]
}

pub fn kernel_names() -> Vec<&'static str> {
    kernels().iter().map(|k| k.name).collect()
}

/// `Σ out ⊙ W` for fixed random weights `W`, making every output entry
/// matter.
fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn eval_kernel(k: &Kernel, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (k.body)(&mut g, &vars)?;
    let l = weighted_sum(&mut g, out, weights)?;
    Ok(g.item(l))
}

/// Worst relative error over every input entry of one kernel at one seed.
pub fn check_kernel(k: &Kernel, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (k.inputs)(&mut rng);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = (k.body)(&mut g, &vars)?;
    let weights = std_in(&mut rng, g.shape(out));
    let l = weighted_sum(&mut g, out, &weights)?;
    g.backward(l)?;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for e in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[e] += KERNEL_STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[e] -= KERNEL_STEP;
            let numeric = (eval_kernel(k, &plus, &weights)? - eval_kernel(k, &minus, &weights)?)
                / (2.0 * KERNEL_STEP);
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    Ok(worst)
}

pub fn check_kernels(seed: u64, seeds: usize) -> Result<Vec<CheckResult>> {
    kernels()
        .iter()
        .map(|k| {
            let mut worst = 0.0f64;
            for s in 0..seeds as u64 {
                worst = worst.max(check_kernel(k, seed.wrapping_mul(1000).wrapping_add(s))?);
            }
            Ok(CheckResult {
                name: k.name.to_string(),
                max_rel_err: worst,
                trials: seeds,
                passed: worst < KERNEL_TOLERANCE,
            })
        })
        .collect()
}

/// Tiny end-to-end setup: two samples with `L = 6`, `N = 3`, and a model
/// with `d = 8`, `M = 3`.
pub fn tiny_setup(seed: u64) -> Result<(Model<f64>, Vec<(crate::data::QuerySample, FeatureBundle<f64>)>)> {
    let ds = synth_generate(
        &SynthConfig {
            num_samples: 2,
            num_clips: 6,
            num_words: 3,
            d_v: 5,
            d_t: 4,
            min_window: 2,
            max_window: 3,
            noise: 0.3,
            ..Default::default()
        },
        seed,
    )?;
    let model = Model::new(
        ModelConfig {
            d_visual: 5,
            d_text: 4,
            d: 8,
            num_queries: 3,
            decoder_layers: 2,
            heads: 2,
            raw_eq11: false,
        },
        seed,
    )?;
    Ok((model, ds.samples))
}

fn tiny_settings(seed: u64) -> LossSettings {
    LossSettings {
        weights: LossWeights::default(),
        lambda_lg: 0.3,
        temperature: 1.0,
        pair_seed: seed,
    }
}

pub fn objective(
    model: &Model<f64>,
    data: &[(crate::data::QuerySample, FeatureBundle<f64>)],
    settings: &LossSettings,
) -> Result<f64> {
    let batch: Vec<_> = data.iter().map(|(s, b)| (s, b)).collect();
    let mut g = Graph::new();
    let bl = batch_loss(&mut g, model, &batch, settings)?;
    Ok(g.item(bl.total))
}

/// Worst relative error over `params` randomly chosen parameter entries.
pub fn check_end_to_end_seed(seed: u64, params: usize) -> Result<f64> {
    let (model, data) = tiny_setup(seed)?;
    let settings = tiny_settings(seed);
    let batch: Vec<_> = data.iter().map(|(s, b)| (s, b)).collect();
    let mut g = Graph::new();
    let bl = batch_loss(&mut g, &model, &batch, &settings)?;
    g.backward(bl.total)?;
    let grads = g.param_grads();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut worst = 0.0f64;
    for _ in 0..params {
        let (id, grad) = &grads[rng.random_range(0..grads.len())];
        let e = rng.random_range(0..grad.len());
        let at = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            m.store.value_mut(*id).data_mut()[e] += delta;
            objective(&m, &data, &settings)
        };
        let numeric = (at(END_TO_END_STEP)? - at(-END_TO_END_STEP)?) / (2.0 * END_TO_END_STEP);
        worst = worst.max(rel_err(grad.data()[e], numeric));
    }
    Ok(worst)
}

pub fn check_end_to_end(seed: u64, seeds: usize, params: usize) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for s in 0..seeds as u64 {
        worst = worst.max(check_end_to_end_seed(seed.wrapping_mul(1000).wrapping_add(s), params)?);
    }
    Ok(CheckResult {
        name: "end_to_end".into(),
        max_rel_err: worst,
        trials: seeds,
        passed: worst < END_TO_END_TOLERANCE,
    })
}

/// Full suite: every kernel over `kernel_seeds` seeds and the end-to-end
/// objective over `e2e_seeds` seeds with five parameters each.
pub fn run_gradcheck(seed: u64, kernel_seeds: usize, e2e_seeds: usize) -> Result<GradcheckReport> {
    let kernels = check_kernels(seed, kernel_seeds)?;
    let end_to_end = check_end_to_end(seed, e2e_seeds, 5)?;
    let passed = kernels.iter().all(|k| k.passed) && end_to_end.passed;
    Ok(GradcheckReport {
        seed,
        kernel_tolerance: KERNEL_TOLERANCE,
        end_to_end_tolerance: END_TO_END_TOLERANCE,
        kernels,
        end_to_end,
        passed,
    })
}

/// Unused-parameter guard for checks built on a raw store.
pub fn all_params_touched(store: &ParamStore<f64>, grads: &[(crate::params::ParamId, Tensor<f64>)]) -> bool {
    grads.len() == store.len()
}
