//! Local-global multi-modal alignment: projection of both modalities into a
//! shared width, clip-word cosine similarity, the per-clip BCE regularizer and
//! the batch-level contrastive regularizer.

use rand::Rng;

use crate::data::FeatureBundle;
use crate::error::{dim_err, Result};
use crate::layers::Mlp3;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Added to row norms before dividing.
pub const NORM_EPS: f64 = 1e-8;
/// BCE log arguments are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct AlignParams {
    pub mlp_v: Mlp3,
    pub mlp_t: Mlp3,
}

impl AlignParams {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        d_visual: usize,
        d_text: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            mlp_v: Mlp3::new(store, "align.mlp_v", d_visual, d, rng)?,
            mlp_t: Mlp3::new(store, "align.mlp_t", d_text, d, rng)?,
        })
    }
}

/// Both modalities in the shared width `d`: `v_hat` is `L × d`, `t_hat` is
/// `N × d`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedFeatures {
    pub v_hat: Var,
    pub t_hat: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentLosses<F> {
    pub local: F,
    pub global: F,
}

pub fn project<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    params: &AlignParams,
    bundle: &FeatureBundle<F>,
) -> Result<ProjectedFeatures> {
    let v = g.constant(bundle.visual_input());
    let t = g.constant(bundle.text.clone());
    project_vars(g, store, params, v, t)
}

/// [`project`] on inputs already recorded on the graph.
pub fn project_vars<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    params: &AlignParams,
    visual: Var,
    text: Var,
) -> Result<ProjectedFeatures> {
    Ok(ProjectedFeatures {
        v_hat: params.mlp_v.forward(g, store, visual)?,
        t_hat: params.mlp_t.forward(g, store, text)?,
    })
}

/// Scales every row to unit length (norm + 1e-8 in the denominator).
pub fn l2_normalize_rows<F: Scalar>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let sq = g.mul(x, x)?;
    let ss = g.sum_axis(sq, 1)?;
    let norm = g.sqrt(ss);
    let norm = g.add_scalar(norm, F::lit(NORM_EPS));
    let shape = g.shape(norm).to_vec();
    let ones = g.constant(Tensor::full(&shape, F::one()));
    let inv = g.div(ones, norm)?;
    g.scale_rows(x, inv)
}

/// `S_loc[i][j] = sigmoid(cos(v_hat_i, t_hat_j))` and its mean over words.
pub fn local_similarity<F: Scalar>(g: &mut Graph<F>, p: &ProjectedFeatures) -> Result<(Var, Var)> {
    let vn = l2_normalize_rows(g, p.v_hat)?;
    let tn = l2_normalize_rows(g, p.t_hat)?;
    let tt = g.transpose(tn)?;
    let cos = g.matmul(vn, tt)?;
    let s_loc = g.sigmoid(cos);
    let s_hat = g.mean_axis(s_loc, 1)?;
    Ok((s_loc, s_hat))
}

/// Binary cross-entropy summed over clips.
pub fn local_loss<F: Scalar>(g: &mut Graph<F>, s_hat: Var, relevant: &[bool]) -> Result<Var> {
    bce_sum(g, s_hat, relevant)
}

/// Summed BCE of probabilities against boolean targets, with clamped logs.
pub(crate) fn bce_sum<F: Scalar>(g: &mut Graph<F>, s_hat: Var, relevant: &[bool]) -> Result<Var> {
    if g.shape(s_hat) != [relevant.len()] {
        return dim_err(format!(
            "bce: scores {:?} vs {} labels",
            g.shape(s_hat),
            relevant.len()
        ));
    }
    let eps = F::lit(BCE_EPS);
    let s = g.clamp(s_hat, eps, F::one() - eps);
    let log_s = g.log(s);
    let neg_s = g.neg(s);
    let one_minus = g.add_scalar(neg_s, F::one());
    let log_1ms = g.log(one_minus);
    let c: Vec<F> = relevant.iter().map(|&r| if r { F::one() } else { F::zero() }).collect();
    let not_c: Vec<F> = c.iter().map(|&v| F::one() - v).collect();
    let c = g.constant(Tensor::vector(c));
    let not_c = g.constant(Tensor::vector(not_c));
    let pos = g.mul(c, log_s)?;
    let neg = g.mul(not_c, log_1ms)?;
    let both = g.add(pos, neg)?;
    let total = g.sum(both);
    Ok(g.neg(total))
}

/// Contrastive loss over a batch of pooled features, with one normalizer
/// shared by all anchors:
/// `-(1/B) Σ_i log( exp(v_i·t_i / τ) / Σ_i Σ_j exp(v_i·t_j / τ) )`.
pub fn global_loss<F: Scalar>(
    g: &mut Graph<F>,
    v_globals: Var,
    t_globals: Var,
    temperature: F,
) -> Result<Var> {
    let (b, d) = g.value(v_globals).dims2()?;
    if g.shape(t_globals) != [b, d] {
        return dim_err(format!(
            "global_loss: video {:?} vs text {:?}",
            [b, d],
            g.shape(t_globals)
        ));
    }
    let tt = g.transpose(t_globals)?;
    let logits = g.matmul(v_globals, tt)?;
    let logits = g.scale(logits, F::one() / temperature);
    let flat = g.reshape(logits, &[b * b])?;
    let m = g
        .value(flat)
        .data()
        .iter()
        .copied()
        .fold(F::neg_infinity(), F::max);
    let shifted = g.add_scalar(flat, -m);
    let e = g.exp(shifted);
    let z = g.sum(e);
    let log_z = g.log(z);
    let lse = g.add_scalar(log_z, m);
    let diag_idx: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let diag = g.gather_rows(flat, &diag_idx)?;
    let mean_diag = g.mean(diag);
    g.sub(lse, mean_diag)
}

/// Clip-mean and word-mean of one sample's projected features, as `1 × d` rows.
pub fn pooled_globals<F: Scalar>(g: &mut Graph<F>, p: &ProjectedFeatures) -> Result<(Var, Var)> {
    let gv = g.mean_axis(p.v_hat, 0)?;
    let gt = g.mean_axis(p.t_hat, 0)?;
    let d = g.shape(gv)[0];
    Ok((g.reshape(gv, &[1, d])?, g.reshape(gt, &[1, d])?))
}
