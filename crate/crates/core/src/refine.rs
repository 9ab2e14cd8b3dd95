//! Query-guided visual refinement and cross-attention fusion into joint
//! clip features.

use rand::Rng;

use crate::align::ProjectedFeatures;
use crate::error::Result;
use crate::layers::{attend, sinusoidal_positions, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone)]
pub struct RefineParams {
    pub sim_v: Linear,
    pub sim_t: Linear,
    pub fuse: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub norm: LayerNorm,
    pub d: usize,
}

impl RefineParams {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            sim_v: Linear::new(store, "refine.sim_v", d, d, rng)?,
            sim_t: Linear::new(store, "refine.sim_t", d, d, rng)?,
            fuse: Linear::new(store, "refine.fuse", 5 * d, d, rng)?,
            q: Linear::new(store, "refine.xattn.q", d, d, rng)?,
            k: Linear::new(store, "refine.xattn.k", d, d, rng)?,
            v: Linear::new(store, "refine.xattn.v", d, d, rng)?,
            norm: LayerNorm::new(store, "refine.xattn.norm", d)?,
            d,
        })
    }
}

/// Clip-word similarity `A` (`L × N`) with its row- and column-softmaxed
/// versions.
#[derive(Debug, Clone, Copy)]
pub struct CrossSimilarity {
    pub a: Var,
    pub a_row: Var,
    pub a_col: Var,
}

/// Joint clip features `Z` (`L × d`) and the attention weights that built them.
#[derive(Debug, Clone, Copy)]
pub struct JointFeatures {
    pub z: Var,
    pub attention: Var,
}

/// Adds the sinusoidal position table to `v_hat`.
pub fn with_positions<F: Scalar>(g: &mut Graph<F>, v_hat: Var) -> Result<Var> {
    let (l, d) = g.value(v_hat).dims2()?;
    let pe = g.constant(sinusoidal_positions(l, d));
    g.add(v_hat, pe)
}

pub fn cross_similarity<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    params: &RefineParams,
    p: &ProjectedFeatures,
) -> Result<CrossSimilarity> {
    let pv = params.sim_v.forward(g, store, p.v_hat)?;
    let pt = params.sim_t.forward(g, store, p.t_hat)?;
    let ptt = g.transpose(pt)?;
    let a = g.matmul(pv, ptt)?;
    let a = g.scale(a, F::one() / F::from_usize_lossy(params.d).sqrt());
    Ok(CrossSimilarity {
        a,
        a_row: g.softmax(a, 1)?,
        a_col: g.softmax(a, 0)?,
    })
}

/// `F_v2q = A_r · t_hat` and `F_q2v = A_r · A_cᵀ · v_hat`, both `L × d`.
pub fn bidirectional_attend<F: Scalar>(
    g: &mut Graph<F>,
    cs: &CrossSimilarity,
    p: &ProjectedFeatures,
) -> Result<(Var, Var)> {
    let v2q = g.matmul(cs.a_row, p.t_hat)?;
    let act = g.transpose(cs.a_col)?;
    let rc = g.matmul(cs.a_row, act)?;
    let q2v = g.matmul(rc, p.v_hat)?;
    Ok((v2q, q2v))
}

/// Linear map of `[v_hat ‖ F_v2q ‖ v_hat⊙F_v2q ‖ v_hat⊙F_q2v ‖ F_t^G]`, where
/// `F_t^G` repeats the word-mean of `t_hat` on every clip row.
pub fn fuse<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    params: &RefineParams,
    p: &ProjectedFeatures,
    v2q: Var,
    q2v: Var,
) -> Result<Var> {
    let (l, _) = g.value(p.v_hat).dims2()?;
    let t_mean = g.mean_axis(p.t_hat, 0)?;
    let t_global = g.broadcast_rows(t_mean, l)?;
    let prod_v2q = g.mul(p.v_hat, v2q)?;
    let prod_q2v = g.mul(p.v_hat, q2v)?;
    let cat = g.concat(&[p.v_hat, v2q, prod_v2q, prod_q2v, t_global], 1)?;
    params.fuse.forward(g, store, cat)
}

/// Single-head cross-attention from refined clips (queries) to words
/// (keys/values). Unless `raw` is set, the attention output gets a residual
/// from `v_bar` and a layer norm.
pub fn cross_attention_fusion<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    params: &RefineParams,
    v_bar: Var,
    t_hat: Var,
    raw: bool,
) -> Result<JointFeatures> {
    let q = params.q.forward(g, store, v_bar)?;
    let k = params.k.forward(g, store, t_hat)?;
    let v = params.v.forward(g, store, t_hat)?;
    let (att, weights) = attend(g, q, k, v, 1)?;
    let z = if raw {
        att
    } else {
        let r = g.add(att, v_bar)?;
        params.norm.forward(g, store, r)?
    };
    Ok(JointFeatures {
        z,
        attention: weights[0],
    })
}

/// Positions, similarity, bidirectional attention, fusion and cross-attention
/// in sequence.
pub fn refine<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    params: &RefineParams,
    p: &ProjectedFeatures,
    raw: bool,
) -> Result<JointFeatures> {
    let positioned = ProjectedFeatures {
        v_hat: with_positions(g, p.v_hat)?,
        t_hat: p.t_hat,
    };
    let cs = cross_similarity(g, store, params, &positioned)?;
    let (v2q, q2v) = bidirectional_attend(g, &cs, &positioned)?;
    let v_bar = fuse(g, store, params, &positioned, v2q, q2v)?;
    cross_attention_fusion(g, store, params, v_bar, positioned.t_hat, raw)
}
