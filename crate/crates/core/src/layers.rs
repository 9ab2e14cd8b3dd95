//! Parameterized building blocks: linear maps, layer norm, MLPs and
//! attention. Each layer holds parameter ids; `forward` records onto a graph.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        path: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.insert_uniform(&format!("{path}.w"), &[fan_in, fan_out], fan_in, rng)?;
        let b = store.insert(&format!("{path}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    /// `x · W + b` for `x` of shape `n × fan_in`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, path: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert(&format!("{path}.gain"), Tensor::full(&[d], F::one()))?,
            bias: store.insert(&format!("{path}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Three linear layers with ReLU between them and a layer norm after the
/// last, all hidden widths equal to the output width.
#[derive(Debug, Clone)]
pub struct Mlp3 {
    pub layers: [Linear; 3],
    pub norm: LayerNorm,
}

impl Mlp3 {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        path: &str,
        d_in: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            layers: [
                Linear::new(store, &format!("{path}.l0"), d_in, d, rng)?,
                Linear::new(store, &format!("{path}.l1"), d, d, rng)?,
                Linear::new(store, &format!("{path}.l2"), d, d, rng)?,
            ],
            norm: LayerNorm::new(store, &format!("{path}.norm"), d)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    /// Output of the last linear layer, before the layer norm.
    pub fn forward_pre_norm<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let (_, cols) = g.value(x).dims2()?;
        if cols != self.input_dim() {
            return dim_err(format!(
                "MLP expects input width {}, got {cols}",
                self.input_dim()
            ));
        }
        let h = self.layers[0].forward(g, store, x)?;
        let h = g.relu(h);
        let h = self.layers[1].forward(g, store, h)?;
        let h = g.relu(h);
        self.layers[2].forward(g, store, h)
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.forward_pre_norm(g, store, x)?;
        self.norm.forward(g, store, h)
    }
}

/// Scaled dot-product attention split into `heads` column groups.
/// Returns the concatenated head outputs and the per-head weight matrices.
pub fn attend<F: Scalar>(
    g: &mut Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (_, d) = g.value(q).dims2()?;
    if heads == 0 || d % heads != 0 {
        return dim_err(format!("{heads} heads do not divide width {d}"));
    }
    let dh = d / heads;
    let scale = F::one() / F::from_usize_lossy(dh).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, 1, h * dh, (h + 1) * dh)?,
                g.slice(k, 1, h * dh, (h + 1) * dh)?,
                g.slice(v, 1, h * dh, (h + 1) * dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale);
        let w = g.softmax(logits, 1)?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    Ok((out, weights))
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        path: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{path}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{path}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{path}.v"), d, d, rng)?,
            out: Linear::new(store, &format!("{path}.out"), d, d, rng)?,
            heads,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        query: Var,
        memory: Var,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let (o, _) = attend(g, q, k, v, self.heads)?;
        self.out.forward(g, store, o)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        path: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{path}.up"), d, hidden, rng)?,
            down: Linear::new(store, &format!("{path}.down"), hidden, d, rng)?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.relu(h);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm transformer block: attention + residual, feed-forward + residual.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        path: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{path}.norm_attn"), d)?,
            attn: MultiHeadAttention::new(store, &format!("{path}.attn"), d, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{path}.norm_ff"), d)?,
            ff: FeedForward::new(store, &format!("{path}.ff"), d, 2 * d, rng)?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let n = self.norm_attn.forward(g, store, x)?;
        let a = self.attn.forward(g, store, n, n)?;
        let x = g.add(x, a)?;
        let n = self.norm_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, n)?;
        g.add(x, f)
    }

    /// Every parameter id of the block, in a fixed order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let lin = |l: &Linear| [l.w, l.b];
        let mut ids = vec![self.norm_attn.gain, self.norm_attn.bias];
        for l in [&self.attn.q, &self.attn.k, &self.attn.v, &self.attn.out] {
            ids.extend(lin(l));
        }
        ids.extend([self.norm_ff.gain, self.norm_ff.bias]);
        ids.extend(lin(&self.ff.up));
        ids.extend(lin(&self.ff.down));
        ids
    }
}

/// Sinusoidal position table, `len × d`.
pub fn sinusoidal_positions<F: Scalar>(len: usize, d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(F::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("position table shape")
}
