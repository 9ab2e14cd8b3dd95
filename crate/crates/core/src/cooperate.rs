//! Task cooperation between highlight detection and moment retrieval.
//!
//! Highlight scores `H` come from a self-attention block over the joint
//! features; their softmax reweights the joint features, which pass through
//! the *same* block before the moment decoder (HD2MR). The top retrieved
//! moment is then summarized by a GRU and its cosine similarity to every clip
//! reweights the decoder features into refined highlight scores (MR2HD).

use rand::Rng;

use crate::align::l2_normalize_rows;
use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention, SelfAttentionBlock};
use crate::params::{ParamId, ParamStore};
use crate::refine::JointFeatures;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// One retrieved span in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub start: f64,
    pub end: f64,
    pub score: f64,
    /// Decoder query that produced the span.
    pub query: usize,
}

/// Score-sorted spans plus per-clip highlight scores for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPrediction {
    pub spans: Vec<Span>,
    pub highlight: Vec<f64>,
}

/// Initial (`h`) and refined (`h_bar`) highlight logits, both length `L`.
#[derive(Debug, Clone, Copy)]
pub struct HighlightScores {
    pub h: Var,
    pub h_bar: Var,
}

/// Self-attention parameters used at both the highlight call site and the
/// HD2MR call site. Cloning copies ids, not storage.
#[derive(Debug, Clone)]
pub struct SharedSelfAttention(pub SelfAttentionBlock);

impl SharedSelfAttention {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        self.0.forward(g, store, x)
    }
}

pub fn highlight_head<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    shared: &SharedSelfAttention,
    head: &Linear,
    z: &JointFeatures,
) -> Result<Var> {
    let (l, _) = g.value(z.z).dims2()?;
    let enc = shared.forward(g, store, z.z)?;
    let h = head.forward(g, store, enc)?;
    g.reshape(h, &[l])
}

/// `z_hat = SelfAttention(z + softmax(h) ⊙ z)` with the shared block.
pub fn hd2mr<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    shared: &SharedSelfAttention,
    z: &JointFeatures,
    h: Var,
) -> Result<Var> {
    let w = g.softmax(h, 0)?;
    let z_bar = g.scale_rows(z.z, w)?;
    let sum = g.add(z.z, z_bar)?;
    shared.forward(g, store, sum)
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

/// Learnable queries refined by cross-attention over the encoded clips, then
/// regressed to normalized (center, width) and a foreground logit.
#[derive(Debug, Clone)]
pub struct MomentDecoder {
    pub queries: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    pub span_head: Linear,
    pub class_head: Linear,
    pub num_queries: usize,
}

/// Decoder outputs on the graph: `cw` is `M × 2` (sigmoid center, width),
/// `logits` and `scores` are length `M`.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    pub cw: Var,
    pub logits: Var,
    pub scores: Var,
}

impl MomentDecoder {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        d: usize,
        num_queries: usize,
        num_layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let queries = store.insert_normal("cooperate.decoder.queries", &[num_queries, d], 1.0, rng)?;
        let layers = (0..num_layers)
            .map(|i| {
                let p = format!("cooperate.decoder.layer{i}");
                Ok(DecoderLayer {
                    norm_attn: LayerNorm::new(store, &format!("{p}.norm_attn"), d)?,
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, heads, rng)?,
                    norm_ff: LayerNorm::new(store, &format!("{p}.norm_ff"), d)?,
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, 2 * d, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            queries,
            layers,
            norm: LayerNorm::new(store, "cooperate.decoder.norm", d)?,
            span_head: Linear::new(store, "cooperate.decoder.span_head", d, 2, rng)?,
            class_head: Linear::new(store, "cooperate.decoder.class_head", d, 1, rng)?,
            num_queries,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        memory: Var,
    ) -> Result<DecoderOutput> {
        let mut q = g.param(store, self.queries);
        for layer in &self.layers {
            let n = layer.norm_attn.forward(g, store, q)?;
            let a = layer.attn.forward(g, store, n, memory)?;
            q = g.add(q, a)?;
            let n = layer.norm_ff.forward(g, store, q)?;
            let f = layer.ff.forward(g, store, n)?;
            q = g.add(q, f)?;
        }
        let q = self.norm.forward(g, store, q)?;
        let cw = self.span_head.forward(g, store, q)?;
        let cw = g.sigmoid(cw);
        let logits = self.class_head.forward(g, store, q)?;
        let logits = g.reshape(logits, &[self.num_queries])?;
        let scores = g.sigmoid(logits);
        Ok(DecoderOutput { cw, logits, scores })
    }
}

/// Converts normalized (center, width) rows to second-based spans clamped to
/// `[0, duration]`, sorted by score descending (ties by query index).
pub fn decode_spans(cw: &[(f64, f64)], scores: &[f64], duration: f64) -> Vec<Span> {
    let mut spans: Vec<Span> = cw
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(query, (&(c, w), &score))| Span {
            start: ((c - 0.5 * w) * duration).clamp(0.0, duration),
            end: ((c + 0.5 * w) * duration).clamp(0.0, duration),
            score,
            query,
        })
        .collect();
    spans.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.query.cmp(&b.query)));
    spans
}

/// Reads decoder outputs off the graph and decodes them.
pub fn decoder_spans<F: Scalar>(g: &Graph<F>, out: &DecoderOutput, duration: f64) -> Vec<Span> {
    let cw = g.value(out.cw).data();
    let pairs: Vec<(f64, f64)> = cw
        .chunks_exact(2)
        .map(|p| (p[0].as_f64(), p[1].as_f64()))
        .collect();
    let scores: Vec<f64> = g.value(out.scores).data().iter().map(|s| s.as_f64()).collect();
    decode_spans(&pairs, &scores, duration)
}

/// Single-layer GRU cell:
/// `u = σ(x W_u + h U_u + b_u)`, `r = σ(x W_r + h U_r + b_r)`,
/// `c = tanh(x W_c + (r ⊙ h) U_c + b_c)`, `h' = (1 − u) ⊙ h + u ⊙ c`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_update: Linear,
    pub input_reset: Linear,
    pub input_cand: Linear,
    pub hidden_update: ParamId,
    pub hidden_reset: ParamId,
    pub hidden_cand: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        path: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hid = |store: &mut ParamStore<F>, name: &str, rng: &mut R| {
            store.insert_uniform(&format!("{path}.{name}"), &[hidden, hidden], hidden, rng)
        };
        Ok(Self {
            input_update: Linear::new(store, &format!("{path}.input_update"), d_in, hidden, rng)?,
            input_reset: Linear::new(store, &format!("{path}.input_reset"), d_in, hidden, rng)?,
            input_cand: Linear::new(store, &format!("{path}.input_cand"), d_in, hidden, rng)?,
            hidden_update: hid(store, "hidden_update", rng)?,
            hidden_reset: hid(store, "hidden_reset", rng)?,
            hidden_cand: hid(store, "hidden_cand", rng)?,
            hidden,
        })
    }

    /// One step on row vectors: `x` is `1 × d_in`, `h` is `1 × hidden`.
    pub fn step<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, h: Var) -> Result<Var> {
        let gate = |g: &mut Graph<F>, lin: &Linear, u: ParamId, hin: Var| -> Result<Var> {
            let xi = lin.forward(g, store, x)?;
            let uw = g.param(store, u);
            let hu = g.matmul(hin, uw)?;
            g.add(xi, hu)
        };
        let u = gate(g, &self.input_update, self.hidden_update, h)?;
        let u = g.sigmoid(u);
        let r = gate(g, &self.input_reset, self.hidden_reset, h)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let c = gate(g, &self.input_cand, self.hidden_cand, rh)?;
        let c = g.tanh(c);
        let neg_u = g.neg(u);
        let keep = g.add_scalar(neg_u, F::one());
        let kept = g.mul(keep, h)?;
        let new = g.mul(u, c)?;
        g.add(kept, new)
    }

    /// Final hidden state after running over the rows of `seq`, from zeros.
    pub fn run<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, seq: Var) -> Result<Var> {
        let (n, _) = g.value(seq).dims2()?;
        let mut h = g.constant(Tensor::zeros(&[1, self.hidden]));
        for i in 0..n {
            let x = g.slice(seq, 0, i, i + 1)?;
            h = self.step(g, store, x, h)?;
        }
        Ok(h)
    }
}

/// Clip index range `[floor(start / clip_len), ceil(end / clip_len))`,
/// clamped into `0..num_clips` and widened to at least one clip.
pub fn span_clip_range(
    start: f64,
    end: f64,
    clip_len: f64,
    num_clips: usize,
) -> Result<(usize, usize)> {
    let duration = num_clips as f64 * clip_len;
    if !(start.is_finite() && end.is_finite()) || start > end || end < 0.0 || start > duration {
        return Err(Error::Contract(format!(
            "span [{start}, {end}] outside video of {num_clips} clips"
        )));
    }
    let lo = ((start / clip_len).floor().max(0.0) as usize).min(num_clips - 1);
    let hi = ((end / clip_len).ceil().max(0.0) as usize).min(num_clips);
    Ok(if hi <= lo { (lo, lo + 1) } else { (lo, hi) })
}

#[derive(Debug, Clone)]
pub struct Mr2HdParams {
    pub gru: GruCell,
    pub head: Linear,
}

/// Refined highlight logits
/// `h_bar = Linear(z + softmax(cos(GRU(v_hat[range]), v_hat)) ⊙ z_hat)`.
#[allow(clippy::too_many_arguments)]
pub fn mr2hd<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    params: &Mr2HdParams,
    v_hat: Var,
    z: &JointFeatures,
    z_hat: Var,
    top_span: (f64, f64),
    clip_len: f64,
) -> Result<Var> {
    let (l, _) = g.value(v_hat).dims2()?;
    let (lo, hi) = span_clip_range(top_span.0, top_span.1, clip_len, l)?;
    let moment = g.slice(v_hat, 0, lo, hi)?;
    let summary = params.gru.run(g, store, moment)?;
    let vn = l2_normalize_rows(g, v_hat)?;
    let sn = l2_normalize_rows(g, summary)?;
    let snt = g.transpose(sn)?;
    let s_ref = g.matmul(vn, snt)?;
    let s_ref = g.reshape(s_ref, &[l])?;
    let w = g.softmax(s_ref, 0)?;
    let weighted = g.scale_rows(z_hat, w)?;
    let mix = g.add(z.z, weighted)?;
    let h_bar = params.head.forward(g, store, mix)?;
    g.reshape(h_bar, &[l])
}

#[derive(Debug, Clone)]
pub struct CooperateParams {
    pub shared: SharedSelfAttention,
    pub highlight: Linear,
    pub decoder: MomentDecoder,
    pub mr2hd: Mr2HdParams,
}

impl CooperateParams {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        d: usize,
        num_queries: usize,
        decoder_layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            shared: SharedSelfAttention(SelfAttentionBlock::new(
                store,
                "cooperate.shared_sa",
                d,
                heads,
                rng,
            )?),
            highlight: Linear::new(store, "cooperate.highlight_head", d, 1, rng)?,
            decoder: MomentDecoder::new(store, d, num_queries, decoder_layers, heads, rng)?,
            mr2hd: Mr2HdParams {
                gru: GruCell::new(store, "cooperate.mr2hd.gru", d, d, rng)?,
                head: Linear::new(store, "cooperate.mr2hd.head", d, 1, rng)?,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(d: usize) -> (ParamStore<f64>, CooperateParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let p = CooperateParams::new(&mut store, d, 3, 2, 2, &mut rng).unwrap();
        (store, p, rng)
    }

    fn joint(g: &mut Graph<f64>, t: Tensor<f64>) -> JointFeatures {
        let z = g.constant(t);
        JointFeatures { z, attention: z }
    }

    #[test]
    fn highlight_head_shape_and_bias() {
        let (mut store, p, mut rng) = setup(4);
        let mut g = Graph::new();
        let z = joint(&mut g, rand_matrix(&mut rng, 6, 4));
        let h = highlight_head(&mut g, &store, &p.shared, &p.highlight, &z).unwrap();
        assert_eq!(g.shape(h), &[6]);

        store.value_mut(p.highlight.w).data_mut().iter_mut().for_each(|x| *x = 0.0);
        store.value_mut(p.highlight.b).data_mut()[0] = 0.37;
        let mut g = Graph::new();
        let z = joint(&mut g, rand_matrix(&mut rng, 6, 4));
        let h = highlight_head(&mut g, &store, &p.shared, &p.highlight, &z).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn hd2mr_constant_scores_scale_by_one_plus_inv_l() {
        let (store, p, mut rng) = setup(4);
        let zt = rand_matrix(&mut rng, 5, 4);
        let mut g = Graph::new();
        let z = joint(&mut g, zt.clone());
        let h = g.constant(Tensor::full(&[5], 0.8));
        let out = hd2mr(&mut g, &store, &p.shared, &z, h).unwrap();
        let scaled = g.constant(zt.map(|v| v * 1.2));
        let want = p.shared.forward(&mut g, &store, scaled).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(want).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hd2mr_dominant_clip() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zt = rand_matrix(&mut rng, 4, 3);
        let z = g.constant(zt.clone());
        let h = g.constant(Tensor::vector(vec![0.0, 50.0, 0.0, 0.0]));
        let w = g.softmax(h, 0).unwrap();
        let zb = g.scale_rows(z, w).unwrap();
        for i in 0..4 {
            for (j, &v) in g.value(zb).row(i).iter().enumerate() {
                let want = if i == 1 { zt.get2(1, j) } else { 0.0 };
                assert!((v - want).abs() < 1e-20 + 1e-12 * want.abs());
            }
        }
    }

    #[test]
    fn shared_block_is_one_storage() {
        let (mut store, p, mut rng) = setup(4);
        let zt = rand_matrix(&mut rng, 5, 4);
        let run = |store: &ParamStore<f64>| {
            let mut g = Graph::new();
            let z = joint(&mut g, zt.clone());
            let h = g.constant(Tensor::vector(vec![0.1, 0.5, -0.3, 0.0, 0.2]));
            let out = hd2mr(&mut g, store, &p.shared, &z, h).unwrap();
            g.value(out).clone()
        };
        let before = run(&store);
        // Mutate through the ids the highlight call site uses.
        let id = p.shared.0.attn.q.w;
        store.value_mut(id).data_mut()[0] += 0.5;
        assert_ne!(run(&store), before);
    }

    #[test]
    fn decode_examples() {
        let spans = decode_spans(&[(0.5, 0.5), (0.9, 0.6)], &[0.2, 0.7], 100.0);
        assert_eq!(spans[0].query, 1);
        assert!((spans[0].start - 60.0).abs() < 1e-12 && spans[0].end == 100.0);
        assert_eq!((spans[1].start, spans[1].end), (25.0, 75.0));
    }

    #[test]
    fn decoder_outputs_m_spans_inside_video() {
        let (store, p, mut rng) = setup(4);
        let mut g = Graph::new();
        let mem = g.constant(rand_matrix(&mut rng, 7, 4));
        let out = p.decoder.forward(&mut g, &store, mem).unwrap();
        let spans = decoder_spans(&g, &out, 14.0);
        assert_eq!(spans.len(), 3);
        for s in &spans {
            assert!(0.0 <= s.start && s.start <= s.end && s.end <= 14.0);
            assert!(s.score > 0.0 && s.score < 1.0);
        }
        assert!(spans.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn gru_special_cases() {
        let (mut store, p, _) = setup(3);
        let cell = &p.mr2hd.gru;
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![0.4, -1.0, 2.0]).unwrap());
        let h0 = g.constant(Tensor::zeros(&[1, 3]));
        let h1 = cell.step(&mut g, &store, x, h0).unwrap();
        assert!(g.value(h1).data().iter().all(|&v| v == 0.0));

        store.value_mut(cell.input_update.b).data_mut().iter_mut().for_each(|b| *b = -50.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![0.4, -1.0, 2.0]).unwrap());
        let h = g.constant(Tensor::matrix(1, 3, vec![0.3, 0.2, -0.9]).unwrap());
        let h1 = cell.step(&mut g, &store, x, h).unwrap();
        for (a, b) in g.value(h1).data().iter().zip([0.3, 0.2, -0.9]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_step_matches_scalar_recomputation() {
        let (store, p, mut rng) = setup(3);
        let cell = &p.mr2hd.gru;
        let xv = rand_matrix(&mut rng, 1, 3);
        let hv = rand_matrix(&mut rng, 1, 3);
        let mut g = Graph::new();
        let x = g.constant(xv.clone());
        let h = g.constant(hv.clone());
        let out = cell.step(&mut g, &store, x, h).unwrap();

        let w = |lin: &Linear| (store.value(lin.w).clone(), store.value(lin.b).clone());
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let affine = |(wm, b): &(Tensor<f64>, Tensor<f64>), u: &Tensor<f64>, inp: &[f64], hid: &[f64], j: usize| {
            let mut s = b.data()[j];
            for i in 0..3 {
                s += inp[i] * wm.get2(i, j) + hid[i] * u.get2(i, j);
            }
            s
        };
        let (wu, wr, wc) = (w(&cell.input_update), w(&cell.input_reset), w(&cell.input_cand));
        let (uu, ur, uc) = (
            store.value(cell.hidden_update),
            store.value(cell.hidden_reset),
            store.value(cell.hidden_cand),
        );
        let (x, hp) = (xv.data(), hv.data());
        let r: Vec<f64> = (0..3).map(|j| sig(affine(&wr, ur, x, hp, j))).collect();
        let rh: Vec<f64> = (0..3).map(|j| r[j] * hp[j]).collect();
        for j in 0..3 {
            let u = sig(affine(&wu, uu, x, hp, j));
            let c = affine(&wc, uc, x, &rh, j).tanh();
            let want = (1.0 - u) * hp[j] + u * c;
            assert!((g.value(out).data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_range_rules() {
        assert_eq!(span_clip_range(2.0, 6.0, 2.0, 8).unwrap(), (1, 3));
        assert_eq!(span_clip_range(2.5, 5.1, 2.0, 8).unwrap(), (1, 3));
        assert_eq!(span_clip_range(4.0, 4.0, 2.0, 8).unwrap(), (2, 3));
        assert_eq!(span_clip_range(16.0, 16.0, 2.0, 8).unwrap(), (7, 8));
        assert!(span_clip_range(17.0, 18.0, 2.0, 8).is_err());
        assert!(span_clip_range(f64::NAN, 1.0, 2.0, 8).is_err());
    }

    #[test]
    fn mr2hd_length_and_single_clip() {
        let (store, p, mut rng) = setup(4);
        for span in [(0.0, 2.0), (0.0, 12.0), (5.0, 5.5)] {
            let mut g = Graph::new();
            let v_hat = g.constant(rand_matrix(&mut rng, 6, 4));
            let z = joint(&mut g, rand_matrix(&mut rng, 6, 4));
            let z_hat = g.constant(rand_matrix(&mut rng, 6, 4));
            let hb = mr2hd(&mut g, &store, &p.mr2hd, v_hat, &z, z_hat, span, 2.0).unwrap();
            assert_eq!(g.shape(hb), &[6]);
        }
    }

    #[test]
    fn cosine_of_parallel_row_is_one() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![2.0, -4.0, 1.0], vec![0.0, 1.0, 4.0]]).unwrap());
        let vn = l2_normalize_rows(&mut g, v).unwrap();
        let fname = l2_normalize_rows(&mut g, f).unwrap();
        let ft = g.transpose(fname).unwrap();
        let s = g.matmul(vn, ft).unwrap();
        assert!((g.value(s).data()[0] - 1.0).abs() < 1e-8);
        assert!(g.value(s).data()[1].abs() < 1e-12);
    }
}
