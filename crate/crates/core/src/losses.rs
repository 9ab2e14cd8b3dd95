//! Set-prediction matching and training objectives.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::bce_sum;
use crate::cooperate::DecoderOutput;
use crate::data::QuerySample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    /// `(prediction, ground truth)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// Minimum-cost assignment of every column (ground truth) of an `M × G` cost
/// matrix to a distinct row (prediction), `G ≤ M`.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let m = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != g) {
        return Err(Error::Dimension("ragged cost matrix".into()));
    }
    if g > m {
        return Err(Error::Contract(format!(
            "{g} ground-truth spans exceed {m} predictions"
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Contract("non-finite matching cost".into()));
    }
    if g == 0 {
        return Ok(MatchResult {
            pairs: vec![],
            unmatched: (0..m).collect(),
        });
    }
    // Shortest augmenting paths with potentials; rows of the working problem
    // are ground truths (1-based), columns are predictions (1-based).
    let a = |i: usize, j: usize| cost[j - 1][i - 1];
    let mut u = vec![0.0; g + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=g {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(g);
    let mut unmatched = Vec::new();
    for j in 1..=m {
        if p[j] != 0 {
            pairs.push((j - 1, p[j] - 1));
        } else {
            unmatched.push(j - 1);
        }
    }
    Ok(MatchResult { pairs, unmatched })
}

pub fn match_cost(cost: &[Vec<f64>], m: &MatchResult) -> f64 {
    m.pairs.iter().map(|&(p, g)| cost[p][g]).sum()
}

/// Generalized IoU of two 1-D intervals: `IoU − (hull − union) / hull`.
pub fn giou_1d(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    let hull = a.1.max(b.1) - a.0.min(b.0);
    inter / union - (hull - union) / hull
}

pub fn cw_to_interval((c, w): (f64, f64)) -> (f64, f64) {
    (c - 0.5 * w, c + 0.5 * w)
}

/// Normalized `(center, width)` of a window in seconds.
pub fn window_to_cw([s, e]: [f64; 2], duration: f64) -> (f64, f64) {
    ((s + e) / (2.0 * duration), (e - s) / duration)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub cls: f64,
    pub saliency: f64,
    pub saliency_margin: f64,
    /// Pairs need at least this mean-rating gap.
    pub saliency_min_gap: f64,
    pub saliency_max_pairs: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 10.0,
            giou: 1.0,
            cls: 4.0,
            saliency: 1.0,
            saliency_margin: 0.2,
            saliency_min_gap: 1.0,
            saliency_max_pairs: 16,
        }
    }
}

/// `M × G` matching cost between predicted and ground-truth spans, all in
/// normalized `(center, width)` form.
pub fn span_cost_matrix(
    pred_cw: &[(f64, f64)],
    scores: &[f64],
    gt_cw: &[(f64, f64)],
    w: &LossWeights,
) -> Vec<Vec<f64>> {
    pred_cw
        .iter()
        .zip(scores)
        .map(|(&p, &score)| {
            gt_cw
                .iter()
                .map(|&t| {
                    let l1 = (p.0 - t.0).abs() + (p.1 - t.1).abs();
                    let giou = giou_1d(cw_to_interval(p), cw_to_interval(t));
                    w.l1 * l1 + w.giou * (1.0 - giou) - w.cls * score
                })
                .collect()
        })
        .collect()
}

/// Matched-span loss: L1 on `(center, width)` and `1 − gIoU`, each averaged
/// over matched pairs, plus foreground BCE averaged over all queries.
pub fn moment_loss<F: Scalar>(
    g: &mut Graph<F>,
    out: &DecoderOutput,
    gt_cw: &[(f64, f64)],
    w: &LossWeights,
) -> Result<(Var, MatchResult)> {
    if let Some(bad) = gt_cw.iter().find(|t| !(t.1 > 0.0)) {
        return Err(Error::Contract(format!("degenerate ground-truth span {bad:?}")));
    }
    let m = g.shape(out.scores)[0];
    let pred: Vec<(f64, f64)> = g
        .value(out.cw)
        .data()
        .chunks_exact(2)
        .map(|p| (p[0].as_f64(), p[1].as_f64()))
        .collect();
    let scores: Vec<f64> = g.value(out.scores).data().iter().map(|s| s.as_f64()).collect();
    let cost = span_cost_matrix(&pred, &scores, gt_cw, w);
    let matched = hungarian_match(&cost)?;

    let mut targets = vec![false; m];
    for &(p, _) in &matched.pairs {
        targets[p] = true;
    }
    let cls = bce_sum(g, out.scores, &targets)?;
    let cls = g.scale(cls, F::lit(w.cls / m as f64));
    if matched.pairs.is_empty() {
        return Ok((cls, matched));
    }

    let k = matched.pairs.len();
    let pred_idx: Vec<usize> = matched.pairs.iter().map(|&(p, _)| p).collect();
    let gt_rows: Vec<F> = matched
        .pairs
        .iter()
        .flat_map(|&(_, t)| [F::lit(gt_cw[t].0), F::lit(gt_cw[t].1)])
        .collect();
    let pm = g.gather_rows(out.cw, &pred_idx)?;
    let gm = g.constant(Tensor::new(vec![k, 2], gt_rows)?);

    let diff = g.sub(pm, gm)?;
    let ad = g.abs(diff);
    let l1 = g.sum(ad);
    let l1 = g.scale(l1, F::lit(w.l1 / k as f64));

    let giou = giou_graph(g, pm, gm)?;
    let one_minus = {
        let neg = g.neg(giou);
        g.add_scalar(neg, F::one())
    };
    let gl = g.sum(one_minus);
    let gl = g.scale(gl, F::lit(w.giou / k as f64));

    let s = g.add(l1, gl)?;
    Ok((g.add(s, cls)?, matched))
}

/// Row-wise gIoU of `(center, width)` rows, as a length-`K` column.
fn giou_graph<F: Scalar>(g: &mut Graph<F>, pred: Var, gt: Var) -> Result<Var> {
    let ends = |g: &mut Graph<F>, x: Var| -> Result<(Var, Var)> {
        let c = g.slice(x, 1, 0, 1)?;
        let w = g.slice(x, 1, 1, 2)?;
        let half = g.scale(w, F::lit(0.5));
        Ok((g.sub(c, half)?, g.add(c, half)?))
    };
    let (ps, pe) = ends(g, pred)?;
    let (gs, ge) = ends(g, gt)?;
    let lo = g.maximum(ps, gs)?;
    let hi = g.minimum(pe, ge)?;
    let overlap = g.sub(hi, lo)?;
    let inter = g.relu(overlap);
    let pl = g.sub(pe, ps)?;
    let gl = g.sub(ge, gs)?;
    let lens = g.add(pl, gl)?;
    let union = g.sub(lens, inter)?;
    let hull_hi = g.maximum(pe, ge)?;
    let hull_lo = g.minimum(ps, gs)?;
    let hull = g.sub(hull_hi, hull_lo)?;
    let iou = g.div(inter, union)?;
    let empty = g.sub(hull, union)?;
    let frac = g.div(empty, hull)?;
    let giou = g.sub(iou, frac)?;
    let k = g.shape(giou)[0];
    g.reshape(giou, &[k])
}

/// `(high, low)` clip pairs whose mean ratings differ by at least
/// `min_gap`, subsampled to `max_pairs` with a seeded draw.
pub fn saliency_pairs(
    sample: &QuerySample,
    min_gap: f64,
    max_pairs: usize,
    seed: u64,
) -> Vec<(usize, usize)> {
    let means = sample.mean_ratings();
    let mut pairs = Vec::new();
    for (i, mi) in means.iter().enumerate() {
        for (j, mj) in means.iter().enumerate() {
            if let (Some(a), Some(b)) = (mi, mj) {
                if a - b >= min_gap && a > b {
                    pairs.push((i, j));
                }
            }
        }
    }
    if pairs.len() <= max_pairs {
        return pairs;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample_indices(&mut rng, pairs.len(), max_pairs).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|k| pairs[k]).collect()
}

/// Mean hinge `max(0, margin + s[low] − s[high])` over pairs; zero when there
/// are no pairs.
pub fn pair_hinge<F: Scalar>(
    g: &mut Graph<F>,
    scores: Var,
    pairs: &[(usize, usize)],
    margin: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(g.scalar(F::zero()));
    }
    let hi: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let lo: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let sh = g.gather_rows(scores, &hi)?;
    let sl = g.gather_rows(scores, &lo)?;
    let d = g.sub(sl, sh)?;
    let d = g.add_scalar(d, F::lit(margin));
    let hinge = g.relu(d);
    Ok(g.mean(hinge))
}

/// Pairwise margin loss applied to both the initial and the refined
/// highlight scores, summed and weighted.
pub fn saliency_loss<F: Scalar>(
    g: &mut Graph<F>,
    h: Var,
    h_bar: Var,
    pairs: &[(usize, usize)],
    w: &LossWeights,
) -> Result<Var> {
    let a = pair_hinge(g, h, pairs, w.saliency_margin)?;
    let b = pair_hinge(g, h_bar, pairs, w.saliency_margin)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, F::lit(w.saliency)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mom: f64,
    pub high: f64,
    pub local: f64,
    pub global: f64,
    pub total: f64,
    pub lambda_lg: f64,
}

impl LossBreakdown {
    /// `mom + high + λ_lg·(local + global)` recomputed from the parts.
    pub fn recomposed(&self) -> f64 {
        self.mom + self.high + self.lambda_lg * (self.local + self.global)
    }

    pub fn alignment_contribution(&self) -> f64 {
        self.lambda_lg * (self.local + self.global)
    }

    pub fn is_finite(&self) -> bool {
        [self.mom, self.high, self.local, self.global, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total {:.6} (mom {:.6}, high {:.6}, local {:.6}, global {:.6}, lambda_lg {})",
            self.total, self.mom, self.high, self.local, self.global, self.lambda_lg
        )
    }
}

/// Plain-number composition of the objective.
pub fn total_loss(mom: f64, high: f64, local: f64, global: f64, lambda_lg: f64) -> LossBreakdown {
    LossBreakdown {
        mom,
        high,
        local,
        global,
        total: mom + high + lambda_lg * (local + global),
        lambda_lg,
    }
}

/// Graph composition of the objective, same association order as
/// [`total_loss`].
pub fn total_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    mom: Var,
    high: Var,
    local: Var,
    global: Var,
    lambda_lg: f64,
) -> Result<Var> {
    let task = g.add(mom, high)?;
    let align = g.add(local, global)?;
    let align = g.scale(align, F::lit(lambda_lg));
    g.add(task, align)
}
