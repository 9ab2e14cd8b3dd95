//! Independent reference implementations and random instance generators
//! shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use trdetr::cooperate::{MomentPrediction, Span};
use trdetr::data::QuerySample;

/// Minimum assignment cost by enumerating every injective map from columns
/// to rows.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    let mut best = f64::INFINITY;
    let mut perm: Vec<usize> = (0..rows).collect();
    permute(&mut perm, 0, &mut |p| {
        let c: f64 = (0..cols).map(|j| cost[p[j]][j]).sum();
        if c < best {
            best = c;
        }
    });
    best
}

fn permute(p: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

/// Area under the precision-recall curve built point by point: for every
/// distinct recall level, the best precision reached at that recall or
/// beyond, times the recall increment.
pub fn pr_curve_ap(ranked_hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut curve = Vec::new();
    let mut tp = 0;
    for (k, &h) in ranked_hits.iter().enumerate() {
        tp += h as usize;
        curve.push((tp as f64 / positives as f64, tp as f64 / (k + 1) as f64));
    }
    let mut levels: Vec<f64> = curve.iter().map(|c| c.0).collect();
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = curve
            .iter()
            .filter(|c| c.0 >= r)
            .map(|c| c.1)
            .fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

fn interval_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let inter = if hi > lo { hi - lo } else { 0.0 };
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Detection AP of one query at one threshold.
pub fn oracle_query_ap(spans: &[Span], gts: &[[f64; 2]], threshold: f64) -> f64 {
    let mut idx: Vec<usize> = (0..spans.len()).collect();
    // Stable: equal scores keep input order.
    idx.sort_by(|&a, &b| spans[b].score.partial_cmp(&spans[a].score).unwrap());
    let ious: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| {
            gts.iter()
                .map(|g| interval_iou((spans[i].start, spans[i].end), (g[0], g[1])))
                .collect()
        })
        .collect();
    let mut free = vec![true; gts.len()];
    let mut hits = Vec::new();
    for row in &ious {
        let mut pick = None;
        for (j, &v) in row.iter().enumerate() {
            if free[j] && v >= threshold && pick.is_none_or(|(_, b)| v > b) {
                pick = Some((j, v));
            }
        }
        if let Some((j, _)) = pick {
            free[j] = false;
        }
        hits.push(pick.is_some());
    }
    pr_curve_ap(&hits, gts.len())
}

pub fn oracle_mr_map(preds: &[MomentPrediction], gts: &[Vec<[f64; 2]>], threshold: f64) -> f64 {
    let total: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| oracle_query_ap(&p.spans, g, threshold))
        .sum();
    total / preds.len() as f64
}

fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    idx
}

/// `(mAP, HIT@1)` over annotators with a top rating somewhere.
pub fn oracle_hd(scores: &[f64], sample: &QuerySample) -> Option<(f64, f64)> {
    let order = ranked(scores);
    let mut rows = Vec::new();
    for a in 0..sample.saliency[0].len() {
        let pos: Vec<bool> = sample.saliency.iter().map(|r| r[a] == 4).collect();
        let n = pos.iter().filter(|&&p| p).count();
        if n == 0 {
            continue;
        }
        let hits: Vec<bool> = order.iter().map(|&i| pos[i]).collect();
        rows.push((pr_curve_ap(&hits, n), if hits[0] { 1.0 } else { 0.0 }));
    }
    if rows.is_empty() {
        return None;
    }
    let k = rows.len() as f64;
    Some((
        rows.iter().map(|r| r.0).sum::<f64>() / k,
        rows.iter().map(|r| r.1).sum::<f64>() / k,
    ))
}

pub fn oracle_top5(scores: &[f64], sample: &QuerySample) -> Option<f64> {
    let order = ranked(scores);
    let top: Vec<usize> = order.into_iter().take(5).collect();
    let mut aps = Vec::new();
    for a in 0..sample.saliency[0].len() {
        let pos: Vec<bool> = sample.saliency.iter().map(|r| r[a] == 4).collect();
        if !pos.contains(&true) {
            continue;
        }
        let hits: Vec<bool> = top.iter().map(|&i| pos[i]).collect();
        let n = hits.iter().filter(|&&h| h).count();
        aps.push(pr_curve_ap(&hits, n));
    }
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

pub fn random_cost(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-5.0..10.0)).collect())
        .collect()
}

/// Interval on a half-second grid inside `[0, 20]`.
fn grid_interval(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let s = rng.random_range(0..36) as f64 * 0.5;
    let len = rng.random_range(1..=(40 - (s * 2.0) as i32).min(12)) as f64 * 0.5;
    [s, s + len]
}

/// Random moment-retrieval instance: up to 5 queries, up to 6 predictions and
/// 1..=3 ground-truth windows each. Some predictions copy or jitter a ground
/// truth so that every threshold sees hits.
pub fn random_mr_instance(rng: &mut ChaCha8Rng) -> (Vec<MomentPrediction>, Vec<Vec<[f64; 2]>>) {
    let q = rng.random_range(1..=5);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..q {
        let g: Vec<[f64; 2]> = (0..rng.random_range(1..=3)).map(|_| grid_interval(rng)).collect();
        let n = rng.random_range(1..=6);
        let spans = (0..n)
            .map(|k| {
                let [s, e] = match rng.random_range(0..3) {
                    0 => g[rng.random_range(0..g.len())],
                    1 => {
                        let [s, e] = g[rng.random_range(0..g.len())];
                        [(s - 0.5).max(0.0), e + rng.random_range(0..3) as f64 * 0.5]
                    }
                    _ => grid_interval(rng),
                };
                Span { start: s, end: e, score: rng.random_range(0.0..1.0), query: k }
            })
            .collect();
        preds.push(MomentPrediction { spans, highlight: vec![] });
        gts.push(g);
    }
    (preds, gts)
}

/// Random saliency instance with `L` in 2..=10 clips and 1..=3 annotators;
/// ratings are skewed towards the top bin so positives are common.
pub fn random_hd_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, QuerySample) {
    let l = rng.random_range(2..=10);
    let a = rng.random_range(1..=3);
    let saliency = (0..l)
        .map(|_| (0..a).map(|_| if rng.random_bool(0.3) { 4 } else { rng.random_range(0..4) }).collect())
        .collect();
    let scores = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sample = QuerySample {
        qid: 0,
        vid: "v".into(),
        query_text: String::new(),
        duration: 2.0 * l as f64,
        clip_len: 2.0,
        relevant_windows: vec![[0.0, 2.0]],
        saliency,
    };
    (scores, sample)
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
