//! Moment-retrieval recall/mAP and highlight-detection mAP, HIT@1 and top-5
//! mAP.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cooperate::{MomentPrediction, Span};
use crate::data::{QuerySample, MAX_RATING};
use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub const MR_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

pub fn temporal_iou(a: [f64; 2], b: [f64; 2]) -> Result<f64> {
    for iv in [a, b] {
        if !(iv[1] > iv[0]) {
            return Err(Error::Contract(format!("zero-length interval {iv:?}")));
        }
    }
    Ok(overlap_ratio(a, b))
}

fn overlap_ratio(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
    let union = (a[1] - a[0]) + (b[1] - b[0]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// IoU of a predicted span with a ground-truth window; a predicted span that
/// clamping collapsed to zero length overlaps nothing.
fn pred_iou(p: &Span, gt: [f64; 2]) -> Result<f64> {
    if !(gt[1] > gt[0]) {
        return Err(Error::Contract(format!("zero-length ground truth {gt:?}")));
    }
    if p.end > p.start {
        Ok(overlap_ratio([p.start, p.end], gt))
    } else {
        Ok(0.0)
    }
}

fn top_span(spans: &[Span]) -> Option<&Span> {
    spans
        .iter()
        .reduce(|best, s| if s.score > best.score { s } else { best })
}

fn check_lengths(preds: usize, gts: usize) -> Result<()> {
    if preds != gts {
        return Err(Error::Contract(format!("{preds} predictions for {gts} queries")));
    }
    Ok(())
}

pub fn recall_at_1(preds: &[MomentPrediction], gts: &[Vec<[f64; 2]>], threshold: f64) -> Result<f64> {
    check_lengths(preds.len(), gts.len())?;
    if preds.is_empty() {
        return Err(Error::Contract("recall over zero queries".into()));
    }
    let mut hits = 0usize;
    for (p, windows) in preds.iter().zip(gts) {
        let top = top_span(&p.spans).ok_or_else(|| Error::Contract("empty prediction list".into()))?;
        if windows.is_empty() {
            return Err(Error::Contract("query without ground-truth windows".into()));
        }
        let mut best = 0.0f64;
        for &w in windows {
            best = best.max(pred_iou(top, w)?);
        }
        if best >= threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / preds.len() as f64)
}

/// All-points interpolated area under the precision-recall curve of a ranked
/// hit list, with `num_positives` total positives.
pub fn average_precision(hits: &[bool], num_positives: usize) -> f64 {
    if num_positives == 0 {
        return 0.0;
    }
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        rec.push(tp as f64 / num_positives as f64);
        prec.push(tp as f64 / (k + 1) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len())
        .map(|i| (rec[i] - rec[i - 1]) * prec[i])
        .sum()
}

/// AP of one query's spans at one IoU threshold. Spans are visited in score
/// order; each takes the unmatched ground truth it overlaps most, and counts
/// as a hit when that overlap reaches the threshold.
pub fn query_ap(spans: &[Span], gts: &[[f64; 2]], threshold: f64) -> Result<f64> {
    let mut order: Vec<&Span> = spans.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut taken = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(order.len());
    for s in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, &w) in gts.iter().enumerate() {
            let iou = pred_iou(s, w)?;
            if !taken[j] && iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        hits.push(best.is_some());
    }
    Ok(average_precision(&hits, gts.len()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrMap {
    pub map_050: f64,
    pub map_075: f64,
    pub map_avg: f64,
}

/// Mean over queries of [`query_ap`] at one threshold.
pub fn mr_map_at(preds: &[MomentPrediction], gts: &[Vec<[f64; 2]>], threshold: f64) -> Result<f64> {
    check_lengths(preds.len(), gts.len())?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, w) in preds.iter().zip(gts) {
        total += query_ap(&p.spans, w, threshold)?;
    }
    Ok(total / preds.len() as f64)
}

pub fn mr_map(preds: &[MomentPrediction], gts: &[Vec<[f64; 2]>]) -> Result<MrMap> {
    let per: Vec<f64> = MR_THRESHOLDS
        .iter()
        .map(|&t| mr_map_at(preds, gts, t))
        .collect::<Result<_>>()?;
    Ok(MrMap {
        map_050: per[0],
        map_075: per[5],
        map_avg: per.iter().sum::<f64>() / per.len() as f64,
    })
}

/// Clip indices by descending score; equal scores keep index order.
pub fn rank_clips(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Per-annotator "very good" labels: rating equals the top of the scale.
fn annotator_positives(sample: &QuerySample) -> Vec<Vec<bool>> {
    (0..sample.num_annotators())
        .map(|a| sample.saliency.iter().map(|r| r[a] == MAX_RATING).collect())
        .collect()
}

fn check_scores(scores: &[f64], sample: &QuerySample) -> Result<()> {
    if scores.len() != sample.num_clips() || sample.saliency.len() != scores.len() {
        return Err(Error::Contract(format!(
            "qid {}: {} highlight scores for {} clips",
            sample.qid,
            scores.len(),
            sample.saliency.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HdScores {
    pub map: f64,
    pub hit_at_1: f64,
}

/// Highlight mAP and HIT@1 for one query, averaged over annotators who rated
/// at least one clip "very good". `None` when no annotator did.
pub fn hd_metrics(scores: &[f64], sample: &QuerySample) -> Result<Option<HdScores>> {
    check_scores(scores, sample)?;
    let order = rank_clips(scores);
    let (mut ap, mut hit, mut n) = (0.0, 0.0, 0usize);
    for pos in annotator_positives(sample) {
        let count = pos.iter().filter(|&&p| p).count();
        if count == 0 {
            continue;
        }
        let hits: Vec<bool> = order.iter().map(|&i| pos[i]).collect();
        ap += average_precision(&hits, count);
        hit += if hits[0] { 1.0 } else { 0.0 };
        n += 1;
    }
    Ok((n > 0).then(|| HdScores {
        map: ap / n as f64,
        hit_at_1: hit / n as f64,
    }))
}

/// AP restricted to the five best-scored clips (all clips when fewer),
/// normalized by the positives among them; averaged over annotators with any
/// positive.
pub fn top5_map(scores: &[f64], sample: &QuerySample) -> Result<Option<f64>> {
    check_scores(scores, sample)?;
    let order = rank_clips(scores);
    let top = &order[..order.len().min(5)];
    let (mut total, mut n) = (0.0, 0usize);
    for pos in annotator_positives(sample) {
        if !pos.iter().any(|&p| p) {
            continue;
        }
        let hits: Vec<bool> = top.iter().map(|&i| pos[i]).collect();
        let count = hits.iter().filter(|&&h| h).count();
        total += average_precision(&hits, count);
        n += 1;
    }
    Ok((n > 0).then(|| total / n as f64))
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryPrediction {
    pub qid: u64,
    /// `[start, end, score]` in seconds, score-descending.
    pub pred_relevant_windows: Vec<[f64; 3]>,
    pub pred_saliency_scores: Vec<f64>,
}

impl QueryPrediction {
    pub fn from_moment(qid: u64, p: &MomentPrediction) -> Self {
        Self {
            qid,
            pred_relevant_windows: p.spans.iter().map(|s| [s.start, s.end, s.score]).collect(),
            pred_saliency_scores: p.highlight.clone(),
        }
    }

    pub fn to_moment(&self) -> MomentPrediction {
        MomentPrediction {
            spans: self
                .pred_relevant_windows
                .iter()
                .enumerate()
                .map(|(query, w)| Span { start: w[0], end: w[1], score: w[2], query })
                .collect(),
            highlight: self.pred_saliency_scores.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r1_050: f64,
    pub r1_070: f64,
    pub map_050: f64,
    pub map_075: f64,
    pub map_avg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hd_map: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit_at_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5_map: Option<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores predictions against samples. Both sides are keyed by qid and every
/// sample needs exactly one prediction; reduction runs in qid order.
pub fn evaluate(preds: &[QueryPrediction], samples: &[QuerySample]) -> Result<EvalReport> {
    let mut by_qid: BTreeMap<u64, &QueryPrediction> = BTreeMap::new();
    for p in preds {
        if by_qid.insert(p.qid, p).is_some() {
            return Err(Error::Contract(format!("duplicate prediction for qid {}", p.qid)));
        }
    }
    let mut ordered: Vec<&QuerySample> = samples.iter().collect();
    ordered.sort_by_key(|s| s.qid);
    if by_qid.len() != ordered.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} queries",
            by_qid.len(),
            ordered.len()
        )));
    }
    let mut moments = Vec::with_capacity(ordered.len());
    let mut gts = Vec::with_capacity(ordered.len());
    let (mut hd, mut hit, mut top5) = (vec![], vec![], vec![]);
    for s in &ordered {
        let p = by_qid
            .get(&s.qid)
            .ok_or_else(|| Error::Contract(format!("no prediction for qid {}", s.qid)))?;
        let scores = &p.pred_saliency_scores;
        let h = hd_metrics(scores, s)?;
        hd.push(h.map(|h| h.map));
        hit.push(h.map(|h| h.hit_at_1));
        top5.push(top5_map(scores, s)?);
        moments.push(p.to_moment());
        gts.push(s.relevant_windows.clone());
    }
    let m = mr_map(&moments, &gts)?;
    Ok(EvalReport {
        r1_050: recall_at_1(&moments, &gts, 0.5)?,
        r1_070: recall_at_1(&moments, &gts, 0.7)?,
        map_050: m.map_050,
        map_075: m.map_075,
        map_avg: m.map_avg,
        hd_map: mean_defined(hd.into_iter()),
        hit_at_1: mean_defined(hit.into_iter()),
        top5_map: mean_defined(top5.into_iter()),
    })
}

pub fn write_predictions<W: std::io::Write>(preds: &[QueryPrediction], mut out: W) -> Result<()> {
    for p in preds {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions<R: std::io::BufRead>(input: R) -> Result<Vec<QueryPrediction>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: QueryPrediction = serde_json::from_str(&line).map_err(|e| Error::Validation {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(start: f64, end: f64, score: f64) -> Span {
        Span { start, end, score, query: 0 }
    }

    fn pred(spans: Vec<Span>) -> MomentPrediction {
        MomentPrediction { spans, highlight: vec![] }
    }

    fn sample(ratings: Vec<Vec<i32>>) -> QuerySample {
        QuerySample {
            qid: 0,
            vid: "v".into(),
            query_text: String::new(),
            duration: 2.0 * ratings.len() as f64,
            clip_len: 2.0,
            relevant_windows: vec![[0.0, 2.0]],
            saliency: ratings,
        }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou([1.0, 3.0], [1.0, 3.0]).unwrap(), 1.0);
        assert_eq!(temporal_iou([0.0, 1.0], [2.0, 3.0]).unwrap(), 0.0);
        assert!((temporal_iou([0.0, 10.0], [5.0, 15.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(temporal_iou([2.0, 2.0], [0.0, 1.0]).is_err());
    }

    #[test]
    fn recall_examples() {
        let gts = vec![vec![[5.0, 15.0]]];
        let exact = vec![pred(vec![span(5.0, 15.0, 0.9)])];
        assert_eq!(recall_at_1(&exact, &gts, 0.5).unwrap(), 1.0);
        assert_eq!(recall_at_1(&exact, &gts, 0.7).unwrap(), 1.0);
        let off = vec![pred(vec![span(0.0, 10.0, 0.9)])];
        assert_eq!(recall_at_1(&off, &gts, 0.5).unwrap(), 0.0);
        // Second query's best-scored span misses although a lower one hits.
        let two = vec![
            pred(vec![span(5.0, 14.0, 0.9)]),
            pred(vec![span(20.0, 30.0, 0.3), span(0.0, 4.0, 0.8)]),
        ];
        let gts2 = vec![vec![[5.0, 15.0]], vec![[20.0, 30.0]]];
        assert_eq!(recall_at_1(&two, &gts2, 0.5).unwrap(), 0.5);
        assert!(recall_at_1(&[pred(vec![])], &gts, 0.5).is_err());
    }

    #[test]
    fn map_examples() {
        let gts = vec![vec![[0.0, 10.0]]];
        let hit = vec![pred(vec![span(0.0, 10.0, 0.9), span(20.0, 30.0, 0.1)])];
        assert_eq!(mr_map_at(&hit, &gts, 0.5).unwrap(), 1.0);
        let second = vec![pred(vec![span(20.0, 30.0, 0.9), span(0.0, 10.0, 0.1)])];
        assert!((mr_map_at(&second, &gts, 0.5).unwrap() - 0.5).abs() < 1e-15);
        let m = mr_map(&hit, &gts).unwrap();
        assert_eq!((m.map_050, m.map_075, m.map_avg), (1.0, 1.0, 1.0));
    }

    #[test]
    fn duplicate_spans_match_one_gt_once() {
        let gts = vec![[0.0, 10.0]];
        let spans = vec![span(0.0, 10.0, 0.9), span(0.0, 10.0, 0.8)];
        // Second duplicate is a false positive; AP stays 1 since recall is
        // already complete.
        assert_eq!(query_ap(&spans, &gts, 0.5).unwrap(), 1.0);
        let two = vec![[0.0, 10.0], [0.5, 10.0]];
        assert!((query_ap(&spans, &two, 0.5).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hd_examples() {
        let s = sample(vec![vec![4], vec![0]]);
        let r = hd_metrics(&[0.1, 0.9], &s).unwrap().unwrap();
        assert!((r.map - 0.5).abs() < 1e-15);
        assert_eq!(r.hit_at_1, 0.0);
        let s = sample(vec![vec![2, 3], vec![4, 4], vec![4, 1]]);
        let r = hd_metrics(&[0.0, 5.0, 1.0], &s).unwrap().unwrap();
        assert_eq!((r.map, r.hit_at_1), (1.0, 1.0));
        assert!(hd_metrics(&[0.0, 1.0], &sample(vec![vec![3], vec![2]])).unwrap().is_none());
        assert!(hd_metrics(&[0.0], &s).is_err());
    }

    #[test]
    fn top5_examples() {
        let s = sample((0..8).map(|i| vec![if i < 5 { 4 } else { 0 }]).collect());
        let best: Vec<f64> = (0..8).map(|i| -(i as f64)).collect();
        assert_eq!(top5_map(&best, &s).unwrap(), Some(1.0));
        let worst: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let s2 = sample((0..8).map(|i| vec![if i < 3 { 4 } else { 0 }]).collect());
        assert_eq!(top5_map(&worst, &s2).unwrap(), Some(0.0));
        // Alternating hits: precision 1, 2/3, 3/5 at the three hits.
        let alt = sample((0..6).map(|i| vec![if i % 2 == 0 { 4 } else { 0 }]).collect());
        let desc: Vec<f64> = (0..6).map(|i| -(i as f64)).collect();
        let want = (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
        assert!((top5_map(&desc, &alt).unwrap().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn prediction_lines_round_trip() {
        let p = QueryPrediction {
            qid: 3,
            pred_relevant_windows: vec![[0.1, 2.0 / 3.0, 0.123_456_789_012_345_67]],
            pred_saliency_scores: vec![1e-300, -0.1, 7.0],
        };
        let mut buf = Vec::new();
        write_predictions(std::slice::from_ref(&p), &mut buf).unwrap();
        let back = read_predictions(&buf[..]).unwrap();
        assert_eq!(back, vec![p]);
        assert!(read_predictions(&b"{\"qid\": 1}\n"[..]).is_err());
    }
}
