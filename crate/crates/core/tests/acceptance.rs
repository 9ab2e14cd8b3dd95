//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.
//!
//! Run with `cargo test -p trdetr --test acceptance`.

mod common;

use std::collections::HashSet;
use std::io::BufReader;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trdetr::align;
use trdetr::checkpoint::{encode_checkpoint, read_header};
use trdetr::cooperate::{self, SharedSelfAttention};
use trdetr::data::synth::{synth_generate, SynthConfig};
use trdetr::data::{decode_features, encode_features, read_features, write_features, QuerySample};
use trdetr::gradcheck::{run_gradcheck, tiny_setup};
use trdetr::layers::SelfAttentionBlock;
use trdetr::losses::{self, giou_1d, hungarian_match, window_to_cw, LossWeights};
use trdetr::metrics::{
    evaluate, hd_metrics, mr_map_at, read_predictions, temporal_iou, top5_map, write_predictions,
    MR_THRESHOLDS,
};
use trdetr::model::{batch_loss, LossSettings};
use trdetr::params::ParamId;
use trdetr::refine;
use trdetr::trainer::{evaluate_model, predict, sweep_lambda, train, TrainConfig};
use trdetr::{FeatureBundle, Graph, Model, Result, Tensor};

use common::*;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { passed, detail: detail.into() })
}

fn gradient_suite() -> Result<Outcome> {
    let r = run_gradcheck(0, 100, 5)?;
    let worst = r
        .kernels
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("kernels");
    outcome(
        r.passed,
        format!(
            "{} kernels, worst {} {:.2e} (< {:.0e}); end-to-end {:.2e} (< {:.0e})",
            r.kernels.len(),
            worst.name,
            worst.max_rel_err,
            r.kernel_tolerance,
            r.end_to_end.max_rel_err,
            r.end_to_end_tolerance
        ),
    )
}

fn hungarian_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let cost = random_cost(&mut rng, n, n);
        let m = hungarian_match(&cost)?;
        let got: f64 = m.pairs.iter().map(|&(p, g)| cost[p][g]).sum();
        worst = worst.max((got - brute_force_assignment(&cost)).abs());
    }
    outcome(worst < 1e-9, format!("200 instances, max |Δcost| {worst:.1e}"))
}

fn metric_oracles() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut mr_err, mut hd_err, mut top5_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut presence_mismatch = 0;
    for _ in 0..200 {
        let (preds, gts) = random_mr_instance(&mut rng);
        for &t in MR_THRESHOLDS.iter() {
            let got = mr_map_at(&preds, &gts, t)?;
            mr_err = mr_err.max((got - oracle_mr_map(&preds, &gts, t)).abs());
        }
        let (scores, sample) = random_hd_instance(&mut rng);
        match (hd_metrics(&scores, &sample)?, oracle_hd(&scores, &sample)) {
            (Some(h), Some((map, hit))) => {
                hd_err = hd_err.max((h.map - map).abs()).max((h.hit_at_1 - hit).abs());
            }
            (None, None) => {}
            _ => presence_mismatch += 1,
        }
        match (top5_map(&scores, &sample)?, oracle_top5(&scores, &sample)) {
            (Some(a), Some(b)) => top5_err = top5_err.max((a - b).abs()),
            (None, None) => {}
            _ => presence_mismatch += 1,
        }
    }
    let iou = temporal_iou([0.0, 10.0], [5.0, 15.0])?;
    let giou = giou_1d((0.0, 0.2), (0.8, 1.0));
    let hand = close(iou, 1.0 / 3.0, 1e-12) && close(giou, -0.6, 1e-12);
    let tol = 1e-12;
    outcome(
        mr_err < tol && hd_err < tol && top5_err < tol && presence_mismatch == 0 && hand,
        format!(
            "max |Δ| mr {mr_err:.1e}, hd {hd_err:.1e}, top5 {top5_err:.1e}; IoU {iou:.6}, gIoU {giou:.6}"
        ),
    )
}

fn overfit() -> Result<Outcome> {
    let ds = synth_generate(&SynthConfig::default(), 0)?;
    let cfg = TrainConfig {
        seed: 0,
        batch_size: 8,
        max_steps: Some(300),
        learning_rate: 2e-3,
        lambda_lg: 0.3,
        d: 32,
        num_queries: 5,
        decoder_layers: 2,
        heads: 4,
        ..TrainConfig::default()
    };
    let t = train::<f64>(&cfg, &ds)?;
    let r = evaluate_model(&t.model, &ds)?;
    let hit = r.hit_at_1.unwrap_or(0.0);
    outcome(
        r.r1_050 == 1.0 && hit == 1.0,
        format!("{} steps, R1@0.5 {:.3}, HIT@1 {:.3}", t.step, r.r1_050, hit),
    )
}

fn settings(lambda_lg: f64, pair_seed: u64) -> LossSettings {
    LossSettings { weights: LossWeights::default(), lambda_lg, temperature: 1.0, pair_seed }
}

fn decomposition() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut zero_ok = true;
    for seed in 0..20 {
        let (model, data) = tiny_setup(seed)?;
        let batch: Vec<_> = data.iter().map(|(s, b)| (s, b)).collect();
        let lambda = rng.random_range(0.0..2.0);
        let mut g = Graph::new();
        let bl = batch_loss(&mut g, &model, &batch, &settings(lambda, seed))?;
        let b = bl.breakdown(&g, lambda);
        worst = worst.max((b.total - (b.mom + b.high + lambda * (b.local + b.global))).abs());

        let mut g = Graph::new();
        let bl = batch_loss(&mut g, &model, &batch, &settings(0.0, seed))?;
        let b = bl.breakdown(&g, 0.0);
        zero_ok &= b.alignment_contribution() == 0.0 && b.total == b.mom + b.high;
    }
    outcome(
        worst <= 1e-12 && zero_ok,
        format!("20 forwards, max |total − recomposed| {worst:.1e}; λ=0 alignment exactly 0: {zero_ok}"),
    )
}

/// Moment + saliency objective assembled from the public pipeline pieces,
/// with `site2` as the self-attention block used by HD2MR.
fn assembled(
    model: &Model,
    sample: &QuerySample,
    bundle: &FeatureBundle,
    site2: &SharedSelfAttention,
) -> Result<(f64, Vec<f64>, Vec<(ParamId, Tensor)>)> {
    let store = &model.store;
    let c = &model.cooperate;
    let w = LossWeights::default();
    let mut g = Graph::new();
    let projected = align::project(&mut g, store, &model.align, bundle)?;
    let joint = refine::refine(&mut g, store, &model.refine, &projected, model.config.raw_eq11)?;
    let h = cooperate::highlight_head(&mut g, store, &c.shared, &c.highlight, &joint)?;
    let z_hat = cooperate::hd2mr(&mut g, store, site2, &joint, h)?;
    let dec = c.decoder.forward(&mut g, store, z_hat)?;
    let top = cooperate::decoder_spans(&g, &dec, sample.duration)[0];
    let h_bar = cooperate::mr2hd(
        &mut g,
        store,
        &c.mr2hd,
        projected.v_hat,
        &joint,
        z_hat,
        (top.start, top.end),
        sample.clip_len,
    )?;
    let gt: Vec<_> = sample.relevant_windows.iter().map(|&x| window_to_cw(x, sample.duration)).collect();
    let (mom, _) = losses::moment_loss(&mut g, &dec, &gt, &w)?;
    let pairs = losses::saliency_pairs(sample, w.saliency_min_gap, w.saliency_max_pairs, 11);
    let high = losses::saliency_loss(&mut g, h, h_bar, &pairs, &w)?;
    let total = g.add(mom, high)?;
    g.backward(total)?;
    let highlight = g.value(h_bar).data().to_vec();
    Ok((g.item(total), highlight, g.param_grads()))
}

fn grad_of(grads: &[(ParamId, Tensor)], id: ParamId) -> Vec<f64> {
    grads
        .iter()
        .find(|(i, _)| *i == id)
        .map(|(_, t)| t.data().to_vec())
        .unwrap_or_default()
}

fn weight_sharing() -> Result<Outcome> {
    let (model, data) = tiny_setup(6)?;
    let shared_ids = model.cooperate.shared.0.param_ids();

    // Stored once: every shared tensor name appears exactly once in the file.
    let ckpt = train::<f64>(
        &TrainConfig { max_steps: Some(1), d: 8, num_queries: 3, heads: 2, ..TrainConfig::default() },
        &synth_generate(&SynthConfig { num_samples: 2, ..SynthConfig::default() }, 6)?,
    )?
    .checkpoint();
    let bytes = encode_checkpoint(&ckpt)?;
    let (header, _) = read_header(&bytes)?;
    let names: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
    let unique: HashSet<&str> = names.iter().copied().collect();
    let store = &ckpt.model.store;
    let stored_once = unique.len() == names.len()
        && ckpt.model.cooperate.shared.0.param_ids().iter().all(|&id| {
            names.iter().filter(|n| **n == store.name(id)).count() == 1
        })
        && names.iter().filter(|n| !n.starts_with("adam.")).count() == store.len();

    // Isolated paths: a second block with copied values at the HD2MR site.
    let mut iso = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = SelfAttentionBlock::new(&mut iso.store, "isolated.sa", model.config.d, model.config.heads, &mut rng)?;
    let iso_ids = block.param_ids();
    for (&a, &b) in shared_ids.iter().zip(&iso_ids) {
        *iso.store.value_mut(b) = iso.store.value(a).clone();
    }
    let iso_block = SharedSelfAttention(block);

    let mut worst: f64 = 0.0;
    let mut matches_model = true;
    let mut values_agree = true;
    for (sample, bundle) in &data {
        let (joint_loss, highlight, joint) = assembled(&model, sample, bundle, &model.cooperate.shared)?;
        let reference = model.predict_sample(sample, bundle)?;
        matches_model &= highlight == reference.highlight;

        let (split_loss, _, split) = assembled(&iso, sample, bundle, &iso_block)?;
        values_agree &= joint_loss == split_loss;
        for (&a, &b) in shared_ids.iter().zip(&iso_ids) {
            let gj = grad_of(&joint, a);
            let (ga, gb) = (grad_of(&split, a), grad_of(&split, b));
            for k in 0..gj.len() {
                let sum = ga.get(k).copied().unwrap_or(0.0) + gb.get(k).copied().unwrap_or(0.0);
                worst = worst.max((gj[k] - sum).abs());
            }
        }
    }
    outcome(
        stored_once && matches_model && values_agree && worst <= 1e-10,
        format!(
            "{} shared tensors stored once: {stored_once}; max |g_shared − (g_a + g_b)| {worst:.1e}",
            shared_ids.len()
        ),
    )
}

fn ablation() -> Result<Outcome> {
    let (mut s0, mut s3) = (0.0, 0.0);
    let seeds = 5;
    for seed in 0..seeds {
        let ds = synth_generate(&SynthConfig { num_samples: 64, noise: 0.25, ..SynthConfig::default() }, seed)?;
        let (tr, te) = ds.split_tail(16);
        let cfg = TrainConfig {
            seed,
            batch_size: 4,
            max_steps: Some(800),
            learning_rate: 2e-3,
            d: 32,
            num_queries: 5,
            decoder_layers: 2,
            heads: 4,
            ..TrainConfig::default()
        };
        let rows = sweep_lambda::<f64>(&cfg, &tr, &te, &[0.0, 0.3])?;
        s0 += rows[0].report.map_avg;
        s3 += rows[1].report.map_avg;
    }
    let (m0, m3) = (s0 / seeds as f64, s3 / seeds as f64);
    outcome(m3 >= m0, format!("held-out avg mAP over {seeds} seeds: λ=0 {m0:.4}, λ=0.3 {m3:.4}"))
}

fn format_conformance() -> Result<Outcome> {
    let ds = synth_generate(&SynthConfig::default(), 8)?;
    let cfg = TrainConfig { max_steps: Some(20), d: 16, num_queries: 4, heads: 2, ..TrainConfig::default() };
    let t = train::<f64>(&cfg, &ds)?;
    let preds = predict(&t.model, &ds)?;
    let mut buf = Vec::new();
    write_predictions(&preds, &mut buf)?;
    let text = String::from_utf8(buf.clone()).expect("utf-8");

    let mut schema_ok = text.lines().count() == ds.len();
    for (line, (sample, _)) in text.lines().zip(&ds.samples) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let obj = v.as_object().expect("object");
        schema_ok &= obj.len() == 3 && obj["qid"].as_u64() == Some(sample.qid);
        let windows = obj["pred_relevant_windows"].as_array().expect("windows");
        let mut prev = f64::INFINITY;
        for w in windows {
            let w: Vec<f64> = w.as_array().expect("triple").iter().filter_map(|x| x.as_f64()).collect();
            schema_ok &= w.len() == 3 && 0.0 <= w[0] && w[0] <= w[1] && w[1] <= sample.duration && w[2] <= prev;
            prev = w[2];
        }
        schema_ok &= obj["pred_saliency_scores"].as_array().map(Vec::len) == Some(sample.num_clips());
    }

    let parsed = read_predictions(BufReader::new(buf.as_slice()))?;
    let samples: Vec<_> = ds.queries().cloned().collect();
    let roundtrip = parsed == preds && evaluate(&parsed, &samples)? == evaluate_model(&t.model, &ds)?;

    // Files hold f32, so every f32 value (promoted) must survive unchanged,
    // and re-encoding a decoded file must reproduce its bytes.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut data: Vec<f64> = (0..60).map(|_| rng.random_range(-1e3f32..1e3) as f64).collect();
    data.extend([0.0, -0.0, f32::MIN_POSITIVE as f64 / 4.0, f32::MAX as f64, (1.0f32 / 3.0) as f64, -1e-30f32 as f64]);
    let m = Tensor::matrix(11, 6, data)?;
    let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let bytes = encode_features(&m)?;
    let mem = decode_features(&bytes)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("m.bin");
    write_features(&path, &m)?;
    let disk = read_features(&path)?;
    let features_ok = bits(&mem) == bits(&m)
        && bits(&disk) == bits(&m)
        && disk.shape() == m.shape()
        && encode_features(&disk)? == bytes;

    outcome(
        schema_ok && roundtrip && features_ok,
        format!("schema {schema_ok}, eval(file) == eval(memory) {roundtrip}, feature bits {features_ok}"),
    )
}

fn main() -> ExitCode {
    // Wall-clock budgets; `None` means unbudgeted.
    let criteria: [(&str, fn() -> Result<Outcome>, Option<u64>); 8] = [
        ("gradient suite", gradient_suite, Some(60)),
        ("hungarian oracle", hungarian_oracle, Some(5)),
        ("metric oracles", metric_oracles, Some(10)),
        ("overfit", overfit, Some(120)),
        ("loss decomposition", decomposition, None),
        ("weight sharing", weight_sharing, None),
        ("ablation direction", ablation, None),
        ("format conformance", format_conformance, None),
    ];
    let mut failures = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let (mut passed, mut detail) = match run() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if let Some(secs) = budget {
            if t0.elapsed() > Duration::from_secs(*secs) {
                passed = false;
                detail.push_str(&format!("; over the {secs}s budget"));
            }
        }
        failures += usize::from(!passed);
        println!(
            "criterion {} {name}: {} ({detail}) [{:.1}s]",
            i + 1,
            if passed { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
