use std::collections::HashMap;

use trdetr::checkpoint::{load_checkpoint, save_checkpoint};
use trdetr::data::synth::{synth_generate, SynthConfig};
use trdetr::data::Dataset;
use trdetr::gradcheck::tiny_setup;
use trdetr::losses::LossWeights;
use trdetr::metrics::temporal_iou;
use trdetr::model::LossSettings;
use trdetr::params::ParamId;
use trdetr::trainer::{batch_gradients, predict, train, TrainConfig};
use trdetr::Tensor;

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        learning_rate: 2e-3,
        d: 32,
        num_queries: 5,
        heads: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    let (model, data) = tiny_setup(3).unwrap();
    let settings = LossSettings { weights: LossWeights::default(), lambda_lg: 0.0, temperature: 1.0, pair_seed: 9 };
    let batch: Vec<_> = data.iter().map(|(s, b)| (s, b)).collect();
    let (_, joint) = batch_gradients(&model, &batch, &settings).unwrap();

    let mut sum: HashMap<ParamId, Vec<f64>> = HashMap::new();
    for item in &batch {
        let (_, grads) = batch_gradients(&model, std::slice::from_ref(item), &settings).unwrap();
        for (id, t) in grads {
            let acc = sum.entry(id).or_insert_with(|| vec![0.0; t.len()]);
            acc.iter_mut().zip(t.data()).for_each(|(a, x)| *a += x);
        }
    }
    let n = batch.len() as f64;
    for (id, t) in &joint {
        let expect = sum.get(id).cloned().unwrap_or_else(|| vec![0.0; t.len()]);
        for (a, b) in t.data().iter().zip(&expect) {
            assert!((a - b / n).abs() < 1e-10, "{}: {a} vs {}", model.store.name(*id), b / n);
        }
    }
}

#[test]
fn training_reduces_the_loss() {
    let ds = synth_generate(&SynthConfig::default(), 1).unwrap();
    let t = train::<f64>(&TrainConfig { max_steps: Some(300), ..small_config() }, &ds).unwrap();
    let head: f64 = t.history[..10].iter().map(|b| b.total).sum::<f64>() / 10.0;
    let tail: f64 = t.history[290..].iter().map(|b| b.total).sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "loss {head} -> {tail}");
    assert!(t.history.iter().all(|b| b.is_finite()));
}

#[test]
fn single_sample_is_memorized() {
    let ds = synth_generate(&SynthConfig { num_samples: 1, ..SynthConfig::default() }, 4).unwrap();
    let t = train::<f64>(&TrainConfig { batch_size: 1, max_steps: Some(200), ..small_config() }, &ds).unwrap();
    let p = &predict(&t.model, &ds).unwrap()[0];
    let top = p.pred_relevant_windows[0];
    let gt = ds.samples[0].0.relevant_windows[0];
    let iou = temporal_iou([top[0], top[1]], gt).unwrap();
    assert!(iou >= 0.9, "top-1 {top:?} vs {gt:?}: IoU {iou}");
}

#[test]
fn checkpoint_reload_reproduces_predictions() {
    let ds = synth_generate(&SynthConfig::default(), 2).unwrap();
    let t = train::<f64>(&TrainConfig { max_steps: Some(5), ..small_config() }, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &t.checkpoint()).unwrap();
    let back = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(back.step, 5);
    assert_eq!(predict(&back.model, &ds).unwrap(), predict(&t.model, &ds).unwrap());
}

#[test]
fn training_is_deterministic_in_seed() {
    let ds = synth_generate(&SynthConfig::default(), 5).unwrap();
    let run = |seed| {
        let t = train::<f64>(&TrainConfig { seed, max_steps: Some(10), ..small_config() }, &ds).unwrap();
        let params: Vec<Tensor> = t.model.store.iter().map(|(_, v)| v.clone()).collect();
        (t.history, params)
    };
    let a = run(7);
    assert_eq!(a, run(7));
    assert_ne!(a.0, run(8).0);
}

#[test]
fn mismatched_feature_widths_are_config_errors() {
    let ds = synth_generate(&SynthConfig::default(), 0).unwrap();
    let t = train::<f64>(&TrainConfig { max_steps: Some(1), ..small_config() }, &ds).unwrap();
    let other = synth_generate(&SynthConfig { d_v: 16, ..SynthConfig::default() }, 0).unwrap();
    let err = predict(&t.model, &other).unwrap_err();
    assert!(err.is_user_error(), "{err}");
    let empty = Dataset::new(vec![]);
    assert!(empty.is_err() || train::<f64>(&small_config(), &empty.unwrap()).is_err());
}
