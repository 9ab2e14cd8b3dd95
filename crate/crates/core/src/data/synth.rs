//! Seeded synthetic moment/highlight data.
//!
//! Each sample plants one window of clips whose visual features carry the
//! query's centroid direction; text words are the centroid plus a little
//! noise. The window's middle clip is the highlight peak: it carries the pure
//! centroid signal and every annotator rates it 4. Other window clips mix the
//! centroid with background content and are rated around 2; clips outside
//! the window are background only and rated 0..1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureBundle, QuerySample, MAX_RATING};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub num_clips: usize,
    pub num_words: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub d_a: Option<usize>,
    /// Window length range in clips, inclusive.
    pub min_window: usize,
    pub max_window: usize,
    /// Per-coordinate noise std; signal coordinates have unit std.
    pub noise: f64,
    pub word_noise: f64,
    pub clip_len: f64,
    pub annotators: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 8,
            num_clips: 16,
            num_words: 4,
            d_v: 32,
            d_t: 32,
            d_a: None,
            min_window: 3,
            max_window: 6,
            noise: 0.1,
            word_noise: 0.1,
            clip_len: 2.0,
            annotators: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_clips < 2 {
            return bad(format!("num_clips {} < 2", self.num_clips));
        }
        if self.min_window == 0 || self.min_window > self.max_window {
            return bad(format!(
                "empty window range [{}, {}]",
                self.min_window, self.max_window
            ));
        }
        if self.max_window > self.num_clips {
            return bad(format!(
                "max_window {} exceeds num_clips {}",
                self.max_window, self.num_clips
            ));
        }
        if self.num_words == 0 || self.d_v == 0 || self.d_t == 0 || self.d_a == Some(0) {
            return bad("num_words and feature widths must be positive".into());
        }
        if self.annotators == 0 {
            return bad("need at least one annotator".into());
        }
        if !(self.noise >= 0.0 && self.word_noise >= 0.0 && self.clip_len > 0.0) {
            return bad("noise must be >= 0 and clip_len > 0".into());
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// `d_out × d_in` random map scaled to preserve expected norm.
fn projection(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Vec<f64> {
    gaussian(rng, d_in * d_out, 1.0 / (d_in as f64).sqrt())
}

fn project(p: &[f64], x: &[f64], d_out: usize) -> Vec<f64> {
    let d_in = x.len();
    (0..d_out)
        .map(|o| (0..d_in).map(|i| p[o * d_in + i] * x[i]).sum())
        .collect()
}

/// Stored features are float32; rounding here makes a generated dataset equal
/// to itself after a save/load cycle.
fn f32_round(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

/// Window position and base ratings for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedWindow {
    pub start_clip: usize,
    pub len: usize,
}

impl PlantedWindow {
    pub fn peak(&self) -> usize {
        self.start_clip + self.len / 2
    }

    pub fn contains(&self, clip: usize) -> bool {
        clip >= self.start_clip && clip < self.start_clip + self.len
    }

    /// Base rating: 4 at the peak, decaying by 2 per clip, at least 2.
    fn inside_rating(&self, clip: usize) -> i32 {
        let dist = clip.abs_diff(self.peak()) as i32;
        (MAX_RATING - 2 * dist).max(2)
    }
}

pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = config.num_clips;
    let proj_v = projection(&mut rng, config.d_t, config.d_v);
    let proj_a = config.d_a.map(|da| projection(&mut rng, config.d_t, da));
    let mut samples = Vec::with_capacity(config.num_samples);
    for qid in 0..config.num_samples as u64 {
        let centroid = gaussian(&mut rng, config.d_t, 1.0);
        let len = rng.random_range(config.min_window..=config.max_window);
        let start_clip = rng.random_range(0..=l - len);
        let window = PlantedWindow { start_clip, len };

        let signal_v = project(&proj_v, &centroid, config.d_v);
        let signal_a = proj_a
            .as_ref()
            .map(|p| project(p, &centroid, config.d_a.unwrap_or(0)));

        let mut visual = Vec::with_capacity(l * config.d_v);
        let mut audio = Vec::with_capacity(l * config.d_a.unwrap_or(0));
        let mut base = Vec::with_capacity(l);
        for clip in 0..l {
            let rating = if window.contains(clip) {
                window.inside_rating(clip)
            } else {
                rng.random_range(0..=1)
            };
            base.push(rating);
            // Centroid weight: 1 at the peak, 3/4 elsewhere in the window, 0 outside.
            let weight = if window.contains(clip) {
                0.5 + 0.5 * rating as f64 / MAX_RATING as f64
            } else {
                0.0
            };
            let mix = |signal: &[f64], out: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
                let background = gaussian(rng, signal.len(), 1.0);
                let noise = gaussian(rng, signal.len(), config.noise);
                for k in 0..signal.len() {
                    out.push(weight * signal[k] + (1.0 - weight) * background[k] + noise[k]);
                }
            };
            mix(&signal_v, &mut visual, &mut rng);
            if let Some(sa) = &signal_a {
                mix(sa, &mut audio, &mut rng);
            }
        }

        let mut text = Vec::with_capacity(config.num_words * config.d_t);
        for _ in 0..config.num_words {
            let noise = gaussian(&mut rng, config.d_t, config.word_noise);
            text.extend(centroid.iter().zip(&noise).map(|(c, n)| c + n));
        }

        let saliency = base
            .iter()
            .enumerate()
            .map(|(clip, &r)| {
                (0..config.annotators)
                    .map(|_| {
                        let jitter = rng.random_range(-1..=1);
                        if clip == window.peak() {
                            MAX_RATING
                        } else {
                            (r + jitter).clamp(0, MAX_RATING)
                        }
                    })
                    .collect()
            })
            .collect();

        let duration = l as f64 * config.clip_len;
        let sample = QuerySample {
            qid,
            vid: format!("vid{qid:05}"),
            query_text: format!("synthetic query {qid}"),
            duration,
            clip_len: config.clip_len,
            relevant_windows: vec![[
                start_clip as f64 * config.clip_len,
                (start_clip + len) as f64 * config.clip_len,
            ]],
            saliency,
        };
        let bundle = FeatureBundle {
            visual: Tensor::matrix(l, config.d_v, f32_round(visual))?,
            audio: match config.d_a {
                Some(da) => Some(Tensor::matrix(l, da, f32_round(audio))?),
                None => None,
            },
            text: Tensor::matrix(config.num_words, config.d_t, f32_round(text))?,
        };
        samples.push((sample, bundle));
    }
    Dataset::new(samples)
}
