//! Dataset records, feature files and clip-level label derivation.

mod io;
pub mod synth;

pub use io::{decode_features, encode_features, read_features, write_features, FEATURE_MAGIC};
pub use synth::{synth_generate, SynthConfig};

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const FEATURES_DIR: &str = "features";

/// Highest annotator rating ("Very Good").
pub const MAX_RATING: i32 = 4;

/// Ground truth for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySample {
    pub qid: u64,
    pub vid: String,
    #[serde(rename = "query")]
    pub query_text: String,
    pub duration: f64,
    pub clip_len: f64,
    pub relevant_windows: Vec<[f64; 2]>,
    /// `saliency[clip][annotator]`, each in `0..=4`, or `-1` when unannotated.
    #[serde(rename = "saliency_scores")]
    pub saliency: Vec<Vec<i32>>,
}

impl QuerySample {
    /// Number of clips, `ceil(duration / clip_len)`.
    pub fn num_clips(&self) -> usize {
        num_clips(self.duration, self.clip_len)
    }

    pub fn num_annotators(&self) -> usize {
        self.saliency.first().map_or(0, Vec::len)
    }

    /// Mean rating per clip over annotators, ignoring `-1`. `None` for clips
    /// nobody rated.
    pub fn mean_ratings(&self) -> Vec<Option<f64>> {
        self.saliency
            .iter()
            .map(|r| {
                let valid: Vec<f64> = r.iter().filter(|&&v| v >= 0).map(|&v| v as f64).collect();
                (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64)
            })
            .collect()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(format!("duration {} must be positive", self.duration));
        }
        if !(self.clip_len.is_finite() && self.clip_len > 0.0) {
            return Err(format!("clip_len {} must be positive", self.clip_len));
        }
        if self.relevant_windows.is_empty() {
            return Err("no relevant windows".into());
        }
        for &[s, e] in &self.relevant_windows {
            if !(s.is_finite() && e.is_finite()) {
                return Err(format!("window [{s}, {e}] is not finite"));
            }
            if s >= e {
                return Err(format!("window [{s}, {e}]: start < end violated"));
            }
            if s < 0.0 || e > self.duration {
                return Err(format!(
                    "window [{s}, {e}] outside [0, {}]",
                    self.duration
                ));
            }
        }
        let l = self.num_clips();
        if self.saliency.len() != l {
            return Err(format!(
                "saliency has {} clips, expected L = {l}",
                self.saliency.len()
            ));
        }
        let a = self.num_annotators();
        if a == 0 {
            return Err("saliency needs at least one annotator".into());
        }
        for (i, r) in self.saliency.iter().enumerate() {
            if r.len() != a {
                return Err(format!("clip {i} has {} ratings, expected {a}", r.len()));
            }
            if let Some(bad) = r.iter().find(|&&v| !(-1..=MAX_RATING).contains(&v)) {
                return Err(format!("clip {i} rating {bad} outside -1..=4"));
            }
        }
        Ok(())
    }
}

pub fn num_clips(duration: f64, clip_len: f64) -> usize {
    // Tolerate float noise such as 150.00000000001 / 2.
    ((duration / clip_len) - 1e-9).ceil().max(0.0) as usize
}

/// Per-clip relevance: clip `i` covers `[i * clip_len, (i + 1) * clip_len)`
/// and is relevant iff it overlaps some window by more than half a clip.
pub fn clip_labels(sample: &QuerySample) -> Vec<bool> {
    let cl = sample.clip_len;
    (0..sample.num_clips())
        .map(|i| {
            let (cs, ce) = (i as f64 * cl, (i + 1) as f64 * cl);
            sample
                .relevant_windows
                .iter()
                .any(|&[s, e]| (ce.min(e) - cs.max(s)) > 0.5 * cl)
        })
        .collect()
}

/// Per-query input features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle<F> {
    /// `L × d_v`
    pub visual: Tensor<F>,
    /// `L × d_a`
    pub audio: Option<Tensor<F>>,
    /// `N × d_t`
    pub text: Tensor<F>,
}

impl<F: Scalar> FeatureBundle<F> {
    pub fn num_clips(&self) -> usize {
        self.visual.rows()
    }

    pub fn num_words(&self) -> usize {
        self.text.rows()
    }

    /// Width of the visual stream after audio concatenation.
    pub fn visual_input_dim(&self) -> usize {
        let dv = self.visual.shape().get(1).copied().unwrap_or(0);
        dv + self.audio.as_ref().map_or(0, |a| a.shape()[1])
    }

    pub fn text_dim(&self) -> usize {
        self.text.shape().get(1).copied().unwrap_or(0)
    }

    /// Visual features with audio appended per clip, `L × (d_v + d_a)`.
    pub fn visual_input(&self) -> Tensor<F> {
        let Some(audio) = &self.audio else {
            return self.visual.clone();
        };
        let l = self.num_clips();
        let mut data = Vec::with_capacity(l * self.visual_input_dim());
        for i in 0..l {
            data.extend_from_slice(self.visual.row(i));
            data.extend_from_slice(audio.row(i));
        }
        Tensor::matrix(l, self.visual_input_dim(), data).expect("concat shape")
    }

    pub fn validate(&self, expected_clips: usize) -> std::result::Result<(), String> {
        let (l, _) = self.visual.dims2().map_err(|e| e.to_string())?;
        if l != expected_clips {
            return Err(format!("visual features have {l} clips, expected {expected_clips}"));
        }
        if let Some(a) = &self.audio {
            let (la, _) = a.dims2().map_err(|e| e.to_string())?;
            if la != l {
                return Err(format!("audio features have {la} clips, expected {l}"));
            }
            if !a.all_finite() {
                return Err("non-finite audio features".into());
            }
        }
        let (n, _) = self.text.dims2().map_err(|e| e.to_string())?;
        if n == 0 {
            return Err("text features have no words".into());
        }
        if !self.visual.all_finite() || !self.text.all_finite() {
            return Err("non-finite features".into());
        }
        Ok(())
    }

    pub fn to_f64(&self) -> FeatureBundle<f64> {
        FeatureBundle {
            visual: self.visual.to_f64(),
            audio: self.audio.as_ref().map(Tensor::to_f64),
            text: self.text.to_f64(),
        }
    }

    pub fn from_f64(b: &FeatureBundle<f64>) -> Self {
        FeatureBundle {
            visual: Tensor::from_f64(&b.visual),
            audio: b.audio.as_ref().map(Tensor::from_f64),
            text: Tensor::from_f64(&b.text),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<(QuerySample, FeatureBundle<f64>)>,
}

impl Dataset {
    pub fn new(samples: Vec<(QuerySample, FeatureBundle<f64>)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (s, _) in &samples {
            if !seen.insert(s.qid) {
                return Err(Error::Validation {
                    line: 0,
                    msg: format!("duplicate qid {}", s.qid),
                });
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn queries(&self) -> impl Iterator<Item = &QuerySample> {
        self.samples.iter().map(|(s, _)| s)
    }

    /// `(visual input width, text width)` shared by all samples.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let Some((_, first)) = self.samples.first() else {
            return Err(Error::Config("empty dataset".into()));
        };
        let dims = (first.visual_input_dim(), first.text_dim());
        for (s, b) in &self.samples {
            if (b.visual_input_dim(), b.text_dim()) != dims {
                return Err(Error::Config(format!(
                    "qid {}: feature widths {:?} differ from {:?}",
                    s.qid,
                    (b.visual_input_dim(), b.text_dim()),
                    dims
                )));
            }
        }
        Ok(dims)
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let at = self.samples.len().saturating_sub(n);
        let tail = self.samples.split_off(at);
        (self, Dataset { samples: tail })
    }
}

fn feature_path(dir: &Path, stem: &str, ext: &str) -> PathBuf {
    dir.join(format!("{stem}.{ext}"))
}

/// Reads a JSON-Lines annotation file and pairs each line with
/// `<vid>.vfeat`, optional `<vid>.afeat` and `<qid>.tfeat` from `feature_dir`.
pub fn load_dataset(annotations: &Path, feature_dir: &Path) -> Result<Dataset> {
    let file = fs::File::open(annotations)
        .map_err(|e| Error::Load(format!("{}: {e}", annotations.display())))?;
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: QuerySample = serde_json::from_str(&line).map_err(|e| Error::Validation {
            line: line_no,
            msg: e.to_string(),
        })?;
        sample
            .validate()
            .map_err(|msg| Error::Validation { line: line_no, msg })?;
        if !seen.insert(sample.qid) {
            return Err(Error::Validation {
                line: line_no,
                msg: format!("duplicate qid {}", sample.qid),
            });
        }
        let load = |stem: &str, ext: &str| -> Result<Tensor<f64>> {
            let p = feature_path(feature_dir, stem, ext);
            if !p.exists() {
                return Err(Error::Load(format!(
                    "qid {} / vid {}: missing feature file {}",
                    sample.qid,
                    sample.vid,
                    p.display()
                )));
            }
            read_features(&p)
        };
        let visual = load(&sample.vid, "vfeat")?;
        let audio = if feature_path(feature_dir, &sample.vid, "afeat").exists() {
            Some(load(&sample.vid, "afeat")?)
        } else {
            None
        };
        let text = load(&sample.qid.to_string(), "tfeat")?;
        let bundle = FeatureBundle { visual, audio, text };
        bundle
            .validate(sample.num_clips())
            .map_err(|msg| Error::Validation {
                line: line_no,
                msg: format!("qid {}: {msg}", sample.qid),
            })?;
        samples.push((sample, bundle));
    }
    Ok(Dataset { samples })
}

/// Loads `<dir>/annotations.jsonl` with features from `<dir>/features`.
pub fn load_dir(dir: &Path) -> Result<Dataset> {
    load_dataset(&dir.join(ANNOTATIONS_FILE), &dir.join(FEATURES_DIR))
}

/// Writes the layout read by [`load_dir`].
pub fn save_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    let feat_dir = dir.join(FEATURES_DIR);
    fs::create_dir_all(&feat_dir)?;
    let mut out = BufWriter::new(fs::File::create(dir.join(ANNOTATIONS_FILE))?);
    for (s, b) in &dataset.samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
        write_features(&feature_path(&feat_dir, &s.vid, "vfeat"), &b.visual)?;
        if let Some(a) = &b.audio {
            write_features(&feature_path(&feat_dir, &s.vid, "afeat"), a)?;
        }
        write_features(&feature_path(&feat_dir, &s.qid.to_string(), "tfeat"), &b.text)?;
    }
    out.flush()?;
    Ok(())
}
