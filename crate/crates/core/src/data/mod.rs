//! Annotations, split manifests, dataset directories and the synthetic
//! grounding task.

mod synthetic;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::{words, Vocabulary};
use crate::video::RawVideo;

pub use synthetic::{generate, signal_patterns, SyntheticInfo};

pub const ANNOTATIONS_FILE: &str = "annotations.txt";
pub const FEATURES_DIR: &str = "features";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// One query-video pair with its boundary in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    /// Index of the sample's line among the non-empty annotation lines.
    pub sample_id: usize,
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub duration: f64,
    pub query: String,
}

impl GroundingSample {
    pub fn g_s(&self) -> f64 {
        self.start / self.duration
    }

    pub fn g_e(&self) -> f64 {
        self.end / self.duration
    }

    pub fn boundary(&self) -> (f64, f64) {
        (self.g_s(), self.g_e())
    }
}

/// One annotation line before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub sentence: String,
    /// 1-based line number in the source file.
    pub line: usize,
}

/// Parses `video_id start end##sentence` lines; blank lines are skipped.
pub fn parse_annotation_text(text: &str, path: &Path) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let Some((head, sentence)) = line.split_once("##") else {
            return Err(err("missing `##` separator".into()));
        };
        let fields: Vec<&str> = head.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!(
                "expected `video_id start end` before `##`, found {} fields",
                fields.len()
            )));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("`{s}` is not a number")))
        };
        let (start, end) = (num(fields[1])?, num(fields[2])?);
        if end <= start {
            return Err(Error::Data(format!(
                "{}:{}: end {end} is not after start {start}",
                path.display(),
                i + 1
            )));
        }
        if start < 0.0 {
            return Err(Error::Data(format!(
                "{}:{}: negative start {start}",
                path.display(),
                i + 1
            )));
        }
        out.push(Annotation {
            video_id: fields[0].to_string(),
            start,
            end,
            sentence: sentence.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn format_annotations(samples: &[GroundingSample]) -> String {
    let mut s = String::new();
    for g in samples {
        writeln!(s, "{} {} {}##{}", g.video_id, g.start, g.end, g.query).unwrap();
    }
    s
}

/// Attaches durations to parsed annotations. Ends past the clip are cut at
/// the clip end.
pub fn normalize_annotations(
    annotations: Vec<Annotation>,
    path: &Path,
    mut duration: impl FnMut(&str) -> Result<f64>,
) -> Result<Vec<GroundingSample>> {
    annotations
        .into_iter()
        .enumerate()
        .map(|(sample_id, a)| {
            let d = duration(&a.video_id)?;
            let end = a.end.min(d);
            if end <= a.start {
                return Err(Error::Data(format!(
                    "{}:{}: start {} is not inside the {d} s clip",
                    path.display(),
                    a.line,
                    a.start
                )));
            }
            Ok(GroundingSample {
                sample_id,
                video_id: a.video_id,
                start: a.start,
                end,
                duration: d,
                query: a.sentence,
            })
        })
        .collect()
}

pub fn feature_path(features: &Path, video_id: &str) -> PathBuf {
    features.join(format!("{video_id}.feat"))
}

/// Reads an annotation file, taking each clip's duration from its feature
/// file under `features`.
pub fn parse_annotations(path: &Path, features: &Path) -> Result<Vec<GroundingSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let annotations = parse_annotation_text(&text, path)?;
    let mut cache: BTreeMap<String, f64> = BTreeMap::new();
    normalize_annotations(annotations, path, |vid| {
        if let Some(&d) = cache.get(vid) {
            return Ok(d);
        }
        let d = RawVideo::load(&feature_path(features, vid))?.duration();
        cache.insert(vid.to_string(), d);
        Ok(d)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

/// Sample indices per split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn to_manifest(&self) -> String {
        let mut rows: Vec<(usize, Split)> = Vec::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            rows.extend(self.get(split).iter().map(|&i| (i, split)));
        }
        rows.sort();
        let mut s = String::new();
        for (i, split) in rows {
            writeln!(s, "{i} {}", split.name()).unwrap();
        }
        s
    }

    pub fn parse_manifest(text: &str, path: &Path) -> Result<Self> {
        let mut p = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let mut parts = line.split_whitespace();
            let (Some(id), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err("expected `sample_id split`".into()));
            };
            let id: usize = id
                .parse()
                .map_err(|_| err(format!("`{id}` is not a sample id")))?;
            let split = Split::parse(split).map_err(|e| err(e.to_string()))?;
            match split {
                Split::Train => p.train.push(id),
                Split::Val => p.val.push(id),
                Split::Test => p.test.push(id),
            }
        }
        Ok(p)
    }
}

/// Seeded shuffle of `0..n` cut into train/val/test by `fractions`.
/// Train and validation sizes are rounded; test takes the rest.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Partition> {
    if fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::Config("split fractions must be nonnegative".into()));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
    let mut p = Partition {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    p.train.sort_unstable();
    p.val.sort_unstable();
    p.test.sort_unstable();
    Ok(p)
}

/// Samples, their clips, the vocabulary and (optionally) the split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<GroundingSample>,
    pub videos: BTreeMap<String, RawVideo>,
    pub vocab: Vocabulary,
    pub partition: Option<Partition>,
}

impl Dataset {
    /// Vocabulary of every word in the given samples, in sorted order.
    pub fn build_vocab<'a>(samples: impl IntoIterator<Item = &'a GroundingSample>) -> Vocabulary {
        let mut all: Vec<String> = samples.into_iter().flat_map(|s| words(&s.query)).collect();
        all.sort();
        all.dedup();
        Vocabulary::from_tokens(all)
    }

    /// Reads `annotations.txt`, `features/`, and, when present, `vocab.txt`
    /// and `manifest.txt`. Without a vocabulary file one is built from the
    /// training split (or all samples when there is no manifest).
    pub fn load(dir: &Path) -> Result<Self> {
        let features = dir.join(FEATURES_DIR);
        let samples = parse_annotations(&dir.join(ANNOTATIONS_FILE), &features)?;
        let mut videos = BTreeMap::new();
        for s in &samples {
            if !videos.contains_key(&s.video_id) {
                let raw = RawVideo::load(&feature_path(&features, &s.video_id))?;
                videos.insert(s.video_id.clone(), raw);
            }
        }
        let manifest = dir.join(MANIFEST_FILE);
        let partition = if manifest.exists() {
            let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            let p = Partition::parse_manifest(&text, &manifest)?;
            for split in [Split::Train, Split::Val, Split::Test] {
                if let Some(&bad) = p.get(split).iter().find(|&&i| i >= samples.len()) {
                    return Err(Error::Data(format!(
                        "{}: sample {bad} does not exist ({} samples)",
                        manifest.display(),
                        samples.len()
                    )));
                }
            }
            Some(p)
        } else {
            None
        };
        let vocab_path = dir.join(VOCAB_FILE);
        let vocab = if vocab_path.exists() {
            Vocabulary::load(&vocab_path)?
        } else {
            match &partition {
                Some(p) => Self::build_vocab(p.train.iter().map(|&i| &samples[i])),
                None => Self::build_vocab(&samples),
            }
        };
        Ok(Self {
            samples,
            videos,
            vocab,
            partition,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let features = dir.join(FEATURES_DIR);
        std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
        for (vid, raw) in &self.videos {
            raw.save(&feature_path(&features, vid))?;
        }
        let ann = dir.join(ANNOTATIONS_FILE);
        std::fs::write(&ann, format_annotations(&self.samples)).map_err(|e| Error::io(&ann, e))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        if let Some(p) = &self.partition {
            let m = dir.join(MANIFEST_FILE);
            std::fs::write(&m, p.to_manifest()).map_err(|e| Error::io(&m, e))?;
        }
        Ok(())
    }

    /// Sample indices of `split`; every sample when there is no manifest.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        match &self.partition {
            Some(p) => p.get(split).to_vec(),
            None => (0..self.samples.len()).collect(),
        }
    }

    pub fn video(&self, sample: &GroundingSample) -> Result<&RawVideo> {
        self.videos
            .get(&sample.video_id)
            .ok_or_else(|| Error::Data(format!("no features for video `{}`", sample.video_id)))
    }

    pub fn raw_dim(&self) -> Result<usize> {
        let mut dims = self.videos.values().map(RawVideo::feature_dim);
        let first = dims
            .next()
            .ok_or_else(|| Error::Data("dataset has no videos".into()))?;
        if let Some(other) = dims.find(|&d| d != first) {
            return Err(Error::Data(format!(
                "feature dimension differs across videos ({first} vs {other})"
            )));
        }
        Ok(first)
    }
}
