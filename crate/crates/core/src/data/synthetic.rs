//! Planted-pattern grounding task.
//!
//! Every signal word owns a fixed unit direction in feature space. Frames
//! inside the answer boundary carry the (normalized) sum of the directions
//! of the query's signal words plus Gaussian noise; other frames carry noise
//! only, or a distractor word's direction when distractors are enabled.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{split, Dataset, GroundingSample};
use crate::config::{SyntheticConfig, SyntheticMode};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::video::RawVideo;

const TEMPLATE_WORDS: [&str; 7] = ["a", "person", "the", "object", "someone", "is", "then"];
const POSITION_FILLER: &str = "then";

/// Ground-truth construction details, for oracles and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInfo {
    pub signal_words: Vec<String>,
    /// Unit direction of every signal word, stored at `f32` precision.
    pub patterns: Vec<Vec<f64>>,
    /// Signal word indices used by each sample's query.
    pub query_signals: Vec<Vec<usize>>,
}

impl SyntheticInfo {
    /// Direction planted inside the boundary of a sample.
    pub fn target_pattern(&self, sample: usize) -> Vec<f64> {
        combine(&self.patterns, &self.query_signals[sample])
    }
}

fn signal_word(i: usize) -> String {
    format!("act{i}")
}

fn filler_word(i: usize) -> String {
    format!("w{i}")
}

/// Random unit directions, mutually orthogonal when they fit in `dim`.
pub fn signal_patterns(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if out.len() < dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        out.push(v);
    }
    out.into_iter()
        .map(|v| v.into_iter().map(|x| x as f32 as f64).collect())
        .collect()
}

fn combine(patterns: &[Vec<f64>], ids: &[usize]) -> Vec<f64> {
    if let [only] = ids {
        return patterns[*only].clone();
    }
    let dim = patterns[0].len();
    let mut v = vec![0.0; dim];
    for &i in ids {
        v.iter_mut().zip(&patterns[i]).for_each(|(a, b)| *a += b);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / norm) as f32 as f64).collect()
}

struct Planned {
    sample: GroundingSample,
    video: RawVideo,
    signals: Vec<usize>,
}

/// Uniform start for a window of width `w` that avoids `[lo, hi]`, or
/// `None` when there is no room.
fn start_outside<R: Rng>(rng: &mut R, w: f64, lo: f64, hi: f64) -> Option<f64> {
    let left = (lo - w).max(0.0);
    let right = (1.0 - w - hi).max(0.0);
    let room = left + right;
    if room <= 0.0 {
        return None;
    }
    let u = rng.random::<f64>() * room;
    Some(if u < left { u } else { hi + (u - left) })
}

fn seconds(g: f64, duration: f64) -> f64 {
    (g * duration * 1000.0).round() / 1000.0
}

fn plan_sample(cfg: &SyntheticConfig, patterns: &[Vec<f64>], index: usize) -> Result<Planned> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);

    let frames = rng.random_range(cfg.min_frames..=cfg.max_frames);
    let duration = frames as f64 / cfg.fps;
    let width = rng.random_range(cfg.min_width..=cfg.max_width);

    let (signals, words, g_s) = match cfg.mode {
        SyntheticMode::Standard => {
            let k = rng.random_range(1..=3.min(cfg.signal_tokens));
            let all: Vec<usize> = (0..cfg.signal_tokens).collect();
            let signals: Vec<usize> = all.choose_multiple(&mut rng, k).copied().collect();
            let s: Vec<String> = signals.iter().map(|&i| signal_word(i)).collect();
            let template: Vec<String> = match k {
                1 if rng.random_bool(0.5) => vec!["a", "person", &s[0], "the", "object"],
                1 => vec!["someone", "is", &s[0]],
                2 if rng.random_bool(0.5) => vec!["a", "person", &s[0], "the", &s[1]],
                2 => vec!["someone", &s[0], "then", &s[1]],
                _ => vec!["a", "person", &s[0], "the", &s[1], "then", &s[2]],
            }
            .into_iter()
            .map(str::to_string)
            .collect();
            let mut words = template;
            if cfg.filler_tokens > 0 {
                for _ in 0..rng.random_range(0..=2) {
                    let at = rng.random_range(0..=words.len());
                    words.insert(at, filler_word(rng.random_range(0..cfg.filler_tokens)));
                }
            }
            let g_s = rng.random::<f64>() * (1.0 - width);
            (signals, words, g_s)
        }
        SyntheticMode::PositionBias => {
            let slot = rng.random_range(0..cfg.slots);
            let token = rng.random_range(0..cfg.signal_tokens);
            let mut words: Vec<String> = (0..cfg.slots)
                .map(|_| {
                    if cfg.filler_tokens > 0 {
                        filler_word(rng.random_range(0..cfg.filler_tokens))
                    } else {
                        POSITION_FILLER.to_string()
                    }
                })
                .collect();
            words[slot] = signal_word(token);
            let jitter = (rng.random::<f64>() - 0.5) * 0.5;
            let center = (slot as f64 + 0.5 + jitter) / cfg.slots as f64;
            let g_s = (center - 0.5 * width).clamp(0.0, 1.0 - width);
            (vec![token], words, g_s)
        }
    };

    let start = seconds(g_s, duration);
    let end = seconds(g_s + width, duration).min(duration).max(start + 1e-3);
    let sample = GroundingSample {
        sample_id: index,
        video_id: format!("syn{index:05}"),
        start,
        end,
        duration,
        query: words.join(" "),
    };
    let (g_s, g_e) = sample.boundary();

    let mut windows: Vec<(f64, f64, Vec<f64>)> = vec![(g_s, g_e, combine(patterns, &signals))];
    match cfg.mode {
        SyntheticMode::Standard => {
            let mut others: Vec<usize> = (0..cfg.signal_tokens)
                .filter(|t| !signals.contains(t))
                .collect();
            others.shuffle(&mut rng);
            for &t in others.iter().take(cfg.distractors) {
                let w = rng.random_range(cfg.min_width..=cfg.max_width);
                if let Some(s) = start_outside(&mut rng, w, g_s, g_e) {
                    windows.push((s, s + w, patterns[t].clone()));
                }
            }
        }
        SyntheticMode::PositionBias => {
            let w = g_e - g_s;
            if let Some(s) = start_outside(&mut rng, w, g_s, g_e) {
                windows.push((s, s + w, patterns[signals[0]].clone()));
            }
        }
    }

    let dim = cfg.raw_dim;
    let mut data = vec![0.0; frames * dim];
    for f in 0..frames {
        let t = (f as f64 + 0.5) / frames as f64;
        let row = &mut data[f * dim..(f + 1) * dim];
        for (lo, hi, pattern) in &windows {
            if t >= *lo && t <= *hi {
                row.iter_mut().zip(pattern).for_each(|(a, b)| *a += b);
            }
        }
        for x in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x = (*x + cfg.sigma * z) as f32 as f64;
        }
    }
    let video = RawVideo::new(Tensor::matrix(frames, dim, data)?, duration)?;
    Ok(Planned {
        sample,
        video,
        signals,
    })
}

/// Builds the whole dataset (samples, clips, vocabulary and split) as a
/// pure function of `cfg`.
pub fn generate(cfg: &SyntheticConfig) -> Result<(Dataset, SyntheticInfo)> {
    cfg.validate()?;
    let patterns = signal_patterns(cfg.signal_tokens, cfg.raw_dim, cfg.seed);
    let planned: Vec<Planned> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| plan_sample(cfg, &patterns, i))
        .collect::<Result<_>>()?;

    let signal_words: Vec<String> = (0..cfg.signal_tokens).map(signal_word).collect();
    let vocab = Vocabulary::from_tokens(
        TEMPLATE_WORDS
            .iter()
            .map(|s| s.to_string())
            .chain((0..cfg.filler_tokens).map(filler_word))
            .chain(signal_words.iter().cloned()),
    );
    let partition = split(
        cfg.samples,
        [cfg.train_fraction, cfg.val_fraction, cfg.test_fraction],
        cfg.seed,
    )?;
    let mut samples = Vec::with_capacity(planned.len());
    let mut videos = BTreeMap::new();
    let mut query_signals = Vec::with_capacity(planned.len());
    for p in planned {
        videos.insert(p.sample.video_id.clone(), p.video);
        samples.push(p.sample);
        query_signals.push(p.signals);
    }
    Ok((
        Dataset {
            samples,
            videos,
            vocab,
            partition: Some(partition),
        },
        SyntheticInfo {
            signal_words,
            patterns,
            query_signals,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn small(mode: SyntheticMode, sigma: f64) -> SyntheticConfig {
        SyntheticConfig {
            samples: 40,
            sigma,
            mode,
            min_frames: 40,
            max_frames: 60,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_single_token_frames_equal_the_pattern() {
        let (ds, info) = generate(&small(SyntheticMode::Standard, 0.0)).unwrap();
        let mut checked = 0;
        for (i, s) in ds.samples.iter().enumerate() {
            if info.query_signals[i].len() != 1 {
                continue;
            }
            let pattern = &info.patterns[info.query_signals[i][0]];
            let raw = ds.video(s).unwrap();
            let f = raw.frame_count();
            for fr in 0..f {
                let t = (fr as f64 + 0.5) / f as f64;
                let row = &raw.frames().data()[fr * raw.feature_dim()..(fr + 1) * raw.feature_dim()];
                if t >= s.g_s() && t <= s.g_e() {
                    assert_eq!(row, pattern.as_slice());
                    checked += 1;
                } else {
                    assert!(row.iter().all(|&x| x == 0.0));
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn samples_respect_invariants_and_tokenize() {
        for mode in [SyntheticMode::Standard, SyntheticMode::PositionBias] {
            let (ds, info) = generate(&small(mode, 0.5)).unwrap();
            for (i, s) in ds.samples.iter().enumerate() {
                let (a, b) = s.boundary();
                assert!(0.0 <= a && a < b && b <= 1.0);
                assert!(s.duration > 0.0);
                let tokens = tokenize(&s.query, &ds.vocab).unwrap();
                assert!(tokens.indices().iter().all(|&t| t != 0));
                for &sig in &info.query_signals[i] {
                    assert!(s.query.split(' ').any(|w| w == info.signal_words[sig]));
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small(SyntheticMode::Standard, 0.5);
        let (a, _) = generate(&cfg).unwrap();
        let (b, _) = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate(&SyntheticConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn patterns_are_orthonormal() {
        let p = signal_patterns(6, 16, 3);
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn position_bias_center_tracks_word_slot() {
        let cfg = SyntheticConfig {
            samples: 200,
            ..small(SyntheticMode::PositionBias, 0.0)
        };
        let (ds, info) = generate(&cfg).unwrap();
        let mut by_slot = vec![Vec::new(); cfg.slots];
        for s in &ds.samples {
            let slot = s.query.split(' ').position(|w| w.starts_with("act")).unwrap();
            by_slot[slot].push(0.5 * (s.g_s() + s.g_e()));
        }
        let means: Vec<f64> = by_slot
            .iter()
            .filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        assert!(means.windows(2).all(|w| w[0] <= w[1] + 1e-12), "{means:?}");
        assert_eq!(info.query_signals.len(), 200);
    }
}
