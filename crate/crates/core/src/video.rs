//! Video encoder: half-overlapping segmentation of a per-frame feature
//! stream, a bias-free projection and learned segment positions.

use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParameterStore};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 5] = b"FEAT1";

/// Per-frame features (`frame_count x d_raw`) and the clip duration.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVideo {
    frames: Tensor,
    duration: f64,
}

impl RawVideo {
    pub fn new(frames: Tensor, duration: f64) -> Result<Self> {
        frames.dims2()?;
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::Input(format!("duration must be positive, got {duration}")));
        }
        Ok(Self { frames, duration })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// `FEAT1`, frame count and width as `u64`, duration as `f64`, then
    /// row-major `f32` frames; all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(29 + 4 * self.frames.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.frame_count() as u64).to_le_bytes());
        out.extend_from_slice(&(self.feature_dim() as u64).to_le_bytes());
        out.extend_from_slice(&self.duration.to_le_bytes());
        for &v in self.frames.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("feature file: {msg}"));
        if bytes.len() < 29 || &bytes[..5] != FEATURE_MAGIC {
            return Err(bad("missing FEAT1 header"));
        }
        let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let frames = usize::try_from(word(5)).map_err(|_| bad("frame count overflow"))?;
        let dim = usize::try_from(word(13)).map_err(|_| bad("width overflow"))?;
        let duration = f64::from_le_bytes(bytes[21..29].try_into().unwrap());
        if frames < 1 {
            return Err(Error::Input("video has no frames".into()));
        }
        let expected = frames
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("size overflow"))?;
        if bytes.len() - 29 != expected {
            return Err(bad(&format!(
                "expected {expected} payload bytes, found {}",
                bytes.len() - 29
            )));
        }
        let data = bytes[29..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(Tensor::matrix(frames, dim, data)?, duration)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Segment features plus the frame windows behind the real segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedVideo {
    /// `d_raw x T`; padded columns are zero.
    pub features: Tensor,
    /// True for real segments.
    pub mask: Vec<bool>,
    /// Half-open frame ranges of the real segments, in order.
    pub windows: Vec<(usize, usize)>,
    pub frame_count: usize,
}

impl SegmentedVideo {
    pub fn real_segments(&self) -> usize {
        self.windows.len()
    }

    /// Window midpoints normalized by the clip length.
    pub fn midpoints(&self) -> Vec<f64> {
        let f = self.frame_count as f64;
        self.windows
            .iter()
            .map(|&(a, b)| 0.5 * (a + b) as f64 / f)
            .collect()
    }
}

/// Number of windows of `seg_len` frames at stride `seg_len / 2`; short
/// clips still yield one.
pub fn window_count(frame_count: usize, seg_len: usize) -> usize {
    let hop = seg_len / 2;
    if frame_count <= seg_len {
        1
    } else {
        (frame_count - seg_len) / hop + 1
    }
}

/// Splits `raw` into half-overlapping windows averaged over their frames,
/// padded with zero columns or uniformly subsampled to exactly `t` segments.
pub fn segment_video(raw: &RawVideo, seg_len: usize, t: usize) -> Result<SegmentedVideo> {
    if seg_len < 2 || !seg_len.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "segment length must be even and at least 2, got {seg_len}"
        )));
    }
    if t == 0 {
        return Err(Error::Config("segment count must be positive".into()));
    }
    let frames = raw.frame_count();
    if frames < 1 {
        return Err(Error::Input("video has no frames".into()));
    }
    let hop = seg_len / 2;
    let available = window_count(frames, seg_len);
    let chosen: Vec<usize> = if available <= t {
        (0..available).collect()
    } else if t == 1 {
        vec![0]
    } else {
        (0..t)
            .map(|i| ((i * (available - 1)) as f64 / (t - 1) as f64).round() as usize)
            .collect()
    };

    let dim = raw.feature_dim();
    let src = raw.frames().data();
    let mut features = Tensor::zeros(&[dim, t]);
    let mut windows = Vec::with_capacity(chosen.len());
    for (col, &w) in chosen.iter().enumerate() {
        let start = w * hop;
        let end = (start + seg_len).min(frames);
        let inv = 1.0 / (end - start) as f64;
        for r in 0..dim {
            let mean: f64 = (start..end).map(|f| src[f * dim + r]).sum::<f64>() * inv;
            features.set2(r, col, mean);
        }
        windows.push((start, end));
    }
    let mut mask = vec![false; t];
    mask[..chosen.len()].iter_mut().for_each(|m| *m = true);
    Ok(SegmentedVideo {
        features,
        mask,
        windows,
        frame_count: frames,
    })
}

/// Segment matrix `V` with positions added (`d x T`) and its validity mask.
#[derive(Debug, Clone)]
pub struct VideoFeatures {
    pub v: Var,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct VideoEncoder {
    pub w_em: ParamId,
    pub position: ParamId,
}

impl VideoEncoder {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        dim: usize,
        raw_dim: usize,
        segments: usize,
    ) -> Result<Self> {
        let w_em = store.add("video.w_em", init::xavier_matrix(rng, dim, raw_dim))?;
        let position = store.add(
            "video.position",
            init::uniform(rng, &[dim, segments], -0.1, 0.1),
        )?;
        Ok(Self { w_em, position })
    }

    /// `V_em = ReLU(W_em * segments)`.
    pub fn project(&self, tape: &mut Tape, store: &ParameterStore, segments: Var) -> Result<Var> {
        let w = tape.param(store, self.w_em);
        let z = tape.matmul(w, segments)?;
        Ok(tape.relu(z))
    }

    /// `V = V_em + P_v` when enabled, otherwise `V_em`. The mask is carried
    /// through untouched.
    pub fn add_position(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        v_em: Var,
        mask: &[bool],
        enabled: bool,
    ) -> Result<VideoFeatures> {
        let (_, t) = tape.value(v_em).dims2()?;
        if mask.len() != t {
            return Err(Error::shape("add_position", tape.shape(v_em), &[mask.len()]));
        }
        let v = if enabled {
            let p = tape.param(store, self.position);
            tape.add(v_em, p)?
        } else {
            v_em
        };
        Ok(VideoFeatures {
            v,
            mask: mask.to_vec(),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        segmented: &SegmentedVideo,
        use_position: bool,
    ) -> Result<VideoFeatures> {
        let segments = tape.constant(segmented.features.clone());
        let v_em = self.project(tape, store, segments)?;
        self.add_position(tape, store, v_em, &segmented.mask, use_position)
    }
}
