//! Flat `key = value` configuration files for training and synthetic data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::MAX_WORDS;

/// Parsed `key = value` lines. Blank lines and `#` comments are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let Some((k, v)) = line.split_once('=') else {
                return Err(err(format!("expected `key = value`, found `{line}`")));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(err("empty key".into()));
            }
            if entries.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses `key=value` override strings.
    pub fn from_overrides(items: &[String]) -> Result<Self> {
        let text = items.join("\n");
        Self::parse(&text, Path::new("<overrides>"))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !known.contains(&k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }

    fn typed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_qan: bool,
    pub use_l_tem: bool,
    pub use_l_cw: bool,
    pub use_lcn: bool,
    pub use_gcn: bool,
    pub pos_embed_video: bool,
    pub pos_embed_word: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_qan: true,
            use_l_tem: true,
            use_l_cw: true,
            use_lcn: true,
            use_gcn: true,
            pos_embed_video: true,
            pos_embed_word: true,
        }
    }
}

impl AblationFlags {
    /// Everything optional switched off.
    pub fn baseline() -> Self {
        Self {
            use_qan: false,
            use_l_tem: false,
            use_l_cw: false,
            use_lcn: false,
            use_gcn: false,
            pos_embed_video: true,
            pos_embed_word: true,
        }
    }

    pub const NAMES: [&'static str; 7] = [
        "use_qan",
        "use_l_tem",
        "use_l_cw",
        "use_lcn",
        "use_gcn",
        "pos_embed_video",
        "pos_embed_word",
    ];

    pub fn values(&self) -> [bool; 7] {
        [
            self.use_qan,
            self.use_l_tem,
            self.use_l_cw,
            self.use_lcn,
            self.use_gcn,
            self.pos_embed_video,
            self.pos_embed_word,
        ]
    }

    fn from_values(v: [bool; 7]) -> Self {
        Self {
            use_qan: v[0],
            use_l_tem: v[1],
            use_l_cw: v[2],
            use_lcn: v[3],
            use_gcn: v[4],
            pos_embed_video: v[5],
            pos_embed_word: v[6],
        }
    }

    /// Copy with one named flag changed.
    pub fn with(self, name: &str, value: bool) -> Result<Self> {
        let i = Self::NAMES
            .iter()
            .position(|&n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown flag `{name}`")))?;
        let mut v = self.values();
        v[i] = value;
        Ok(Self::from_values(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub segments: usize,
    pub seg_len: usize,
    pub max_words: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub flags: AblationFlags,
    pub kernel_width: usize,
    pub nl_blocks: usize,
    pub nl_heads: usize,
    /// Stop after this many epochs without validation improvement; 0 never
    /// stops early.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "d",
        "segments",
        "seg_len",
        "max_words",
        "learning_rate",
        "batch_size",
        "epochs",
        "seed",
        "use_qan",
        "use_l_tem",
        "use_l_cw",
        "use_lcn",
        "use_gcn",
        "pos_embed_video",
        "pos_embed_word",
        "kernel_width",
        "nl_blocks",
        "nl_heads",
        "patience",
    ];

    pub fn full() -> Self {
        Self {
            dim: 512,
            segments: 128,
            seg_len: 16,
            max_words: MAX_WORDS,
            learning_rate: 4e-4,
            batch_size: 100,
            epochs: 60,
            seed: 1,
            flags: AblationFlags::default(),
            kernel_width: 15,
            nl_blocks: 2,
            nl_heads: 4,
            patience: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            dim: 64,
            segments: 32,
            seg_len: 8,
            batch_size: 16,
            ..Self::full()
        }
    }

    /// The smallest configuration used for gradient checking.
    pub fn tiny() -> Self {
        Self {
            dim: 8,
            segments: 6,
            seg_len: 2,
            max_words: 4,
            batch_size: 1,
            epochs: 1,
            kernel_width: 3,
            nl_blocks: 1,
            nl_heads: 4,
            ..Self::full()
        }
    }

    /// Reads a config whose `preset` line (if any) selects the starting
    /// point: `desk` (default), `full` or `tiny`.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut known: Vec<&str> = Self::KEYS.to_vec();
        known.push("preset");
        kv.reject_unknown(&known)?;
        let base = match kv.get("preset").unwrap_or("desk") {
            "desk" => Self::desk(),
            "full" => Self::full(),
            "tiny" => Self::tiny(),
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        let mut flags = base.flags.values();
        for (i, name) in AblationFlags::NAMES.iter().enumerate() {
            flags[i] = kv.typed(name, flags[i])?;
        }
        let cfg = Self {
            dim: kv.typed("d", base.dim)?,
            segments: kv.typed("segments", base.segments)?,
            seg_len: kv.typed("seg_len", base.seg_len)?,
            max_words: kv.typed("max_words", base.max_words)?,
            learning_rate: kv.typed("learning_rate", base.learning_rate)?,
            batch_size: kv.typed("batch_size", base.batch_size)?,
            epochs: kv.typed("epochs", base.epochs)?,
            seed: kv.typed("seed", base.seed)?,
            flags: AblationFlags::from_values(flags),
            kernel_width: kv.typed("kernel_width", base.kernel_width)?,
            nl_blocks: kv.typed("nl_blocks", base.nl_blocks)?,
            nl_heads: kv.typed("nl_heads", base.nl_heads)?,
            patience: kv.typed("patience", base.patience)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return bad(format!("d must be positive and even, got {}", self.dim));
        }
        if self.nl_heads == 0 || !self.dim.is_multiple_of(self.nl_heads) {
            return bad(format!("d={} is not divisible by nl_heads={}", self.dim, self.nl_heads));
        }
        if self.segments == 0 {
            return bad("segments must be positive".into());
        }
        if self.seg_len < 2 || !self.seg_len.is_multiple_of(2) {
            return bad(format!("seg_len must be even and at least 2, got {}", self.seg_len));
        }
        if self.max_words == 0 || self.max_words > MAX_WORDS {
            return bad(format!("max_words must be in 1..={MAX_WORDS}, got {}", self.max_words));
        }
        if self.kernel_width.is_multiple_of(2) {
            return bad(format!("kernel_width must be odd, got {}", self.kernel_width));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("d", self.dim.to_string()),
            ("segments", self.segments.to_string()),
            ("seg_len", self.seg_len.to_string()),
            ("max_words", self.max_words.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (name, v) in AblationFlags::NAMES.iter().zip(self.flags.values()) {
            out.push((name, v.to_string()));
        }
        out.push(("kernel_width", self.kernel_width.to_string()));
        out.push(("nl_blocks", self.nl_blocks.to_string()));
        out.push(("nl_heads", self.nl_heads.to_string()));
        out.push(("patience", self.patience.to_string()));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Architecture-defining fields stored next to the weights.
    pub fn architecture(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = vec![
            ("d".into(), self.dim as f64),
            ("segments".into(), self.segments as f64),
            ("seg_len".into(), self.seg_len as f64),
            ("max_words".into(), self.max_words as f64),
            ("kernel_width".into(), self.kernel_width as f64),
            ("nl_blocks".into(), self.nl_blocks as f64),
            ("nl_heads".into(), self.nl_heads as f64),
        ];
        for (name, v) in AblationFlags::NAMES.iter().zip(self.flags.values()) {
            out.push((name.to_string(), if v { 1.0 } else { 0.0 }));
        }
        out
    }

    /// Rebuilds the architecture part of a config from checkpoint metadata.
    pub fn from_architecture(meta: &[(String, f64)]) -> Result<Self> {
        let mut kv = KeyValues::default();
        for (k, v) in meta {
            if Self::KEYS.contains(&k.as_str()) {
                if AblationFlags::NAMES.contains(&k.as_str()) {
                    kv.set(k, *v != 0.0);
                } else {
                    kv.set(k, *v as u64);
                }
            }
        }
        Self::from_key_values(&kv)
    }

    /// Fails with the first architecture field that differs.
    pub fn check_compatible(&self, meta: &[(String, f64)]) -> Result<()> {
        for (k, want) in self.architecture() {
            let Some((_, got)) = meta.iter().find(|(m, _)| *m == k) else {
                return Err(Error::Compatibility {
                    field: k,
                    checkpoint: "missing".into(),
                    config: want.to_string(),
                });
            };
            if *got != want {
                return Err(Error::Compatibility {
                    field: k,
                    checkpoint: got.to_string(),
                    config: want.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// How queries relate to boundary placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticMode {
    /// Template queries, boundary placed uniformly at random.
    Standard,
    /// One signal word among repeated filler words; the word's slot in the
    /// query determines the boundary center, and a decoy copy of the
    /// pattern appears elsewhere in the clip.
    PositionBias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub signal_tokens: usize,
    pub filler_tokens: usize,
    pub raw_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub fps: f64,
    pub min_width: f64,
    pub max_width: f64,
    pub sigma: f64,
    /// Windows carrying the pattern of a signal token absent from the query.
    pub distractors: usize,
    pub mode: SyntheticMode,
    /// Query length in position-bias mode.
    pub slots: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            signal_tokens: 16,
            filler_tokens: 8,
            raw_dim: 32,
            min_frames: 96,
            max_frames: 132,
            fps: 4.0,
            min_width: 0.1,
            max_width: 0.5,
            sigma: 0.5,
            distractors: 0,
            mode: SyntheticMode::Standard,
            slots: 8,
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub const KEYS: [&'static str; 17] = [
        "samples",
        "signal_tokens",
        "filler_tokens",
        "raw_dim",
        "min_frames",
        "max_frames",
        "fps",
        "min_width",
        "max_width",
        "sigma",
        "distractors",
        "mode",
        "slots",
        "train_fraction",
        "val_fraction",
        "test_fraction",
        "seed",
    ];

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&Self::KEYS)?;
        let d = Self::default();
        let mode = match kv.get("mode").unwrap_or("standard") {
            "standard" => SyntheticMode::Standard,
            "position_bias" => SyntheticMode::PositionBias,
            other => return Err(Error::Config(format!("unknown mode `{other}`"))),
        };
        let cfg = Self {
            samples: kv.typed("samples", d.samples)?,
            signal_tokens: kv.typed("signal_tokens", d.signal_tokens)?,
            filler_tokens: kv.typed("filler_tokens", d.filler_tokens)?,
            raw_dim: kv.typed("raw_dim", d.raw_dim)?,
            min_frames: kv.typed("min_frames", d.min_frames)?,
            max_frames: kv.typed("max_frames", d.max_frames)?,
            fps: kv.typed("fps", d.fps)?,
            min_width: kv.typed("min_width", d.min_width)?,
            max_width: kv.typed("max_width", d.max_width)?,
            sigma: kv.typed("sigma", d.sigma)?,
            distractors: kv.typed("distractors", d.distractors)?,
            mode,
            slots: kv.typed("slots", d.slots)?,
            train_fraction: kv.typed("train_fraction", d.train_fraction)?,
            val_fraction: kv.typed("val_fraction", d.val_fraction)?,
            test_fraction: kv.typed("test_fraction", d.test_fraction)?,
            seed: kv.typed("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.samples == 0 {
            return bad("samples must be positive".into());
        }
        if self.signal_tokens == 0 || self.raw_dim == 0 {
            return bad("signal_tokens and raw_dim must be positive".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!(
                "frame range [{}, {}] is empty",
                self.min_frames, self.max_frames
            ));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if !(self.min_width > 0.0 && self.min_width <= self.max_width) {
            return bad(format!(
                "boundary width range [{}, {}] is invalid",
                self.min_width, self.max_width
            ));
        }
        if self.max_width > 1.0 {
            return bad(format!(
                "boundary width {} is wider than the video",
                self.max_width
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        // Distractor tokens must differ from the (up to three) query tokens.
        if self.distractors > 0 && self.signal_tokens < 3 + self.distractors {
            return bad(format!(
                "{} distractors need at least {} signal tokens",
                self.distractors,
                3 + self.distractors
            ));
        }
        if self.mode == SyntheticMode::PositionBias && (self.slots < 2 || self.slots > MAX_WORDS) {
            return bad(format!("slots must be in 2..={MAX_WORDS}, got {}", self.slots));
        }
        let fractions = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fractions.iter().any(|f| *f < 0.0) {
            return bad("split fractions must be nonnegative".into());
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions sum to {sum}, not 1"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mode = match self.mode {
            SyntheticMode::Standard => "standard",
            SyntheticMode::PositionBias => "position_bias",
        };
        let values = [
            self.samples.to_string(),
            self.signal_tokens.to_string(),
            self.filler_tokens.to_string(),
            self.raw_dim.to_string(),
            self.min_frames.to_string(),
            self.max_frames.to_string(),
            self.fps.to_string(),
            self.min_width.to_string(),
            self.max_width.to_string(),
            self.sigma.to_string(),
            self.distractors.to_string(),
            mode.to_string(),
            self.slots.to_string(),
            self.train_fraction.to_string(),
            self.val_fraction.to_string(),
            self.test_fraction.to_string(),
            self.seed.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_config_text_round_trip() {
        let mut cfg = TrainConfig::desk();
        cfg.flags.use_gcn = false;
        cfg.learning_rate = 1e-3;
        let kv = KeyValues::parse(&cfg.to_text(), Path::new("c")).unwrap();
        assert_eq!(TrainConfig::from_key_values(&kv).unwrap(), cfg);
    }

    #[test]
    fn presets_and_overrides() {
        let kv = KeyValues::parse("preset = full\n# comment\nepochs = 3\n", Path::new("c")).unwrap();
        let cfg = TrainConfig::from_key_values(&kv).unwrap();
        assert_eq!((cfg.dim, cfg.segments, cfg.seg_len, cfg.batch_size), (512, 128, 16, 100));
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.learning_rate, 4e-4);
        let desk = TrainConfig::desk();
        assert_eq!((desk.dim, desk.segments, desk.seg_len, desk.batch_size), (64, 32, 8, 16));
    }

    #[test]
    fn rejects_bad_input() {
        let p = Path::new("c");
        assert!(matches!(KeyValues::parse("d 64", p), Err(Error::Parse { line: 1, .. })));
        assert!(KeyValues::parse("d = 1\nd = 2", p).is_err());
        let kv = KeyValues::parse("bogus = 1", p).unwrap();
        assert!(matches!(TrainConfig::from_key_values(&kv), Err(Error::Config(_))));
        let kv = KeyValues::parse("d = 62", p).unwrap();
        assert!(TrainConfig::from_key_values(&kv).is_err());
        let kv = KeyValues::parse("kernel_width = 4", p).unwrap();
        assert!(TrainConfig::from_key_values(&kv).is_err());
    }

    #[test]
    fn architecture_compatibility_names_field() {
        let cfg = TrainConfig::desk();
        let meta = cfg.architecture();
        cfg.check_compatible(&meta).unwrap();
        assert_eq!(TrainConfig::from_architecture(&meta).unwrap().dim, 64);
        let other = TrainConfig { dim: 32, ..TrainConfig::desk() };
        match other.check_compatible(&meta) {
            Err(Error::Compatibility { field, .. }) => assert_eq!(field, "d"),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn synthetic_config_round_trip_and_validation() {
        let cfg = SyntheticConfig {
            mode: SyntheticMode::PositionBias,
            distractors: 1,
            ..Default::default()
        };
        let kv = KeyValues::parse(&cfg.to_text(), Path::new("s")).unwrap();
        assert_eq!(SyntheticConfig::from_key_values(&kv).unwrap(), cfg);
        let wide = SyntheticConfig { max_width: 1.5, ..Default::default() };
        assert!(wide.validate().is_err());
        let split = SyntheticConfig { val_fraction: 0.3, ..Default::default() };
        assert!(split.validate().is_err());
    }
}
