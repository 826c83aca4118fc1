//! The full grounding network: encoders, query attention and fusion,
//! local and global context, pooling and regression, with every ablation
//! switch honored.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Fusion, QueryAttention};
use crate::autodiff::{ParamGrads, Tape, Var};
use crate::config::TrainConfig;
use crate::context::{GlobalContext, LocalContext};
use crate::data::GroundingSample;
use crate::error::{Error, Result};
use crate::head::{GroundingPrediction, RegressionHead};
use crate::loss::{GroundTruth, LossBreakdown, LossFlags, LossVars};
use crate::params::ParameterStore;
use crate::text::{tokenize, QueryEncoder, QueryTokens, Vocabulary};
use crate::video::{segment_video, RawVideo, SegmentedVideo, VideoEncoder};

/// A sample turned into model inputs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub tokens: QueryTokens,
    pub video: SegmentedVideo,
    pub gt: GroundTruth,
}

impl Prepared {
    pub fn boundary(&self) -> (f64, f64) {
        (self.gt.g_s, self.gt.g_e)
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Start-end prediction, `2 x 1`.
    pub t_se: Var,
    /// Center-width prediction, `2 x 1`.
    pub t_cw: Var,
    /// Temporal attention, `1 x T`.
    pub b: Var,
    /// Word attention, `1 x N`, when query attention is on.
    pub a: Option<Var>,
    /// Non-local attention maps per block and head.
    pub context_attention: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct Plrn {
    pub cfg: TrainConfig,
    pub vocab_size: usize,
    pub raw_dim: usize,
    pub query: QueryEncoder,
    pub video: VideoEncoder,
    pub qan: QueryAttention,
    pub fusion: Fusion,
    pub lcn: LocalContext,
    pub gcn: GlobalContext,
    pub head: RegressionHead,
}

impl Plrn {
    /// Registers every parameter, whatever the ablation flags, so the
    /// initial values of shared parameters do not depend on the flags.
    pub fn new(cfg: &TrainConfig, vocab_size: usize, raw_dim: usize) -> Result<(Self, ParameterStore)> {
        cfg.validate()?;
        if vocab_size < 1 || raw_dim < 1 {
            return Err(Error::Config(format!(
                "vocabulary size {vocab_size} and feature width {raw_dim} must be positive"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParameterStore::new();
        let d = cfg.dim;
        let model = Self {
            cfg: cfg.clone(),
            vocab_size,
            raw_dim,
            query: QueryEncoder::register(&mut store, &mut rng, d, vocab_size, cfg.max_words)?,
            video: VideoEncoder::register(&mut store, &mut rng, d, raw_dim, cfg.segments)?,
            qan: QueryAttention::register(&mut store, &mut rng, d)?,
            fusion: Fusion::register(&mut store, &mut rng, d)?,
            lcn: LocalContext::register(&mut store, &mut rng, d, cfg.kernel_width)?,
            gcn: GlobalContext::register(&mut store, &mut rng, d, cfg.nl_blocks, cfg.nl_heads)?,
            head: RegressionHead::register(&mut store, &mut rng, d)?,
        };
        Ok((model, store))
    }

    /// Rebuilds the model around stored weights. Every parameter must be
    /// present with the expected shape.
    pub fn from_store(
        cfg: &TrainConfig,
        vocab_size: usize,
        raw_dim: usize,
        loaded: &ParameterStore,
    ) -> Result<(Self, ParameterStore)> {
        let (model, mut store) = Self::new(cfg, vocab_size, raw_dim)?;
        if loaded.len() != store.len() {
            return Err(Error::Compatibility {
                field: "parameter count".into(),
                checkpoint: loaded.len().to_string(),
                config: store.len().to_string(),
            });
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let src = loaded.id(&name).ok_or_else(|| Error::Compatibility {
                field: name.clone(),
                checkpoint: "missing".into(),
                config: format!("{:?}", store.value(id).shape()),
            })?;
            let value = loaded.value(src);
            if value.shape() != store.value(id).shape() {
                return Err(Error::Compatibility {
                    field: name,
                    checkpoint: format!("{:?}", value.shape()),
                    config: format!("{:?}", store.value(id).shape()),
                });
            }
            *store.value_mut(id) = value.clone();
            store.copy_state(id, loaded.state(src));
        }
        Ok((model, store))
    }

    pub fn loss_flags(&self) -> LossFlags {
        LossFlags {
            use_l_cw: self.cfg.flags.use_l_cw,
            use_l_tem: self.cfg.flags.use_l_tem,
        }
    }

    pub fn prepare(
        &self,
        sample: &GroundingSample,
        video: &RawVideo,
        vocab: &Vocabulary,
    ) -> Result<Prepared> {
        if video.feature_dim() != self.raw_dim {
            return Err(Error::shape(
                "prepare",
                &[video.feature_dim()],
                &[self.raw_dim],
            ));
        }
        let full = tokenize(&sample.query, vocab)?;
        let kept: Vec<usize> = full.indices().iter().take(self.cfg.max_words).copied().collect();
        let tokens = QueryTokens::new(kept)?;
        if let Some(&bad) = tokens.indices().iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Input(format!(
                "token index {bad} outside the {}-entry vocabulary",
                self.vocab_size
            )));
        }
        let seg = segment_video(video, self.cfg.seg_len, self.cfg.segments)?;
        let (g_s, g_e) = sample.boundary();
        let gt = GroundTruth::new(g_s, g_e, &seg.midpoints(), self.cfg.segments)?;
        Ok(Prepared {
            tokens,
            video: seg,
            gt,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: &Prepared) -> Result<ForwardVars> {
        let flags = self.cfg.flags;
        let qf = self.query.forward(tape, store, &x.tokens, flags.pos_embed_word)?;
        let vf = self.video.forward(tape, store, &x.video, flags.pos_embed_video)?;
        let (fused, a) = if flags.use_qan {
            let phrase = self.qan.forward(tape, store, &qf)?;
            (self.fusion.forward(tape, store, &vf, phrase.p)?, Some(phrase.a))
        } else {
            (self.fusion.sentence_bypass(tape, store, &vf, qf.s)?, None)
        };
        let mask = &fused.mask;
        let mut l = fused.l;
        if flags.use_lcn {
            let local = self.lcn.forward(tape, store, l)?;
            l = tape.mask_cols(local, mask)?;
        }
        let (g, context_attention) = if flags.use_gcn {
            let out = self.gcn.forward(tape, store, l, mask)?;
            (out.g, out.attention)
        } else {
            (l, Vec::new())
        };
        let pooled = self.head.pool(tape, store, g, mask)?;
        let (t_se, t_cw) = self.head.predict(tape, store, pooled.r)?;
        Ok(ForwardVars {
            t_se,
            t_cw,
            b: pooled.b,
            a,
            context_attention,
        })
    }

    /// Forward plus the loss graph.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: &Prepared,
    ) -> Result<(ForwardVars, LossVars)> {
        let out = self.forward(tape, store, x)?;
        let loss = LossVars::build(tape, out.t_se, out.t_cw, out.b, &x.gt, self.loss_flags())?;
        Ok((out, loss))
    }

    /// Loss values and parameter gradients of one sample, with the gradient
    /// scaled by `scale`.
    pub fn sample_gradients(
        &self,
        store: &ParameterStore,
        x: &Prepared,
        scale: f64,
    ) -> Result<(LossBreakdown, ParamGrads)> {
        let mut tape = Tape::new();
        let (_, loss) = self.loss(&mut tape, store, x)?;
        let breakdown = loss.breakdown(&tape);
        if !breakdown.is_finite() {
            return Ok((breakdown, ParamGrads::default()));
        }
        let grads = tape.backward_scaled(loss.total, scale)?;
        Ok((breakdown, grads.into_param_grads()))
    }

    pub fn predict(&self, store: &ParameterStore, x: &Prepared) -> Result<GroundingPrediction> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, x)?;
        let se = tape.value(out.t_se).data();
        let cw = tape.value(out.t_cw).data();
        Ok(GroundingPrediction {
            tau_s: se[0],
            tau_e: se[1],
            tau_c: cw[0],
            tau_w: cw[1],
            b: tape.value(out.b).data().to_vec(),
            a: out.a.map(|a| tape.value(a).data().to_vec()),
        })
    }

    /// Checkpoint metadata: architecture fields plus the input sizes.
    pub fn metadata(&self) -> Vec<(String, f64)> {
        let mut meta = self.cfg.architecture();
        meta.push(("vocab_size".into(), self.vocab_size as f64));
        meta.push(("raw_dim".into(), self.raw_dim as f64));
        meta
    }
}

/// Reads `vocab_size` and `raw_dim` back from checkpoint metadata.
pub fn input_sizes(meta: &[(String, f64)]) -> Result<(usize, usize)> {
    let get = |k: &str| {
        meta.iter()
            .find(|(m, _)| m == k)
            .map(|&(_, v)| v as usize)
            .ok_or_else(|| Error::Data(format!("checkpoint metadata lacks `{k}`")))
    };
    Ok((get("vocab_size")?, get("raw_dim")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SyntheticConfig;
    use crate::data::generate;

    fn setup(cfg: &TrainConfig) -> (Plrn, ParameterStore, Vec<Prepared>) {
        let syn = SyntheticConfig {
            samples: 4,
            raw_dim: 6,
            min_frames: 10,
            max_frames: 14,
            ..Default::default()
        };
        let (ds, _) = generate(&syn).unwrap();
        let (model, store) = Plrn::new(cfg, ds.vocab.len(), 6).unwrap();
        let prepared = ds
            .samples
            .iter()
            .map(|s| model.prepare(s, ds.video(s).unwrap(), &ds.vocab).unwrap())
            .collect();
        (model, store, prepared)
    }

    #[test]
    fn tiny_forward_is_finite_with_expected_shapes() {
        let cfg = TrainConfig::tiny();
        let (model, store, xs) = setup(&cfg);
        let mut tape = Tape::new();
        let (out, loss) = model.loss(&mut tape, &store, &xs[0]).unwrap();
        assert_eq!(tape.shape(out.t_se), &[2, 1]);
        assert_eq!(tape.shape(out.t_cw), &[2, 1]);
        assert_eq!(tape.shape(out.b), &[1, cfg.segments]);
        assert_eq!(tape.shape(out.a.unwrap())[0], 1);
        assert_eq!(out.context_attention.len(), 1);
        assert_eq!(out.context_attention[0].len(), cfg.nl_heads);
        assert!(loss.breakdown(&tape).is_finite());
    }

    #[test]
    fn disabling_center_width_loss_zeroes_its_head_gradient() {
        let mut cfg = TrainConfig::tiny();
        cfg.flags.use_l_cw = false;
        let (model, store, xs) = setup(&cfg);
        let (_, grads) = model.sample_gradients(&store, &xs[0], 1.0).unwrap();
        for (id, g) in &grads.0 {
            if store.name(*id).starts_with("lrn.cw.") {
                assert!(g.iter().all(|&v| v == 0.0));
            }
        }
        let exclusive = [model.head.center_width.w_hidden, model.head.center_width.w_reg];
        for id in exclusive {
            let g = grads.0.iter().find(|(i, _)| *i == id);
            assert!(g.is_none_or(|(_, g)| g.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn baseline_flags_skip_optional_modules() {
        let mut cfg = TrainConfig::tiny();
        cfg.flags = crate::config::AblationFlags::baseline();
        let (model, store, xs) = setup(&cfg);
        let (_, grads) = model.sample_gradients(&store, &xs[0], 1.0).unwrap();
        let touched: Vec<&str> = grads.0.iter().map(|(id, _)| store.name(*id)).collect();
        assert!(touched.iter().all(|n| !n.starts_with("qan.")
            && !n.starts_with("lcn.")
            && !n.starts_with("gcn.")
            && !n.starts_with("lrn.cw.")));
        assert!(touched.contains(&"lrn.se.w_reg"));
    }

    #[test]
    fn store_round_trip_rebuilds_identical_model() {
        let cfg = TrainConfig::tiny();
        let (model, store, xs) = setup(&cfg);
        let (again, store2) = Plrn::from_store(&cfg, model.vocab_size, 6, &store).unwrap();
        assert_eq!(
            model.predict(&store, &xs[1]).unwrap(),
            again.predict(&store2, &xs[1]).unwrap()
        );
        let other = TrainConfig { dim: 16, ..cfg };
        assert!(matches!(
            Plrn::from_store(&other, model.vocab_size, 6, &store),
            Err(Error::Compatibility { .. })
        ));
    }
}
