//! Mini-batch training, validation-based model selection, prediction and
//! the gradient-check entry point.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::gradcheck::{self, GradCheckReport, Selection};
use crate::checkpoint;
use crate::config::{SyntheticConfig, TrainConfig};
use crate::data::{generate, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{tiou, EvalReport, DEFAULT_THRESHOLDS};
use crate::head::{GroundingPrediction, PredictionRow};
use crate::loss::LossBreakdown;
use crate::model::{input_sizes, Plrn, Prepared};
use crate::params::{Adam, ParameterStore};
use crate::text::Vocabulary;

pub const CHECKPOINT_FILE: &str = "checkpoint.plrn";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const VAL_LOG_FILE: &str = "val_log.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const NAN_DUMP_FILE: &str = "nan_dump.txt";
pub const WORD_ATTENTION_FILE: &str = "word_attention.csv";
pub const TEMPORAL_ATTENTION_FILE: &str = "temporal_attention.csv";

/// Batch-mean losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Plrn,
    /// Weights with the best validation mIoU (the last ones when there is
    /// no validation split).
    pub best: ParameterStore,
    pub best_epoch: usize,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn best_val_miou(&self) -> Option<f64> {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .and_then(|e| e.val.as_ref().map(|r| r.miou))
    }
}

pub fn prepare_split(model: &Plrn, data: &Dataset, vocab: &Vocabulary, split: Split) -> Result<Vec<Prepared>> {
    prepare_indices(model, data, vocab, &data.indices(split))
}

pub fn prepare_indices(
    model: &Plrn,
    data: &Dataset,
    vocab: &Vocabulary,
    indices: &[usize],
) -> Result<Vec<Prepared>> {
    indices
        .par_iter()
        .map(|&i| {
            let s = &data.samples[i];
            model.prepare(s, data.video(s)?, vocab)
        })
        .collect()
}

/// Evaluates predictions against the prepared boundaries.
pub fn evaluate(model: &Plrn, store: &ParameterStore, xs: &[Prepared], thresholds: &[f64]) -> Result<EvalReport> {
    let tious: Vec<f64> = xs
        .par_iter()
        .map(|x| {
            let p = model.predict(store, x)?;
            tiou(x.boundary(), p.normalized())
        })
        .collect::<Result<_>>()?;
    EvalReport::from_tious(tious, thresholds)
}

/// One optimizer step on `batch`: per-sample backward passes scaled by
/// `1 / batch`, summed in batch order, then Adam.
pub fn train_step(
    model: &Plrn,
    store: &mut ParameterStore,
    adam: &Adam,
    batch: &[&Prepared],
    step: usize,
) -> Result<LossBreakdown> {
    let scale = 1.0 / batch.len() as f64;
    let results: Vec<_> = batch
        .par_iter()
        .map(|x| model.sample_gradients(store, x, scale))
        .collect::<Result<_>>()?;
    let mut mean = LossBreakdown::default();
    let mut bad = Vec::new();
    for (i, (loss, _)) in results.iter().enumerate() {
        if !loss.is_finite() {
            bad.push(i);
        }
        mean = mean.plus(loss.scaled(scale));
    }
    if !bad.is_empty() {
        let mut detail = String::new();
        for (i, (loss, _)) in results.iter().enumerate() {
            write!(
                detail,
                "\n  batch[{i}] tokens={:?} boundary={:?} L_se={} L_cw={} L_tem={} L_total={}",
                batch[i].tokens.indices(),
                batch[i].boundary(),
                loss.se,
                loss.cw,
                loss.tem,
                loss.total
            )
            .unwrap();
        }
        return Err(Error::NonFinite { step, detail });
    }
    store.zero_grad();
    for (_, grads) in &results {
        grads.accumulate_into(store, 1.0);
    }
    store.adam_step(adam)?;
    Ok(mean)
}

/// Trains on the prepared samples. `on_epoch` sees every epoch summary as
/// it completes.
pub fn train_prepared(
    model: Plrn,
    mut store: ParameterStore,
    train: &[Prepared],
    val: &[Prepared],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Data("the training split is empty".into()));
    }
    let cfg = model.cfg.clone();
    let adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best = store.clone();
    let mut best_epoch = 0;
    let mut best_miou = f64::NEG_INFINITY;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let step = steps.len() + 1;
            let loss = train_step(&model, &mut store, &adam, &batch, step)?;
            steps.push(StepLog { step, loss });
            total = total.plus(loss);
            batches += 1;
        }
        let val_report = if val.is_empty() {
            None
        } else {
            Some(evaluate(&model, &store, val, &DEFAULT_THRESHOLDS)?)
        };
        let log = EpochLog {
            epoch,
            train: total.scaled(1.0 / batches as f64),
            val: val_report,
        };
        on_epoch(&log);
        let score = log.val.as_ref().map_or(f64::INFINITY, |r| r.miou);
        if log.val.is_none() || score > best_miou {
            best_miou = score;
            best_epoch = epoch;
            best = store.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        epochs.push(log);
        if cfg.patience > 0 && stale >= cfg.patience {
            break;
        }
    }
    if cfg.epochs == 0 {
        best = store;
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        steps,
        epochs,
    })
}

/// Initializes from `cfg.seed` and trains on the dataset's train split,
/// selecting on its validation split.
pub fn train(cfg: &TrainConfig, data: &Dataset, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let (model, store) = Plrn::new(cfg, data.vocab.len(), data.raw_dim()?)?;
    let train = prepare_split(&model, data, &data.vocab, Split::Train)?;
    let val = match &data.partition {
        Some(p) => prepare_indices(&model, data, &data.vocab, &p.val)?,
        None => Vec::new(),
    };
    train_prepared(model, store, &train, &val, on_epoch)
}

pub fn format_train_log(steps: &[StepLog]) -> String {
    let mut s = String::from("step,L_se,L_cw,L_tem,L_total\n");
    for l in steps {
        writeln!(
            s,
            "{},{},{},{},{}",
            l.step, l.loss.se, l.loss.cw, l.loss.tem, l.loss.total
        )
        .unwrap();
    }
    s
}

pub fn format_val_log(epochs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,L_train,R@0.3,R@0.5,R@0.7,mIoU\n");
    for e in epochs {
        match &e.val {
            Some(r) => writeln!(
                s,
                "{},{},{},{},{},{}",
                e.epoch,
                e.train.total,
                r.recalls[0].1,
                r.recalls[1].1,
                r.recalls[2].1,
                r.miou
            ),
            None => writeln!(s, "{},{},,,,", e.epoch, e.train.total),
        }
        .unwrap();
    }
    s
}

/// Trains and writes the checkpoint, logs, config and vocabulary to `out`.
/// A non-finite loss leaves a dump of the offending batch in `out`.
pub fn train_to_dir(
    cfg: &TrainConfig,
    data: &Dataset,
    out: &Path,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let outcome = match train(cfg, data, on_epoch) {
        Ok(o) => o,
        Err(e @ Error::NonFinite { .. }) => {
            let dump = out.join(NAN_DUMP_FILE);
            std::fs::write(&dump, format!("{e}\n")).map_err(|io| Error::io(&dump, io))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    checkpoint::save(&out.join(CHECKPOINT_FILE), &outcome.best, &outcome.model.metadata())?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(TRAIN_LOG_FILE, format_train_log(&outcome.steps))?;
    write(VAL_LOG_FILE, format_val_log(&outcome.epochs))?;
    cfg.save(&out.join(CONFIG_FILE))?;
    data.vocab.save(&out.join(crate::data::VOCAB_FILE))?;
    Ok(outcome)
}

/// A trained model ready for inference.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: Plrn,
    pub store: ParameterStore,
    pub vocab: Option<Vocabulary>,
}

/// Loads a checkpoint. With `cfg`, every architecture field must match the
/// checkpoint; otherwise the architecture is read from the checkpoint.
/// A `vocab.txt` next to the checkpoint is picked up when present.
pub fn load_model(path: &Path, cfg: Option<&TrainConfig>) -> Result<LoadedModel> {
    let ckpt = checkpoint::load(path)?;
    let cfg = match cfg {
        Some(c) => {
            c.check_compatible(&ckpt.metadata)?;
            c.clone()
        }
        None => TrainConfig::from_architecture(&ckpt.metadata)?,
    };
    let (vocab_size, raw_dim) = input_sizes(&ckpt.metadata)?;
    let (model, store) = Plrn::from_store(&cfg, vocab_size, raw_dim, &ckpt.store)?;
    let vocab_path = path
        .parent()
        .map(|p| p.join(crate::data::VOCAB_FILE))
        .filter(|p| p.exists());
    let vocab = match vocab_path {
        Some(p) => Some(Vocabulary::load(&p)?),
        None => None,
    };
    if let Some(v) = &vocab {
        if v.len() != vocab_size {
            return Err(Error::Compatibility {
                field: "vocab_size".into(),
                checkpoint: vocab_size.to_string(),
                config: v.len().to_string(),
            });
        }
    }
    Ok(LoadedModel { model, store, vocab })
}

impl LoadedModel {
    /// Predictions for the given samples, in order.
    pub fn predict_indices(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<(usize, GroundingPrediction)>> {
        let vocab = self.vocab.as_ref().unwrap_or(&data.vocab);
        let xs = prepare_indices(&self.model, data, vocab, indices)?;
        let preds: Vec<GroundingPrediction> = xs
            .par_iter()
            .map(|x| self.model.predict(&self.store, x))
            .collect::<Result<_>>()?;
        Ok(indices.iter().copied().zip(preds).collect())
    }
}

/// Writes word attention (when query attention is on) and temporal
/// attention of each prediction into `dir`. Returns the written paths.
pub fn write_attention(
    dir: &Path,
    data: &Dataset,
    max_words: usize,
    preds: &[(usize, GroundingPrediction)],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let word_rows: Vec<(String, Vec<String>, Vec<f64>)> = preds
        .iter()
        .filter_map(|(i, p)| {
            let s = &data.samples[*i];
            let tokens: Vec<String> = crate::text::words(&s.query).into_iter().take(max_words).collect();
            p.a.clone().map(|a| (s.sample_id.to_string(), tokens, a))
        })
        .collect();
    if !word_rows.is_empty() {
        let path = dir.join(WORD_ATTENTION_FILE);
        crate::attention::write_word_attention_csv(&path, &word_rows)?;
        written.push(path);
    }
    let mut temporal = String::from("sample_id,segment,weight\n");
    for (i, p) in preds {
        for (t, w) in p.b.iter().enumerate() {
            writeln!(temporal, "{},{t},{w}", data.samples[*i].sample_id).unwrap();
        }
    }
    let path = dir.join(TEMPORAL_ATTENTION_FILE);
    std::fs::write(&path, temporal).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

pub fn prediction_rows(data: &Dataset, preds: &[(usize, GroundingPrediction)]) -> Vec<PredictionRow> {
    preds
        .iter()
        .map(|(i, p)| PredictionRow {
            sample_id: data.samples[*i].sample_id.to_string(),
            tau_s: p.tau_s,
            tau_e: p.tau_e,
            tau_c: p.tau_c,
            tau_w: p.tau_w,
        })
        .collect()
}

/// Scores prediction rows against the dataset's boundaries. Every row must
/// name an existing sample.
pub fn evaluate_rows(data: &Dataset, rows: &[PredictionRow], thresholds: &[f64]) -> Result<EvalReport> {
    let pairs = rows
        .iter()
        .map(|r| {
            let id: usize = r
                .sample_id
                .parse()
                .map_err(|_| Error::Data(format!("prediction sample id `{}` is not a number", r.sample_id)))?;
            let s = data
                .samples
                .get(id)
                .ok_or_else(|| Error::Data(format!("prediction for unknown sample {id}")))?;
            Ok((s.boundary(), crate::head::clamp_interval(r.tau_s, r.tau_e)))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_pairs(pairs, thresholds)
}

/// Finite-difference check of every parameter gradient of the total loss
/// on a small synthetic sample shaped by `cfg`, with central step `step`.
pub fn grad_check(
    cfg: &TrainConfig,
    max_per_param: Option<usize>,
    seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    // One real segment fewer than slots, so padding is exercised too.
    let frames = cfg.seg_len + cfg.seg_len / 2 * cfg.segments.saturating_sub(2);
    let syn = SyntheticConfig {
        samples: 1,
        raw_dim: 6,
        min_frames: frames,
        max_frames: frames,
        min_width: 0.3,
        max_width: 0.6,
        train_fraction: 1.0,
        val_fraction: 0.0,
        test_fraction: 0.0,
        seed,
        ..Default::default()
    };
    let (data, _) = generate(&syn)?;
    let (model, store) = Plrn::new(cfg, data.vocab.len(), syn.raw_dim)?;
    let x = model.prepare(&data.samples[0], data.video(&data.samples[0])?, &data.vocab)?;
    gradcheck::check_params(
        &store,
        Selection {
            max_per_param,
            seed,
        },
        step,
        |tape, s| Ok(model.loss(tape, s, &x)?.1.total),
    )
}
