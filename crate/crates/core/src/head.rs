//! Temporal attentive pooling and the two boundary regressors.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParameterStore};

/// Two-layer perceptron `ReLU(W_reg ReLU(W_hidden r))` with two outputs.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryMlp {
    pub w_hidden: ParamId,
    pub w_reg: ParamId,
}

impl BoundaryMlp {
    fn register<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        prefix: &str,
        dim: usize,
    ) -> Result<Self> {
        let w_hidden = store.add(format!("{prefix}.w_hidden"), init::xavier_matrix(rng, dim, dim))?;
        // Nonnegative output weights: the hidden layer is nonnegative, so the
        // final ReLU starts in its active region.
        let bound = (6.0 / (dim + 2) as f64).sqrt();
        let w_reg = store.add(format!("{prefix}.w_reg"), init::uniform(rng, &[2, dim], 0.0, bound))?;
        Ok(Self { w_hidden, w_reg })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, r: Var) -> Result<Var> {
        let wh = tape.param(store, self.w_hidden);
        let wr = tape.param(store, self.w_reg);
        let hidden = tape.matmul(wh, r)?;
        let hidden = tape.relu(hidden);
        let out = tape.matmul(wr, hidden)?;
        Ok(tape.relu(out))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RegressionHead {
    pub w_bg: ParamId,
    pub w_tat: ParamId,
    pub start_end: BoundaryMlp,
    pub center_width: BoundaryMlp,
}

/// Pooling weights `b` (`1 x T`) and semantics-aware feature `r` (`d x 1`).
#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    pub b: Var,
    pub r: Var,
}

impl RegressionHead {
    pub fn register<R: Rng>(store: &mut ParameterStore, rng: &mut R, dim: usize) -> Result<Self> {
        Ok(Self {
            w_bg: store.add("lrn.w_bg", init::xavier_matrix(rng, dim, dim))?,
            w_tat: store.add("lrn.w_tat", init::xavier_matrix(rng, dim, 1))?,
            start_end: BoundaryMlp::register(store, rng, "lrn.se", dim)?,
            center_width: BoundaryMlp::register(store, rng, "lrn.cw", dim)?,
        })
    }

    /// `b = softmax(w_tat' tanh(W_bG G))` over real segments, `r = G b`.
    pub fn pool(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        g: Var,
        mask: &[bool],
    ) -> Result<Pooled> {
        let w_bg = tape.param(store, self.w_bg);
        let w_tat = tape.param(store, self.w_tat);
        let z = tape.matmul(w_bg, g)?;
        let z = tape.tanh(z);
        let w_row = tape.transpose(w_tat)?;
        let scores = tape.matmul(w_row, z)?;
        let b = tape.masked_softmax(scores, 1, Some(mask))?;
        let b_col = tape.transpose(b)?;
        let r = tape.matmul(g, b_col)?;
        Ok(Pooled { b, r })
    }

    /// Returns `(t_se, t_cw)`, each `2 x 1`.
    pub fn predict(&self, tape: &mut Tape, store: &ParameterStore, r: Var) -> Result<(Var, Var)> {
        let se = self.start_end.forward(tape, store, r)?;
        let cw = self.center_width.forward(tape, store, r)?;
        Ok((se, cw))
    }
}

/// Plain-value view of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingPrediction {
    pub tau_s: f64,
    pub tau_e: f64,
    pub tau_c: f64,
    pub tau_w: f64,
    /// Temporal attention over all `T` segments.
    pub b: Vec<f64>,
    /// Word attention, when the query attention network ran.
    pub a: Option<Vec<f64>>,
}

impl GroundingPrediction {
    /// Start-end boundary clamped into `[0, 1]` with end not before start.
    pub fn normalized(&self) -> (f64, f64) {
        clamp_interval(self.tau_s, self.tau_e)
    }

    pub fn to_interval(&self, duration: f64) -> (f64, f64) {
        to_interval(self.tau_s, self.tau_e, duration)
    }
}

pub fn clamp_interval(tau_s: f64, tau_e: f64) -> (f64, f64) {
    let s = tau_s.clamp(0.0, 1.0);
    let e = tau_e.clamp(s, 1.0);
    (s, e)
}

/// Seconds from a normalized start-end prediction.
pub fn to_interval(tau_s: f64, tau_e: f64, duration: f64) -> (f64, f64) {
    let (s, e) = clamp_interval(tau_s, tau_e);
    (s * duration, e * duration)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub sample_id: String,
    pub tau_s: f64,
    pub tau_e: f64,
    pub tau_c: f64,
    pub tau_w: f64,
}

pub const PREDICTION_HEADER: &str = "sample_id,tau_s,tau_e,tau_c,tau_w";

pub fn format_predictions(rows: &[PredictionRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{PREDICTION_HEADER}").unwrap();
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.sample_id, r.tau_s, r.tau_e, r.tau_c, r.tau_w
        )
        .unwrap();
    }
    s
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<PredictionRow>> {
    let mut rows = Vec::new();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == PREDICTION_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("expected header `{PREDICTION_HEADER}`"),
            })
        }
    }
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| err(format!("`{s}` is not a number")))
        };
        rows.push(PredictionRow {
            sample_id: fields[0].to_string(),
            tau_s: num(fields[1])?,
            tau_e: num(fields[2])?,
            tau_c: num(fields[3])?,
            tau_w: num(fields[4])?,
        });
    }
    Ok(rows)
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    std::fs::write(path, format_predictions(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize) -> (ParameterStore, RegressionHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParameterStore::new();
        let head = RegressionHead::register(&mut store, &mut rng, dim).unwrap();
        (store, head)
    }

    #[test]
    fn identical_columns_pool_uniformly() {
        let (store, head) = setup(3);
        let mut tape = Tape::new();
        let col = [0.2, -0.4, 1.0];
        let data: Vec<f64> = col.iter().flat_map(|&v| [v; 4]).collect();
        let g = tape.constant(Tensor::matrix(3, 4, data).unwrap());
        let pooled = head.pool(&mut tape, &store, g, &[true; 4]).unwrap();
        for &w in tape.value(pooled.b).data() {
            approx::assert_abs_diff_eq!(w, 0.25, epsilon = 1e-15);
        }
        for (r, c) in tape.value(pooled.r).data().iter().zip(col) {
            approx::assert_abs_diff_eq!(*r, c, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_real_segment_is_one_hot() {
        let (store, head) = setup(2);
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::matrix(2, 3, vec![1.0, 5.0, 6.0, 2.0, 7.0, 8.0]).unwrap());
        let pooled = head.pool(&mut tape, &store, g, &[true, false, false]).unwrap();
        assert_eq!(tape.value(pooled.b).data(), &[1.0, 0.0, 0.0]);
        assert_eq!(tape.value(pooled.r).data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_scoring_vector_is_uniform_over_real() {
        let (mut store, head) = setup(2);
        store.value_mut(head.w_tat).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::matrix(2, 4, (0..8).map(f64::from).collect()).unwrap());
        let pooled = head.pool(&mut tape, &store, g, &[true, true, true, false]).unwrap();
        let b = tape.value(pooled.b).data();
        for &w in &b[..3] {
            approx::assert_abs_diff_eq!(w, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_eq!(b[3], 0.0);
    }

    #[test]
    fn all_masked_is_degenerate() {
        let (store, head) = setup(2);
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            head.pool(&mut tape, &store, g, &[false, false]),
            Err(Error::DegenerateMask)
        ));
    }

    #[test]
    fn zero_feature_predicts_zero() {
        let (store, head) = setup(4);
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::zeros(&[4, 1]));
        let (se, cw) = head.predict(&mut tape, &store, r).unwrap();
        assert_eq!(tape.value(se).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(cw).data(), &[0.0, 0.0]);
    }

    #[test]
    fn interval_conversion() {
        assert_eq!(to_interval(0.25, 0.5, 40.0), (10.0, 20.0));
        assert_eq!(to_interval(0.6, 0.4, 10.0), (6.0, 6.0));
        assert_eq!(to_interval(0.0, 1.0, 30.0), (0.0, 30.0));
        assert_eq!(to_interval(1.3, 2.0, 10.0), (10.0, 10.0));
    }

    #[test]
    fn prediction_csv_round_trip_and_header_only() {
        let rows = vec![PredictionRow {
            sample_id: "7".into(),
            tau_s: 0.125,
            tau_e: 0.5,
            tau_c: 0.3125,
            tau_w: 0.375,
        }];
        let p = Path::new("pred.csv");
        assert_eq!(parse_predictions(&format_predictions(&rows), p).unwrap(), rows);
        assert_eq!(format_predictions(&[]), format!("{PREDICTION_HEADER}\n"));
        assert!(parse_predictions("id,x\n", p).is_err());
    }
}
