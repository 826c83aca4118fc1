//! Query attention (one semantic phrase per query) and Hadamard fusion of
//! the phrase with every video segment.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParameterStore};
use crate::text::QueryFeatures;
use crate::video::VideoFeatures;

/// Phrase feature `p` (`d x 1`) and word attention `a` (`1 x N`).
#[derive(Debug, Clone, Copy)]
pub struct PhraseResult {
    pub p: Var,
    pub a: Var,
}

/// Fused matrix `L_in` (`d x T`); masked columns are zero.
#[derive(Debug, Clone)]
pub struct FusedFeatures {
    pub l: Var,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct QueryAttention {
    pub w_gs: ParamId,
    pub w_ag: ParamId,
    pub w_ah: ParamId,
    pub w_qat: ParamId,
}

impl QueryAttention {
    pub fn register<R: Rng>(store: &mut ParameterStore, rng: &mut R, dim: usize) -> Result<Self> {
        Ok(Self {
            w_gs: store.add("qan.w_gs", init::xavier_matrix(rng, dim, dim))?,
            w_ag: store.add("qan.w_ag", init::xavier_matrix(rng, dim, dim))?,
            w_ah: store.add("qan.w_ah", init::xavier_matrix(rng, dim, dim))?,
            w_qat: store.add("qan.w_qat", init::xavier_matrix(rng, dim, 1))?,
        })
    }

    /// `g = ReLU(W_gs s)`, `alpha_n = w_qat' tanh(W_ag g + W_ah h_n)`,
    /// `a = softmax(alpha)`, `p = H a`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        qf: &QueryFeatures,
    ) -> Result<PhraseResult> {
        let w_gs = tape.param(store, self.w_gs);
        let w_ag = tape.param(store, self.w_ag);
        let w_ah = tape.param(store, self.w_ah);
        let w_qat = tape.param(store, self.w_qat);

        let gs = tape.matmul(w_gs, qf.s)?;
        let g = tape.relu(gs);
        let guide = tape.matmul(w_ag, g)?;
        let words = tape.matmul(w_ah, qf.h)?;
        let pre = tape.add_col(words, guide)?;
        let act = tape.tanh(pre);
        let w_row = tape.transpose(w_qat)?;
        let scores = tape.matmul(w_row, act)?;
        let a = tape.softmax(scores, 1)?;
        let a_col = tape.transpose(a)?;
        let p = tape.matmul(qf.h, a_col)?;
        Ok(PhraseResult { p, a })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Fusion {
    pub w_lv: ParamId,
    pub w_lp: ParamId,
    pub w_mf: ParamId,
}

impl Fusion {
    pub fn register<R: Rng>(store: &mut ParameterStore, rng: &mut R, dim: usize) -> Result<Self> {
        Ok(Self {
            w_lv: store.add("mfn.w_lv", init::xavier_matrix(rng, dim, dim))?,
            w_lp: store.add("mfn.w_lp", init::xavier_matrix(rng, dim, dim))?,
            w_mf: store.add("mfn.w_mf", init::xavier_matrix(rng, dim, dim))?,
        })
    }

    /// `l_t = W_mf (W_lv v_t ⊙ W_lp query)` for every segment, with padded
    /// columns forced to zero.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        vf: &VideoFeatures,
        query: Var,
    ) -> Result<FusedFeatures> {
        let w_lv = tape.param(store, self.w_lv);
        let w_lp = tape.param(store, self.w_lp);
        let w_mf = tape.param(store, self.w_mf);
        let lv = tape.matmul(w_lv, vf.v)?;
        let lp = tape.matmul(w_lp, query)?;
        let joint = tape.mul_col(lv, lp)?;
        let l = tape.matmul(w_mf, joint)?;
        let l = tape.mask_cols(l, &vf.mask)?;
        Ok(FusedFeatures {
            l,
            mask: vf.mask.clone(),
        })
    }

    /// Ablation path: fuses the sentence feature instead of the phrase.
    pub fn sentence_bypass(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        vf: &VideoFeatures,
        s: Var,
    ) -> Result<FusedFeatures> {
        self.forward(tape, store, vf, s)
    }
}

/// Writes `sample_id,position,token,weight` rows of word attention.
pub fn write_word_attention_csv(
    path: &Path,
    rows: &[(String, Vec<String>, Vec<f64>)],
) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "sample_id,position,token,weight").unwrap();
    for (id, tokens, weights) in rows {
        if tokens.len() != weights.len() {
            return Err(Error::Contract(format!(
                "sample {id}: {} tokens but {} weights",
                tokens.len(),
                weights.len()
            )));
        }
        for (n, (tok, w)) in tokens.iter().zip(weights).enumerate() {
            writeln!(out, "{id},{n},{tok},{w}").unwrap();
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize) -> (ParameterStore, QueryAttention, Fusion) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let qan = QueryAttention::register(&mut store, &mut rng, dim).unwrap();
        let mfn = Fusion::register(&mut store, &mut rng, dim).unwrap();
        (store, qan, mfn)
    }

    fn query(tape: &mut Tape, h: Tensor, s: Tensor) -> QueryFeatures {
        QueryFeatures {
            h: tape.constant(h),
            s: tape.constant(s),
        }
    }

    #[test]
    fn singleton_query_attends_fully() {
        let (store, qan, _) = setup(3);
        let mut tape = Tape::new();
        let h = Tensor::column(vec![0.3, -0.2, 0.9]).unwrap();
        let qf = query(&mut tape, h.clone(), h.clone());
        let r = qan.forward(&mut tape, &store, &qf).unwrap();
        assert_eq!(tape.value(r.a).data(), &[1.0]);
        assert_eq!(tape.value(r.p).data(), h.data());
    }

    #[test]
    fn identical_words_get_uniform_attention() {
        let (store, qan, _) = setup(2);
        let mut tape = Tape::new();
        let h = Tensor::matrix(2, 4, vec![0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0]).unwrap();
        let qf = query(&mut tape, h, Tensor::column(vec![0.1, 0.2]).unwrap());
        let r = qan.forward(&mut tape, &store, &qf).unwrap();
        for &w in tape.value(r.a).data() {
            approx::assert_abs_diff_eq!(w, 0.25, epsilon = 1e-15);
        }
        approx::assert_abs_diff_eq!(tape.value(r.p).data()[0], 0.5, epsilon = 1e-15);
        approx::assert_abs_diff_eq!(tape.value(r.p).data()[1], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_scoring_vector_averages_words() {
        let (mut store, qan, _) = setup(2);
        store.value_mut(qan.w_qat).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let h = Tensor::matrix(2, 3, vec![1.0, 2.0, 6.0, 0.0, -3.0, 0.0]).unwrap();
        let qf = query(&mut tape, h, Tensor::column(vec![1.0, 1.0]).unwrap());
        let r = qan.forward(&mut tape, &store, &qf).unwrap();
        let p = tape.value(r.p).data();
        approx::assert_abs_diff_eq!(p[0], 3.0, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(p[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn hadamard_with_identities() {
        let (mut store, _, mfn) = setup(2);
        for id in [mfn.w_lv, mfn.w_lp, mfn.w_mf] {
            *store.value_mut(id) = Tensor::identity(2);
        }
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 2.0, 0.0]).unwrap());
        let vf = VideoFeatures {
            v,
            mask: vec![true, false],
        };
        let p = tape.constant(Tensor::column(vec![3.0, 4.0]).unwrap());
        let ff = mfn.forward(&mut tape, &store, &vf, p).unwrap();
        assert_eq!(tape.value(ff.l).col(0), vec![3.0, 8.0]);
        assert_eq!(tape.value(ff.l).col(1), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_query_annihilates() {
        let (store, _, mfn) = setup(3);
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::filled(&[3, 4], 0.7));
        let vf = VideoFeatures {
            v,
            mask: vec![true; 4],
        };
        let zero = tape.constant(Tensor::zeros(&[3, 1]));
        let ff = mfn.sentence_bypass(&mut tape, &store, &vf, zero).unwrap();
        assert!(tape.value(ff.l).data().iter().all(|&x| x == 0.0));
    }
}
