//! Query encoder: tokenization, word embeddings with learned positions and a
//! bidirectional LSTM producing word features and a sentence feature.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParameterStore};
use crate::tensor::Tensor;

/// Queries longer than this are truncated, keeping the first words.
pub const MAX_WORDS: usize = 25;

pub const UNKNOWN: usize = 0;

/// Token to index map. Index 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            tokens: vec!["<unk>".to_string()],
            index: HashMap::new(),
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from tokens in first-seen order, skipping
    /// duplicates.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self::default();
        for t in tokens {
            vocab.insert(t.as_ref());
        }
        vocab
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    /// Total lookup: unknown tokens map to index 0.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNKNOWN)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Number of indices including the reserved unknown slot.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == 1
    }

    /// One token per line; the token on line `n` gets index `n`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[1..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Self {
        Self::from_tokens(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn words(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTokens {
    indices: Vec<usize>,
}

impl QueryTokens {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyQuery);
        }
        if indices.len() > MAX_WORDS {
            return Err(Error::Contract(format!(
                "query has {} tokens, at most {MAX_WORDS} allowed",
                indices.len()
            )));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn tokenize(sentence: &str, vocab: &Vocabulary) -> Result<QueryTokens> {
    let indices: Vec<usize> = words(sentence)
        .iter()
        .take(MAX_WORDS)
        .map(|w| vocab.lookup(w))
        .collect();
    QueryTokens::new(indices)
}

/// Word features `h` (`d x N`) and sentence feature `s` (`d x 1`).
#[derive(Debug, Clone, Copy)]
pub struct QueryFeatures {
    pub h: Var,
    pub s: Var,
}

/// One direction of an LSTM; gates are stacked as input, forget, cell,
/// output.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(
            format!("{prefix}.w_ih"),
            init::uniform(rng, &[4 * hidden, input], -bound, bound),
        )?;
        let w_hh = store.add(
            format!("{prefix}.w_hh"),
            init::uniform(rng, &[4 * hidden, hidden], -bound, bound),
        )?;
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(format!("{prefix}.bias"), Tensor::column(b)?)?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            hidden,
        })
    }

    /// Runs the recurrence over the columns of `x` in the given order and
    /// returns the hidden state for each column, indexed by column.
    pub fn run(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let n = tape.value(x).dims2()?.1;
        let hs = self.hidden;
        let w_ih = tape.param(store, self.w_ih);
        let w_hh = tape.param(store, self.w_hh);
        let bias = tape.param(store, self.bias);
        let projected = tape.matmul(w_ih, x)?;
        let projected = tape.add_col(projected, bias)?;

        let mut h = tape.constant(Tensor::zeros(&[hs, 1]));
        let mut c = tape.constant(Tensor::zeros(&[hs, 1]));
        let mut out = vec![h; n];
        let order: Vec<usize> = if reverse {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        for t in order {
            let xt = tape.select_col(projected, t)?;
            let rec = tape.matmul(w_hh, h)?;
            let z = tape.add(xt, rec)?;
            let zi = tape.slice_rows(z, 0, hs)?;
            let zf = tape.slice_rows(z, hs, hs)?;
            let zg = tape.slice_rows(z, 2 * hs, hs)?;
            let zo = tape.slice_rows(z, 3 * hs, hs)?;
            let i = tape.sigmoid(zi);
            let f = tape.sigmoid(zf);
            let g = tape.tanh(zg);
            let o = tape.sigmoid(zo);
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let squashed = tape.tanh(c);
            h = tape.mul(o, squashed)?;
            out[t] = h;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QueryEncoder {
    pub embedding: ParamId,
    pub position: ParamId,
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub dim: usize,
}

impl QueryEncoder {
    /// Registers embedding (`d x vocab`), position table (`d x max_words`)
    /// and both LSTM directions (`d / 2` hidden units each).
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        dim: usize,
        vocab_size: usize,
        max_words: usize,
    ) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("hidden size d={dim} must be even")));
        }
        if max_words == 0 || max_words > MAX_WORDS {
            return Err(Error::Config(format!(
                "max_words must be in 1..={MAX_WORDS}, got {max_words}"
            )));
        }
        let embedding = store.add(
            "query.embedding",
            init::uniform(rng, &[dim, vocab_size], -0.1, 0.1),
        )?;
        let position = store.add(
            "query.position",
            init::uniform(rng, &[dim, max_words], -0.1, 0.1),
        )?;
        let forward = LstmParams::register(store, rng, "query.lstm.fwd", dim, dim / 2)?;
        let backward = LstmParams::register(store, rng, "query.lstm.bwd", dim, dim / 2)?;
        Ok(Self {
            embedding,
            position,
            forward,
            backward,
            dim,
        })
    }

    /// `Q = Q_em + P_q`, or just `Q_em` with the position term disabled.
    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        tokens: &QueryTokens,
        use_position: bool,
    ) -> Result<Var> {
        let table = tape.param(store, self.embedding);
        let q_em = tape.gather_cols(table, tokens.indices())?;
        if !use_position {
            return Ok(q_em);
        }
        let pos_table = tape.param(store, self.position);
        let slots = tape.value(pos_table).dims2()?.1;
        if tokens.len() > slots {
            return Err(Error::Contract(format!(
                "{} tokens exceed the {slots}-slot position table",
                tokens.len()
            )));
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p_q = tape.gather_cols(pos_table, &positions)?;
        tape.add(q_em, p_q)
    }

    /// Bi-LSTM over the columns of `q`.
    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, q: Var) -> Result<QueryFeatures> {
        let fwd = self.forward.run(tape, store, q, false)?;
        let bwd = self.backward.run(tape, store, q, true)?;
        let n = fwd.len();
        let hf = tape.concat_cols(&fwd)?;
        let hb = tape.concat_cols(&bwd)?;
        let h = tape.concat_rows(&[hf, hb])?;
        let s = tape.concat_rows(&[fwd[n - 1], bwd[0]])?;
        Ok(QueryFeatures { h, s })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        tokens: &QueryTokens,
        use_position: bool,
    ) -> Result<QueryFeatures> {
        let q = self.embed(tape, store, tokens, use_position)?;
        self.encode(tape, store, q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize, vocab: usize) -> (ParameterStore, QueryEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParameterStore::new();
        let enc = QueryEncoder::register(&mut store, &mut rng, dim, vocab, MAX_WORDS).unwrap();
        (store, enc)
    }

    #[test]
    fn tokenize_lowercases_and_maps() {
        let vocab = Vocabulary::from_tokens(["a", "person", "throws"]);
        let t = tokenize("A Person Throws", &vocab).unwrap();
        assert_eq!(t.indices(), &[1, 2, 3]);
        let t = tokenize("a person, juggles!", &vocab).unwrap();
        assert_eq!(t.indices(), &[1, 2, UNKNOWN]);
    }

    #[test]
    fn tokenize_truncates_to_first_25() {
        let vocab = Vocabulary::from_tokens((0..30).map(|i| format!("w{i}")));
        let sentence: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
        let t = tokenize(&sentence.join(" "), &vocab).unwrap();
        assert_eq!(t.len(), 25);
        assert_eq!(t.indices(), (1..=25).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn empty_query_rejected() {
        let vocab = Vocabulary::default();
        assert!(matches!(tokenize("  ?! ", &vocab), Err(Error::EmptyQuery)));
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let vocab = Vocabulary::from_tokens(["open", "door", "the"]);
        let back = Vocabulary::parse(&vocab.to_file_string());
        assert_eq!(back, vocab);
        assert_eq!(back.lookup("door"), 2);
        assert_eq!(back.lookup("window"), UNKNOWN);
    }

    #[test]
    fn zero_embedding_leaves_position_column() {
        let (mut store, enc) = setup(6, 5);
        store.value_mut(enc.embedding).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let tokens = QueryTokens::new(vec![2, 2, 4]).unwrap();
        let q = enc.embed(&mut tape, &store, &tokens, true).unwrap();
        let pos = store.value(enc.position);
        for n in 0..3 {
            assert_eq!(tape.value(q).col(n), pos.col(n));
        }
    }

    #[test]
    fn repeated_token_differs_by_position_delta() {
        let (store, enc) = setup(6, 5);
        let mut tape = Tape::new();
        let tokens = QueryTokens::new(vec![3, 3]).unwrap();
        let q = enc.embed(&mut tape, &store, &tokens, true).unwrap();
        let pos = store.value(enc.position);
        let (c0, c1) = (tape.value(q).col(0), tape.value(q).col(1));
        let (p0, p1) = (pos.col(0), pos.col(1));
        for i in 0..6 {
            approx::assert_abs_diff_eq!(c0[i] - c1[i], p0[i] - p1[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn disabled_position_gives_raw_embedding() {
        let (store, enc) = setup(6, 5);
        let mut tape = Tape::new();
        let tokens = QueryTokens::new(vec![1, 4]).unwrap();
        let q = enc.embed(&mut tape, &store, &tokens, false).unwrap();
        let table = store.value(enc.embedding);
        assert_eq!(tape.value(q).col(0), table.col(1));
        assert_eq!(tape.value(q).col(1), table.col(4));
    }

    #[test]
    fn zero_lstm_collapses_to_zero() {
        let (mut store, enc) = setup(4, 5);
        for lstm in [enc.forward, enc.backward] {
            for id in [lstm.w_ih, lstm.w_hh, lstm.bias] {
                store.value_mut(id).data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let tokens = QueryTokens::new(vec![1, 2, 3]).unwrap();
        let qf = enc.forward(&mut tape, &store, &tokens, true).unwrap();
        assert!(tape.value(qf.h).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(qf.s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_word_sentence_equals_word_feature() {
        let (store, enc) = setup(6, 5);
        let mut tape = Tape::new();
        let tokens = QueryTokens::new(vec![3]).unwrap();
        let qf = enc.forward(&mut tape, &store, &tokens, true).unwrap();
        assert_eq!(tape.value(qf.s).data(), tape.value(qf.h).col(0).as_slice());
    }

    #[test]
    fn sentence_feature_halves_come_from_ends() {
        let (store, enc) = setup(8, 7);
        let mut tape = Tape::new();
        let tokens = QueryTokens::new(vec![1, 5, 2, 6, 3]).unwrap();
        let qf = enc.forward(&mut tape, &store, &tokens, true).unwrap();
        let s = tape.value(qf.s).data().to_vec();
        let last = tape.value(qf.h).col(4);
        let first = tape.value(qf.h).col(0);
        assert_eq!(&s[..4], &last[..4]);
        assert_eq!(&s[4..], &first[4..]);
    }

    #[test]
    fn direction_symmetry() {
        let (store, enc) = setup(6, 9);
        let mut swapped = store.clone();
        for (a, b) in [
            (enc.forward.w_ih, enc.backward.w_ih),
            (enc.forward.w_hh, enc.backward.w_hh),
            (enc.forward.bias, enc.backward.bias),
        ] {
            *swapped.value_mut(a) = store.value(b).clone();
            *swapped.value_mut(b) = store.value(a).clone();
        }
        let fwd_tokens = QueryTokens::new(vec![1, 7, 3, 8]).unwrap();
        let rev_tokens = QueryTokens::new(vec![8, 3, 7, 1]).unwrap();
        let mut t1 = Tape::new();
        let a = enc.forward(&mut t1, &store, &fwd_tokens, false).unwrap();
        let mut t2 = Tape::new();
        let b = enc.forward(&mut t2, &swapped, &rev_tokens, false).unwrap();
        for n in 0..4 {
            let ca = t1.value(a.h).col(n);
            let cb = t2.value(b.h).col(3 - n);
            assert_eq!(&ca[..3], &cb[3..]);
            assert_eq!(&ca[3..], &cb[..3]);
        }
    }

    #[test]
    fn causality_of_each_direction() {
        let (store, enc) = setup(6, 9);
        let base = QueryTokens::new(vec![1, 2, 3, 4, 5]).unwrap();
        let mut t0 = Tape::new();
        let h0 = enc.forward(&mut t0, &store, &base, true).unwrap().h;
        // change the last token: forward halves of columns 0..4 unchanged
        let late = QueryTokens::new(vec![1, 2, 3, 4, 8]).unwrap();
        let mut t1 = Tape::new();
        let h1 = enc.forward(&mut t1, &store, &late, true).unwrap().h;
        for n in 0..4 {
            assert_eq!(&t0.value(h0).col(n)[..3], &t1.value(h1).col(n)[..3]);
        }
        assert_ne!(&t0.value(h0).col(4)[..3], &t1.value(h1).col(4)[..3]);
        // change the first token: backward halves of columns 1..5 unchanged
        let early = QueryTokens::new(vec![8, 2, 3, 4, 5]).unwrap();
        let mut t2 = Tape::new();
        let h2 = enc.forward(&mut t2, &store, &early, true).unwrap().h;
        for n in 1..5 {
            assert_eq!(&t0.value(h0).col(n)[3..], &t2.value(h2).col(n)[3..]);
        }
    }

    #[test]
    fn position_embedding_makes_order_visible() {
        let (store, enc) = setup(6, 9);
        let mut tape = Tape::new();
        let ab = QueryTokens::new(vec![2, 5]).unwrap();
        let ba = QueryTokens::new(vec![5, 2]).unwrap();
        let q1 = enc.embed(&mut tape, &store, &ab, true).unwrap();
        let q2 = enc.embed(&mut tape, &store, &ba, true).unwrap();
        // as sets of columns they differ once positions are added
        let mut c1 = [tape.value(q1).col(0), tape.value(q1).col(1)];
        let mut c2 = [tape.value(q2).col(0), tape.value(q2).col(1)];
        c1.sort_by(|a, b| a.partial_cmp(b).unwrap());
        c2.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_ne!(c1, c2);
    }
}
