//! Local context (residual temporal convolution) and global context
//! (stacked multi-head non-local blocks).

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParameterStore};

/// `ReLU(X + conv_b(ReLU(conv_a(X))))` with same-padded width-`k`
/// convolutions and no biases.
#[derive(Debug, Clone, Copy)]
pub struct LocalContext {
    pub conv_a: ParamId,
    pub conv_b: ParamId,
    pub kernel: usize,
}

impl LocalContext {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        dim: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel width must be odd, got {kernel}")));
        }
        let fan = dim * kernel;
        Ok(Self {
            conv_a: store.add("lcn.conv_a", init::xavier(rng, &[dim, dim, kernel], fan, fan))?,
            conv_b: store.add("lcn.conv_b", init::xavier(rng, &[dim, dim, kernel], fan, fan))?,
            kernel,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let ka = tape.param(store, self.conv_a);
        let kb = tape.param(store, self.conv_b);
        let a = tape.conv1d_same(x, ka)?;
        let a = tape.relu(a);
        let b = tape.conv1d_same(a, kb)?;
        let sum = tape.add(x, b)?;
        Ok(tape.relu(sum))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w_qry: ParamId,
    pub w_key: ParamId,
    pub w_val: ParamId,
}

#[derive(Debug, Clone)]
pub struct NonLocalBlock {
    pub heads: Vec<HeadParams>,
}

#[derive(Debug, Clone)]
pub struct GlobalContext {
    pub blocks: Vec<NonLocalBlock>,
    pub dim: usize,
}

/// Global context output plus the attention map of every block and head
/// (`T x T`, row = query segment).
#[derive(Debug, Clone)]
pub struct GlobalOutput {
    pub g: Var,
    pub attention: Vec<Vec<Var>>,
}

impl GlobalContext {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        dim: usize,
        blocks: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "hidden size {dim} is not divisible by {heads} heads"
            )));
        }
        let width = dim / heads;
        let mut out = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let mut hs = Vec::with_capacity(heads);
            for h in 0..heads {
                let mut mat = |kind: &str| {
                    store.add(
                        format!("gcn.{b}.head{h}.{kind}"),
                        init::xavier_matrix(rng, width, width),
                    )
                };
                hs.push(HeadParams {
                    w_qry: mat("w_qry")?,
                    w_key: mat("w_key")?,
                    w_val: mat("w_val")?,
                });
            }
            out.push(NonLocalBlock { heads: hs });
        }
        Ok(Self { blocks: out, dim })
    }

    /// Applies the blocks in sequence. Each head works on its own channel
    /// slice with logits scaled by `1 / sqrt(d / heads)`; head outputs are
    /// stacked and added to the block input. Masked segments are never
    /// attended to.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        l: Var,
        mask: &[bool],
    ) -> Result<GlobalOutput> {
        let mut x = l;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let heads = block.heads.len();
            let width = self.dim / heads;
            let scale = 1.0 / (width as f64).sqrt();
            let mut outs = Vec::with_capacity(heads);
            let mut maps = Vec::with_capacity(heads);
            for (h, hp) in block.heads.iter().enumerate() {
                let slice = tape.slice_rows(x, h * width, width)?;
                let wq = tape.param(store, hp.w_qry);
                let wk = tape.param(store, hp.w_key);
                let wv = tape.param(store, hp.w_val);
                let q = tape.matmul(wq, slice)?;
                let k = tape.matmul(wk, slice)?;
                let v = tape.matmul(wv, slice)?;
                let qt = tape.transpose(q)?;
                let logits = tape.matmul(qt, k)?;
                let logits = tape.scale(logits, scale);
                let attn = tape.masked_softmax(logits, 1, Some(mask))?;
                let attn_t = tape.transpose(attn)?;
                outs.push(tape.matmul(v, attn_t)?);
                maps.push(attn);
            }
            let stacked = tape.concat_rows(&outs)?;
            x = tape.add(x, stacked)?;
            attention.push(maps);
        }
        Ok(GlobalOutput { g: x, attention })
    }
}

/// Writes a square attention map as CSV, one row per query segment.
pub fn write_attention_csv(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let mut s = String::new();
    let header: Vec<String> = (0..cols).map(|j| format!("key{j}")).collect();
    writeln!(s, "query,{}", header.join(",")).unwrap();
    for i in 0..rows {
        let row: Vec<String> = data[i * cols..(i + 1) * cols]
            .iter()
            .map(|v| v.to_string())
            .collect();
        writeln!(s, "{i},{}", row.join(",")).unwrap();
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_convolutions_reduce_to_relu_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let lcn = LocalContext::register(&mut store, &mut rng, 4, 5).unwrap();
        store.value_mut(lcn.conv_a).data_mut().fill(0.0);
        store.value_mut(lcn.conv_b).data_mut().fill(0.0);
        let input = random(&mut rng, 4, 9);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let l = lcn.forward(&mut tape, &store, x).unwrap();
        let expect: Vec<f64> = input.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(tape.value(l).data(), expect.as_slice());
    }

    #[test]
    fn even_kernel_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        assert!(LocalContext::register(&mut store, &mut rng, 4, 4).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        assert!(matches!(
            GlobalContext::register(&mut store, &mut rng, 6, 1, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParameterStore::new();
        let gcn = GlobalContext::register(&mut store, &mut rng, 8, 2, 4).unwrap();
        for b in &gcn.blocks {
            for h in &b.heads {
                store.value_mut(h.w_val).data_mut().fill(0.0);
            }
        }
        let input = random(&mut rng, 8, 6);
        let mut tape = Tape::new();
        let l = tape.constant(input.clone());
        let out = gcn.forward(&mut tape, &store, l, &[true; 6]).unwrap();
        assert_eq!(tape.value(out.g), &input);
    }

    #[test]
    fn single_segment_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParameterStore::new();
        let gcn = GlobalContext::register(&mut store, &mut rng, 4, 1, 1).unwrap();
        let input = random(&mut rng, 4, 1);
        let mut tape = Tape::new();
        let l = tape.constant(input.clone());
        let out = gcn.forward(&mut tape, &store, l, &[true]).unwrap();
        assert_eq!(tape.value(out.attention[0][0]).data(), &[1.0]);
        let wv = store.value(gcn.blocks[0].heads[0].w_val);
        for i in 0..4 {
            let proj: f64 = (0..4).map(|j| wv.get2(i, j) * input.data()[j]).sum();
            approx::assert_abs_diff_eq!(
                tape.value(out.g).data()[i],
                input.data()[i] + proj,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn rows_normalize_over_real_segments_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParameterStore::new();
        let gcn = GlobalContext::register(&mut store, &mut rng, 8, 2, 4).unwrap();
        let mask = [true, true, true, false, false];
        let mut tape = Tape::new();
        let l = tape.constant(random(&mut rng, 8, 5));
        let out = gcn.forward(&mut tape, &store, l, &mask).unwrap();
        for maps in &out.attention {
            for &m in maps {
                let a = tape.value(m);
                for i in 0..5 {
                    let row: Vec<f64> = (0..5).map(|j| a.get2(i, j)).collect();
                    approx::assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
                    assert_eq!(row[3], 0.0);
                    assert_eq!(row[4], 0.0);
                }
            }
        }
    }
}
