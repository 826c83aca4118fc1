use super::ops::{axis_strides, col2im, im2col, smooth_l1_derivative};
use super::{Gradients, Op, Tape, Var};
use crate::error::Result;
use crate::tensor::{gemm, Layout};

struct Acc<'t> {
    tape: &'t Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Acc<'_> {
    /// Buffer for `var`'s gradient, or `None` if nothing upstream needs it.
    fn slot(&mut self, var: Var) -> Option<&mut Vec<f64>> {
        let node = self.tape.node(var);
        if !node.needs_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[var.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn add(&mut self, var: Var, f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.slot(var) {
            f(g);
        }
    }
}

pub(super) fn run(tape: &Tape, root: Var, seed: f64) -> Result<Gradients> {
    let n = root.0 + 1;
    let mut acc = Acc {
        tape,
        grads: vec![None; n],
    };
    if tape.node(root).needs_grad {
        acc.grads[root.0] = Some(vec![seed]);
    }

    for idx in (0..n).rev() {
        let Some(dy) = acc.grads[idx].take() else {
            continue;
        };
        let node = tape.node(Var(idx));
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = tape.value(*a).dims2()?;
                let (_, nn) = tape.value(*b).dims2()?;
                let av = tape.value(*a).data();
                let bv = tape.value(*b).data();
                acc.add(*a, |g| {
                    gemm(&dy, Layout::normal(m, nn), bv, Layout::transposed(k, nn), 1.0, g)
                });
                acc.add(*b, |g| {
                    gemm(av, Layout::transposed(m, k), &dy, Layout::normal(m, nn), 1.0, g)
                });
            }
            Op::Add(a, b) => {
                acc.add(*a, |g| add_into(g, &dy));
                acc.add(*b, |g| add_into(g, &dy));
            }
            Op::Sub(a, b) => {
                acc.add(*a, |g| add_into(g, &dy));
                acc.add(*b, |g| g.iter_mut().zip(&dy).for_each(|(g, d)| *g -= d));
            }
            Op::AddCol(m, v) => {
                let (rows, cols) = tape.value(*m).dims2()?;
                acc.add(*m, |g| add_into(g, &dy));
                acc.add(*v, |g| {
                    for r in 0..rows {
                        g[r] += dy[r * cols..(r + 1) * cols].iter().sum::<f64>();
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = tape.value(*a).data();
                let bv = tape.value(*b).data();
                acc.add(*a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                acc.add(*b, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }
            Op::MulCol(m, v) => {
                let (rows, cols) = tape.value(*m).dims2()?;
                let mv = tape.value(*m).data();
                let vv = tape.value(*v).data();
                acc.add(*m, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[r * cols + c] += dy[r * cols + c] * vv[r];
                        }
                    }
                });
                acc.add(*v, |g| {
                    for r in 0..rows {
                        let row = r * cols..(r + 1) * cols;
                        g[r] += dy[row.clone()]
                            .iter()
                            .zip(&mv[row])
                            .map(|(d, x)| d * x)
                            .sum::<f64>();
                    }
                });
            }
            Op::Scale(a, c) => acc.add(*a, |g| {
                g.iter_mut().zip(&dy).for_each(|(g, d)| *g += c * d)
            }),
            Op::AddConst(a) => acc.add(*a, |g| add_into(g, &dy)),
            Op::Relu(a) => acc.add(*a, |g| {
                for i in 0..g.len() {
                    if y[i] > 0.0 {
                        g[i] += dy[i];
                    }
                }
            }),
            Op::Tanh(a) => acc.add(*a, |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Sigmoid(a) => acc.add(*a, |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_strides(node.value.shape(), *axis);
                acc.add(*input, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| y[at(j)] * dy[at(j)]).sum();
                            // masked entries have y = 0 and receive nothing
                            for j in 0..len {
                                g[at(j)] += y[at(j)] * (dy[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, kernels } => {
                let (d_in, t) = tape.value(*x).dims2()?;
                let &[d_out, _, k] = tape.shape(*kernels) else {
                    unreachable!("validated in forward")
                };
                let wv = tape.value(*kernels).data();
                if tape.node(*kernels).needs_grad {
                    let cols = im2col(tape.value(*x).data(), d_in, t, k);
                    acc.add(*kernels, |g| {
                        gemm(
                            &dy,
                            Layout::normal(d_out, t),
                            &cols,
                            Layout::transposed(d_in * k, t),
                            1.0,
                            g,
                        )
                    });
                }
                acc.add(*x, |g| {
                    let mut dcols = vec![0.0; d_in * k * t];
                    gemm(
                        wv,
                        Layout::transposed(d_out, d_in * k),
                        &dy,
                        Layout::normal(d_out, t),
                        0.0,
                        &mut dcols,
                    );
                    col2im(&dcols, d_in, t, k, g);
                });
            }
            Op::Sum(a) => acc.add(*a, |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::Transpose(a) => {
                let (r, c) = tape.value(*a).dims2()?;
                acc.add(*a, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[j * r + i];
                        }
                    }
                });
            }
            Op::SliceRows { input, start } => {
                let (_, c) = tape.value(*input).dims2()?;
                let off = start * c;
                acc.add(*input, |g| add_into(&mut g[off..off + dy.len()], &dy));
            }
            Op::SelectCol { input, col } => {
                let (r, c) = tape.value(*input).dims2()?;
                acc.add(*input, |g| {
                    for i in 0..r {
                        g[i * c + col] += dy[i];
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = tape.value(*p).len();
                    acc.add(*p, |g| add_into(g, &dy[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, cols) = node.value.dims2()?;
                let mut off = 0;
                for p in parts {
                    let (_, w) = tape.value(*p).dims2()?;
                    acc.add(*p, |g| {
                        for i in 0..r {
                            add_into(
                                &mut g[i * w..(i + 1) * w],
                                &dy[i * cols + off..i * cols + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::GatherCols { table, indices } => {
                let (d, v) = tape.value(*table).dims2()?;
                let nidx = indices.len();
                acc.add(*table, |g| {
                    for i in 0..d {
                        for (j, &idx) in indices.iter().enumerate() {
                            g[i * v + idx] += dy[i * nidx + j];
                        }
                    }
                });
            }
            Op::MaskCols { input, mask } => {
                let c = mask.len();
                acc.add(*input, |g| {
                    for (i, gi) in g.iter_mut().enumerate() {
                        if mask[i % c] {
                            *gi += dy[i];
                        }
                    }
                });
            }
            Op::SmoothL1(a) => {
                let x = tape.value(*a).data();
                acc.add(*a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * smooth_l1_derivative(x[i]);
                    }
                });
            }
            Op::LogFloor { input, floor } => {
                let x = tape.value(*input).data();
                acc.add(*input, |g| {
                    for i in 0..g.len() {
                        if x[i] > *floor {
                            g[i] += dy[i] / x[i];
                        }
                    }
                });
            }
            Op::Dot { input, weights } => acc.add(*input, |g| {
                g.iter_mut()
                    .zip(weights)
                    .for_each(|(g, w)| *g += dy[0] * w)
            }),
        }
        acc.grads[idx] = Some(dy);
    }

    let shapes = (0..n).map(|i| tape.node(Var(i)).value.shape().to_vec()).collect();
    let params = tape
        .params
        .iter()
        .map(|(&id, &var)| (id, var.0))
        .filter(|&(_, idx)| idx < n);
    let mut params: Vec<_> = params.collect();
    params.sort_by_key(|&(_, idx)| idx);
    Ok(Gradients {
        grads: acc.grads,
        shapes,
        params,
    })
}

fn add_into(g: &mut [f64], d: &[f64]) {
    g.iter_mut().zip(d).for_each(|(g, d)| *g += d);
}
