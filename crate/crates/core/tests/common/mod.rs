//! Least-squares identifiability oracle for the planted-pattern task.
//!
//! Frames are projected on the sample's known target direction and every
//! contiguous frame window is fitted as `alpha * 1[window] + beta`; the
//! window with the smallest residual is the oracle's answer. It bounds
//! what a model that must first learn the directions can hope to reach.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use plrn_core::data::{Dataset, SyntheticInfo};
use plrn_core::eval::{tiou, EvalReport, DEFAULT_THRESHOLDS};

/// Best-fitting boundary for sample `i`, normalized to the clip.
pub fn oracle_boundary(data: &Dataset, info: &SyntheticInfo, i: usize) -> (f64, f64) {
    let sample = &data.samples[i];
    let frames = data.video(sample).unwrap().frames();
    let (n, dim) = frames.dims2().unwrap();
    let u = info.target_pattern(i);
    let scores = DVector::from_iterator(
        n,
        (0..n).map(|f| (0..dim).map(|c| frames.get2(f, c) * u[c]).sum::<f64>()),
    );
    let mut best = (f64::INFINITY, 0, 1);
    for lo in 0..n {
        for hi in lo + 1..=n {
            if hi - lo == n {
                continue;
            }
            let design = DMatrix::from_fn(n, 2, |f, c| match c {
                0 => f64::from(u8::from((lo..hi).contains(&f))),
                _ => 1.0,
            });
            let coef = design.clone().svd(true, true).solve(&scores, 1e-12).unwrap();
            let residual = (&design * coef - &scores).norm_squared();
            if residual < best.0 {
                best = (residual, lo, hi);
            }
        }
    }
    (best.1 as f64 / n as f64, best.2 as f64 / n as f64)
}

pub fn oracle_report(data: &Dataset, info: &SyntheticInfo, indices: &[usize]) -> EvalReport {
    let tious: Vec<f64> = indices
        .iter()
        .map(|&i| tiou(data.samples[i].boundary(), oracle_boundary(data, info, i)).unwrap())
        .collect();
    EvalReport::from_tious(tious, &DEFAULT_THRESHOLDS).unwrap()
}
