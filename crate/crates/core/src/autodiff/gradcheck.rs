//! Central finite-difference oracle for the analytic gradients.
//!
//! Only forward values are used here, so the oracle is independent of every
//! backward rule it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Smallest denominator of the relative error, so that gradients which are
/// zero analytically are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// A central difference of `f` carries rounding noise of about
/// `eps * |f| / step`; the denominator never drops below this many times
/// that noise.
pub const ROUNDING_MARGIN: f64 = 1e5;

/// Central differences at `h` and `2h` that differ by more than this
/// (relative, same floor) mean a kink lies within `2h` of the point.
pub const KINK_RATIO: f64 = 1e-5;

/// Step reductions tried when a kink is detected.
pub const KINK_RETRIES: usize = 2;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, RELATIVE_FLOOR)
}

fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Denominator floor for probes of a function whose value is `f0`.
pub fn denominator_floor(f0: f64, step: f64) -> f64 {
    RELATIVE_FLOOR.max(ROUNDING_MARGIN * f64::EPSILON * f0.abs() / step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
    /// Relative error denominator floor at the nominal step.
    pub floor: f64,
    /// Probes that were re-measured at a smaller step because of a kink.
    pub kinks: usize,
}

impl GradCheckReport {
    fn new(floor: f64) -> Self {
        Self { floor, ..Default::default() }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        self.record_floored(name, index, analytic, numeric, self.floor);
    }

    fn record_floored(&mut self, name: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error_floored(analytic, numeric, floor);
        self.checked += 1;
        if err > self.max_relative_error || self.worst.is_none() {
            self.max_relative_error = self.max_relative_error.max(err);
            self.worst = Some(Mismatch {
                name: name.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

fn scalar_of(tape: &Tape, root: Var) -> Result<f64> {
    tape.value(root).item()
}

/// Checks gradients of `f` with respect to each input tensor.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone(), false)).collect();
        let root = f(&mut tape, &vars)?;
        scalar_of(&tape, root)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    let f0 = scalar_of(&tape, root)?;
    let grads = tape.backward(root)?;

    let mut report = GradCheckReport::new(denominator_floor(f0, step));
    let mut work = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; inputs[which].len()]);
        for i in 0..inputs[which].len() {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            report.record(&format!("input{which}"), i, analytic[i], numeric);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy)]
struct Probe {
    value: f64,
    step: f64,
}

/// Central difference of `at(delta) = f(x + delta)`, shrinking the step
/// while the estimates at `h` and `2h` disagree.
fn probe(at: &mut impl FnMut(f64) -> Result<f64>, f0: f64, step: f64) -> Result<Probe> {
    let mut h = step;
    let mut central = |h: f64| -> Result<f64> { Ok((at(h)? - at(-h)?) / (2.0 * h)) };
    for retry in 0..=KINK_RETRIES {
        let near = central(h)?;
        if retry == KINK_RETRIES {
            return Ok(Probe { value: near, step: h });
        }
        let far = central(2.0 * h)?;
        if relative_error_floored(near, far, denominator_floor(f0, h)) <= KINK_RATIO {
            return Ok(Probe { value: near, step: h });
        }
        h /= 10.0;
    }
    unreachable!()
}

/// Which parameter entries to perturb.
#[derive(Debug, Clone, Copy)]
#[derive(Default)]
pub struct Selection {
    /// At most this many entries per parameter; `None` checks all of them.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}


/// Checks gradients of the scalar built by `f` with respect to the
/// parameters in `store`. Perturbed forwards run in parallel.
pub fn check_params<F>(
    store: &ParameterStore,
    selection: Selection,
    step: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    let f0 = scalar_of(&tape, root)?;
    let grads = tape.backward(root)?;
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (id, g) in grads.param_grads() {
        analytic[id.index()] = Some(g.to_vec());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(selection.seed);
    let mut probes: Vec<(ParamId, usize)> = Vec::new();
    for id in store.ids() {
        let len = store.value(id).len();
        match selection.max_per_param {
            Some(k) if k < len => {
                let mut picked = sample(&mut rng, len, k).into_vec();
                picked.sort_unstable();
                probes.extend(picked.into_iter().map(|i| (id, i)));
            }
            _ => probes.extend((0..len).map(|i| (id, i))),
        }
    }

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let root = f(&mut tape, s)?;
        scalar_of(&tape, root)
    };

    let numeric: Vec<Result<Probe>> = probes
        .par_iter()
        .map_init(
            || store.clone(),
            |work, &(id, i)| {
                let orig = work.value(id).data()[i];
                let mut at = |delta: f64| -> Result<f64> {
                    work.value_mut(id).data_mut()[i] = orig + delta;
                    let v = eval(work);
                    work.value_mut(id).data_mut()[i] = orig;
                    v
                };
                probe(&mut at, f0, step)
            },
        )
        .collect();

    let mut report = GradCheckReport::new(denominator_floor(f0, step));
    for (&(id, i), p) in probes.iter().zip(numeric) {
        let p = p?;
        let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[i]);
        report.kinks += usize::from(p.step < step);
        report.record_floored(store.name(id), i, a, p.value, denominator_floor(f0, p.step));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_probe_keeps_nominal_step() {
        let x = 0.3_f64;
        let f = |v: f64| (v * 2.0).sin() + v * v;
        let p = probe(&mut |d| Ok(f(x + d)), f(x), DEFAULT_STEP).unwrap();
        assert_eq!(p.step, DEFAULT_STEP);
        assert!((p.value - (2.0 * (0.6_f64).cos() + 0.6)).abs() < 1e-9);
    }

    #[test]
    fn kink_inside_step_is_avoided() {
        // slope jumps by 1 at 0.7 h to the right of the probe point
        let x = 1.0_f64;
        let knot = x + 0.7 * DEFAULT_STEP;
        let f = |v: f64| v * v + (v - knot).max(0.0);
        let naive = (f(x + DEFAULT_STEP) - f(x - DEFAULT_STEP)) / (2.0 * DEFAULT_STEP);
        assert!((naive - 2.0).abs() > 0.1);
        let p = probe(&mut |d| Ok(f(x + d)), f(x), DEFAULT_STEP).unwrap();
        assert!(p.step < DEFAULT_STEP);
        assert!((p.value - 2.0).abs() < 1e-8, "{p:?}");
    }

    #[test]
    fn floor_tracks_rounding_scale() {
        assert_eq!(denominator_floor(0.0, 1e-5), RELATIVE_FLOOR);
        let big = denominator_floor(1e3, 1e-5);
        assert!((big - ROUNDING_MARGIN * f64::EPSILON * 1e3 / 1e-5).abs() < 1e-15);
    }
}
