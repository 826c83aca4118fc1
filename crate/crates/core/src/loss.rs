//! Boundary regression losses and the temporal attention calibration loss.

use crate::autodiff::ops::smooth_l1_value;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied inside the log of the calibration loss.
pub const LOG_FLOOR: f64 = 1e-12;

pub fn smooth_l1(z: f64) -> f64 {
    smooth_l1_value(z)
}

/// Normalized ground-truth boundary with its derived center/width and the
/// in-boundary segment indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub g_s: f64,
    pub g_e: f64,
    pub phi: Vec<f64>,
}

impl GroundTruth {
    /// `phi_t = 1` when the midpoint of real segment `t` lies in
    /// `[g_s, g_e]`. If no midpoint does, the real segment nearest the
    /// boundary center is marked instead. `midpoints` covers the real
    /// segments; the remaining `segments - midpoints.len()` are padding.
    pub fn new(g_s: f64, g_e: f64, midpoints: &[f64], segments: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&g_s) || !(0.0..=1.0).contains(&g_e) || g_s >= g_e {
            return Err(Error::Data(format!(
                "ground truth ({g_s}, {g_e}) must satisfy 0 <= start < end <= 1"
            )));
        }
        if midpoints.is_empty() || midpoints.len() > segments {
            return Err(Error::Contract(format!(
                "{} real segments for {segments} slots",
                midpoints.len()
            )));
        }
        let mut phi = vec![0.0; segments];
        for (t, &m) in midpoints.iter().enumerate() {
            if m >= g_s && m <= g_e {
                phi[t] = 1.0;
            }
        }
        if phi.iter().all(|&p| p == 0.0) {
            let center = 0.5 * (g_s + g_e);
            let nearest = midpoints
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - center).abs().total_cmp(&(b.1 - center).abs()))
                .map(|(t, _)| t)
                .unwrap();
            phi[nearest] = 1.0;
        }
        Ok(Self { g_s, g_e, phi })
    }

    pub fn g_c(&self) -> f64 {
        0.5 * (self.g_s + self.g_e)
    }

    pub fn g_w(&self) -> f64 {
        self.g_e - self.g_s
    }
}

pub fn loss_se(tau_s: f64, tau_e: f64, gt: &GroundTruth) -> f64 {
    smooth_l1(gt.g_s - tau_s) + smooth_l1(gt.g_e - tau_e)
}

pub fn loss_cw(tau_c: f64, tau_w: f64, gt: &GroundTruth) -> f64 {
    smooth_l1(gt.g_c() - tau_c) + smooth_l1(gt.g_w() - tau_w)
}

/// `-sum(phi_t log b_t) / sum(phi_t)` with the log floored at
/// [`LOG_FLOOR`].
pub fn loss_tem(b: &[f64], phi: &[f64]) -> Result<f64> {
    if b.len() != phi.len() {
        return Err(Error::shape("loss_tem", &[b.len()], &[phi.len()]));
    }
    let mass: f64 = phi.iter().sum();
    if mass <= 0.0 {
        return Err(Error::Data("no segment lies inside the boundary".into()));
    }
    let total: f64 = b
        .iter()
        .zip(phi)
        .map(|(&b, &p)| p * b.max(LOG_FLOOR).ln())
        .sum();
    Ok(-total / mass)
}

/// Which optional terms enter the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    pub use_l_cw: bool,
    pub use_l_tem: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self {
            use_l_cw: true,
            use_l_tem: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub se: f64,
    pub cw: f64,
    pub tem: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.se.is_finite() && self.cw.is_finite() && self.tem.is_finite() && self.total.is_finite()
    }

    pub fn scaled(self, k: f64) -> Self {
        Self {
            se: self.se * k,
            cw: self.cw * k,
            tem: self.tem * k,
            total: self.total * k,
        }
    }

    pub fn plus(self, o: Self) -> Self {
        Self {
            se: self.se + o.se,
            cw: self.cw + o.cw,
            tem: self.tem + o.tem,
            total: self.total + o.total,
        }
    }
}

/// Plain-value total. Disabled terms are reported as 0.
pub fn total_loss(
    tau: [f64; 4],
    b: &[f64],
    gt: &GroundTruth,
    flags: LossFlags,
) -> Result<LossBreakdown> {
    let se = loss_se(tau[0], tau[1], gt);
    let cw = if flags.use_l_cw {
        loss_cw(tau[2], tau[3], gt)
    } else {
        0.0
    };
    let tem = if flags.use_l_tem { loss_tem(b, &gt.phi)? } else { 0.0 };
    Ok(LossBreakdown {
        se,
        cw,
        tem,
        total: se + cw + tem,
    })
}

/// Loss nodes on a tape; disabled terms are absent from the graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub se: Var,
    pub cw: Option<Var>,
    pub tem: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn build(
        tape: &mut Tape,
        t_se: Var,
        t_cw: Var,
        b: Var,
        gt: &GroundTruth,
        flags: LossFlags,
    ) -> Result<Self> {
        let regress = |tape: &mut Tape, pred: Var, target: [f64; 2]| -> Result<Var> {
            let neg = Tensor::column(vec![-target[0], -target[1]])?;
            let diff = tape.add_const(pred, &neg)?;
            let per = tape.smooth_l1(diff);
            Ok(tape.sum(per))
        };
        let se = regress(tape, t_se, [gt.g_s, gt.g_e])?;
        let mut total = se;
        let cw = if flags.use_l_cw {
            let cw = regress(tape, t_cw, [gt.g_c(), gt.g_w()])?;
            total = tape.add(total, cw)?;
            Some(cw)
        } else {
            None
        };
        let tem = if flags.use_l_tem {
            let mass: f64 = gt.phi.iter().sum();
            if mass <= 0.0 {
                return Err(Error::Data("no segment lies inside the boundary".into()));
            }
            let weights: Vec<f64> = gt.phi.iter().map(|p| -p / mass).collect();
            let logb = tape.log_floor(b, LOG_FLOOR);
            let tem = tape.dot_const(logb, &weights)?;
            total = tape.add(total, tem)?;
            Some(tem)
        } else {
            None
        };
        Ok(Self { se, cw, tem, total })
    }

    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        LossBreakdown {
            se: get(Some(self.se)),
            cw: get(self.cw),
            tem: get(self.tem),
            total: get(Some(self.total)),
        }
    }
}
