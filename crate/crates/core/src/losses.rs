//! Training losses with analytic gradients w.r.t. the predicted layers.
//!
//! Elevations are handled in normalised units (meters / 25).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridmap::{crop_geometry, rescale_elevation, GridMap, RangeSpec, CONFIDENCE, ELEVATION, RESOLUTION_RATIO, RISK};

/// Confidence above which a ground-truth cell counts as observed.
pub const OBSERVED_CONFIDENCE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of unobserved cells in the elevation loss.
    pub alpha: f64,
    /// Traversability weight.
    pub mu: f64,
    /// Elevation weight.
    pub lambda: f64,
    /// Consistency weight.
    pub gamma: f64,
    /// SmoothL1 transition point.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.2,
            mu: 2.0,
            lambda: 2.0,
            gamma: 5.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.mu, self.lambda, self.gamma];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("smooth-L1 beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Value and derivative of the SmoothL1 penalty.
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::dims(expected, got))
    }
}

/// Masked mean squared error and its gradient.
pub fn trav_loss(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_len(pred.len(), gt.len())?;
    check_len(pred.len(), mask.len())?;
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyMask("traversability"));
    }
    let inv = 1.0 / n as f64;
    let mut grad = vec![0.0; pred.len()];
    let mut sum = 0.0;
    for k in 0..pred.len() {
        if mask[k] {
            let e = pred[k] - gt[k];
            sum += e * e;
            grad[k] = 2.0 * e * inv;
        }
    }
    Ok((sum * inv, grad))
}

/// Observed/unobserved weighted SmoothL1 elevation loss and its gradient.
pub fn ele_loss(pred: &[f64], gt: &[f64], observed: &[bool], unobserved: &[bool], alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    check_len(pred.len(), gt.len())?;
    check_len(pred.len(), observed.len())?;
    check_len(pred.len(), unobserved.len())?;
    if observed.iter().zip(unobserved).any(|(&o, &u)| o && u) {
        return Err(Error::InvalidConfig("observed and unobserved masks overlap".into()));
    }
    let n_o = observed.iter().filter(|&&m| m).count();
    let n_u = unobserved.iter().filter(|&&m| m).count();
    if n_o + n_u == 0 {
        return Err(Error::EmptyMask("elevation"));
    }
    let w_o = if n_o > 0 { 1.0 / n_o as f64 } else { 0.0 };
    let w_u = if n_u > 0 { alpha / n_u as f64 } else { 0.0 };
    let (mut sum_o, mut sum_u) = (0.0, 0.0);
    let mut grad = vec![0.0; pred.len()];
    for k in 0..pred.len() {
        let w = if observed[k] {
            w_o
        } else if unobserved[k] {
            w_u
        } else {
            continue;
        };
        let (v, d) = smooth_l1(pred[k] - gt[k], beta);
        if observed[k] {
            sum_o += v;
        } else {
            sum_u += v;
        }
        grad[k] = w * d;
    }
    Ok((w_o * sum_o + w_u * sum_u, grad))
}

/// Value and gradients of the short/micro overlap consistency loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyLoss {
    pub value: f64,
    pub grad_short: Vec<f64>,
    pub grad_micro: Vec<f64>,
    /// Number of overlap cells that entered the mean.
    pub cells: usize,
}

/// Mean SmoothL1 of `crop(short) − down4(micro)` over cells defined in both.
///
/// `short` is `n × n`, `micro` is `2n × 2n`. Missing micro cells drop out of
/// their block mean.
pub fn consistency_loss(
    short: &[f64],
    short_valid: &[bool],
    micro: &[f64],
    micro_valid: &[bool],
    short_cells: usize,
    beta: f64,
) -> Result<ConsistencyLoss> {
    let n = short_cells;
    let (offset, size) = crop_geometry(n);
    let m = size * RESOLUTION_RATIO;
    check_len(n * n, short.len())?;
    check_len(n * n, short_valid.len())?;
    check_len(m * m, micro.len())?;
    check_len(m * m, micro_valid.len())?;

    // (short index, block mean, valid micro count) per usable overlap cell.
    let mut residuals = Vec::with_capacity(size * size);
    for bi in 0..size {
        for bj in 0..size {
            let ks = (bi + offset) * n + bj + offset;
            if !short_valid[ks] {
                continue;
            }
            let (mut sum, mut count) = (0.0, 0usize);
            for di in 0..RESOLUTION_RATIO {
                for dj in 0..RESOLUTION_RATIO {
                    let km = (bi * RESOLUTION_RATIO + di) * m + bj * RESOLUTION_RATIO + dj;
                    if micro_valid[km] {
                        sum += micro[km];
                        count += 1;
                    }
                }
            }
            if count > 0 {
                residuals.push((bi, bj, ks, short[ks] - sum / count as f64, count));
            }
        }
    }
    if residuals.is_empty() {
        return Err(Error::EmptyMask("consistency overlap"));
    }
    let inv = 1.0 / residuals.len() as f64;
    let mut value = 0.0;
    let mut grad_short = vec![0.0; n * n];
    let mut grad_micro = vec![0.0; m * m];
    for &(bi, bj, ks, r, count) in &residuals {
        let (v, d) = smooth_l1(r, beta);
        value += v;
        grad_short[ks] = d * inv;
        let gm = -d * inv / count as f64;
        for di in 0..RESOLUTION_RATIO {
            for dj in 0..RESOLUTION_RATIO {
                let km = (bi * RESOLUTION_RATIO + di) * m + bj * RESOLUTION_RATIO + dj;
                if micro_valid[km] {
                    grad_micro[km] = gm;
                }
            }
        }
    }
    Ok(ConsistencyLoss {
        value: value * inv,
        grad_short,
        grad_micro,
        cells: residuals.len(),
    })
}

/// Loss values of one range.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RangeTerms {
    pub trav: f64,
    pub ele: f64,
}

/// All loss terms of one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub micro: RangeTerms,
    pub short: RangeTerms,
    pub cons: f64,
}

/// Weighted sum of the per-range and consistency terms.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> f64 {
    let range = |t: &RangeTerms| w.mu * t.trav + w.lambda * t.ele;
    range(&terms.micro) + range(&terms.short) + w.gamma * terms.cons
}

/// Supervision for one range, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeTarget {
    pub cells: usize,
    pub risk: Vec<f64>,
    pub risk_mask: Vec<bool>,
    /// Normalised elevation.
    pub elevation: Vec<f64>,
    pub observed: Vec<bool>,
    pub unobserved: Vec<bool>,
}

impl RangeTarget {
    /// Builds masks from a ground-truth map with elevation, risk and confidence layers.
    pub fn from_map(map: &GridMap) -> Result<Self> {
        let ele = map.layer(ELEVATION)?;
        let risk = map.layer(RISK)?;
        let conf = map.layer(CONFIDENCE)?;
        let n = map.spec.cell_count();
        let mut t = RangeTarget {
            cells: map.spec.cells,
            risk: vec![0.0; n],
            risk_mask: vec![false; n],
            elevation: vec![0.0; n],
            observed: vec![false; n],
            unobserved: vec![false; n],
        };
        for k in 0..n {
            if let Some(r) = risk.get_flat(k) {
                t.risk[k] = f64::from(r);
                t.risk_mask[k] = true;
            }
            if let Some(e) = ele.get_flat(k) {
                t.elevation[k] = rescale_elevation(f64::from(e));
                let c = conf.get_flat(k).map_or(0.0, f64::from);
                if c > OBSERVED_CONFIDENCE {
                    t.observed[k] = true;
                } else {
                    t.unobserved[k] = true;
                }
            }
        }
        Ok(t)
    }

    pub fn spec_matches(&self, spec: &RangeSpec) -> bool {
        self.cells == spec.cells
    }
}

/// Ground truth for both ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPair {
    pub micro: RangeTarget,
    pub short: RangeTarget,
}

/// Raw network outputs: risk before clamping is not needed here, only the
/// clamped risk and normalised elevation per range.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeOutputs {
    pub risk: Vec<f64>,
    pub elevation: Vec<f64>,
}

/// Loss values, total and gradients w.r.t. the predicted layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub terms: LossTerms,
    pub total: f64,
    pub grad_micro: Option<RangeOutputs>,
    pub grad_short: Option<RangeOutputs>,
}

fn range_terms(out: &RangeOutputs, gt: &RangeTarget, w: &LossWeights) -> Result<(RangeTerms, RangeOutputs)> {
    check_len(gt.risk.len(), out.risk.len())?;
    check_len(gt.elevation.len(), out.elevation.len())?;
    let n = out.risk.len();
    let (trav, g_trav) = match trav_loss(&out.risk, &gt.risk, &gt.risk_mask) {
        Ok(v) => v,
        Err(Error::EmptyMask(_)) => (0.0, vec![0.0; n]),
        Err(e) => return Err(e),
    };
    let (ele, g_ele) = match ele_loss(&out.elevation, &gt.elevation, &gt.observed, &gt.unobserved, w.alpha, w.beta) {
        Ok(v) => v,
        Err(Error::EmptyMask(_)) => (0.0, vec![0.0; n]),
        Err(e) => return Err(e),
    };
    let grads = RangeOutputs {
        risk: g_trav.into_iter().map(|g| w.mu * g).collect(),
        elevation: g_ele.into_iter().map(|g| w.lambda * g).collect(),
    };
    Ok((RangeTerms { trav, ele }, grads))
}

/// Evaluates every applicable term. Ranges passed as `None` contribute
/// nothing; the consistency term needs both. Terms whose masks are empty
/// are zero.
pub fn evaluate(
    micro: Option<(&RangeOutputs, &RangeTarget)>,
    short: Option<(&RangeOutputs, &RangeTarget)>,
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    let mut terms = LossTerms::default();
    let mut grad_micro = None;
    let mut grad_short = None;
    if let Some((out, gt)) = micro {
        let (t, g) = range_terms(out, gt, w)?;
        terms.micro = t;
        grad_micro = Some(g);
    }
    if let Some((out, gt)) = short {
        let (t, g) = range_terms(out, gt, w)?;
        terms.short = t;
        grad_short = Some(g);
    }
    if let (Some((m, _)), Some((s, gt_s)), Some(gm), Some(gs)) = (micro, short, grad_micro.as_mut(), grad_short.as_mut()) {
        let cells = gt_s.cells;
        let sv = vec![true; s.elevation.len()];
        let mv = vec![true; m.elevation.len()];
        let c = consistency_loss(&s.elevation, &sv, &m.elevation, &mv, cells, w.beta)?;
        terms.cons = c.value;
        for (g, d) in gs.elevation.iter_mut().zip(&c.grad_short) {
            *g += w.gamma * d;
        }
        for (g, d) in gm.elevation.iter_mut().zip(&c.grad_micro) {
            *g += w.gamma * d;
        }
    }
    let total = total_loss(&terms, w);
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok(LossReport {
        terms,
        total,
        grad_micro,
        grad_short,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0, 1.0), (0.0, 0.0));
        assert_eq!(smooth_l1(0.5, 1.0).0, 0.125);
        assert_eq!(smooth_l1(2.0, 1.0), (1.5, 1.0));
        assert_eq!(smooth_l1(-2.0, 1.0), (1.5, -1.0));
    }

    #[test]
    fn smooth_l1_is_c1_at_beta() {
        for beta in [0.3, 1.0, 2.5] {
            let (a, da) = smooth_l1(beta - 1e-9, beta);
            let (b, db) = smooth_l1(beta + 1e-9, beta);
            assert!((a - b).abs() < 1e-8);
            assert!((da - db).abs() < 1e-8);
        }
    }

    #[test]
    fn trav_examples() {
        let (v, _) = trav_loss(&[0.2, 0.4], &[0.2, 0.4], &[true, true]).unwrap();
        assert_eq!(v, 0.0);
        let (v, g) = trav_loss(&[0.5], &[0.0], &[true]).unwrap();
        assert_eq!((v, g[0]), (0.25, 1.0));
        let (v, _) = trav_loss(&[0.1, 0.3, 9.0], &[0.0, 0.0, 0.0], &[true, true, false]).unwrap();
        assert_relative_eq!(v, 0.05, max_relative = 1e-12);
        assert!(matches!(trav_loss(&[0.1], &[0.0], &[false]), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn ele_examples() {
        let (v, _) = ele_loss(&[0.5, 0.5], &[0.0, 0.0], &[true, false], &[false, true], 0.2, 1.0).unwrap();
        assert_relative_eq!(v, 0.15, max_relative = 1e-12);
        let (v, g) = ele_loss(&[0.5, 0.5], &[0.0, 0.0], &[true, false], &[false, true], 0.0, 1.0).unwrap();
        assert_relative_eq!(v, 0.125, max_relative = 1e-12);
        assert_eq!(g[1], 0.0);
        let (v, _) = ele_loss(&[0.3, 0.1], &[0.3, 0.1], &[true, false], &[false, true], 0.2, 1.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(ele_loss(&[0.0], &[0.0], &[false], &[false], 0.2, 1.0).is_err());
        assert!(ele_loss(&[0.0], &[0.0], &[true], &[true], 0.2, 1.0).is_err());
    }

    #[test]
    fn ele_monotone_in_alpha() {
        let pred = [0.3, -0.2, 0.7, 1.5];
        let gt = [0.0; 4];
        let o = [true, false, true, false];
        let u = [false, true, false, true];
        let mut last = -1.0;
        for a in [0.0, 0.1, 0.2, 0.5, 1.0] {
            let (v, _) = ele_loss(&pred, &gt, &o, &u, a, 1.0).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    fn replicate(short: &[f64], n: usize) -> Vec<f64> {
        let (off, size) = crop_geometry(n);
        let m = size * 4;
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = short[(i / 4 + off) * n + j / 4 + off];
            }
        }
        out
    }

    #[test]
    fn consistency_examples() {
        let n = 16;
        let short: Vec<f64> = (0..n * n).map(|k| (k as f64 * 0.01).sin()).collect();
        let micro = replicate(&short, n);
        let sv = vec![true; n * n];
        let mv = vec![true; micro.len()];
        let c = consistency_loss(&short, &sv, &micro, &mv, n, 1.0).unwrap();
        assert!(c.value < 1e-24);
        assert_eq!(c.cells, 64);

        let shifted: Vec<f64> = micro.iter().map(|v| v - 0.5).collect();
        let c = consistency_loss(&short, &sv, &shifted, &mv, n, 1.0).unwrap();
        assert_relative_eq!(c.value, 0.125, max_relative = 1e-12);

        assert!(consistency_loss(&short, &vec![false; n * n], &micro, &mv, n, 1.0).is_err());
        assert!(consistency_loss(&short, &sv, &micro[1..], &mv, n, 1.0).is_err());
    }

    #[test]
    fn consistency_single_cell_gradient() {
        let n = 16;
        let short = vec![0.0; n * n];
        let mut micro = vec![0.0; 32 * 32];
        micro[0] = -0.32; // residual 0.02 in block (0,0)
        let sv = vec![true; n * n];
        let mv = vec![true; micro.len()];
        let c = consistency_loss(&short, &sv, &micro, &mv, n, 1.0).unwrap();
        let r = 0.32 / 16.0;
        assert_relative_eq!(c.grad_micro[0], -r / 16.0 / 64.0, max_relative = 1e-12);
        assert_relative_eq!(c.grad_micro[1], -r / 16.0 / 64.0, max_relative = 1e-12);
        assert_eq!(c.grad_micro[4], 0.0);
    }

    fn fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], k: usize) -> f64 {
        let h = 1e-4;
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[k] += h;
        b[k] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    fn close(analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= 1e-5 * analytic.abs().max(numeric.abs()).max(1e-3)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let n = 16;
        let short: Vec<f64> = (0..n * n).map(|k| 0.8 * ((k as f64) * 0.37).sin()).collect();
        let micro: Vec<f64> = (0..32 * 32).map(|k| 1.4 * ((k as f64) * 0.11).cos()).collect();
        let gt: Vec<f64> = (0..n * n).map(|k| ((k as f64) * 0.05).cos()).collect();
        let mask: Vec<bool> = (0..n * n).map(|k| k % 3 != 0).collect();
        let obs: Vec<bool> = (0..n * n).map(|k| k % 2 == 0).collect();
        let unobs: Vec<bool> = (0..n * n).map(|k| k % 2 == 1 && k % 5 != 0).collect();
        let mv: Vec<bool> = (0..32 * 32).map(|k| k % 7 != 0).collect();
        let sv = vec![true; n * n];

        let (_, g) = trav_loss(&short, &gt, &mask).unwrap();
        let (_, ge) = ele_loss(&short, &gt, &obs, &unobs, 0.2, 1.0).unwrap();
        let c = consistency_loss(&short, &sv, &micro, &mv, n, 1.0).unwrap();
        for k in (0..n * n).step_by(7) {
            let f = |x: &[f64]| trav_loss(x, &gt, &mask).unwrap().0;
            assert!(close(g[k], fd(&f, &short, k)));
            let near_kink = ((short[k] - gt[k]).abs() - 1.0).abs() < 1e-3;
            if !near_kink {
                let f = |x: &[f64]| ele_loss(x, &gt, &obs, &unobs, 0.2, 1.0).unwrap().0;
                assert!(close(ge[k], fd(&f, &short, k)));
            }
            let f = |x: &[f64]| consistency_loss(x, &sv, &micro, &mv, n, 1.0).unwrap().value;
            assert!(close(c.grad_short[k], fd(&f, &short, k)), "short {k}");
        }
        for k in (0..32 * 32).step_by(13) {
            let f = |x: &[f64]| consistency_loss(&short, &sv, x, &mv, n, 1.0).unwrap().value;
            assert!(close(c.grad_micro[k], fd(&f, &micro, k)), "micro {k}");
        }
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        let t = LossTerms {
            micro: RangeTerms { trav: 0.25, ele: 0.125 },
            short: RangeTerms { trav: 0.25, ele: 0.125 },
            cons: 0.0,
        };
        assert_eq!(total_loss(&t, &w), 1.5);
        assert_eq!(total_loss(&LossTerms::default(), &w), 0.0);
        let with_cons = LossTerms { cons: 0.1, ..t };
        let no_cl = LossWeights { gamma: 0.0, ..w };
        assert_eq!(total_loss(&with_cons, &no_cl), 1.5);
    }

    #[test]
    fn total_is_linear_in_each_weight() {
        let t = LossTerms {
            micro: RangeTerms { trav: 0.31, ele: 0.07 },
            short: RangeTerms { trav: 0.12, ele: 0.4 },
            cons: 0.05,
        };
        let base = LossWeights::default();
        let f = |w: LossWeights| total_loss(&t, &w);
        for (w1, w2) in [
            (LossWeights { mu: 1.0, ..base }, LossWeights { mu: 3.0, ..base }),
            (LossWeights { lambda: 1.0, ..base }, LossWeights { lambda: 3.0, ..base }),
            (LossWeights { gamma: 3.0, ..base }, LossWeights { gamma: 7.0, ..base }),
        ] {
            let mid = f(base);
            assert_relative_eq!(f(w1) + f(w2), 2.0 * mid, max_relative = 1e-12);
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights { alpha: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossWeights { beta: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
