//! Post-hoc fits on flow traces: limit extrapolation, Łojasiewicz exponent,
//! convergence-rate branch, and convexity probing along generalized geodesics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::FlowTrace;
use crate::measures::{norm_sq, path_distance, w2, ParameterPath};
use crate::objective::Problem;

pub const DEFAULT_GAP_FLOOR: f64 = 1e-12;
pub const DEFAULT_TAIL_FRACTION: f64 = 0.5;
/// `α` within this distance of ½ selects the exponential branch.
pub const EXPONENTIAL_ALPHA_TOL: f64 = 0.05;

/// `(τ, J, slope)` columns of a trace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceSeries {
    pub tau: Vec<f64>,
    pub j: Vec<f64>,
    pub slope: Vec<f64>,
}

impl From<&FlowTrace> for TraceSeries {
    fn from(trace: &FlowTrace) -> Self {
        Self {
            tau: trace.records.iter().map(|r| r.tau).collect(),
            j: trace.records.iter().map(|r| r.j).collect(),
            slope: trace.records.iter().map(|r| r.slope).collect(),
        }
    }
}

impl TraceSeries {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    fn tail_start(&self, fraction: f64) -> usize {
        let keep = ((self.len() as f64) * fraction.clamp(0.0, 1.0)).ceil() as usize;
        self.len() - keep.min(self.len())
    }
}

/// Ordinary least squares `y ≈ a + b·x`; returns `(a, b, r²)`.
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = my - b * mx;
    let sst: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let sse: f64 = x.iter().zip(y).map(|(xv, yv)| (yv - a - b * xv).powi(2)).sum();
    let r2 = if sst > 0.0 { (1.0 - sse / sst).clamp(0.0, 1.0) } else { 1.0 };
    (a, b, r2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TailModel {
    Constant,
    Exponential,
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JStar {
    pub value: f64,
    pub model: TailModel,
    pub r2: f64,
}

/// Best `(J*, a, sse)` of `J ≈ J* + a·basis(τ)` for a fixed basis.
fn fit_offset(basis: &[f64], j: &[f64]) -> (f64, f64, f64) {
    let (offset, a, _) = linear_fit(basis, j);
    let sse = basis.iter().zip(j).map(|(b, v)| (v - offset - a * b).powi(2)).sum();
    (offset, a, sse)
}

/// Minimizes a unimodal-ish function of one log-scaled parameter: coarse
/// grid over `[lo, hi]`, then golden-section refinement.
fn minimize_log(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    const GRID: usize = 200;
    let (llo, lhi) = (lo.ln(), hi.ln());
    let at = |i: usize| llo + (lhi - llo) * i as f64 / GRID as f64;
    let best = (0..=GRID).min_by(|&a, &b| f(at(a).exp()).total_cmp(&f(at(b).exp()))).unwrap();
    let (mut a, mut b) = (at(best.saturating_sub(1)), at((best + 1).min(GRID)));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c.exp()) <= f(d.exp()) {
            b = d;
        } else {
            a = c;
        }
    }
    (0.5 * (a + b)).exp()
}

/// Extrapolated limit value of `J` from the trace tail, fitting both
/// `J* + a·e^{−bτ}` and `J* + a·τ^{−c}` and keeping the better one.
pub fn estimate_j_star(series: &TraceSeries, tail_fraction: f64) -> Result<JStar> {
    let start = series.tail_start(tail_fraction);
    let tau = &series.tau[start..];
    let j = &series.j[start..];
    if tau.len() < 5 {
        return Err(Error::FitFailure(format!("tail has {} points, need 5", tau.len())));
    }
    let last = j[j.len() - 1];
    let spread = j.iter().fold(0.0f64, |m, v| m.max((v - last).abs()));
    if spread <= 1e-15 * last.abs().max(f64::MIN_POSITIVE) || spread == 0.0 {
        return Ok(JStar { value: last, model: TailModel::Constant, r2: 1.0 });
    }
    let mean = j.iter().sum::<f64>() / j.len() as f64;
    let sst: f64 = j.iter().map(|v| (v - mean).powi(2)).sum();
    let t0 = tau[0];
    let span = tau[tau.len() - 1] - t0;
    if !(span > 0.0) {
        return Err(Error::FitFailure("tail spans no time".into()));
    }

    let exp_basis = |b: f64| tau.iter().map(|t| (-b * (t - t0)).exp()).collect::<Vec<_>>();
    let b = minimize_log(1e-3 / span, 1e3 / span, |b| fit_offset(&exp_basis(b), j).2);
    let (exp_star, _, exp_sse) = fit_offset(&exp_basis(b), j);

    let mut best = JStar { value: exp_star, model: TailModel::Exponential, r2: 1.0 - exp_sse / sst };
    if tau[0] > 0.0 {
        let pow_basis = |c: f64| tau.iter().map(|t| t.powf(-c)).collect::<Vec<_>>();
        let c = minimize_log(1e-2, 50.0, |c| fit_offset(&pow_basis(c), j).2);
        let (pow_star, _, pow_sse) = fit_offset(&pow_basis(c), j);
        let r2 = 1.0 - pow_sse / sst;
        if r2 > best.r2 {
            best = JStar { value: pow_star, model: TailModel::Power, r2 };
        }
    }
    if !best.value.is_finite() {
        return Err(Error::FitFailure("non-finite limit estimate".into()));
    }
    Ok(best)
}

/// Fitted Łojasiewicz pair: `(J − J*)^{1−α} ≤ C·slope` on the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LSFit {
    /// Clipped to `(0, ½]`.
    pub alpha: f64,
    pub alpha_raw: f64,
    #[serde(rename = "C")]
    pub c: f64,
    /// RMS residual of the log-log regression.
    pub residual: f64,
    pub gap_floor: f64,
    pub tau_window: (f64, f64),
    pub points: usize,
}

struct TailPoints {
    tau: Vec<f64>,
    gap: Vec<f64>,
    slope: Vec<f64>,
}

fn tail_points(series: &TraceSeries, j_star: f64, gap_floor: f64, tail_fraction: f64) -> TailPoints {
    let start = series.tail_start(tail_fraction);
    let mut out = TailPoints { tau: Vec::new(), gap: Vec::new(), slope: Vec::new() };
    for i in start..series.len() {
        let gap = series.j[i] - j_star;
        if gap > gap_floor && series.slope[i] > 0.0 {
            out.tau.push(series.tau[i]);
            out.gap.push(gap);
            out.slope.push(series.slope[i]);
        }
    }
    out
}

/// Regresses `log(J − J*)` on `log(slope)`; the fitted slope is `1/(1−α)`.
pub fn ls_fit(series: &TraceSeries, j_star: f64, gap_floor: f64, tail_fraction: f64) -> Result<LSFit> {
    let pts = tail_points(series, j_star, gap_floor, tail_fraction);
    if pts.tau.len() < 3 {
        return Err(Error::InsufficientData(format!("{} usable tail points", pts.tau.len())));
    }
    let lx: Vec<f64> = pts.slope.iter().map(|s| s.ln()).collect();
    let ly: Vec<f64> = pts.gap.iter().map(|g| g.ln()).collect();
    let (a, s, _) = linear_fit(&lx, &ly);
    let residual = (lx.iter().zip(&ly).map(|(x, y)| (y - a - s * x).powi(2)).sum::<f64>() / lx.len() as f64).sqrt();
    let alpha_raw = 1.0 - 1.0 / s;
    let alpha = if alpha_raw.is_finite() { alpha_raw.clamp(f64::EPSILON, 0.5) } else { f64::EPSILON };
    let c = pts.gap.iter().zip(&pts.slope).map(|(g, sl)| g.powf(1.0 - alpha) / sl).fold(0.0, f64::max);
    Ok(LSFit {
        alpha,
        alpha_raw,
        c,
        residual,
        gap_floor,
        tau_window: (pts.tau[0], pts.tau[pts.tau.len() - 1]),
        points: pts.tau.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RateBranch {
    Polynomial,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub branch: RateBranch,
    /// Exponential: fitted decay rate `r` of `J − J*`. Polynomial: fitted exponent.
    pub fitted_rate: f64,
    /// Exponential: `1/(2C²)` from the Łojasiewicz constant. Polynomial: `1/(1−2α)`.
    pub predicted_rate: f64,
    /// Exponential branch only: `Ĉ` with `r = 1/(2Ĉ²)`.
    pub c_hat: Option<f64>,
    #[serde(rename = "R2")]
    pub r2: f64,
    /// `(τ, observed gap, fitted gap)`.
    pub table: Vec<(f64, f64, f64)>,
}

/// Fits the decay law dictated by `α`: `log(J − J*)` linear in `τ` when
/// `α = ½`, linear in `log τ` otherwise.
pub fn rate_fit(series: &TraceSeries, j_star: f64, ls: &LSFit, tail_fraction: f64) -> Result<RateFit> {
    let pts = tail_points(series, j_star, ls.gap_floor, tail_fraction);
    let branch = if ls.alpha >= 0.5 - EXPONENTIAL_ALPHA_TOL { RateBranch::Exponential } else { RateBranch::Polynomial };
    let keep: Vec<usize> = match branch {
        RateBranch::Exponential => (0..pts.tau.len()).collect(),
        RateBranch::Polynomial => (0..pts.tau.len()).filter(|&i| pts.tau[i] > 0.0).collect(),
    };
    if keep.len() < 3 {
        return Err(Error::InsufficientData(format!("{} usable tail points", keep.len())));
    }
    let x: Vec<f64> = keep
        .iter()
        .map(|&i| match branch {
            RateBranch::Exponential => pts.tau[i],
            RateBranch::Polynomial => pts.tau[i].ln(),
        })
        .collect();
    let y: Vec<f64> = keep.iter().map(|&i| pts.gap[i].ln()).collect();
    let (a, b, r2) = linear_fit(&x, &y);
    let fitted_rate = -b;
    let (predicted_rate, c_hat) = match branch {
        RateBranch::Exponential => {
            (1.0 / (2.0 * ls.c * ls.c), (fitted_rate > 0.0).then(|| (1.0 / (2.0 * fitted_rate)).sqrt()))
        }
        RateBranch::Polynomial => (1.0 / (1.0 - 2.0 * ls.alpha), None),
    };
    let table = keep.iter().zip(&x).map(|(&i, xv)| (pts.tau[i], pts.gap[i], (a + b * xv).exp())).collect();
    Ok(RateFit { branch, fitted_rate, predicted_rate, c_hat, r2, table })
}

/// `W₂(η(τ), η*) ≤ (C/α)(J(τ) − J*)^α` on recorded snapshots, with the last
/// snapshot standing in for `η*`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceBoundCheck {
    /// `(τ, distance to last snapshot, bound)`.
    pub rows: Vec<(f64, f64, f64)>,
    pub violations: usize,
    pub limit_is_proxy: bool,
}

pub fn distance_bound_check(trace: &FlowTrace, j_star: f64, ls: &LSFit) -> Result<DistanceBoundCheck> {
    let limit = trace.final_path();
    let mut rows = Vec::new();
    let mut violations = 0;
    for snap in &trace.snapshots {
        let gap = (trace.records[snap.record].j - j_star).max(0.0);
        let dist = path_distance(&snap.path, limit)?;
        let bound = ls.c / ls.alpha * gap.powf(ls.alpha);
        if dist > bound * (1.0 + 1e-9) + 1e-12 {
            violations += 1;
        }
        rows.push((snap.tau, dist, bound));
    }
    Ok(DistanceBoundCheck { rows, violations, limit_is_proxy: true })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityReport {
    /// `W²_η`: squared distance between the endpoints along the base couplings.
    pub w2_sq: f64,
    /// `(τ, h(τ))` with `h = dJ/dτ` along the geodesic.
    pub h: Vec<(f64, f64)>,
    /// `max |Δh/Δτ|` over consecutive grid points.
    pub lip_h: f64,
    /// `lip_h / W²`; `None` for a degenerate geodesic.
    pub lip_ratio: Option<f64>,
    /// `min (Δh/Δτ) / W²`, the empirical convexity modulus.
    pub lambda_est: Option<f64>,
}

fn base_coupling(base: &ParameterPath, target: &ParameterPath, k: usize) -> Result<Vec<usize>> {
    let (_, plan) = w2(base.layer(k), target.layer(k))?;
    plan.as_permutation(base.particles())
        .ok_or_else(|| Error::ShapeMismatch("generalized geodesics need equal-size uniform layers".into()))
}

/// Builds `η_τ = ((1−τ)T₁ + τT₂)_# η⁰` from optimal maps `T_i: η⁰ → ηⁱ`
/// per layer and samples `h(τ) = dJ(η_τ)/dτ` on `grid`.
pub fn convexity_probe(
    problem: &Problem,
    path1: &ParameterPath,
    path2: &ParameterPath,
    path0: &ParameterPath,
    grid: &[f64],
) -> Result<ConvexityReport> {
    if !path0.same_shape(path1) || !path0.same_shape(path2) {
        return Err(Error::ShapeMismatch("convexity probe needs three paths of equal shape".into()));
    }
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("grid must be increasing with at least two points".into()));
    }
    let (l, n) = (path0.num_layers(), path0.particles());
    let mut start = path0.clone();
    let mut dir = path0.clone();
    let mut w2_sq = 0.0;
    for k in 0..l {
        let t1 = base_coupling(path0, path1, k)?;
        let t2 = base_coupling(path0, path2, k)?;
        let weights = path0.layer(k).weights().to_vec();
        for j in 0..n {
            let a = path1.particle(k, t1[j]).to_vec();
            let b = path2.particle(k, t2[j]).to_vec();
            let delta: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
            w2_sq += path0.dt(k) * weights[j] * norm_sq(&delta);
            start.particle_mut(k, j).copy_from_slice(&a);
            dir.particle_mut(k, j).copy_from_slice(&delta);
        }
    }
    let mut h = Vec::with_capacity(grid.len());
    for &tau in grid {
        let mut point = start.clone();
        point.map_particles(|k, j, theta| {
            theta.iter_mut().zip(dir.particle(k, j)).for_each(|(t, dv)| *t += tau * dv);
        })?;
        let (g, _) = problem.wasserstein_gradient(&point)?;
        let mut deriv = 0.0;
        for k in 0..l {
            let layer_sum: f64 = point
                .layer(k)
                .weights()
                .iter()
                .enumerate()
                .map(|(j, w)| w * g.get(k, j).iter().zip(dir.particle(k, j)).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            deriv += point.dt(k) * layer_sum;
        }
        h.push((tau, deriv));
    }
    let slopes: Vec<f64> = h.windows(2).map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0)).collect();
    let lip_h = slopes.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let degenerate = w2_sq <= 0.0;
    Ok(ConvexityReport {
        w2_sq,
        h,
        lip_h,
        lip_ratio: (!degenerate).then(|| lip_h / w2_sq),
        lambda_est: (!degenerate).then(|| slopes.iter().fold(f64::INFINITY, |m, s| m.min(*s)) / w2_sq),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(tau: Vec<f64>, j: impl Fn(f64) -> f64, slope: impl Fn(f64) -> f64) -> TraceSeries {
        TraceSeries { j: tau.iter().map(|&t| j(t)).collect(), slope: tau.iter().map(|&t| slope(t)).collect(), tau }
    }

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn j_star_of_constant_trace() {
        let s = series(grid(0.0, 5.0, 20), |_| 3.25, |_| 0.0);
        let est = estimate_j_star(&s, 0.5).unwrap();
        assert_eq!(est.value, 3.25);
        assert_eq!(est.model, TailModel::Constant);
    }

    #[test]
    fn j_star_of_exponential_trace() {
        let s = series(grid(0.0, 10.0, 100), |t| 1.0 + (-t).exp(), |t| (-t / 2.0).exp());
        let est = estimate_j_star(&s, 0.5).unwrap();
        assert!((est.value - 1.0).abs() < 1e-3, "{est:?}");
    }

    #[test]
    fn j_star_of_power_trace() {
        let s = series(grid(1.0, 10.0, 100), |t| 1.0 + t.powi(-2), |t| t.powf(-1.5));
        let est = estimate_j_star(&s, 0.5).unwrap();
        assert!((est.value - 1.0).abs() < 1e-2, "{est:?}");
    }

    #[test]
    fn j_star_needs_a_tail() {
        let s = series(grid(0.0, 1.0, 6), |t| t, |_| 1.0);
        assert!(matches!(estimate_j_star(&s, 0.5), Err(Error::FitFailure(_))));
    }

    #[test]
    fn ls_fit_half() {
        // gap = slope²
        let s = series(grid(0.0, 20.0, 200), |t| (-t).exp(), |t| (-t / 2.0).exp());
        let fit = ls_fit(&s, 0.0, DEFAULT_GAP_FLOOR, 1.0).unwrap();
        assert!((fit.alpha - 0.5).abs() < 0.01, "{fit:?}");
    }

    #[test]
    fn ls_fit_quarter() {
        // gap = τ⁻², slope = √2 τ^{-3/2}: gap^{3/4} ∝ slope.
        let s = series(grid(1.0, 100.0, 200), |t| t.powi(-2), |t| 2f64.sqrt() * t.powf(-1.5));
        let fit = ls_fit(&s, 0.0, DEFAULT_GAP_FLOOR, 1.0).unwrap();
        assert!((fit.alpha - 0.25).abs() < 0.02, "{fit:?}");
    }

    #[test]
    fn ls_constant_holds_on_every_point() {
        let s = series(grid(0.0, 10.0, 50), |t| (-t).exp() * (1.0 + 0.1 * (3.0 * t).sin()), |t| (-t / 2.0).exp());
        let fit = ls_fit(&s, 0.0, DEFAULT_GAP_FLOOR, 1.0).unwrap();
        for (g, sl) in s.j.iter().zip(&s.slope) {
            assert!(g.powf(1.0 - fit.alpha) <= fit.c * sl * (1.0 + 1e-12));
        }
    }

    #[test]
    fn ls_fit_needs_points() {
        let s = series(grid(0.0, 1.0, 10), |_| 0.0, |_| 1.0);
        assert!(matches!(ls_fit(&s, 0.0, DEFAULT_GAP_FLOOR, 1.0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn exponential_rate_recovered() {
        let r = 0.37;
        let s = series(grid(0.0, 30.0, 300), |t| 2.0 + 0.5 * (-r * t).exp(), |t| (0.5 * r).sqrt() * (-r * t / 2.0).exp());
        let fit = ls_fit(&s, 2.0, DEFAULT_GAP_FLOOR, 0.5).unwrap();
        let rate = rate_fit(&s, 2.0, &fit, 0.5).unwrap();
        assert_eq!(rate.branch, RateBranch::Exponential);
        assert!((rate.fitted_rate - r).abs() / r < 0.02);
        assert!(rate.r2 > 0.99);
    }

    #[test]
    fn polynomial_branch_exponent() {
        let s = series(grid(1.0, 100.0, 400), |t| t.powi(-2), |t| 2f64.sqrt() * t.powf(-1.5));
        let fit = ls_fit(&s, 0.0, DEFAULT_GAP_FLOOR, 1.0).unwrap();
        let rate = rate_fit(&s, 0.0, &fit, 1.0).unwrap();
        assert_eq!(rate.branch, RateBranch::Polynomial);
        assert!((rate.fitted_rate - 2.0).abs() / 2.0 < 0.05);
        assert!((rate.predicted_rate - 2.0).abs() / 2.0 < 0.05);
    }

    #[test]
    fn shift_equivariance_of_j_star() {
        let base = series(grid(0.0, 10.0, 100), |t| 0.3 + (-0.8 * t).exp(), |_| 1.0);
        let shifted = TraceSeries { j: base.j.iter().map(|v| v + 5.0).collect(), ..base.clone() };
        let a = estimate_j_star(&base, 0.5).unwrap().value;
        let b = estimate_j_star(&shifted, 0.5).unwrap().value;
        assert!((b - a - 5.0).abs() < 1e-6);
    }
}
