//! Closed-form vector fields `v(x, θ)` and the squared-error loss, with their
//! first derivatives and probe-based growth certificates.
//!
//! Parameter layouts (row-major `W`):
//! - `LinearTanh`: `θ = (W, b)`, `v = W·tanh(x) + b`, `m = d² + d`.
//! - `GatedTanh`: `θ = (a, W, b)`, `v = a ⊙ tanh(Wx + b)`, `m = d + d² + d`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::norm_sq;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearTanh,
    GatedTanh,
}

/// `|v(x,θ)| ≤ C|θ|^p (1+|x|)` and `|v(x,θ) − v(x',θ)| ≤ C|θ|^q |x − x'|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthCertificate {
    pub c: f64,
    pub p: f64,
    /// Exponent `q` of the Lipschitz clause.
    pub lipschitz_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldModel {
    kind: ModelKind,
    d: usize,
    certificate: GrowthCertificate,
}

impl VectorFieldModel {
    pub fn new(kind: ModelKind, d: usize) -> Self {
        let certificate = match kind {
            // |W tanh x + b| ≤ (√d + 1)|θ| and tanh is 1-Lipschitz.
            ModelKind::LinearTanh => GrowthCertificate { c: 2.0 * (d as f64).sqrt(), p: 1.0, lipschitz_p: 1.0 },
            // |a ⊙ tanh(·)| ≤ |a|; the x-Lipschitz constant is |a|_∞|W| ≤ |θ|²/2.
            ModelKind::GatedTanh => GrowthCertificate { c: 1.0, p: 1.0, lipschitz_p: 2.0 },
        };
        Self { kind, d, certificate }
    }

    pub fn linear_tanh(d: usize) -> Self {
        Self::new(ModelKind::LinearTanh, d)
    }

    pub fn gated_tanh(d: usize) -> Self {
        Self::new(ModelKind::GatedTanh, d)
    }

    pub fn with_certificate(mut self, certificate: GrowthCertificate) -> Self {
        self.certificate = certificate;
        self
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// State dimension.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Parameter dimension.
    pub fn m(&self) -> usize {
        match self.kind {
            ModelKind::LinearTanh => self.d * self.d + self.d,
            ModelKind::GatedTanh => self.d * self.d + 2 * self.d,
        }
    }

    pub fn certificate(&self) -> GrowthCertificate {
        self.certificate
    }

    /// True when `∂²v/∂θ² ≡ 0`, so the second-derivative constant is zero.
    pub fn is_theta_linear(&self) -> bool {
        self.kind == ModelKind::LinearTanh
    }

    fn check(&self, x: &[f64], theta: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: x.len() });
        }
        if theta.len() != self.m() {
            return Err(Error::DimensionMismatch { expected: self.m(), got: theta.len() });
        }
        Ok(())
    }

    pub fn eval_v(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.check(x, theta)?;
        let mut out = vec![0.0; self.d];
        self.add_v(x, theta, 1.0, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("v(x, θ)".into()));
        }
        Ok(out)
    }

    /// `∂ₓv`, a `d × d` matrix.
    pub fn jac_v_x(&self, x: &[f64], theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x, theta)?;
        let mut buf = vec![0.0; self.d * self.d];
        self.add_jac_x(x, theta, 1.0, &mut buf);
        Ok(DMatrix::from_row_slice(self.d, self.d, &buf))
    }

    /// `∂_θv`, a `d × m` matrix.
    pub fn jac_v_theta(&self, x: &[f64], theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x, theta)?;
        let (d, m) = (self.d, self.m());
        let mut jac = DMatrix::zeros(d, m);
        let mut e = vec![0.0; d];
        let mut row = vec![0.0; m];
        for i in 0..d {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[i] = 1.0;
            row.iter_mut().for_each(|v| *v = 0.0);
            self.add_vjp_theta(x, theta, &e, 1.0, &mut row);
            for (k, r) in row.iter().enumerate() {
                jac[(i, k)] = *r;
            }
        }
        Ok(jac)
    }

    /// `out += scale · v(x, θ)`.
    pub(crate) fn add_v(&self, x: &[f64], theta: &[f64], scale: f64, out: &mut [f64]) {
        let d = self.d;
        match self.kind {
            ModelKind::LinearTanh => {
                let (w, b) = theta.split_at(d * d);
                for i in 0..d {
                    let row = &w[i * d..(i + 1) * d];
                    let s: f64 = row.iter().zip(x).map(|(wik, xk)| wik * xk.tanh()).sum();
                    out[i] += scale * (s + b[i]);
                }
            }
            ModelKind::GatedTanh => {
                let (a, rest) = theta.split_at(d);
                let (w, b) = rest.split_at(d * d);
                for i in 0..d {
                    let z = pre_activation(w, b, x, i, d);
                    out[i] += scale * a[i] * z.tanh();
                }
            }
        }
    }

    /// `out += scale · ∂ₓv(x, θ)` (row-major `d × d`).
    pub(crate) fn add_jac_x(&self, x: &[f64], theta: &[f64], scale: f64, out: &mut [f64]) {
        let d = self.d;
        match self.kind {
            ModelKind::LinearTanh => {
                let w = &theta[..d * d];
                for k in 0..d {
                    let s = sech2(x[k]);
                    for i in 0..d {
                        out[i * d + k] += scale * w[i * d + k] * s;
                    }
                }
            }
            ModelKind::GatedTanh => {
                let (a, rest) = theta.split_at(d);
                let (w, b) = rest.split_at(d * d);
                for i in 0..d {
                    let g = scale * a[i] * sech2(pre_activation(w, b, x, i, d));
                    for k in 0..d {
                        out[i * d + k] += g * w[i * d + k];
                    }
                }
            }
        }
    }

    /// `out += scale · (∂ₓv)ᵀ λ`.
    pub(crate) fn add_vjp_x(&self, x: &[f64], theta: &[f64], lam: &[f64], scale: f64, out: &mut [f64]) {
        let d = self.d;
        match self.kind {
            ModelKind::LinearTanh => {
                let w = &theta[..d * d];
                for k in 0..d {
                    let s: f64 = (0..d).map(|i| w[i * d + k] * lam[i]).sum();
                    out[k] += scale * s * sech2(x[k]);
                }
            }
            ModelKind::GatedTanh => {
                let (a, rest) = theta.split_at(d);
                let (w, b) = rest.split_at(d * d);
                for i in 0..d {
                    let g = scale * lam[i] * a[i] * sech2(pre_activation(w, b, x, i, d));
                    for k in 0..d {
                        out[k] += g * w[i * d + k];
                    }
                }
            }
        }
    }

    /// `out += scale · (∂_θv)ᵀ λ`, an `m`-vector.
    pub(crate) fn add_vjp_theta(&self, x: &[f64], theta: &[f64], lam: &[f64], scale: f64, out: &mut [f64]) {
        let d = self.d;
        match self.kind {
            ModelKind::LinearTanh => {
                let (gw, gb) = out.split_at_mut(d * d);
                for i in 0..d {
                    let li = scale * lam[i];
                    for k in 0..d {
                        gw[i * d + k] += li * x[k].tanh();
                    }
                    gb[i] += li;
                }
            }
            ModelKind::GatedTanh => {
                let (a, rest) = theta.split_at(d);
                let (w, b) = rest.split_at(d * d);
                let (ga, grest) = out.split_at_mut(d);
                let (gw, gb) = grest.split_at_mut(d * d);
                for i in 0..d {
                    let z = pre_activation(w, b, x, i, d);
                    let li = scale * lam[i];
                    ga[i] += li * z.tanh();
                    let g = li * a[i] * sech2(z);
                    for k in 0..d {
                        gw[i * d + k] += g * x[k];
                    }
                    gb[i] += g;
                }
            }
        }
    }
}

fn pre_activation(w: &[f64], b: &[f64], x: &[f64], i: usize, d: usize) -> f64 {
    w[i * d..(i + 1) * d].iter().zip(x).map(|(wik, xk)| wik * xk).sum::<f64>() + b[i]
}

fn sech2(z: f64) -> f64 {
    let t = z.tanh();
    1.0 - t * t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SquaredError,
}

/// `ℓ(x, y) = |x − y|²` together with a growth bound `ℓ ≤ A + B|x|²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossModel {
    pub kind: LossKind,
    pub a: f64,
    pub b: f64,
}

impl LossModel {
    /// Growth constants valid for labels in the ball of radius `label_radius`.
    pub fn squared_error(label_radius: f64) -> Self {
        Self { kind: LossKind::SquaredError, a: 2.0 * label_radius * label_radius, b: 2.0 }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn grad(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        x.iter().zip(y).map(|(a, b)| 2.0 * (a - b)).collect()
    }

    /// Checks `0 ≤ ℓ(x,y) ≤ A + B|x|²` on the given probes.
    pub fn certify<'a>(&self, probes: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Result<()> {
        for (x, y) in probes {
            let l = self.eval(x, y);
            let bound = self.a + self.b * norm_sq(x);
            if l < 0.0 || l > bound * (1.0 + 1e-12) {
                return Err(Error::CertificateViolated { observed: l, certified: bound });
            }
        }
        Ok(())
    }
}

/// `∇ₓℓ(x, y)`.
pub fn grad_loss(loss: &LossModel, x: &[f64], y: &[f64]) -> Vec<f64> {
    loss.grad(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthReport {
    pub probes: usize,
    /// `max |v| / (|θ|^p (1+|x|))`.
    pub max_growth_ratio: f64,
    /// `max |v(x) − v(x')| / (|θ|^q |x − x'|)`.
    pub max_lipschitz_ratio: f64,
}

/// One probe: `(x, x', θ)`.
pub type GrowthProbe = (Vec<f64>, Vec<f64>, Vec<f64>);

fn sample_ball(rng: &mut impl Rng, dim: usize, radius: f64) -> Vec<f64> {
    // Uniform in the ball: Gaussian direction, radius ∝ U^{1/dim}.
    let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = norm_sq(&dir).sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    dir.iter().map(|v| v * r / norm).collect()
}

/// Samples `probe_count` triples `(x, x', θ)` uniformly from balls of the
/// given radius and checks the model's growth certificate on them.
pub fn certify_growth(model: &VectorFieldModel, probe_count: usize, radius: f64, seed: u64) -> Result<GrowthReport> {
    if probe_count == 0 {
        return Err(Error::InvalidArgument("probe_count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<GrowthProbe> = (0..probe_count)
        .map(|_| {
            (
                sample_ball(&mut rng, model.d(), radius),
                sample_ball(&mut rng, model.d(), radius),
                sample_ball(&mut rng, model.m(), radius),
            )
        })
        .collect();
    certify_on(model, &probes)
}

pub fn certify_on(model: &VectorFieldModel, probes: &[GrowthProbe]) -> Result<GrowthReport> {
    let cert = model.certificate();
    let ratio = |num: f64, den: f64| if num == 0.0 { 0.0 } else { num / den };
    let mut growth = 0.0f64;
    let mut lip = 0.0f64;
    for (x, x2, theta) in probes {
        let v = model.eval_v(x, theta)?;
        let v2 = model.eval_v(x2, theta)?;
        let tn = norm_sq(theta).sqrt();
        growth = growth.max(ratio(norm_sq(&v).sqrt(), tn.powf(cert.p) * (1.0 + norm_sq(x).sqrt())));
        let dv: Vec<f64> = v.iter().zip(&v2).map(|(a, b)| a - b).collect();
        let dx: Vec<f64> = x.iter().zip(x2).map(|(a, b)| a - b).collect();
        lip = lip.max(ratio(norm_sq(&dv).sqrt(), tn.powf(cert.lipschitz_p) * norm_sq(&dx).sqrt()));
    }
    let worst = growth.max(lip);
    if worst > cert.c {
        return Err(Error::CertificateViolated { observed: worst, certified: cert.c });
    }
    Ok(GrowthReport { probes: probes.len(), max_growth_ratio: growth, max_lipschitz_ratio: lip })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimensions() {
        assert_eq!(VectorFieldModel::linear_tanh(3).m(), 12);
        assert_eq!(VectorFieldModel::gated_tanh(3).m(), 15);
        let m = VectorFieldModel::linear_tanh(2);
        assert!(matches!(m.eval_v(&[0.0], &[0.0; 6]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(m.eval_v(&[0.0, 0.0], &[0.0; 5]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn linear_tanh_zero_theta_is_zero() {
        let m = VectorFieldModel::linear_tanh(2);
        assert_eq!(m.eval_v(&[3.0, -1.0], &[0.0; 6]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(m.jac_v_x(&[3.0, -1.0], &[0.0; 6]).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn linear_tanh_scalar_case() {
        let m = VectorFieldModel::linear_tanh(1);
        assert_eq!(m.eval_v(&[0.0], &[2.0, 1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn linear_tanh_bias_block_is_identity() {
        let m = VectorFieldModel::linear_tanh(3);
        let theta: Vec<f64> = (0..12).map(|i| 0.1 * i as f64 - 0.4).collect();
        let jac = m.jac_v_theta(&[0.3, -0.2, 1.1], &theta).unwrap();
        let bias = jac.view((0, 9), (3, 3));
        assert_eq!(bias, DMatrix::<f64>::identity(3, 3));
    }

    #[test]
    fn linear_tanh_jac_x_formula() {
        let m = VectorFieldModel::linear_tanh(2);
        let theta = [1.0, -2.0, 0.5, 3.0, 0.1, 0.2];
        let x = [0.4, -0.7];
        let jac = m.jac_v_x(&x, &theta).unwrap();
        for i in 0..2 {
            for k in 0..2 {
                let expected = theta[i * 2 + k] * (1.0 - x[k].tanh().powi(2));
                assert!((jac[(i, k)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn squared_error_gradient() {
        let loss = LossModel::squared_error(1.0);
        assert_eq!(grad_loss(&loss, &[3.0], &[1.0]), vec![4.0]);
        assert_eq!(grad_loss(&loss, &[0.5, 0.5], &[0.5, 0.5]), vec![0.0, 0.0]);
    }

    #[test]
    fn linear_tanh_certificate_passes() {
        for d in [1, 2, 4] {
            let report = certify_growth(&VectorFieldModel::linear_tanh(d), 2000, 10.0, 7).unwrap();
            assert!(report.max_growth_ratio <= 2.0 * (d as f64).sqrt());
            assert!(report.max_growth_ratio > 0.0);
        }
    }

    #[test]
    fn gated_tanh_certificate_passes() {
        for d in [1, 3] {
            certify_growth(&VectorFieldModel::gated_tanh(d), 2000, 10.0, 11).unwrap();
        }
    }

    #[test]
    fn zero_parameters_give_zero_ratio() {
        let model = VectorFieldModel::linear_tanh(2);
        let probes: Vec<GrowthProbe> =
            (0..10).map(|i| (vec![i as f64, 1.0], vec![-1.0, i as f64], vec![0.0; 6])).collect();
        let report = certify_on(&model, &probes).unwrap();
        assert_eq!(report.max_growth_ratio, 0.0);
        assert_eq!(report.max_lipschitz_ratio, 0.0);
    }

    #[test]
    fn wrong_certificate_is_rejected() {
        let model = VectorFieldModel::linear_tanh(2).with_certificate(GrowthCertificate {
            c: 1e-9,
            p: 1.0,
            lipschitz_p: 1.0,
        });
        assert!(matches!(certify_growth(&model, 10, 10.0, 0), Err(Error::CertificateViolated { .. })));
    }

    #[test]
    fn loss_growth_bound() {
        let loss = LossModel::squared_error(2.0);
        let probes = [([3.0, -1.0], [1.5, 1.0]), ([0.0, 0.0], [2.0, 0.0]), ([-5.0, 4.0], [0.0, -2.0])];
        loss.certify(probes.iter().map(|(x, y)| (&x[..], &y[..]))).unwrap();
    }
}
