//! Observables and statistical machinery: empirical spectra, Sobolev norms,
//! the particle martingale and its quadratic variation, the interaction
//! term, entropy weight, Fisher information, rate fits, KS and conditional
//! characteristic-function tests, and the weak-form residual bookkeeping.

use num_complex::Complex64;

use crate::kernel::{apply_velocity_operator, Kernel, KernelSpec};
use crate::sigma::{DivFreeVectorField, Phase};
use crate::spectral::{Fft2, FourierField};
use crate::torus::TorusPoint;
use crate::{Result, VflError};

/// One scalar trigonometric term `amp * cos/sin(k.x)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScalarTrigTerm {
    pub k: [i64; 2],
    pub phase: Phase,
    pub amp: f64,
}

/// A real trigonometric polynomial test function with analytic derivatives.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TestFunction {
    terms: Vec<ScalarTrigTerm>,
}

impl TestFunction {
    pub fn new(terms: Vec<ScalarTrigTerm>) -> Self {
        TestFunction { terms }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(vec![ScalarTrigTerm {
            k: [0, 0],
            phase: Phase::Cos,
            amp: c,
        }])
    }

    /// Preset `cos x1`.
    pub fn cos_x1() -> Self {
        Self::new(vec![ScalarTrigTerm {
            k: [1, 0],
            phase: Phase::Cos,
            amp: 1.0,
        }])
    }

    /// Preset `cos x2`.
    pub fn cos_x2() -> Self {
        Self::new(vec![ScalarTrigTerm {
            k: [0, 1],
            phase: Phase::Cos,
            amp: 1.0,
        }])
    }

    /// Preset `cos(x1 + x2)`.
    pub fn cos_sum() -> Self {
        Self::new(vec![ScalarTrigTerm {
            k: [1, 1],
            phase: Phase::Cos,
            amp: 1.0,
        }])
    }

    pub fn terms(&self) -> &[ScalarTrigTerm] {
        &self.terms
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let arg = t.k[0] as f64 * x[0] + t.k[1] as f64 * x[1];
                match t.phase {
                    Phase::Cos => t.amp * arg.cos(),
                    Phase::Sin => t.amp * arg.sin(),
                }
            })
            .sum()
    }

    pub fn grad(&self, x: [f64; 2]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for t in &self.terms {
            let arg = t.k[0] as f64 * x[0] + t.k[1] as f64 * x[1];
            let d = match t.phase {
                Phase::Cos => -t.amp * arg.sin(),
                Phase::Sin => t.amp * arg.cos(),
            };
            g[0] += d * t.k[0] as f64;
            g[1] += d * t.k[1] as f64;
        }
        g
    }

    pub fn laplacian(&self, x: [f64; 2]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let arg = t.k[0] as f64 * x[0] + t.k[1] as f64 * x[1];
                let v = match t.phase {
                    Phase::Cos => t.amp * arg.cos(),
                    Phase::Sin => t.amp * arg.sin(),
                };
                -((t.k[0] * t.k[0] + t.k[1] * t.k[1]) as f64) * v
            })
            .sum()
    }

    pub fn hessian(&self, x: [f64; 2]) -> [[f64; 2]; 2] {
        let mut h = [[0.0; 2]; 2];
        for t in &self.terms {
            let arg = t.k[0] as f64 * x[0] + t.k[1] as f64 * x[1];
            let v = match t.phase {
                Phase::Cos => t.amp * arg.cos(),
                Phase::Sin => t.amp * arg.sin(),
            };
            for a in 0..2 {
                for b in 0..2 {
                    h[a][b] -= (t.k[a] * t.k[b]) as f64 * v;
                }
            }
        }
        h
    }

    /// `sigma . grad phi` at a point.
    pub fn sigma_grad(&self, x: [f64; 2], sigma: &DivFreeVectorField) -> f64 {
        let s = sigma.eval(x);
        let g = self.grad(x);
        s[0] * g[0] + s[1] * g[1]
    }

    /// `sigma . grad (sigma . grad phi)` at a point, fully analytic:
    /// grad(sigma.grad phi) = J_sigma^T grad phi + H_phi sigma.
    pub fn double_sigma_grad(&self, x: [f64; 2], sigma: &DivFreeVectorField) -> f64 {
        let s = sigma.eval(x);
        let j = sigma.jacobian(x);
        let g = self.grad(x);
        let h = self.hessian(x);
        let mut inner = [0.0; 2];
        for a in 0..2 {
            inner[a] = j[0][a] * g[0] + j[1][a] * g[1] + h[a][0] * s[0] + h[a][1] * s[1];
        }
        s[0] * inner[0] + s[1] * inner[1]
    }

    /// `<phi, f> = int phi f dx` against a spectral field, using the stored
    /// coefficients (`int f cos(k.x) = Re c_k`, `int f sin(k.x) = -Im c_k`).
    pub fn pair_with(&self, f: &FourierField) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let c = f.get(t.k);
                match t.phase {
                    Phase::Cos => t.amp * c.re,
                    Phase::Sin => -t.amp * c.im,
                }
            })
            .sum()
    }

    /// `<mu_N, phi> = (1/N) sum phi(X_i)`.
    pub fn mean_over(&self, positions: &[TorusPoint]) -> f64 {
        positions
            .iter()
            .map(|p| self.eval(p.coords()))
            .sum::<f64>()
            / positions.len() as f64
    }
}

/// Exact empirical-measure coefficients `<mu_N, e_k> = (1/N) sum e^{-ik.X_j}`
/// over the box `|k|_inf <= k_stat`.
#[derive(Debug, Clone)]
pub struct EmpiricalSpectrum {
    k_stat: i64,
    n: usize,
    time: f64,
    coeffs: Vec<Complex64>,
}

pub fn empirical_spectrum(
    positions: &[TorusPoint],
    k_stat: i64,
    time: f64,
) -> Result<EmpiricalSpectrum> {
    if k_stat < 1 {
        return Err(VflError::InvalidInput(format!("k_stat must be >= 1, got {k_stat}")));
    }
    if positions.is_empty() {
        return Err(VflError::InvalidInput("empty configuration".into()));
    }
    let side = (2 * k_stat + 1) as usize;
    let mut coeffs = vec![Complex64::default(); side * side];
    for p in positions {
        let [x1, x2] = p.coords();
        let e1 = Complex64::from_polar(1.0, -x1);
        let e2 = Complex64::from_polar(1.0, -x2);
        // p1 tracks e^{-i k1 x1} from k1 = -k_stat
        let mut p1 = Complex64::from_polar(1.0, k_stat as f64 * x1);
        for i1 in 0..side {
            let mut q = p1 * Complex64::from_polar(1.0, k_stat as f64 * x2);
            for i2 in 0..side {
                coeffs[i1 * side + i2] += q;
                q *= e2;
            }
            p1 *= e1;
        }
    }
    let inv_n = 1.0 / positions.len() as f64;
    for c in &mut coeffs {
        *c *= inv_n;
    }
    // pin the mass coefficient exactly
    let origin = (k_stat as usize) * side + k_stat as usize;
    coeffs[origin] = Complex64::new(1.0, 0.0);
    Ok(EmpiricalSpectrum {
        k_stat,
        n: positions.len(),
        time,
        coeffs,
    })
}

impl EmpiricalSpectrum {
    pub fn k_stat(&self) -> i64 {
        self.k_stat
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Coefficient at wavevector k; zero outside the stored box.
    pub fn get(&self, k: [i64; 2]) -> Complex64 {
        if k[0].abs() > self.k_stat || k[1].abs() > self.k_stat {
            return Complex64::default();
        }
        let side = (2 * self.k_stat + 1) as usize;
        let i1 = (k[0] + self.k_stat) as usize;
        let i2 = (k[1] + self.k_stat) as usize;
        self.coeffs[i1 * side + i2]
    }

    /// Fluctuation coefficient `sqrt(N) (<mu_N, e_k> - <v, e_k>)`.
    pub fn fluctuation_coeff(&self, v: &FourierField, k: [i64; 2]) -> Complex64 {
        (self.get(k) - v.get(k)) * (self.n as f64).sqrt()
    }
}

/// Truncated squared Sobolev norm `sum_{|k|_inf <= k_trunc} (1+|k|^2)^alpha
/// |c_k|^2` of an arbitrary coefficient map. For alpha < -1 the truncation
/// tail is ~ C k_trunc^{2+2alpha} when |c_k| is uniformly bounded.
pub fn sobolev_norm_sq<F>(coeffs: F, alpha: f64, k_trunc: i64) -> f64
where
    F: Fn([i64; 2]) -> Complex64,
{
    let mut total = 0.0;
    for k1 in -k_trunc..=k_trunc {
        for k2 in -k_trunc..=k_trunc {
            let w = (1.0 + (k1 * k1 + k2 * k2) as f64).powf(alpha);
            total += w * coeffs([k1, k2]).norm_sqr();
        }
    }
    total
}

/// Squared H^alpha distance between an empirical spectrum and a density.
pub fn error_sobolev_sq(spec: &EmpiricalSpectrum, v: &FourierField, alpha: f64, k_trunc: i64) -> f64 {
    sobolev_norm_sq(|k| spec.get(k) - v.get(k), alpha, k_trunc)
}

/// A named observable time series with run metadata.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PairingSeries {
    pub name: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    pub ensemble_id: u64,
    pub w_path_id: u64,
}

impl PairingSeries {
    pub fn new(name: &str, n: usize, seed: u64, ensemble_id: u64, w_path_id: u64) -> Self {
        PairingSeries {
            name: name.to_string(),
            times: Vec::new(),
            values: Vec::new(),
            n,
            seed,
            ensemble_id,
            w_path_id,
        }
    }

    pub fn push(&mut self, time: f64, value: f64) -> Result<()> {
        if let Some(&last) = self.times.last() {
            if time <= last {
                return Err(VflError::InvalidInput(format!(
                    "times must be strictly increasing: {last} then {time}"
                )));
            }
        }
        self.times.push(time);
        self.values.push(value);
        Ok(())
    }
}

/// Running particle martingale `<M^N_t, phi>` and its quadratic variation.
#[derive(Debug, Clone, Default)]
pub struct MartingaleAccumulator {
    pub value: f64,
    pub qv: f64,
}

impl MartingaleAccumulator {
    /// Add one step: value += (sqrt(2)/sqrt(N)) sum grad phi(X_i) . dB_i,
    /// QV += (2/N) sum |grad phi(X_i)|^2 dt. The positions must be the ones
    /// the increments `db` acted on.
    pub fn accumulate(
        &mut self,
        positions: &[TorusPoint],
        db: &[[f64; 2]],
        dt: f64,
        phi: &TestFunction,
    ) -> Result<()> {
        if positions.len() != db.len() {
            return Err(VflError::InvalidInput(format!(
                "positions ({}) and dB ({}) length mismatch",
                positions.len(),
                db.len()
            )));
        }
        let n = positions.len() as f64;
        let mut inc = 0.0;
        let mut qv_inc = 0.0;
        for (p, d) in positions.iter().zip(db) {
            let g = phi.grad(p.coords());
            inc += g[0] * d[0] + g[1] * d[1];
            qv_inc += g[0] * g[0] + g[1] * g[1];
        }
        self.value += std::f64::consts::SQRT_2 / n.sqrt() * inc;
        self.qv += 2.0 / n * qv_inc * dt;
        Ok(())
    }
}

/// Continuum half of the interaction term: `<grad phi, v K*v>` by spectral
/// synthesis and grid quadrature.
pub fn continuum_interaction(v: &FourierField, fft: &Fft2, phi: &TestFunction) -> f64 {
    let grid = v.grid();
    let u = apply_velocity_operator(v);
    let vg = fft.field_to_grid(v);
    let u1 = fft.field_to_grid(&u[0]);
    let u2 = fft.field_to_grid(&u[1]);
    let m = grid.modes_per_axis();
    let mut acc = 0.0;
    for i1 in 0..m {
        for i2 in 0..m {
            let x = [grid.node(i1), grid.node(i2)];
            let g = phi.grad(x);
            let idx = i1 * m + i2;
            acc += (g[0] * u1[idx] + g[1] * u2[idx]) * vg[idx];
        }
    }
    acc * grid.cell_area()
}

/// Interaction term K^N_t(phi) = sqrt(N)<grad phi, K*mu_N mu_N>
/// - sqrt(N)<grad phi, v K*v>, with the particle diagonal excluded
/// (matching the dynamics; K_eps(0) = 0 makes the choice harmless).
pub fn interaction_term(
    positions: &[TorusPoint],
    v: &FourierField,
    fft: &Fft2,
    phi: &TestFunction,
    kernel: &Kernel,
) -> Result<f64> {
    if matches!(kernel.spec(), KernelSpec::FreeSpacePlusCorrection { .. }) {
        return Err(VflError::InvalidInput(
            "interaction term requires a regularized or spectral kernel".into(),
        ));
    }
    let n = positions.len();
    let sqrt_n = (n as f64).sqrt();
    let mut particle = 0.0;
    for (i, xi) in positions.iter().enumerate() {
        let g = phi.grad(xi.coords());
        let ci = xi.coords();
        for (j, xj) in positions.iter().enumerate() {
            if i == j {
                continue;
            }
            let cj = xj.coords();
            let k = kernel.eval_finite(crate::torus::wrap_disp([ci[0] - cj[0], ci[1] - cj[1]]));
            particle += g[0] * k[0] + g[1] * k[1];
        }
    }
    particle /= sqrt_n * n as f64;
    Ok(particle - sqrt_n * continuum_interaction(v, fft, phi))
}

/// Entropy weight R_t = (1/m) exp(-m int_0^t ||v_s||^2_{H^4} ds) by
/// trapezoidal quadrature of the logged norm series.
pub fn entropy_weight(times: &[f64], norms_sq: &[f64], m: f64, t: f64) -> Result<f64> {
    if m <= 1.0 {
        return Err(VflError::InvalidInput(format!("m must be > 1, got {m}")));
    }
    if times.len() != norms_sq.len() || times.len() < 2 {
        return Err(VflError::InvalidInput("norm series too short or mismatched".into()));
    }
    if t < times[0] || t > *times.last().unwrap() + 1e-12 {
        return Err(VflError::InvalidInput(format!("t = {t} outside the logged range")));
    }
    let mut integral = 0.0;
    for i in 1..times.len() {
        let (t0, t1) = (times[i - 1], times[i]);
        if t0 >= t {
            break;
        }
        let hi = t1.min(t);
        // linear interpolation inside a partially covered interval
        let f1 = if hi < t1 {
            let lam = (hi - t0) / (t1 - t0);
            norms_sq[i - 1] * (1.0 - lam) + norms_sq[i] * lam
        } else {
            norms_sq[i]
        };
        integral += 0.5 * (norms_sq[i - 1] + f1) * (hi - t0);
    }
    Ok((-m * integral).exp() / m)
}

/// Fisher information I(v) = int |grad v|^2 / v dx with a spectral gradient
/// and grid quadrature. Errors on nonpositive grid values.
pub fn fisher_information(v: &FourierField, fft: &Fft2) -> Result<f64> {
    let vg = fft.field_to_grid(v);
    let d1 = fft.field_to_grid(&v.derivative(0));
    let d2 = fft.field_to_grid(&v.derivative(1));
    let mut acc = 0.0;
    for i in 0..vg.len() {
        if vg[i] <= 0.0 {
            return Err(VflError::Domain(format!(
                "Fisher information needs a positive density; grid value {}",
                vg[i]
            )));
        }
        acc += (d1[i] * d1[i] + d2[i] * d2[i]) / vg[i];
    }
    Ok(acc * v.grid().cell_area())
}

/// Ordinary least squares on (log N, log value).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RateFitResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Half-width of the 95% confidence interval for the slope.
    pub slope_ci_half_width: f64,
}

/// Two-sided 97.5% Student-t quantiles for df = 1..=30; 1.96 beyond.
fn t_quantile_975(df: usize) -> f64 {
    const TABLE: [f64; 30] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179,
        2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064,
        2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
    ];
    if df == 0 {
        f64::INFINITY
    } else if df <= 30 {
        TABLE[df - 1]
    } else {
        1.96
    }
}

/// Fit `value ~ C N^slope` by OLS on logs.
pub fn rate_fit(pairs: &[(f64, f64)]) -> Result<RateFitResult> {
    if pairs.len() < 3 {
        return Err(VflError::InvalidInput(format!(
            "rate fit needs >= 3 points, got {}",
            pairs.len()
        )));
    }
    let mut xs = Vec::with_capacity(pairs.len());
    let mut ys = Vec::with_capacity(pairs.len());
    for &(n, v) in pairs {
        if n <= 0.0 || v <= 0.0 {
            return Err(VflError::Domain(format!(
                "rate fit needs positive (N, value); got ({n}, {v})"
            )));
        }
        xs.push(n.ln());
        ys.push(v.ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(VflError::InvalidInput("all N values identical".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - ssr / syy).clamp(0.0, 1.0) };
    let df = xs.len() - 2;
    let se = if df == 0 {
        0.0
    } else {
        (ssr / df as f64 / sxx).sqrt()
    };
    Ok(RateFitResult {
        slope,
        intercept,
        r_squared,
        slope_ci_half_width: t_quantile_975(df) * se,
    })
}

/// Standard normal CDF.
fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Asymptotic Kolmogorov distribution tail Q(lambda), summed far past the
/// required 10 terms.
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 1e-8 {
        return 1.0;
    }
    let mut p = 0.0;
    for j in 1..=100 {
        let term = 2.0 * (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
        p += if j % 2 == 1 { term } else { -term };
    }
    p.clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test against N(mean, variance). Returns
/// (statistic, asymptotic p-value).
pub fn ks_normal_test(samples: &[f64], mean: f64, variance: f64) -> Result<(f64, f64)> {
    if !(variance > 0.0) {
        return Err(VflError::Domain(format!(
            "KS test needs positive variance, got {variance}"
        )));
    }
    if samples.len() < 50 {
        return Err(VflError::InvalidInput(format!(
            "KS test needs >= 50 samples, got {}",
            samples.len()
        )));
    }
    let sd = variance.sqrt();
    let mut z: Vec<f64> = samples.iter().map(|&x| (x - mean) / sd).collect();
    z.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = z.len() as f64;
    let mut d = 0.0f64;
    for (i, &zi) in z.iter().enumerate() {
        let cdf = normal_cdf(zi);
        d = d
            .max(((i + 1) as f64 / n - cdf).abs())
            .max((cdf - i as f64 / n).abs());
    }
    let sqrt_n = n.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    Ok((d, kolmogorov_tail(lambda)))
}

/// One grid point of a conditional characteristic-function comparison.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CharComparePoint {
    pub s: f64,
    pub empirical_re: f64,
    pub empirical_im: f64,
    pub target: f64,
    pub se_re: f64,
    pub se_im: f64,
}

/// Compare the empirical characteristic function of conditional samples of
/// <M_t, phi> (all under one persisted W path) against the target
/// exp(-s^2 int <|grad phi|^2, v_s> ds). Standard errors are jackknife.
pub fn conditional_char_compare(
    samples: &[f64],
    w_path_ids: &[u64],
    v_norm_integral: f64,
    s_grid: &[f64],
) -> Result<Vec<CharComparePoint>> {
    if samples.len() < 500 {
        return Err(VflError::InvalidInput(format!(
            "conditional comparison needs >= 500 samples, got {}",
            samples.len()
        )));
    }
    if w_path_ids.len() != samples.len() {
        return Err(VflError::InvalidInput("w_path_ids length mismatch".into()));
    }
    let first = w_path_ids[0];
    if w_path_ids.iter().any(|&id| id != first) {
        return Err(VflError::InvalidInput(
            "samples conditioned on mixed W paths".into(),
        ));
    }
    let n = samples.len() as f64;
    let mut out = Vec::with_capacity(s_grid.len());
    for &s in s_grid {
        let mut sum = Complex64::default();
        let points: Vec<Complex64> = samples
            .iter()
            .map(|&x| {
                let p = Complex64::from_polar(1.0, s * x);
                sum += p;
                p
            })
            .collect();
        let mean = sum / n;
        // jackknife over leave-one-out means
        let mut ss_re = 0.0;
        let mut ss_im = 0.0;
        for p in &points {
            let loo = (sum - p) / (n - 1.0);
            ss_re += (loo.re - mean.re).powi(2);
            ss_im += (loo.im - mean.im).powi(2);
        }
        let factor = (n - 1.0) / n;
        out.push(CharComparePoint {
            s,
            empirical_re: mean.re,
            empirical_im: mean.im,
            target: (-s * s * v_norm_integral).exp(),
            se_re: (factor * ss_re).sqrt(),
            se_im: (factor * ss_im).sqrt(),
        });
    }
    Ok(out)
}

/// Logged terms of the discrete weak-form identity for one test function:
/// <phi, eta_t> = <phi, eta_0> + int <Delta phi, eta> + 1/2 int
/// <sigma.grad(sigma.grad phi), eta> + int K^N(phi) + <M^N_t, phi>
/// + int <sigma.grad phi, eta> dW.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct WeakFormLog {
    pub dt: f64,
    /// `<phi, eta>` at steps 0..=n.
    pub eta: Vec<f64>,
    /// `<Delta phi, eta>` at the left endpoints, length n.
    pub laplace: Vec<f64>,
    /// `<sigma.grad(sigma.grad phi), eta>` at the left endpoints.
    pub sigma2: Vec<f64>,
    /// Interaction term K^N(phi) at the left endpoints.
    pub interaction: Vec<f64>,
    /// `<M^N_t, phi>` at steps 0..=n (starts at 0).
    pub martingale: Vec<f64>,
    /// `<sigma.grad phi, eta>` at the left endpoints.
    pub sigma1: Vec<f64>,
    /// Common-noise increments, length n.
    pub dw: Vec<f64>,
}

/// Residual of the weak-form identity at every logged time; O(dt) for a
/// trajectory produced by the Euler scheme.
pub fn weak_form_residual(log: &WeakFormLog) -> Result<Vec<f64>> {
    let n = log.dw.len();
    if log.eta.len() != n + 1
        || log.martingale.len() != n + 1
        || log.laplace.len() != n
        || log.sigma2.len() != n
        || log.interaction.len() != n
        || log.sigma1.len() != n
    {
        return Err(VflError::InvalidInput(
            "weak-form series lengths do not share one time grid".into(),
        ));
    }
    let mut out = Vec::with_capacity(n + 1);
    let mut rhs = log.eta[0];
    out.push(0.0);
    for s in 0..n {
        rhs += (log.laplace[s] + 0.5 * log.sigma2[s] + log.interaction[s]) * log.dt
            + (log.martingale[s + 1] - log.martingale[s])
            + log.sigma1[s] * log.dw[s];
        out.push(log.eta[s + 1] - rhs);
    }
    Ok(out)
}
