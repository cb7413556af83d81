//! Pseudo-spectral solvers for the mean-field SPDE and the limiting
//! fluctuation SPDE, plus samplers for the conditionally-Gaussian additive
//! noise M and the Gaussian initial fluctuation eta_0.

use num_complex::Complex64;

use crate::kernel::apply_velocity_operator;
use crate::rng::{KeyedStream, StreamKey, StreamRole};
use crate::sigma::DivFreeVectorField;
use crate::spectral::{Fft2, FourierField, SpectralGrid};
use crate::{Result, VflError};

/// Stability constant: dt <= C / (||sigma||_inf^2 M^2) keeps the explicit
/// transport-noise update bounded (|sigma . k_max| sqrt(dt) <= 2).
pub const STABILITY_C: f64 = 16.0;

/// Mean-field density state. Mass is pinned to 1 at every step; positivity
/// is monitored (never enforced) via `positivity_defect`.
#[derive(Debug, Clone)]
pub struct MeanFieldState {
    pub v: FourierField,
    pub time: f64,
}

impl MeanFieldState {
    pub fn new(v: FourierField, time: f64) -> Result<Self> {
        let mass = v.get([0, 0]);
        if (mass - Complex64::new(1.0, 0.0)).norm() > 1e-12 {
            return Err(VflError::InvalidInput(format!(
                "density mass coefficient must be 1, got {mass}"
            )));
        }
        Ok(MeanFieldState { v, time })
    }

    /// Grid minimum of the density; negative values flag resolution trouble.
    pub fn grid_min(&self, fft: &Fft2) -> f64 {
        fft.field_to_grid(&self.v)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    /// Positivity drift alarm: errors when the grid minimum dips below -tol.
    pub fn check_positivity(&self, fft: &Fft2, tol: f64) -> Result<()> {
        let min = self.grid_min(fft);
        if min < -tol {
            return Err(VflError::Alarm(format!(
                "density grid minimum {min} below -{tol} at t = {}",
                self.time
            )));
        }
        Ok(())
    }
}

/// Fluctuation state; the mass coefficient stays exactly 0.
#[derive(Debug, Clone)]
pub struct FluctuationState {
    pub eta: FourierField,
    pub time: f64,
}

impl FluctuationState {
    pub fn new(eta: FourierField, time: f64) -> Result<Self> {
        if eta.get([0, 0]).norm() != 0.0 {
            return Err(VflError::InvalidInput(
                "fluctuations must be mass-free".into(),
            ));
        }
        Ok(FluctuationState { eta, time })
    }
}

/// Recorded common-noise path plus the keys regenerating the white-noise
/// fields that drive M; replay is bitwise.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoisePathRecord {
    pub version: u32,
    pub master_seed: u64,
    pub dt: f64,
    pub dw: Vec<f64>,
}

pub const NOISE_PATH_VERSION: u32 = 1;

impl NoisePathRecord {
    /// Draw and record `n_steps` common-noise increments.
    pub fn record(master_seed: u64, n_steps: usize, dt: f64) -> Result<Self> {
        if dt <= 0.0 {
            return Err(VflError::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        let sqrt_dt = dt.sqrt();
        let dw = (0..n_steps)
            .map(|s| {
                KeyedStream::new(StreamKey::new(master_seed, StreamRole::CommonNoise).step(s as u64))
                    .standard_normal()
                    * sqrt_dt
            })
            .collect();
        Ok(NoisePathRecord {
            version: NOISE_PATH_VERSION,
            master_seed,
            dt,
            dw,
        })
    }

    /// Key for the white-noise field driving the M increment at one step.
    pub fn m_noise_key(&self, ensemble_id: u64, step: u64) -> StreamKey {
        StreamKey::new(self.master_seed, StreamRole::MfieldNoise)
            .ensemble(ensemble_id)
            .step(step)
    }
}

/// Integrating-factor Euler-Maruyama scheme on a fixed grid: 2/3-rule
/// dealiasing on every pseudo-spectral product, exact heat factor on the
/// Laplacian.
pub struct SpdeScheme {
    grid: SpectralGrid,
    fft: Fft2,
    dt: f64,
    sigma: DivFreeVectorField,
    sigma_grid: [Vec<f64>; 2],
    heat: Vec<f64>,
    /// Disable to drop the Biot-Savart advection (pure heat + noise runs).
    pub include_advection: bool,
}

impl SpdeScheme {
    pub fn new(grid: SpectralGrid, dt: f64, sigma: DivFreeVectorField) -> Result<Self> {
        if dt <= 0.0 {
            return Err(VflError::Config(format!("dt must be positive, got {dt}")));
        }
        let bound = Self::stability_bound(&sigma, grid.modes_per_axis());
        if dt > bound {
            return Err(VflError::Config(format!(
                "dt = {dt} violates the transport stability bound {bound} \
                 (dt <= {STABILITY_C}/(||sigma||^2 M^2))"
            )));
        }
        let fft = Fft2::new(grid);
        let m = grid.modes_per_axis();
        let mut sigma_grid = [vec![0.0; m * m], vec![0.0; m * m]];
        for i1 in 0..m {
            for i2 in 0..m {
                let x = [grid.node(i1), grid.node(i2)];
                let s = sigma.eval(x);
                sigma_grid[0][i1 * m + i2] = s[0];
                sigma_grid[1][i1 * m + i2] = s[1];
            }
        }
        let mut heat = vec![0.0; m * m];
        for i1 in 0..m {
            let k1 = grid.k_of_index(i1);
            for i2 in 0..m {
                let k2 = grid.k_of_index(i2);
                heat[i1 * m + i2] = (-((k1 * k1 + k2 * k2) as f64) * dt).exp();
            }
        }
        Ok(SpdeScheme {
            grid,
            fft,
            dt,
            sigma,
            sigma_grid,
            heat,
            include_advection: true,
        })
    }

    /// Largest stable dt for a given noise field and resolution.
    pub fn stability_bound(sigma: &DivFreeVectorField, m: usize) -> f64 {
        let sup = sigma.sup_norm_bound();
        if sup == 0.0 {
            f64::INFINITY
        } else {
            STABILITY_C / (sup * sup * (m * m) as f64)
        }
    }

    pub fn grid(&self) -> SpectralGrid {
        self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    pub fn sigma(&self) -> &DivFreeVectorField {
        &self.sigma
    }

    /// Divergence i k . (f1, f2) of a vector field given on the grid.
    fn divergence_of_grid_pair(&self, g1: &[f64], g2: &[f64]) -> FourierField {
        let f1 = self.fft.field_from_grid(g1);
        let f2 = self.fft.field_from_grid(g2);
        let m = self.grid.modes_per_axis();
        let mut out = FourierField::zeros(self.grid);
        for i1 in 0..m {
            let k1 = self.grid.k_of_index(i1) as f64;
            for i2 in 0..m {
                let k2 = self.grid.k_of_index(i2) as f64;
                let idx = i1 * m + i2;
                out.coeffs_mut()[idx] = Complex64::new(0.0, 1.0)
                    * (f1.coeffs()[idx] * k1 + f2.coeffs()[idx] * k2);
            }
        }
        out
    }

    /// Advection term -div(u v), u = K * v, dealiased; exactly mass-free.
    pub fn nonlinear_term(&self, state: &MeanFieldState) -> FourierField {
        let mut v = state.v.clone();
        v.dealias_two_thirds();
        let u = apply_velocity_operator(&v);
        let vg = self.fft.field_to_grid(&v);
        let u1 = self.fft.field_to_grid(&u[0]);
        let u2 = self.fft.field_to_grid(&u[1]);
        let p1: Vec<f64> = vg.iter().zip(&u1).map(|(a, b)| a * b).collect();
        let p2: Vec<f64> = vg.iter().zip(&u2).map(|(a, b)| a * b).collect();
        let mut out = self.divergence_of_grid_pair(&p1, &p2);
        out.scale(-1.0);
        out.dealias_two_thirds();
        out
    }

    /// Ito transport terms for a scalar field f: the drift correction
    /// 1/2 sigma.grad(sigma.grad f) and the diffusion factor -sigma.grad f.
    /// Both are computed in divergence form (sigma is divergence-free), so
    /// the k = 0 coefficient is exactly zero.
    pub fn transport_terms(&self, f: &FourierField) -> (FourierField, FourierField) {
        let mut fd = f.clone();
        fd.dealias_two_thirds();
        let fg = self.fft.field_to_grid(&fd);
        let p1: Vec<f64> = fg.iter().zip(&self.sigma_grid[0]).map(|(a, b)| a * b).collect();
        let p2: Vec<f64> = fg.iter().zip(&self.sigma_grid[1]).map(|(a, b)| a * b).collect();
        // w = div(sigma f) = sigma . grad f
        let mut w = self.divergence_of_grid_pair(&p1, &p2);
        w.dealias_two_thirds();
        let wg = self.fft.field_to_grid(&w);
        let q1: Vec<f64> = wg.iter().zip(&self.sigma_grid[0]).map(|(a, b)| a * b).collect();
        let q2: Vec<f64> = wg.iter().zip(&self.sigma_grid[1]).map(|(a, b)| a * b).collect();
        let mut drift = self.divergence_of_grid_pair(&q1, &q2);
        drift.scale(0.5);
        drift.dealias_two_thirds();
        let mut diffusion = w;
        diffusion.scale(-1.0);
        (drift, diffusion)
    }

    /// One integrating-factor Euler-Maruyama step of the mean-field SPDE.
    /// The mass coefficient is re-pinned to 1 (analytically invariant;
    /// re-pinning removes rounding drift).
    pub fn step_mean_field(&self, state: &MeanFieldState, dw: f64) -> Result<MeanFieldState> {
        let mut rhs = if self.include_advection {
            self.nonlinear_term(state)
        } else {
            FourierField::zeros(self.grid)
        };
        let (drift, diffusion) = self.transport_terms(&state.v);
        rhs.add_assign(&drift);
        let mut v = FourierField::zeros(self.grid);
        for (idx, c) in v.coeffs_mut().iter_mut().enumerate() {
            *c = self.heat[idx]
                * (state.v.coeffs()[idx]
                    + rhs.coeffs()[idx] * self.dt
                    + diffusion.coeffs()[idx] * dw);
        }
        v.set([0, 0], Complex64::new(1.0, 0.0));
        Ok(MeanFieldState {
            v,
            time: state.time + self.dt,
        })
    }

    /// Initial fluctuation eta_0 = sqrt(v0) xi - (integral of sqrt(v0) xi) v0
    /// with xi grid white noise; its covariance on test functions is
    /// <phi psi, v0> - <phi, v0><psi, v0>.
    pub fn sample_eta0(&self, v0: &FourierField, key: StreamKey) -> Result<FluctuationState> {
        let vg = self.fft.field_to_grid(v0);
        let min = vg.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        if min < -1e-9 {
            return Err(VflError::InvalidInput(format!(
                "initial density has grid minimum {min} < 0"
            )));
        }
        let m = self.grid.modes_per_axis();
        let cell = self.grid.cell_area();
        let scale = 1.0 / cell.sqrt();
        let mut stream = KeyedStream::new(key);
        let mut noise = vec![0.0; m * m];
        stream.fill_standard_normal(&mut noise);
        let g: Vec<f64> = vg
            .iter()
            .zip(&noise)
            .map(|(&v, &z)| v.max(0.0).sqrt() * z * scale)
            .collect();
        let integral: f64 = g.iter().sum::<f64>() * cell;
        let grid_eta: Vec<f64> = g.iter().zip(&vg).map(|(&a, &v)| a - integral * v).collect();
        let mut eta = self.fft.field_from_grid(&grid_eta);
        eta.set([0, 0], Complex64::default());
        Ok(FluctuationState { eta, time: 0.0 })
    }

    /// One increment of the conditionally-Gaussian noise M:
    /// dM = div(sqrt(2 max(v,0)) zeta) sqrt(dt), zeta a 2-component grid
    /// white-noise field. Conditionally on the v-path, <M_t, phi> is
    /// centered Gaussian with variance 2 int <|grad phi|^2, v_s> ds.
    pub fn generate_m_increment(&self, v: &MeanFieldState, key: StreamKey) -> FourierField {
        let vg = self.fft.field_to_grid(&v.v);
        let m = self.grid.modes_per_axis();
        let scale = 1.0 / self.grid.cell_area().sqrt();
        let mut stream = KeyedStream::new(key);
        let mut z = vec![0.0; 2 * m * m];
        stream.fill_standard_normal(&mut z);
        let mut q1 = vec![0.0; m * m];
        let mut q2 = vec![0.0; m * m];
        for idx in 0..m * m {
            let a = (2.0 * vg[idx].max(0.0)).sqrt();
            q1[idx] = a * z[idx] * scale;
            q2[idx] = a * z[m * m + idx] * scale;
        }
        let mut dm = self.divergence_of_grid_pair(&q1, &q2);
        dm.scale(self.dt.sqrt());
        dm
    }

    /// One integrating-factor Euler-Maruyama step of the fluctuation SPDE
    /// d eta = Delta eta dt - div(v K*eta) dt - div(eta K*v) dt
    ///         + 1/2 sigma.grad(sigma.grad eta) dt + dM - sigma.grad eta dW.
    pub fn step_fluctuation(
        &self,
        state: &FluctuationState,
        v: &MeanFieldState,
        dw: f64,
        dm: &FourierField,
    ) -> Result<FluctuationState> {
        let mut rhs = FourierField::zeros(self.grid);
        if self.include_advection {
            let mut vd = v.v.clone();
            vd.dealias_two_thirds();
            let mut ed = state.eta.clone();
            ed.dealias_two_thirds();
            let u_v = apply_velocity_operator(&vd);
            let u_e = apply_velocity_operator(&ed);
            let vg = self.fft.field_to_grid(&vd);
            let eg = self.fft.field_to_grid(&ed);
            let uv1 = self.fft.field_to_grid(&u_v[0]);
            let uv2 = self.fft.field_to_grid(&u_v[1]);
            let ue1 = self.fft.field_to_grid(&u_e[0]);
            let ue2 = self.fft.field_to_grid(&u_e[1]);
            // v K*eta + eta K*v, component-wise
            let f1: Vec<f64> = (0..vg.len()).map(|i| vg[i] * ue1[i] + eg[i] * uv1[i]).collect();
            let f2: Vec<f64> = (0..vg.len()).map(|i| vg[i] * ue2[i] + eg[i] * uv2[i]).collect();
            rhs = self.divergence_of_grid_pair(&f1, &f2);
            rhs.scale(-1.0);
            rhs.dealias_two_thirds();
        }
        let (drift, diffusion) = self.transport_terms(&state.eta);
        rhs.add_assign(&drift);
        let mut eta = FourierField::zeros(self.grid);
        for (idx, c) in eta.coeffs_mut().iter_mut().enumerate() {
            *c = self.heat[idx]
                * (state.eta.coeffs()[idx]
                    + rhs.coeffs()[idx] * self.dt
                    + diffusion.coeffs()[idx] * dw
                    + dm.coeffs()[idx]);
        }
        eta.set([0, 0], Complex64::default());
        Ok(FluctuationState {
            eta,
            time: state.time + self.dt,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseBundle;
    use crate::spectral::default_density;

    const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

    fn scheme(m: usize, dt: f64, amp: f64) -> SpdeScheme {
        SpdeScheme::new(
            SpectralGrid::new(m).unwrap(),
            dt,
            DivFreeVectorField::default_field(amp),
        )
        .unwrap()
    }

    /// Random Hermitian density supported on |k_i| <= band.
    fn random_density(grid: SpectralGrid, band: i64, seed: u64) -> FourierField {
        let mut s = KeyedStream::new(StreamKey::new(seed, StreamRole::Aux));
        let mut f = FourierField::uniform_density(grid);
        for k1 in -band..=band {
            for k2 in -band..=band {
                if k1 > 0 || (k1 == 0 && k2 > 0) {
                    let c = Complex64::new(s.standard_normal(), s.standard_normal()) * 0.05;
                    f.set([k1, k2], c);
                    f.set([-k1, -k2], c.conj());
                }
            }
        }
        f
    }

    #[test]
    fn scheme_rejects_unstable_dt() {
        let grid = SpectralGrid::new(64).unwrap();
        let sigma = DivFreeVectorField::default_field(1.0);
        let bound = SpdeScheme::stability_bound(&sigma, 64);
        assert!(SpdeScheme::new(grid, bound * 1.01, sigma.clone()).is_err());
        assert!(SpdeScheme::new(grid, bound * 0.99, sigma).is_ok());
    }

    #[test]
    fn nonlinear_uniform_is_zero() {
        let sch = scheme(16, 1e-3, 0.5);
        let state = MeanFieldState::new(FourierField::uniform_density(sch.grid()), 0.0).unwrap();
        let out = sch.nonlinear_term(&state);
        for c in out.coeffs() {
            assert_eq!(*c, Complex64::default());
        }
    }

    #[test]
    fn nonlinear_is_mass_free() {
        let sch = scheme(16, 1e-3, 0.5);
        let v = random_density(sch.grid(), 4, 1);
        let state = MeanFieldState::new(v, 0.0).unwrap();
        let out = sch.nonlinear_term(&state);
        assert_eq!(out.get([0, 0]), Complex64::default());
    }

    /// Continuum convolution of two coefficient sets restricted to a band:
    /// (fg)-hat(k) = (2 pi)^{-2} sum_m f-hat(m) g-hat(k - m).
    fn convolve(f: &FourierField, g: &FourierField, band: i64, k: [i64; 2]) -> Complex64 {
        let mut acc = Complex64::default();
        for m1 in -band..=band {
            for m2 in -band..=band {
                acc += f.get([m1, m2]) * g.get([k[0] - m1, k[1] - m2]);
            }
        }
        acc / (TWO_PI * TWO_PI)
    }

    #[test]
    fn nonlinear_matches_quadrature_oracle() {
        // band-limited v on an 8x8 grid: the pseudo-spectral product is
        // alias-free below the 2/3 cutoff, so direct mode convolution is an
        // exact oracle there
        let sch = scheme(8, 1e-4, 0.0);
        let v = random_density(sch.grid(), 2, 2);
        let u = apply_velocity_operator(&v);
        let state = MeanFieldState::new(v.clone(), 0.0).unwrap();
        let out = sch.nonlinear_term(&state);
        for k1 in -2i64..=2 {
            for k2 in -2i64..=2 {
                let h1 = convolve(&u[0], &v, 4, [k1, k2]);
                let h2 = convolve(&u[1], &v, 4, [k1, k2]);
                let want = -Complex64::new(0.0, 1.0) * (h1 * k1 as f64 + h2 * k2 as f64);
                let got = out.get([k1, k2]);
                assert!((got - want).norm() < 1e-10, "k=({k1},{k2}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn transport_uniform_is_zero() {
        let sch = scheme(16, 1e-3, 0.5);
        let v = FourierField::uniform_density(sch.grid());
        let (drift, diffusion) = sch.transport_terms(&v);
        for c in drift.coeffs().iter().chain(diffusion.coeffs()) {
            assert!(c.norm() < 1e-14);
        }
    }

    #[test]
    fn transport_constant_sigma_single_mode() {
        use crate::sigma::{Phase, TrigTerm};
        let c = 0.7;
        let sigma = DivFreeVectorField::new(vec![TrigTerm {
            comp: 0,
            k: [0, 0],
            phase: Phase::Cos,
            amp: c,
        }])
        .unwrap();
        let grid = SpectralGrid::new(16).unwrap();
        let sch = SpdeScheme::new(grid, 1e-3, sigma).unwrap();
        let mut v = FourierField::uniform_density(grid);
        let coeff = Complex64::new(0.3, -0.1);
        v.set([2, 1], coeff);
        v.set([-2, -1], coeff.conj());
        let (_, diffusion) = sch.transport_terms(&v);
        // -sigma.grad v at mode k: -i c k1 v-hat(k)
        let want = -Complex64::new(0.0, 1.0) * c * 2.0 * coeff;
        assert!((diffusion.get([2, 1]) - want).norm() < 1e-12);
    }

    /// Fourier coefficients of the default sigma = amp (cos x2, cos x1).
    fn sigma_coeff_fields(grid: SpectralGrid, amp: f64) -> [FourierField; 2] {
        let half = (TWO_PI * TWO_PI) * amp / 2.0;
        let mut s1 = FourierField::zeros(grid);
        s1.set([0, 1], Complex64::new(half, 0.0));
        s1.set([0, -1], Complex64::new(half, 0.0));
        let mut s2 = FourierField::zeros(grid);
        s2.set([1, 0], Complex64::new(half, 0.0));
        s2.set([-1, 0], Complex64::new(half, 0.0));
        [s1, s2]
    }

    #[test]
    fn transport_matches_quadrature_oracle() {
        let amp = 0.5;
        let sch = scheme(16, 1e-4, amp);
        let v = random_density(sch.grid(), 3, 3);
        let (drift, diffusion) = sch.transport_terms(&v);
        let s = sigma_coeff_fields(sch.grid(), amp);
        let cutoff = 16 / 3; // 2/3-rule band
        // w = sigma . grad v via mode convolution, truncated like the scheme
        let mut w = FourierField::zeros(sch.grid());
        for k1 in -cutoff..=cutoff {
            for k2 in -cutoff..=cutoff {
                let mut acc = Complex64::default();
                for m1 in -1i64..=1 {
                    for m2 in -1i64..=1 {
                        let q = [k1 - m1, k2 - m2];
                        let grad = Complex64::new(0.0, 1.0)
                            * (s.clone()[0].get([m1, m2]) * q[0] as f64
                                + s[1].get([m1, m2]) * q[1] as f64);
                        acc += grad * v.get(q);
                    }
                }
                w.set([k1, k2], acc / (TWO_PI * TWO_PI));
            }
        }
        for k1 in -4i64..=4 {
            for k2 in -4i64..=4 {
                let got = diffusion.get([k1, k2]);
                let want = -w.get([k1, k2]);
                assert!((got - want).norm() < 1e-10, "diffusion k=({k1},{k2})");
            }
        }
        // drift = 1/2 sigma . grad w with the same truncation
        for k1 in -3i64..=3 {
            for k2 in -3i64..=3 {
                let mut acc = Complex64::default();
                for m1 in -1i64..=1 {
                    for m2 in -1i64..=1 {
                        let q = [k1 - m1, k2 - m2];
                        if q[0].abs() > cutoff || q[1].abs() > cutoff {
                            continue;
                        }
                        let grad = Complex64::new(0.0, 1.0)
                            * (s[0].get([m1, m2]) * q[0] as f64
                                + s[1].get([m1, m2]) * q[1] as f64);
                        acc += grad * w.get(q);
                    }
                }
                let want = acc / (TWO_PI * TWO_PI) * 0.5;
                let got = drift.get([k1, k2]);
                assert!((got - want).norm() < 1e-10, "drift k=({k1},{k2})");
            }
        }
    }

    #[test]
    fn uniform_density_is_fixed_point() {
        let sch = scheme(16, 1e-3, 0.5);
        let state = MeanFieldState::new(FourierField::uniform_density(sch.grid()), 0.0).unwrap();
        let next = sch.step_mean_field(&state, 0.37).unwrap();
        assert_eq!(next.v.coeffs(), state.v.coeffs());
    }

    #[test]
    fn heat_modes_decay_exactly() {
        let mut sch = scheme(16, 1e-3, 0.0);
        sch.include_advection = false;
        let mut v = FourierField::uniform_density(sch.grid());
        let c = Complex64::new(0.2, 0.1);
        v.set([3, -2], c);
        v.set([-3, 2], c.conj());
        let mut state = MeanFieldState::new(v, 0.0).unwrap();
        for _ in 0..20 {
            state = sch.step_mean_field(&state, 0.0).unwrap();
        }
        let want = c * (-13.0 * 20.0 * 1e-3f64).exp();
        assert!((state.v.get([3, -2]) - want).norm() < 1e-12);
    }

    #[test]
    fn deterministic_norm_nonincreasing() {
        // sigma = 0: the L2 norm of the Navier-Stokes solution cannot grow
        let sch = scheme(32, 1e-3, 0.0);
        let v0 = default_density(sch.grid());
        let mut state = MeanFieldState::new(v0, 0.0).unwrap();
        let mut prev = state.v.sobolev_norm_sq(0.0, 16);
        for _ in 0..200 {
            state = sch.step_mean_field(&state, 0.0).unwrap();
            let cur = state.v.sobolev_norm_sq(0.0, 16);
            assert!(cur <= prev + 1e-10, "norm grew: {prev} -> {cur}");
            prev = cur;
        }
    }

    #[test]
    fn deterministic_maximum_principle() {
        let sch = scheme(32, 1e-3, 0.0);
        let v0 = default_density(sch.grid());
        let g0 = sch.fft().field_to_grid(&v0);
        let (min0, max0) = g0
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let mut state = MeanFieldState::new(v0, 0.0).unwrap();
        for _ in 0..100 {
            state = sch.step_mean_field(&state, 0.0).unwrap();
            let g = sch.fft().field_to_grid(&state.v);
            for &v in &g {
                assert!(v <= max0 + 1e-8 && v >= min0 - 1e-8);
            }
        }
    }

    #[test]
    fn mass_pinned_under_noise() {
        let sch = scheme(32, 1e-3, 0.5);
        let mut state = MeanFieldState::new(default_density(sch.grid()), 0.0).unwrap();
        let path = NoisePathRecord::record(21, 50, 1e-3).unwrap();
        for s in 0..50 {
            state = sch.step_mean_field(&state, path.dw[s]).unwrap();
            assert_eq!(state.v.get([0, 0]), Complex64::new(1.0, 0.0));
        }
        state.check_positivity(sch.fft(), 1e-6).unwrap();
    }

    #[test]
    fn grid_refinement_consistency() {
        // same W path at M = 32 and M = 64: the time-T observable moves by
        // less than the spatial tolerance for the default smooth scenario
        let path = NoisePathRecord::record(22, 40, 2.5e-3).unwrap();
        let mut obs = Vec::new();
        for m in [32usize, 64] {
            let sch = scheme(m, 2.5e-3, 0.5);
            let mut state = MeanFieldState::new(default_density(sch.grid()), 0.0).unwrap();
            for s in 0..40 {
                state = sch.step_mean_field(&state, path.dw[s]).unwrap();
            }
            // <v_T, e_(1,1)> + conj, a real observable
            obs.push(2.0 * state.v.get([1, 1]).re);
        }
        assert!(
            (obs[0] - obs[1]).abs() < 1e-8,
            "refinement moved observable by {}",
            (obs[0] - obs[1]).abs()
        );
    }

    #[test]
    fn eta0_constant_test_function_vanishes() {
        let sch = scheme(16, 1e-3, 0.0);
        let eta = sch
            .sample_eta0(
                &default_density(sch.grid()),
                StreamKey::new(23, StreamRole::Eta0),
            )
            .unwrap();
        assert_eq!(eta.eta.get([0, 0]), Complex64::default());
    }

    #[test]
    fn eta0_variance_matches_analytic() {
        // v0 uniform, phi = cos x1: Var<eta0, phi> = <cos^2 x1, v0> = 1/2
        let sch = scheme(32, 1e-3, 0.0);
        let v0 = FourierField::uniform_density(sch.grid());
        let draws = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..draws {
            let eta = sch
                .sample_eta0(&v0, StreamKey::new(24, StreamRole::Eta0).ensemble(i))
                .unwrap();
            // <eta, cos x1> = Re eta-hat(1, 0)
            let p = eta.eta.get([1, 0]).re;
            sum += p;
            sum_sq += p * p;
        }
        let n = draws as f64;
        let mean = sum / n;
        let var = sum_sq / n - mean * mean;
        let se = 0.5 * (2.0 / n).sqrt();
        assert!((var - 0.5).abs() < 4.0 * se, "var {var}");
        assert!(mean.abs() < 4.0 * (0.5f64 / n).sqrt(), "mean {mean}");
    }

    #[test]
    fn eta0_rejects_negative_density() {
        let sch = scheme(16, 1e-3, 0.0);
        let mut v0 = FourierField::uniform_density(sch.grid());
        v0.set([1, 0], Complex64::new(2.0, 0.0));
        v0.set([-1, 0], Complex64::new(2.0, 0.0));
        assert!(sch
            .sample_eta0(&v0, StreamKey::new(25, StreamRole::Eta0))
            .is_err());
    }

    #[test]
    fn m_increment_is_mass_free() {
        let sch = scheme(16, 1e-2, 0.0);
        let state = MeanFieldState::new(default_density(sch.grid()), 0.0).unwrap();
        let dm = sch.generate_m_increment(&state, StreamKey::new(26, StreamRole::MfieldNoise));
        assert_eq!(dm.get([0, 0]), Complex64::default());
    }

    #[test]
    fn m_variance_matches_characteristic_functional() {
        // v uniform, phi = cos x1: Var<M_t, phi> = 2 t <sin^2 x1, v> = t
        let sch = scheme(16, 1e-2, 0.0);
        let state = MeanFieldState::new(FourierField::uniform_density(sch.grid()), 0.0).unwrap();
        let steps = 10;
        let t = steps as f64 * sch.dt();
        let paths = 10_000u64;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for p in 0..paths {
            let mut m_phi = 0.0;
            for s in 0..steps {
                let dm = sch.generate_m_increment(
                    &state,
                    StreamKey::new(27, StreamRole::MfieldNoise)
                        .ensemble(p)
                        .step(s as u64),
                );
                m_phi += dm.get([1, 0]).re;
            }
            sum += m_phi;
            sum_sq += m_phi * m_phi;
        }
        let n = paths as f64;
        let mean = sum / n;
        let var = sum_sq / n - mean * mean;
        let se = t * (2.0 / n).sqrt();
        assert!((var - t).abs() < 4.0 * se, "var {var} vs t {t}");
    }

    #[test]
    fn m_increments_uncorrelated_across_windows() {
        let sch = scheme(16, 1e-2, 0.0);
        let state = MeanFieldState::new(FourierField::uniform_density(sch.grid()), 0.0).unwrap();
        let paths = 4_000u64;
        let mut sum_ab = 0.0;
        let mut var_a = 0.0;
        let mut var_b = 0.0;
        for p in 0..paths {
            let window = |s0: u64, s1: u64| {
                let mut acc = 0.0;
                for s in s0..s1 {
                    let dm = sch.generate_m_increment(
                        &state,
                        StreamKey::new(28, StreamRole::MfieldNoise).ensemble(p).step(s),
                    );
                    acc += dm.get([1, 0]).re;
                }
                acc
            };
            let a = window(0, 5);
            let b = window(5, 10);
            sum_ab += a * b;
            var_a += a * a;
            var_b += b * b;
        }
        let corr = sum_ab / (var_a * var_b).sqrt();
        assert!(corr.abs() < 4.0 / (paths as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn fluctuation_zero_stays_zero() {
        let sch = scheme(16, 1e-3, 0.5);
        let v = MeanFieldState::new(default_density(sch.grid()), 0.0).unwrap();
        let eta = FluctuationState::new(FourierField::zeros(sch.grid()), 0.0).unwrap();
        let dm = FourierField::zeros(sch.grid());
        let next = sch.step_fluctuation(&eta, &v, 0.21, &dm).unwrap();
        for c in next.eta.coeffs() {
            assert_eq!(*c, Complex64::default());
        }
    }

    #[test]
    fn fluctuation_uniform_v_reduces_to_heat_plus_noise() {
        // with v uniform both advective couplings vanish: K*eta is
        // divergence-free so div(v K*eta) = v div(K*eta) = 0, and K*v = 0
        let mut sch = scheme(16, 1e-3, 0.0);
        let v = MeanFieldState::new(FourierField::uniform_density(sch.grid()), 0.0).unwrap();
        let mut eta0 = FourierField::zeros(sch.grid());
        let c = Complex64::new(0.4, -0.2);
        eta0.set([2, 1], c);
        eta0.set([-2, -1], c.conj());
        let eta = FluctuationState::new(eta0, 0.0).unwrap();
        let dm = FourierField::zeros(sch.grid());
        let with_advection = sch.step_fluctuation(&eta, &v, 0.0, &dm).unwrap();
        sch.include_advection = false;
        let without = sch.step_fluctuation(&eta, &v, 0.0, &dm).unwrap();
        for (a, b) in with_advection.eta.coeffs().iter().zip(without.eta.coeffs()) {
            assert!((a - b).norm() < 1e-14);
        }
        // and the surviving dynamics are the exact heat decay
        let want = c * (-5.0f64 * 1e-3).exp();
        assert!((with_advection.eta.get([2, 1]) - want).norm() < 1e-13);
    }

    #[test]
    fn fluctuation_run_is_deterministic() {
        let run = || {
            let sch = scheme(16, 1e-3, 0.5);
            let path = NoisePathRecord::record(29, 20, 1e-3).unwrap();
            let mut v = MeanFieldState::new(default_density(sch.grid()), 0.0).unwrap();
            let mut eta = sch
                .sample_eta0(&v.v, StreamKey::new(29, StreamRole::Eta0))
                .unwrap();
            for s in 0..20 {
                let dm = sch.generate_m_increment(&v, path.m_noise_key(0, s as u64));
                eta = sch.step_fluctuation(&eta, &v, path.dw[s], &dm).unwrap();
                v = sch.step_mean_field(&v, path.dw[s]).unwrap();
                assert_eq!(eta.eta.get([0, 0]), Complex64::default());
            }
            eta.eta.coeffs().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn noise_path_replay_matches_bundle() {
        let path = NoisePathRecord::record(30, 15, 1e-2).unwrap();
        for s in 0..15 {
            let bundle = NoiseBundle::sample(30, 7, s as u64, 2, 1e-2).unwrap();
            assert_eq!(path.dw[s], bundle.dw);
        }
    }
}
