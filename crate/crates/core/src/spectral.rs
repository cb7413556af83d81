//! Truncated Fourier representation of real periodic fields on the torus.
//!
//! Pairing convention: `c_k = <f, e_k> = integral of f(x) e^{-i k.x} dx`,
//! with `e_k = e^{i k.x}`. A probability density therefore has `c_0 = 1`,
//! and grid values are recovered as `f(x) = (2*pi)^{-2} sum_k c_k e^{i k.x}`.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, VflError};
use crate::torus::{PI, TWO_PI};

/// Square spectral grid with `M` modes per axis, `M` even.
/// Wavevectors are `k` with `-M/2 < k_i <= M/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpectralGrid {
    m: usize,
}

impl SpectralGrid {
    pub fn new(modes_per_axis: usize) -> Result<Self> {
        if modes_per_axis < 8 || modes_per_axis % 2 != 0 {
            return Err(VflError::Config(format!(
                "modes_per_axis must be even and >= 8, got {modes_per_axis}"
            )));
        }
        Ok(SpectralGrid { m: modes_per_axis })
    }

    #[inline]
    pub fn modes_per_axis(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.m * self.m
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Signed wavevector component for a storage index.
    #[inline]
    pub fn k_of_index(&self, idx: usize) -> i64 {
        let m = self.m as i64;
        let i = idx as i64;
        if i <= m / 2 {
            i
        } else {
            i - m
        }
    }

    /// Storage index for a signed wavevector component, if representable.
    #[inline]
    pub fn index_of_k(&self, k: i64) -> Option<usize> {
        let half = (self.m / 2) as i64;
        if k > half || k <= -half {
            None
        } else if k >= 0 {
            Some(k as usize)
        } else {
            Some((k + self.m as i64) as usize)
        }
    }

    /// Collocation nodes per axis: `x_j = -pi + 2*pi*j/M`.
    #[inline]
    pub fn node(&self, j: usize) -> f64 {
        -PI + TWO_PI * (j as f64) / (self.m as f64)
    }

    /// Area of one grid cell.
    #[inline]
    pub fn cell_area(&self) -> f64 {
        let h = TWO_PI / self.m as f64;
        h * h
    }

    /// All wavevectors in storage order (row-major over (i1, i2)).
    pub fn wavevectors(&self) -> Vec<[i64; 2]> {
        let mut ks = Vec::with_capacity(self.len());
        for i1 in 0..self.m {
            for i2 in 0..self.m {
                ks.push([self.k_of_index(i1), self.k_of_index(i2)]);
            }
        }
        ks
    }
}

/// Planned 2-D complex FFTs for one grid size.
pub struct Fft2 {
    grid: SpectralGrid,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(grid: SpectralGrid) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            grid,
            forward: planner.plan_fft_forward(grid.modes_per_axis()),
            inverse: planner.plan_fft_inverse(grid.modes_per_axis()),
        }
    }

    pub fn grid(&self) -> SpectralGrid {
        self.grid
    }

    fn transform_2d(&self, data: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let m = self.grid.modes_per_axis();
        // rows
        for row in data.chunks_exact_mut(m) {
            fft.process(row);
        }
        // columns, via transpose
        let mut col = vec![Complex64::default(); m];
        for j in 0..m {
            for i in 0..m {
                col[i] = data[i * m + j];
            }
            fft.process(&mut col);
            for i in 0..m {
                data[i * m + j] = col[i];
            }
        }
    }

    /// Coefficients of a real field sampled at the collocation nodes.
    pub fn field_from_grid(&self, values: &[f64]) -> FourierField {
        let m = self.grid.modes_per_axis();
        assert_eq!(values.len(), m * m, "grid size mismatch");
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform_2d(&mut data, &self.forward);
        // c_k = (2*pi/M)^2 * (-1)^(k1+k2) * DFT_k  (node offset x_0 = -pi)
        let scale = (TWO_PI / m as f64) * (TWO_PI / m as f64);
        let mut coeffs = data;
        for i1 in 0..m {
            let k1 = self.grid.k_of_index(i1);
            for i2 in 0..m {
                let k2 = self.grid.k_of_index(i2);
                let sign = if (k1 + k2).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                coeffs[i1 * m + i2] *= scale * sign;
            }
        }
        FourierField {
            grid: self.grid,
            coeffs,
        }
    }

    /// Real grid values of a Hermitian coefficient field.
    pub fn field_to_grid(&self, field: &FourierField) -> Vec<f64> {
        let m = self.grid.modes_per_axis();
        assert_eq!(field.grid, self.grid, "grid mismatch");
        let mut data = field.coeffs.clone();
        for i1 in 0..m {
            let k1 = self.grid.k_of_index(i1);
            for i2 in 0..m {
                let k2 = self.grid.k_of_index(i2);
                let sign = if (k1 + k2).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                data[i1 * m + i2] *= sign;
            }
        }
        self.transform_2d(&mut data, &self.inverse);
        let norm = 1.0 / (TWO_PI * TWO_PI);
        data.iter().map(|c| c.re * norm).collect()
    }
}

/// Truncated complex Fourier coefficients of a real periodic field.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierField {
    grid: SpectralGrid,
    coeffs: Vec<Complex64>,
}

impl FourierField {
    pub fn zeros(grid: SpectralGrid) -> Self {
        FourierField {
            grid,
            coeffs: vec![Complex64::default(); grid.len()],
        }
    }

    /// The uniform probability density: `c_0 = 1`, everything else 0.
    pub fn uniform_density(grid: SpectralGrid) -> Self {
        let mut f = Self::zeros(grid);
        f.set([0, 0], Complex64::new(1.0, 0.0));
        f
    }
}

/// The default-scenario density `(1/(2pi)^2)(1 + 1/2 cos x1 cos x2)`:
/// `c_0 = 1` and the four modes `(+-1, +-1)` at 1/8 each.
pub fn default_density(grid: SpectralGrid) -> FourierField {
    let mut f = FourierField::uniform_density(grid);
    for k in [[1, 1], [1, -1], [-1, 1], [-1, -1]] {
        f.set(k, Complex64::new(0.125, 0.0));
    }
    f
}

impl FourierField {

    pub fn from_coeffs(grid: SpectralGrid, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != grid.len() {
            return Err(VflError::InvalidInput(format!(
                "coefficient count {} does not match grid {}",
                coeffs.len(),
                grid.len()
            )));
        }
        Ok(FourierField { grid, coeffs })
    }

    #[inline]
    pub fn grid(&self) -> SpectralGrid {
        self.grid
    }

    #[inline]
    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    #[inline]
    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// Coefficient at wavevector `k`; zero outside the truncation.
    #[inline]
    pub fn get(&self, k: [i64; 2]) -> Complex64 {
        match (self.grid.index_of_k(k[0]), self.grid.index_of_k(k[1])) {
            (Some(i1), Some(i2)) => self.coeffs[i1 * self.grid.m + i2],
            _ => Complex64::default(),
        }
    }

    #[inline]
    pub fn set(&mut self, k: [i64; 2], value: Complex64) {
        let i1 = self.grid.index_of_k(k[0]).expect("k1 out of range");
        let i2 = self.grid.index_of_k(k[1]).expect("k2 out of range");
        self.coeffs[i1 * self.grid.m + i2] = value;
    }

    /// Max |c_{-k} - conj(c_k)| over wavevectors with both images stored.
    pub fn hermitian_defect(&self) -> f64 {
        let half = (self.grid.m / 2) as i64;
        let mut worst = 0.0f64;
        for k1 in -(half - 1)..half {
            for k2 in -(half - 1)..half {
                let a = self.get([k1, k2]);
                let b = self.get([-k1, -k2]).conj();
                worst = worst.max((a - b).norm());
            }
        }
        worst
    }

    /// Multiply every coefficient by `i * k_c` (spectral partial derivative).
    pub fn derivative(&self, axis: usize) -> FourierField {
        let m = self.grid.m;
        let mut out = self.clone();
        for i1 in 0..m {
            let k1 = self.grid.k_of_index(i1) as f64;
            for i2 in 0..m {
                let k2 = self.grid.k_of_index(i2) as f64;
                let kc = if axis == 0 { k1 } else { k2 };
                out.coeffs[i1 * m + i2] *= Complex64::new(0.0, kc);
            }
        }
        out
    }

    /// Zero all modes with `|k_i| > M/3` (2/3-rule dealiasing).
    pub fn dealias_two_thirds(&mut self) {
        let m = self.grid.m;
        let cutoff = (m / 3) as i64;
        for i1 in 0..m {
            let k1 = self.grid.k_of_index(i1);
            for i2 in 0..m {
                let k2 = self.grid.k_of_index(i2);
                if k1.abs() > cutoff || k2.abs() > cutoff {
                    self.coeffs[i1 * m + i2] = Complex64::default();
                }
            }
        }
    }

    /// Direct truncated mode summation at an arbitrary point, over modes with
    /// `|k|_inf <= k_eval`. Exact for fields supported on those modes.
    pub fn eval_at(&self, x: [f64; 2], k_eval: i64) -> f64 {
        let half = (self.grid.m / 2) as i64;
        let kmax = k_eval.min(half);
        // phase recursion: e^{i k x} built from repeated multiplication
        let e1 = Complex64::from_polar(1.0, x[0]);
        let e2 = Complex64::from_polar(1.0, x[1]);
        let mut sum = Complex64::default();
        let mut p1 = Complex64::from_polar(1.0, -(kmax as f64) * x[0]);
        for k1 in -kmax..=kmax {
            let mut p = p1 * Complex64::from_polar(1.0, -(kmax as f64) * x[1]);
            for k2 in -kmax..=kmax {
                // f(x) = (2 pi)^-2 sum c_k e^{i k x}; p tracks e^{i k x}
                sum += self.get([k1, k2]) * p;
                p *= e2;
            }
            p1 *= e1;
        }
        sum.re / (TWO_PI * TWO_PI)
    }

    /// Squared Sobolev norm `sum (1+|k|^2)^alpha |c_k|^2` over `|k|_inf <= k_trunc`.
    pub fn sobolev_norm_sq(&self, alpha: f64, k_trunc: i64) -> f64 {
        let half = (self.grid.m / 2) as i64;
        let kmax = k_trunc.min(half);
        let mut total = 0.0;
        for k1 in -kmax..=kmax {
            for k2 in -kmax..=kmax {
                let w = (1.0 + (k1 * k1 + k2 * k2) as f64).powf(alpha);
                total += w * self.get([k1, k2]).norm_sqr();
            }
        }
        total
    }

    pub fn scale(&mut self, s: f64) {
        for c in &mut self.coeffs {
            *c *= s;
        }
    }

    pub fn add_assign(&mut self, other: &FourierField) {
        assert_eq!(self.grid, other.grid);
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &FourierField, s: f64) {
        assert_eq!(self.grid, other.grid);
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += b * s;
        }
    }
}
