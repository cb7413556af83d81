//! Realizations of the Biot-Savart kernel on the torus.
//!
//! The kernel recovers a divergence-free velocity from scalar vorticity:
//! `u = K * f = grad_perp (-Laplace)^{-1} f`, with `grad_perp = (d2, -d1)`.
//! In Fourier space that is the multiplier `m(k) = i (k2, -k1) / |k|^2`.
//! Pointwise, `K(x) = -(1/2pi) x_perp / |x|^2 + K0(x)` with `K0` the smooth
//! periodization correction; `K0` has no closed form and is realized here by
//! subtracting the free-space term from a high-resolution spectral synthesis.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;

use crate::error::{Result, VflError};
use crate::spectral::{Fft2, FourierField, SpectralGrid};
use crate::torus::{wrap_disp, TWO_PI};

const INV_TWO_PI: f64 = 1.0 / TWO_PI;
const INV_FOUR_PI_SQ: f64 = 1.0 / (TWO_PI * TWO_PI);

/// Which realization of the kernel to use.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum KernelSpec {
    /// Radially tapered partial Fourier sum, evaluated by direct summation.
    /// Doubles as the regularization K_eps with eps ~ pi / k_max.
    SpectralTruncated { k_max: i64 },
    /// Exact kernel: analytic free-space leading term plus the tabulated
    /// smooth correction K0. Singular at the origin.
    FreeSpacePlusCorrection { table_resolution: usize },
    /// Smoothly regularized kernel K_eps: agrees with the exact kernel for
    /// d(x,0) >= eps, vanishes at the origin.
    Regularized { eps: f64 },
}

/// Velocity multiplier `m(k) = i (k2, -k1) / |k|^2`, `m(0) = 0`.
#[inline]
pub fn velocity_multiplier(k: [i64; 2]) -> [Complex64; 2] {
    let k2 = (k[0] * k[0] + k[1] * k[1]) as f64;
    if k2 == 0.0 {
        return [Complex64::default(); 2];
    }
    [
        Complex64::new(0.0, k[1] as f64 / k2),
        Complex64::new(0.0, -k[0] as f64 / k2),
    ]
}

/// Smooth radial spectral filter `exp(-36 (|k|/k_max)^8)`.
#[inline]
pub fn taper(k_norm: f64, k_max: f64) -> f64 {
    let u = k_norm / k_max;
    (-36.0 * u.powi(8)).exp()
}

/// Free-space Biot-Savart term `-(1/2pi) x_perp / |x|^2`.
#[inline]
pub fn free_space_kernel(x: [f64; 2]) -> [f64; 2] {
    let r2 = x[0] * x[0] + x[1] * x[1];
    let c = -INV_TWO_PI / r2;
    [c * x[1], -c * x[0]]
}

/// Quintic smoothstep: 0 at 0, 1 at 1, C^2 across both ends.
#[inline]
fn smoothstep(u: f64) -> f64 {
    if u >= 1.0 {
        1.0
    } else if u <= 0.0 {
        0.0
    } else {
        u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
    }
}

/// Radial cutoff for the analytic free-space term: 1 for r <= 1.8, 0 for
/// r >= 3.0. The free-space kernel is not 2pi-periodic, so the split
/// K = chi(r) K_free + K0 only leaves a periodic (hence tabulable) K0 if
/// chi dies out before the fundamental-domain boundary at r = pi.
#[inline]
fn boundary_cutoff(r: f64) -> f64 {
    1.0 - smoothstep((r - 1.8) / 1.2)
}

/// Direct tapered partial Fourier sum of the kernel at one point.
pub fn eval_spectral_sum(x: [f64; 2], k_max: i64, tapered: bool) -> [f64; 2] {
    // K(x) = -(2 pi)^{-2} sum_k taper(|k|) (k2, -k1) sin(k.x) / |k|^2
    let e1 = Complex64::from_polar(1.0, -x[0]);
    let e2 = Complex64::from_polar(1.0, -x[1]);
    let mut acc = [0.0f64; 2];
    // p tracks e^{-i k.x}, starting from k = (-k_max, -k_max)
    let mut p1 = Complex64::from_polar(1.0, (k_max as f64) * x[0]);
    for k1 in -k_max..=k_max {
        let mut p = p1 * Complex64::from_polar(1.0, (k_max as f64) * x[1]);
        for k2 in -k_max..=k_max {
            if k1 != 0 || k2 != 0 {
                let kk = (k1 * k1 + k2 * k2) as f64;
                let w = if tapered {
                    taper(kk.sqrt(), k_max as f64) / kk
                } else {
                    1.0 / kk
                };
                // p = e^{-i k.x}  =>  sin(k.x) = -Im(p)
                let s = -p.im;
                acc[0] += w * s * k2 as f64;
                acc[1] -= w * s * k1 as f64;
            }
            p *= e2;
        }
        p1 *= e1;
    }
    [-acc[0] * INV_FOUR_PI_SQ, -acc[1] * INV_FOUR_PI_SQ]
}

/// Periodic bilinear lookup table for a smooth 2-vector field on the torus.
#[derive(Debug, Clone)]
pub struct KernelTable {
    res: usize,
    /// Row-major over nodes x_j = -pi + 2 pi j / res; two components.
    data: Vec<[f64; 2]>,
}

impl KernelTable {
    pub fn resolution(&self) -> usize {
        self.res
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    pub fn from_data(res: usize, data: Vec<[f64; 2]>) -> Result<Self> {
        if data.len() != res * res {
            return Err(VflError::Format(format!(
                "table data length {} does not match resolution {res}",
                data.len()
            )));
        }
        Ok(KernelTable { res, data })
    }

    /// Bilinear interpolation with periodic wrap; `x` in minimal image.
    #[inline]
    pub fn lookup(&self, x: [f64; 2]) -> [f64; 2] {
        let res = self.res;
        let h = TWO_PI / res as f64;
        let u = (x[0] + std::f64::consts::PI) / h;
        let v = (x[1] + std::f64::consts::PI) / h;
        let iu = u.floor();
        let iv = v.floor();
        let fu = u - iu;
        let fv = v - iv;
        let i0 = (iu as i64).rem_euclid(res as i64) as usize;
        let j0 = (iv as i64).rem_euclid(res as i64) as usize;
        let i1 = if i0 + 1 == res { 0 } else { i0 + 1 };
        let j1 = if j0 + 1 == res { 0 } else { j0 + 1 };
        let a = self.data[i0 * res + j0];
        let b = self.data[i1 * res + j0];
        let c = self.data[i0 * res + j1];
        let d = self.data[i1 * res + j1];
        let w00 = (1.0 - fu) * (1.0 - fv);
        let w10 = fu * (1.0 - fv);
        let w01 = (1.0 - fu) * fv;
        let w11 = fu * fv;
        [
            w00 * a[0] + w10 * b[0] + w01 * c[0] + w11 * d[0],
            w00 * a[1] + w10 * b[1] + w01 * c[1] + w11 * d[1],
        ]
    }
}

/// How the K0 table is synthesized. Exposed so tests can use small grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KernelBuildParams {
    /// Resolution of the spectral synthesis grid (power of two).
    pub fft_resolution: usize,
    /// Resolution of the stored correction table; must divide fft_resolution.
    pub table_resolution: usize,
}

impl Default for KernelBuildParams {
    fn default() -> Self {
        KernelBuildParams {
            fft_resolution: 2048,
            table_resolution: 256,
        }
    }
}

fn k0_table_cache() -> &'static Mutex<HashMap<KernelBuildParams, Arc<KernelTable>>> {
    static CACHE: OnceLock<Mutex<HashMap<KernelBuildParams, Arc<KernelTable>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Synthesize the smooth periodization correction K0 on a coarse table.
///
/// The exact periodized kernel is evaluated on a fine grid as the tapered
/// partial sum (via FFT), the cutoff free-space term `chi(r) K_free` is
/// subtracted at the sampled nodes, and the origin node is pinned to zero
/// (K0 is odd).
fn build_k0_table(params: KernelBuildParams) -> Result<Arc<KernelTable>> {
    if let Some(t) = k0_table_cache().lock().unwrap().get(&params) {
        return Ok(t.clone());
    }
    let nf = params.fft_resolution;
    let nt = params.table_resolution;
    if !nf.is_power_of_two() || nf < 64 {
        return Err(VflError::Config(format!("fft_resolution {nf} must be a power of two >= 64")));
    }
    if nt < 16 || nf % nt != 0 {
        return Err(VflError::Config(format!(
            "table_resolution {nt} must be >= 16 and divide fft_resolution {nf}"
        )));
    }
    let grid = SpectralGrid::new(nf)?;
    let fft = Fft2::new(grid);
    let k_max = (nf / 2) as f64;
    let mut comp_grids: Vec<Vec<f64>> = Vec::with_capacity(2);
    for comp in 0..2 {
        let mut field = FourierField::zeros(grid);
        let coeffs = field.coeffs_mut();
        for i1 in 0..nf {
            let k1 = grid.k_of_index(i1);
            for i2 in 0..nf {
                let k2 = grid.k_of_index(i2);
                let m = velocity_multiplier([k1, k2])[comp];
                let kk = ((k1 * k1 + k2 * k2) as f64).sqrt();
                coeffs[i1 * nf + i2] = m * taper(kk, k_max);
            }
        }
        comp_grids.push(fft.field_to_grid(&field));
    }
    let stride = nf / nt;
    let mut data = vec![[0.0f64; 2]; nt * nt];
    for i in 0..nt {
        for j in 0..nt {
            let gi = i * stride;
            let gj = j * stride;
            let tgrid = SpectralGrid::new(nt)?;
            let x = [tgrid.node(i), tgrid.node(j)];
            let value = if x[0] == 0.0 && x[1] == 0.0 {
                [0.0, 0.0]
            } else {
                let full = [comp_grids[0][gi * nf + gj], comp_grids[1][gi * nf + gj]];
                let free = free_space_kernel(x);
                let chi = boundary_cutoff((x[0] * x[0] + x[1] * x[1]).sqrt());
                [full[0] - chi * free[0], full[1] - chi * free[1]]
            };
            data[i * nt + j] = value;
        }
    }
    let table = Arc::new(KernelTable { res: nt, data });
    k0_table_cache()
        .lock()
        .unwrap()
        .insert(params, table.clone());
    Ok(table)
}

/// A realized kernel, ready for pointwise evaluation.
pub struct Kernel {
    spec: KernelSpec,
    k0: Option<Arc<KernelTable>>,
    eps: f64,
}

impl Kernel {
    pub fn new(spec: KernelSpec) -> Result<Self> {
        Self::with_build_params(spec, KernelBuildParams::default())
    }

    pub fn with_build_params(spec: KernelSpec, mut params: KernelBuildParams) -> Result<Self> {
        match spec {
            KernelSpec::SpectralTruncated { k_max } => {
                if k_max < 1 {
                    return Err(VflError::Config(format!("k_max must be >= 1, got {k_max}")));
                }
                Ok(Kernel {
                    spec,
                    k0: None,
                    eps: std::f64::consts::PI / k_max as f64,
                })
            }
            KernelSpec::FreeSpacePlusCorrection { table_resolution } => {
                params.table_resolution = table_resolution;
                let k0 = build_k0_table(params)?;
                Ok(Kernel { spec, k0: Some(k0), eps: 0.0 })
            }
            KernelSpec::Regularized { eps } => {
                if !(eps > 0.0) {
                    return Err(VflError::Config(format!("eps must be positive, got {eps}")));
                }
                let k0 = build_k0_table(params)?;
                Ok(Kernel { spec, k0: Some(k0), eps })
            }
        }
    }

    /// Build from a persisted K0 table (free-space-plus-correction mode).
    pub fn from_table(table: KernelTable) -> Kernel {
        Kernel {
            spec: KernelSpec::FreeSpacePlusCorrection {
                table_resolution: table.resolution(),
            },
            k0: Some(Arc::new(table)),
            eps: 0.0,
        }
    }

    pub fn spec(&self) -> KernelSpec {
        self.spec
    }

    /// Regularization scale; `pi / k_max` in spectral mode, 0 for exact.
    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn k0_table(&self) -> Option<&KernelTable> {
        self.k0.as_deref()
    }

    /// Evaluate at a raw displacement (wrapped to the minimal image first).
    pub fn eval(&self, x: [f64; 2]) -> Result<[f64; 2]> {
        let d = wrap_disp(x);
        match self.spec {
            KernelSpec::SpectralTruncated { k_max } => Ok(eval_spectral_sum(d, k_max, true)),
            KernelSpec::FreeSpacePlusCorrection { .. } => {
                if d[0] == 0.0 && d[1] == 0.0 {
                    return Err(VflError::Singularity);
                }
                Ok(self.eval_exact(d))
            }
            KernelSpec::Regularized { .. } => Ok(self.eval_regularized(d)),
        }
    }

    #[inline]
    fn eval_exact(&self, d: [f64; 2]) -> [f64; 2] {
        let free = free_space_kernel(d);
        let chi = boundary_cutoff((d[0] * d[0] + d[1] * d[1]).sqrt());
        let k0 = self.k0.as_ref().expect("table built").lookup(d);
        [chi * free[0] + k0[0], chi * free[1] + k0[1]]
    }

    /// Regularized evaluation on an already minimal-image displacement.
    /// Finite everywhere; returns (0,0) at the origin.
    #[inline]
    pub fn eval_regularized(&self, d: [f64; 2]) -> [f64; 2] {
        let r2 = d[0] * d[0] + d[1] * d[1];
        if r2 == 0.0 {
            return [0.0, 0.0];
        }
        let k0 = self.k0.as_ref().expect("table built").lookup(d);
        let r = r2.sqrt();
        let g = smoothstep(r / self.eps) * boundary_cutoff(r);
        let c = -INV_TWO_PI * g / r2;
        [c * d[1] + k0[0], -c * d[0] + k0[1]]
    }

    /// Finite-everywhere fast path used by the force loop. Regularized and
    /// table modes evaluate directly; spectral mode falls back to the sum.
    #[inline]
    pub fn eval_finite(&self, d: [f64; 2]) -> [f64; 2] {
        match self.spec {
            KernelSpec::Regularized { .. } => self.eval_regularized(d),
            KernelSpec::SpectralTruncated { k_max } => eval_spectral_sum(d, k_max, true),
            KernelSpec::FreeSpacePlusCorrection { .. } => {
                if d[0] == 0.0 && d[1] == 0.0 {
                    [0.0, 0.0]
                } else {
                    self.eval_exact(d)
                }
            }
        }
    }
}

/// `u = K * f`: apply the velocity multiplier coefficientwise.
/// Returns the two velocity components as scalar fields.
pub fn apply_velocity_operator(f: &FourierField) -> [FourierField; 2] {
    let grid = f.grid();
    let m = grid.modes_per_axis();
    let mut u1 = FourierField::zeros(grid);
    let mut u2 = FourierField::zeros(grid);
    for i1 in 0..m {
        let k1 = grid.k_of_index(i1);
        for i2 in 0..m {
            let k2 = grid.k_of_index(i2);
            let mult = velocity_multiplier([k1, k2]);
            let c = f.coeffs()[i1 * m + i2];
            u1.coeffs_mut()[i1 * m + i2] = mult[0] * c;
            u2.coeffs_mut()[i1 * m + i2] = mult[1] * c;
        }
    }
    [u1, u2]
}

#[cfg(test)]
pub(crate) fn small_build_params() -> KernelBuildParams {
    KernelBuildParams {
        fft_resolution: 1024,
        table_resolution: 128,
    }
}
