//! N-particle interacting system, conditional McKean-Vlasov particles, and
//! their synchronous coupling.

use rayon::prelude::*;

use crate::kernel::{taper, velocity_multiplier, Kernel, KernelSpec};
use crate::rng::{KeyedStream, NoiseBundle, StreamKey};
use crate::sigma::DivFreeVectorField;
use crate::spectral::{Fft2, FourierField, SpectralGrid};
use crate::torus::{torus_distance, wrap_disp, TorusPoint};
use crate::{Result, VflError};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Positions of an N-particle configuration at a fixed time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    positions: Vec<TorusPoint>,
    time: f64,
}

impl ParticleState {
    pub fn new(positions: Vec<TorusPoint>, time: f64) -> Result<Self> {
        if positions.len() < 2 {
            return Err(VflError::InvalidInput(format!(
                "need at least 2 particles, got {}",
                positions.len()
            )));
        }
        if !(time >= 0.0) {
            return Err(VflError::InvalidInput(format!("time must be >= 0, got {time}")));
        }
        Ok(ParticleState { positions, time })
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn positions(&self) -> &[TorusPoint] {
        &self.positions
    }
}

/// Maximum rejection proposals per particle before declaring the density
/// inconsistent with its stated envelope.
const MAX_REJECTION_ROUNDS: usize = 100_000;

/// Draw N i.i.d. samples from the density `v0` by rejection against the
/// uniform envelope `1.01 * grid_max`. Each particle consumes its own keyed
/// stream, so the result is independent of evaluation order.
pub fn sample_initial_positions_fn<F>(
    v0: F,
    grid_max: f64,
    n: usize,
    key: StreamKey,
) -> Result<ParticleState>
where
    F: Fn([f64; 2]) -> f64 + Sync,
{
    if n < 2 {
        return Err(VflError::InvalidInput(format!("need at least 2 particles, got {n}")));
    }
    if !(grid_max > 0.0) {
        return Err(VflError::InvalidInput(format!(
            "density grid max must be positive, got {grid_max}"
        )));
    }
    let envelope = 1.01 * grid_max;
    let positions: Vec<Result<TorusPoint>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut stream = KeyedStream::new(key.particle(i as u64));
            for _ in 0..MAX_REJECTION_ROUNDS {
                let x = [
                    -std::f64::consts::PI + TWO_PI * stream.uniform(),
                    -std::f64::consts::PI + TWO_PI * stream.uniform(),
                ];
                let u = stream.uniform();
                let val = v0(x);
                if val > envelope {
                    return Err(VflError::Sampling(format!(
                        "density value {val} at ({}, {}) exceeds envelope {envelope}",
                        x[0], x[1]
                    )));
                }
                if u * envelope <= val {
                    return TorusPoint::wrap(x);
                }
            }
            Err(VflError::Sampling(format!(
                "no acceptance after {MAX_REJECTION_ROUNDS} proposals for particle {i}"
            )))
        })
        .collect();
    let positions = positions.into_iter().collect::<Result<Vec<_>>>()?;
    ParticleState::new(positions, 0.0)
}

/// Rejection sampling against a spectral density: the envelope is computed
/// from the synthesis grid, off-grid values by truncated mode summation.
pub fn sample_initial_positions(
    v0: &FourierField,
    k_eval: i64,
    n: usize,
    key: StreamKey,
) -> Result<ParticleState> {
    let fft = Fft2::new(v0.grid());
    let values = fft.field_to_grid(v0);
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    for &v in &values {
        max = max.max(v);
        min = min.min(v);
    }
    if !(min > 0.0) {
        return Err(VflError::InvalidInput(format!(
            "density must be strictly positive on the grid; min {min}"
        )));
    }
    sample_initial_positions_fn(|x| v0.eval_at(x, k_eval), max, n, key)
}

/// Interaction drift b_i = (1/N) sum_{j != i} K_eps(X_i - X_j) by direct
/// summation. Inner loop order is fixed, so chunked parallel evaluation over
/// targets is bitwise reproducible at any thread count.
pub fn pairwise_drift(state: &ParticleState, kernel: &Kernel) -> Result<Vec<[f64; 2]>> {
    if matches!(kernel.spec(), KernelSpec::FreeSpacePlusCorrection { .. }) {
        return Err(VflError::InvalidInput(
            "pairwise drift requires a regularized or spectral kernel".into(),
        ));
    }
    let pos = &state.positions;
    let n = pos.len();
    let inv_n = 1.0 / n as f64;
    let drift: Vec<[f64; 2]> = pos
        .par_iter()
        .enumerate()
        .map(|(i, xi)| {
            let mut acc = [0.0f64; 2];
            let ci = xi.coords();
            for (j, xj) in pos.iter().enumerate() {
                if j == i {
                    continue;
                }
                let cj = xj.coords();
                let k = kernel.eval_finite(wrap_disp([ci[0] - cj[0], ci[1] - cj[1]]));
                acc[0] += k[0];
                acc[1] += k[1];
            }
            [acc[0] * inv_n, acc[1] * inv_n]
        })
        .collect();
    Ok(drift)
}

/// Triangular-shaped-cloud weights (order 3) over the three nodes nearest to
/// a fractional offset `r` in [-1/2, 1/2] from the center node.
#[inline]
fn tsc_weights(r: f64) -> [f64; 3] {
    let wl = 0.5 * (0.5 - r) * (0.5 - r);
    let wr = 0.5 * (0.5 + r) * (0.5 + r);
    [wl, 1.0 - wl - wr, wr]
}

/// Node index and fractional offset of the nearest grid node to coordinate x.
#[inline]
fn nearest_node(x: f64, m: usize) -> (usize, f64) {
    let h = TWO_PI / m as f64;
    let s = (x + std::f64::consts::PI) / h;
    let mut j = s.round();
    let r = s - j;
    if j >= m as f64 {
        j = 0.0;
    }
    (j as usize, r)
}

/// Fast particle-mesh interaction drift: TSC (order-3) deposit of the
/// empirical measure, tapered Biot-Savart multiplier with window
/// deconvolution, TSC read-back of the velocity at the particles.
/// Approximates the direct sum with the tapered spectral kernel at k_max =
/// mesh/2; accuracy is set by the mesh resolution (see the tolerance test).
pub fn pairwise_drift_mesh(state: &ParticleState, mesh: usize) -> Result<Vec<[f64; 2]>> {
    let grid = SpectralGrid::new(mesh)?;
    let m = grid.modes_per_axis();
    let pos = &state.positions;
    let n = pos.len() as f64;
    // deposit the empirical density (integral 1 over the torus)
    let mass = 1.0 / (n * grid.cell_area());
    let mut density = vec![0.0f64; m * m];
    for p in pos.iter() {
        let [x1, x2] = p.coords();
        let (j1, r1) = nearest_node(x1, m);
        let (j2, r2) = nearest_node(x2, m);
        let w1 = tsc_weights(r1);
        let w2 = tsc_weights(r2);
        for (d1, w1d) in w1.iter().enumerate() {
            let i1 = (j1 + m + d1 - 1) % m;
            for (d2, w2d) in w2.iter().enumerate() {
                let i2 = (j2 + m + d2 - 1) % m;
                density[i1 * m + i2] += mass * w1d * w2d;
            }
        }
    }
    let fft = Fft2::new(grid);
    let f = fft.field_from_grid(&density);
    let k_max = (m / 2) as f64;
    let mut u = [FourierField::zeros(grid), FourierField::zeros(grid)];
    for i1 in 0..m {
        let k1 = grid.k_of_index(i1);
        for i2 in 0..m {
            let k2 = grid.k_of_index(i2);
            let c = f.coeffs()[i1 * m + i2];
            let mvec = velocity_multiplier([k1, k2]);
            let kk = ((k1 * k1 + k2 * k2) as f64).sqrt();
            // deconvolve the two TSC windows: W(k) = sinc^3(pi k / m) per axis
            let w = tsc_window(k1, m) * tsc_window(k2, m);
            let amp = taper(kk, k_max) / (w * w);
            u[0].coeffs_mut()[i1 * m + i2] = mvec[0] * c * amp;
            u[1].coeffs_mut()[i1 * m + i2] = mvec[1] * c * amp;
        }
    }
    let u_grids = [fft.field_to_grid(&u[0]), fft.field_to_grid(&u[1])];
    // read back; the excluded self-term contributes exactly zero (the mesh
    // kernel is odd and the particle's own cloud is symmetric)
    let drift = pos
        .par_iter()
        .map(|p| {
            let [x1, x2] = p.coords();
            let (j1, r1) = nearest_node(x1, m);
            let (j2, r2) = nearest_node(x2, m);
            let w1 = tsc_weights(r1);
            let w2 = tsc_weights(r2);
            let mut acc = [0.0f64; 2];
            for (d1, w1d) in w1.iter().enumerate() {
                let i1 = (j1 + m + d1 - 1) % m;
                for (d2, w2d) in w2.iter().enumerate() {
                    let i2 = (j2 + m + d2 - 1) % m;
                    let w = w1d * w2d;
                    acc[0] += w * u_grids[0][i1 * m + i2];
                    acc[1] += w * u_grids[1][i1 * m + i2];
                }
            }
            acc
        })
        .collect();
    Ok(drift)
}

#[inline]
fn tsc_window(k: i64, m: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let a = std::f64::consts::PI * k as f64 / m as f64;
    (a.sin() / a).powi(3)
}

/// Euler-Maruyama update shared by both particle systems (Ito form):
/// X <- wrap(X + b dt + 1/2 (sigma.grad sigma) dt + sqrt(2) dB + sigma dW).
fn advance(
    state: &ParticleState,
    drift: &[[f64; 2]],
    noise: &NoiseBundle,
    sigma: &DivFreeVectorField,
) -> Result<ParticleState> {
    if noise.dt <= 0.0 {
        return Err(VflError::InvalidInput(format!(
            "dt must be positive, got {}",
            noise.dt
        )));
    }
    if noise.db.len() != state.n() || drift.len() != state.n() {
        return Err(VflError::InvalidInput(format!(
            "noise/drift length mismatch: N={}, dB={}, drift={}",
            state.n(),
            noise.db.len(),
            drift.len()
        )));
    }
    let dt = noise.dt;
    let sqrt2 = std::f64::consts::SQRT_2;
    let positions = state
        .positions
        .iter()
        .zip(drift.iter().zip(noise.db.iter()))
        .map(|(p, (b, db))| {
            let x = p.coords();
            let ito = sigma.ito_correction(x);
            let s = sigma.eval(x);
            TorusPoint::wrap_unchecked([
                x[0] + (b[0] + 0.5 * ito[0]) * dt + sqrt2 * db[0] + s[0] * noise.dw,
                x[1] + (b[1] + 0.5 * ito[1]) * dt + sqrt2 * db[1] + s[1] * noise.dw,
            ])
        })
        .collect();
    Ok(ParticleState {
        positions,
        time: state.time + dt,
    })
}

/// TSC read-back of a velocity already synthesized on the grid; used to
/// drive the McKean-Vlasov copies without per-particle mode summation.
pub fn interpolate_velocity_tsc(
    u_grids: &[Vec<f64>; 2],
    grid: SpectralGrid,
    positions: &[TorusPoint],
) -> Vec<[f64; 2]> {
    let m = grid.modes_per_axis();
    positions
        .par_iter()
        .map(|p| {
            let [x1, x2] = p.coords();
            let (j1, r1) = nearest_node(x1, m);
            let (j2, r2) = nearest_node(x2, m);
            let w1 = tsc_weights(r1);
            let w2 = tsc_weights(r2);
            let mut acc = [0.0f64; 2];
            for (d1, w1d) in w1.iter().enumerate() {
                let i1 = (j1 + m + d1 - 1) % m;
                for (d2, w2d) in w2.iter().enumerate() {
                    let i2 = (j2 + m + d2 - 1) % m;
                    let w = w1d * w2d;
                    acc[0] += w * u_grids[0][i1 * m + i2];
                    acc[1] += w * u_grids[1][i1 * m + i2];
                }
            }
            acc
        })
        .collect()
}

/// One Euler-Maruyama step with a caller-supplied drift (direct, mesh, or
/// externally interpolated).
pub fn step_with_drift(
    state: &ParticleState,
    drift: &[[f64; 2]],
    noise: &NoiseBundle,
    sigma: &DivFreeVectorField,
) -> Result<ParticleState> {
    advance(state, drift, noise, sigma)
}

/// One Euler-Maruyama step of the interacting system. `kernel = None`
/// disables the interaction drift.
pub fn step_interacting(
    state: &ParticleState,
    noise: &NoiseBundle,
    kernel: Option<&Kernel>,
    sigma: &DivFreeVectorField,
) -> Result<ParticleState> {
    let drift = match kernel {
        Some(k) => pairwise_drift(state, k)?,
        None => vec![[0.0, 0.0]; state.n()],
    };
    advance(state, &drift, noise, sigma)
}

/// One Euler-Maruyama step of the conditional McKean-Vlasov particles driven
/// by the mean-field velocity u = K * v_t, evaluated off-grid by direct mode
/// summation over |k|_inf <= k_eval.
pub fn step_mckean_vlasov(
    state: &ParticleState,
    u: &[FourierField; 2],
    k_eval: i64,
    noise: &NoiseBundle,
    sigma: &DivFreeVectorField,
) -> Result<ParticleState> {
    let drift: Vec<[f64; 2]> = state
        .positions
        .par_iter()
        .map(|p| {
            let x = p.coords();
            [u[0].eval_at(x, k_eval), u[1].eval_at(x, k_eval)]
        })
        .collect();
    advance(state, &drift, noise, sigma)
}

/// Synchronously coupled pair: the interacting system X^N and the
/// McKean-Vlasov copies X-bar, advanced with bitwise-identical (dB, dW).
#[derive(Debug, Clone)]
pub struct CouplingPair {
    pub interacting: ParticleState,
    pub limit: ParticleState,
}

impl CouplingPair {
    /// Both systems start from the same initial configuration.
    pub fn new(initial: ParticleState) -> Self {
        CouplingPair {
            limit: initial.clone(),
            interacting: initial,
        }
    }
}

/// Mean squared torus distance (1/N) sum_i d(X_i, X-bar_i)^2.
pub fn coupling_mse(pair: &CouplingPair) -> Result<f64> {
    if pair.interacting.n() != pair.limit.n() {
        return Err(VflError::InvalidInput(format!(
            "coupled systems must have equal N: {} vs {}",
            pair.interacting.n(),
            pair.limit.n()
        )));
    }
    let n = pair.interacting.n();
    let sum: f64 = pair
        .interacting
        .positions
        .iter()
        .zip(pair.limit.positions.iter())
        .map(|(&a, &b)| torus_distance(a, b).powi(2))
        .sum();
    Ok(sum / n as f64)
}
