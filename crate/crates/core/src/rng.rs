//! Keyed, counter-style random streams.
//!
//! Every random draw in the laboratory is addressed by a [`StreamKey`]: the
//! generator state is a pure function of the key, so parallel execution and
//! evaluation order cannot change a single generated value. Streams are
//! realized as ChaCha8 seeded from a mixed key digest.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VflError};

/// Which independent noise source a key addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum StreamRole {
    /// The shared Brownian motion W: depends on (seed, step) only.
    CommonNoise,
    /// Per-particle Brownian motions B_i.
    Idiosyncratic,
    /// White-noise fields driving the mean-field / fluctuation SPDEs.
    MfieldNoise,
    /// Initial fluctuation field eta_0.
    Eta0,
    /// Everything else (initial positions, synthetic draws, ...).
    Aux,
}

impl StreamRole {
    fn tag(self) -> u64 {
        match self {
            StreamRole::CommonNoise => 0x01,
            StreamRole::Idiosyncratic => 0x02,
            StreamRole::MfieldNoise => 0x03,
            StreamRole::Eta0 => 0x04,
            StreamRole::Aux => 0x05,
        }
    }
}

/// Address of one random stream. Identical keys yield identical values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master_seed: u64,
    pub role: StreamRole,
    pub ensemble_id: u64,
    pub particle_id: u64,
    pub step_index: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64, role: StreamRole) -> Self {
        StreamKey {
            master_seed,
            role,
            ensemble_id: 0,
            particle_id: 0,
            step_index: 0,
        }
    }

    pub fn ensemble(mut self, id: u64) -> Self {
        self.ensemble_id = id;
        self
    }

    pub fn particle(mut self, id: u64) -> Self {
        self.particle_id = id;
        self
    }

    pub fn step(mut self, idx: u64) -> Self {
        self.step_index = idx;
        self
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic stream of uniforms/Gaussians addressed by a key.
pub struct KeyedStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl KeyedStream {
    pub fn new(key: StreamKey) -> Self {
        let mut st = key.master_seed ^ 0x6c62_272e_07bb_0142;
        let a = splitmix64(&mut st);
        st ^= key.role.tag().wrapping_mul(0x0000_0100_0000_01b3u64.rotate_left(7));
        let b = splitmix64(&mut st);
        st ^= key.ensemble_id.wrapping_mul(0x9e3779b97f4a7c15);
        let c = splitmix64(&mut st);
        st ^= key.particle_id ^ key.step_index.rotate_left(32);
        let d = splitmix64(&mut st);
        let mut seed = [0u8; 32];
        seed[0..8].copy_from_slice(&a.to_le_bytes());
        seed[8..16].copy_from_slice(&b.to_le_bytes());
        seed[16..24].copy_from_slice(&c.to_le_bytes());
        seed[24..32].copy_from_slice(&d.to_le_bytes());
        KeyedStream {
            rng: ChaCha8Rng::from_seed(seed),
            spare: None,
        }
    }

    /// Uniform in (0, 1].
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        let x = self.rng.next_u64() >> 11;
        (x as f64 + 1.0) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal via Box-Muller.
    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    /// Pair of independent standard normals (one Box-Muller transform).
    #[inline]
    pub fn normal_pair(&mut self) -> [f64; 2] {
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        [r * c, r * s]
    }

    /// Fill a slice with standard normals.
    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        let mut i = 0;
        while i + 1 < out.len() {
            let [a, b] = self.normal_pair();
            out[i] = a;
            out[i + 1] = b;
            i += 2;
        }
        if i < out.len() {
            out[i] = self.standard_normal();
        }
    }
}

/// One step's worth of Brownian increments for an N-particle system.
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    pub dt: f64,
    /// Common-noise increment dW ~ N(0, dt).
    pub dw: f64,
    /// Idiosyncratic increments dB_i, each component ~ N(0, dt).
    pub db: Vec<[f64; 2]>,
}

impl NoiseBundle {
    /// Draw the increments for `step_index`. The dW stream is keyed by
    /// (master_seed, CommonNoise, step) only; dB_i by (seed, Idiosyncratic,
    /// ensemble, i, step).
    pub fn sample(master_seed: u64, ensemble_id: u64, step_index: u64, n: usize, dt: f64) -> Result<Self> {
        if dt <= 0.0 {
            return Err(VflError::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        let sqrt_dt = dt.sqrt();
        let dw = KeyedStream::new(
            StreamKey::new(master_seed, StreamRole::CommonNoise).step(step_index),
        )
        .standard_normal()
            * sqrt_dt;
        let db = (0..n)
            .map(|i| {
                let [a, b] = KeyedStream::new(
                    StreamKey::new(master_seed, StreamRole::Idiosyncratic)
                        .ensemble(ensemble_id)
                        .particle(i as u64)
                        .step(step_index),
                )
                .normal_pair();
                [a * sqrt_dt, b * sqrt_dt]
            })
            .collect();
        Ok(NoiseBundle { dt, dw, db })
    }

    /// Same idiosyncratic draws, but dW supplied externally (replayed path).
    pub fn sample_with_dw(
        master_seed: u64,
        ensemble_id: u64,
        step_index: u64,
        n: usize,
        dt: f64,
        dw: f64,
    ) -> Result<Self> {
        let mut bundle = Self::sample(master_seed, ensemble_id, step_index, n, dt)?;
        bundle.dw = dw;
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_keys_identical_values() {
        let k = StreamKey::new(42, StreamRole::Idiosyncratic)
            .ensemble(3)
            .particle(17)
            .step(99);
        let a: Vec<f64> = {
            let mut s = KeyedStream::new(k);
            (0..16).map(|_| s.standard_normal()).collect()
        };
        let b: Vec<f64> = {
            let mut s = KeyedStream::new(k);
            (0..16).map(|_| s.standard_normal()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_keys_decorrelated() {
        let base = StreamKey::new(42, StreamRole::Idiosyncratic);
        let a = KeyedStream::new(base.particle(0)).standard_normal();
        let b = KeyedStream::new(base.particle(1)).standard_normal();
        let c = KeyedStream::new(base.step(1)).standard_normal();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dw_ignores_ensemble_id() {
        let a = NoiseBundle::sample(7, 0, 5, 4, 0.01).unwrap();
        let b = NoiseBundle::sample(7, 123, 5, 4, 0.01).unwrap();
        assert_eq!(a.dw, b.dw);
        assert_ne!(a.db, b.db);
    }

    #[test]
    fn rejects_nonpositive_dt() {
        assert!(NoiseBundle::sample(1, 0, 0, 2, 0.0).is_err());
        assert!(NoiseBundle::sample(1, 0, 0, 2, -1.0).is_err());
    }

    // Moment test from the contract: mean within 4 SE of 0, variance within
    // 4 SE of dt, over 1e6 draws.
    #[test]
    fn increment_moments() {
        let dt: f64 = 0.01;
        let n_draws = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut stream = KeyedStream::new(StreamKey::new(2024, StreamRole::Aux));
        for _ in 0..n_draws {
            let z = stream.standard_normal() * dt.sqrt();
            sum += z;
            sumsq += z * z;
        }
        let nf = n_draws as f64;
        let mean = sum / nf;
        let var = sumsq / nf - mean * mean;
        let se_mean = dt.sqrt() / nf.sqrt();
        // Var of the sample variance of N(0,dt) is 2 dt^2 / n.
        let se_var = (2.0 * dt * dt / nf).sqrt();
        assert!(mean.abs() < 4.0 * se_mean, "mean {mean} vs SE {se_mean}");
        assert!((var - dt).abs() < 4.0 * se_var, "var {var} vs dt {dt}");
    }
}
