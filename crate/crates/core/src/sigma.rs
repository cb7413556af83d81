//! The divergence-free transport field sigma driving the common noise.

use num_complex::Complex64;
use std::collections::HashMap;

use crate::error::{Result, VflError};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Phase {
    Cos,
    Sin,
}

/// One real trigonometric term `amp * cos/sin(k.x)` in component `comp`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrigTerm {
    pub comp: usize,
    pub k: [i64; 2],
    pub phase: Phase,
    pub amp: f64,
}

impl TrigTerm {
    #[inline]
    fn eval(&self, x: [f64; 2]) -> f64 {
        let arg = self.k[0] as f64 * x[0] + self.k[1] as f64 * x[1];
        match self.phase {
            Phase::Cos => self.amp * arg.cos(),
            Phase::Sin => self.amp * arg.sin(),
        }
    }

    #[inline]
    fn grad(&self, x: [f64; 2]) -> [f64; 2] {
        let arg = self.k[0] as f64 * x[0] + self.k[1] as f64 * x[1];
        let d = match self.phase {
            Phase::Cos => -self.amp * arg.sin(),
            Phase::Sin => self.amp * arg.cos(),
        };
        [d * self.k[0] as f64, d * self.k[1] as f64]
    }

    /// Contribution to the Fourier amplitude vector at wavevectors +-k,
    /// in the plain convention sigma = sum a_k e^{i k.x}.
    fn fourier_amps(&self) -> Vec<([i64; 2], [Complex64; 2])> {
        let mut out = Vec::new();
        let (ap, am) = match self.phase {
            Phase::Cos => (
                Complex64::new(self.amp / 2.0, 0.0),
                Complex64::new(self.amp / 2.0, 0.0),
            ),
            Phase::Sin => (
                Complex64::new(0.0, -self.amp / 2.0),
                Complex64::new(0.0, self.amp / 2.0),
            ),
        };
        let mut vp = [Complex64::default(); 2];
        let mut vm = [Complex64::default(); 2];
        vp[self.comp] = ap;
        vm[self.comp] = am;
        out.push((self.k, vp));
        out.push(([-self.k[0], -self.k[1]], vm));
        out
    }
}

/// Smooth divergence-free vector field given by finitely many trig modes.
#[derive(Debug, Clone, PartialEq)]
pub struct DivFreeVectorField {
    terms: Vec<TrigTerm>,
}

impl DivFreeVectorField {
    /// Validates divergence-freeness in Fourier: `k . sigma_hat(k) = 0`.
    pub fn new(terms: Vec<TrigTerm>) -> Result<Self> {
        let field = DivFreeVectorField { terms };
        let defect = field.divergence_defect();
        if defect > 1e-12 {
            return Err(VflError::Config(format!(
                "sigma is not divergence free (Fourier defect {defect:.3e})"
            )));
        }
        Ok(field)
    }

    /// The zero field (common noise off).
    pub fn zero() -> Self {
        DivFreeVectorField { terms: Vec::new() }
    }

    /// Default field `amplitude * (cos x2, cos x1)`.
    pub fn default_field(amplitude: f64) -> Self {
        DivFreeVectorField {
            terms: vec![
                TrigTerm { comp: 0, k: [0, 1], phase: Phase::Cos, amp: amplitude },
                TrigTerm { comp: 1, k: [1, 0], phase: Phase::Cos, amp: amplitude },
            ],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty() || self.terms.iter().all(|t| t.amp == 0.0)
    }

    pub fn terms(&self) -> &[TrigTerm] {
        &self.terms
    }

    /// Max |k . sigma_hat(k)| over stored modes.
    pub fn divergence_defect(&self) -> f64 {
        let mut modes: HashMap<[i64; 2], [Complex64; 2]> = HashMap::new();
        for t in &self.terms {
            for (k, amp) in t.fourier_amps() {
                let e = modes.entry(k).or_insert([Complex64::default(); 2]);
                e[0] += amp[0];
                e[1] += amp[1];
            }
        }
        modes
            .iter()
            .map(|(k, a)| (a[0] * k[0] as f64 + a[1] * k[1] as f64).norm())
            .fold(0.0, f64::max)
    }

    /// sigma(x).
    pub fn eval(&self, x: [f64; 2]) -> [f64; 2] {
        let mut v = [0.0; 2];
        for t in &self.terms {
            v[t.comp] += t.eval(x);
        }
        v
    }

    /// Jacobian J[c][j] = d_j sigma_c (x).
    pub fn jacobian(&self, x: [f64; 2]) -> [[f64; 2]; 2] {
        let mut j = [[0.0; 2]; 2];
        for t in &self.terms {
            let g = t.grad(x);
            j[t.comp][0] += g[0];
            j[t.comp][1] += g[1];
        }
        j
    }

    /// Ito correction drift `(sigma . grad) sigma (x)`.
    pub fn ito_correction(&self, x: [f64; 2]) -> [f64; 2] {
        let s = self.eval(x);
        let j = self.jacobian(x);
        [
            s[0] * j[0][0] + s[1] * j[0][1],
            s[0] * j[1][0] + s[1] * j[1][1],
        ]
    }

    /// Sup-norm bound: per-component sum of |amplitudes|, maximized.
    pub fn sup_norm_bound(&self) -> f64 {
        let mut per_comp = [0.0f64; 2];
        for t in &self.terms {
            per_comp[t.comp] += t.amp.abs();
        }
        per_comp[0].max(per_comp[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{KeyedStream, StreamKey, StreamRole};

    #[test]
    fn default_field_divergence_free() {
        let s = DivFreeVectorField::default_field(1.0);
        assert!(s.divergence_defect() < 1e-15);
        // pointwise divergence via analytic Jacobian
        for x in [[0.0, 0.0], [1.0, -2.0], [0.5, 0.5]] {
            let j = s.jacobian(x);
            assert!((j[0][0] + j[1][1]).abs() < 1e-15);
        }
    }

    #[test]
    fn non_div_free_rejected() {
        let bad = DivFreeVectorField::new(vec![TrigTerm {
            comp: 0,
            k: [1, 0],
            phase: Phase::Cos,
            amp: 1.0,
        }]);
        assert!(bad.is_err());
    }

    // Symbolic oracle for the default field:
    // (sigma.grad)sigma = (-cos x1 sin x2, -sin x1 cos x2).
    #[test]
    fn ito_correction_matches_symbolic() {
        let s = DivFreeVectorField::default_field(1.0);
        assert_eq!(s.ito_correction([0.0, 0.0]), [0.0, 0.0]);
        let probes = [
            [std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2],
            [0.7, -1.3],
            [-2.1, 0.4],
        ];
        for x in probes {
            let got = s.ito_correction(x);
            let want = [-x[0].cos() * x[1].sin(), -x[0].sin() * x[1].cos()];
            assert!((got[0] - want[0]).abs() < 1e-14);
            assert!((got[1] - want[1]).abs() < 1e-14);
        }
        // frozen value at (pi/2, pi/2): cos(pi/2) = 0 kills both components
        let v = s.ito_correction([std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2]);
        assert!(v[0].abs() < 1e-15 && v[1].abs() < 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let s = DivFreeVectorField::default_field(0.7);
        let h = 1e-5;
        let mut stream = KeyedStream::new(StreamKey::new(3, StreamRole::Aux));
        for _ in 0..50 {
            let x = [
                (stream.uniform() - 0.5) * 6.0,
                (stream.uniform() - 0.5) * 6.0,
            ];
            let j = s.jacobian(x);
            for axis in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[axis] += h;
                xm[axis] -= h;
                let fp = s.eval(xp);
                let fm = s.eval(xm);
                for comp in 0..2 {
                    let fd = (fp[comp] - fm[comp]) / (2.0 * h);
                    assert!((fd - j[comp][axis]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn amplitude_scaling() {
        let s = DivFreeVectorField::default_field(2.0);
        let v = s.eval([0.0, 0.0]);
        assert_eq!(v, [2.0, 2.0]);
        assert_eq!(s.sup_norm_bound(), 2.0);
        // Ito correction scales with amplitude^2
        let base = DivFreeVectorField::default_field(1.0);
        let x = [0.7, -0.2];
        let a = s.ito_correction(x);
        let b = base.ito_correction(x);
        assert!((a[0] - 4.0 * b[0]).abs() < 1e-14);
        assert!((a[1] - 4.0 * b[1]).abs() < 1e-14);
    }
}
