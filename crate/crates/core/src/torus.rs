//! Periodic geometry of the torus `T^2 = [-pi, pi)^2`.

use crate::error::{Result, VflError};

pub const PI: f64 = std::f64::consts::PI;
pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// A point on the flat 2-torus, both coordinates kept in `[-pi, pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusPoint {
    pub x1: f64,
    pub x2: f64,
}

/// Reduce a raw coordinate to `[-pi, pi)`.
#[inline]
pub fn wrap_coord(x: f64) -> f64 {
    let mut y = (x + PI).rem_euclid(TWO_PI) - PI;
    // rem_euclid can round up to exactly TWO_PI for inputs just below a period
    // boundary, which would leave y == PI.
    if y >= PI {
        y -= TWO_PI;
    }
    y
}

/// Wrap a raw displacement into the minimal image, components in `[-pi, pi)`.
#[inline]
pub fn wrap_disp(d: [f64; 2]) -> [f64; 2] {
    [wrap_coord(d[0]), wrap_coord(d[1])]
}

impl TorusPoint {
    /// Wrap finite raw coordinates onto the torus.
    pub fn wrap(p: [f64; 2]) -> Result<TorusPoint> {
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(VflError::InvalidInput(format!(
                "non-finite coordinates ({}, {})",
                p[0], p[1]
            )));
        }
        Ok(TorusPoint {
            x1: wrap_coord(p[0]),
            x2: wrap_coord(p[1]),
        })
    }

    /// Wrap without the finiteness check; for inner loops that already know.
    #[inline]
    pub fn wrap_unchecked(p: [f64; 2]) -> TorusPoint {
        TorusPoint {
            x1: wrap_coord(p[0]),
            x2: wrap_coord(p[1]),
        }
    }

    #[inline]
    pub fn coords(&self) -> [f64; 2] {
        [self.x1, self.x2]
    }
}

/// Minimal-image displacement `a - b`, components in `[-pi, pi)`.
#[inline]
pub fn torus_displacement(a: TorusPoint, b: TorusPoint) -> [f64; 2] {
    wrap_disp([a.x1 - b.x1, a.x2 - b.x2])
}

/// Torus distance `d(a, b) = |minimal-image displacement|`.
#[inline]
pub fn torus_distance(a: TorusPoint, b: TorusPoint) -> f64 {
    let d = torus_displacement(a, b);
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}
