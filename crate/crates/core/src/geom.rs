//! Positions on the normalized image plane and isotropic Gaussian helpers.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Sub};

/// Diagonal of the unit image square.
pub const UNIT_DIAGONAL: f64 = std::f64::consts::SQRT_2;

/// A position in normalized image coordinates. `u` runs along image width,
/// `v` along image height; the image occupies `[0,1]²`.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub u: f64,
    pub v: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { u: 0.0, v: 0.0 };

    pub const fn new(u: f64, v: f64) -> Self {
        Point { u, v }
    }

    pub fn norm_sq(self) -> f64 {
        self.u * self.u + self.v * self.v
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist(self, other: Point) -> f64 {
        (self - other).norm()
    }

    pub fn dist_sq(self, other: Point) -> f64 {
        (self - other).norm_sq()
    }

    pub fn clamp_unit(self) -> Point {
        Point::new(self.u.clamp(0.0, 1.0), self.v.clamp(0.0, 1.0))
    }

    pub fn is_finite(self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    pub fn in_unit_square(self) -> bool {
        (0.0..=1.0).contains(&self.u) && (0.0..=1.0).contains(&self.v)
    }
}

impl From<[f64; 2]> for Point {
    fn from(a: [f64; 2]) -> Self {
        Point::new(a[0], a[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.u, p.v]
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.u + o.u, self.v + o.v)
    }
}

impl AddAssign for Point {
    fn add_assign(&mut self, o: Point) {
        self.u += o.u;
        self.v += o.v;
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.u - o.u, self.v - o.v)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.u * s, self.v * s)
    }
}

/// Log density of the isotropic 2-D Gaussian `N(x | mean, var·I)`.
pub fn log_gauss2(x: Point, mean: Point, var: f64) -> f64 {
    -(2.0 * PI * var).ln() - x.dist_sq(mean) / (2.0 * var)
}

/// Density of the isotropic 2-D Gaussian `N(x | mean, var·I)`.
pub fn gauss2(x: Point, mean: Point, var: f64) -> f64 {
    log_gauss2(x, mean, var).exp()
}

/// `ln Σ exp(xs)`, stable for large negative inputs. Empty input yields `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_peak() {
        let var = 0.0025;
        let p = Point::new(0.3, 0.7);
        let peak = gauss2(p, p, var);
        assert!((peak - 1.0 / (2.0 * PI * var)).abs() < 1e-9);
    }

    #[test]
    fn lse_matches_naive() {
        let xs = [-1.0, 0.5, 2.0];
        let naive = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-14);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        // would underflow in the linear domain
        let tiny = log_sum_exp(&[-2000.0, -2000.0]);
        assert!((tiny - (-2000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn point_serializes_as_pair() {
        let s = serde_json::to_string(&Point::new(0.25, 0.5)).unwrap();
        assert_eq!(s, "[0.25,0.5]");
        let back: Point = serde_json::from_str(&s).unwrap();
        assert_eq!(back, Point::new(0.25, 0.5));
    }
}
