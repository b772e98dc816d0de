//! Position lattice.
//!
//! Every world position produced by the environment or commanded by a
//! policy is a multiple of [`QUANTUM`] (2⁻¹⁶ m). Sums and differences of
//! such values are exact in `f64`, which makes translation identities such
//! as `(p + t) - (k + t) == p - k` hold bit-for-bit. Sensor points sit on the
//! half-offset lattice `QUANTUM * (n + 1/2)` so that they never fall exactly
//! on a voxel boundary (voxel edges are multiples of `QUANTUM`).

use crate::math::Vec3;

pub const QUANTUM: f64 = 1.0 / 65536.0;

/// Round to the command lattice `QUANTUM * n`.
pub fn snap(x: f64) -> f64 {
    (x / QUANTUM).round() * QUANTUM
}

pub fn snap3(p: Vec3) -> Vec3 {
    [snap(p[0]), snap(p[1]), snap(p[2])]
}

/// Nearest point of the half-offset sensor lattice `QUANTUM * (n + 1/2)`.
pub fn snap_sensor(x: f64) -> f64 {
    ((x / QUANTUM).floor() + 0.5) * QUANTUM
}

pub fn snap_sensor3(p: Vec3) -> Vec3 {
    [snap_sensor(p[0]), snap_sensor(p[1]), snap_sensor(p[2])]
}

pub fn to_units(x: f64) -> i64 {
    (x / QUANTUM).round() as i64
}

pub fn from_units(n: i64) -> f64 {
    n as f64 * QUANTUM
}

pub fn on_lattice(x: f64) -> bool {
    (x / QUANTUM).fract() == 0.0
}

/// Interpolate between lattice points `a` and `b` at fraction `num/den`,
/// staying on the lattice. Uses truncating integer division so the result
/// commutes exactly with lattice translations and with sign flips / axis
/// swaps (quarter-turn rotations).
pub fn lerp3(a: Vec3, b: Vec3, num: i64, den: i64) -> Vec3 {
    let mut out = [0.0; 3];
    for k in 0..3 {
        let ua = to_units(a[k]);
        let d = to_units(b[k]) - ua;
        out[k] = from_units(ua + (d * num) / den);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sensor_lattice_is_symmetric() {
        for x in [0.0, 0.1, -0.3, 1.0 / 32.0, -1.0 / 32.0] {
            assert_eq!(snap_sensor(-snap_sensor(x)), -snap_sensor(x));
            assert!(!on_lattice(snap_sensor(x)));
        }
    }

    #[test]
    fn lerp_commutes_with_negation_and_shift() {
        let a = [from_units(3), from_units(-7), from_units(10)];
        let b = [from_units(40), from_units(5), from_units(-9)];
        let shift = [from_units(123), from_units(-77), from_units(5)];
        for i in 0..=7 {
            let l = lerp3(a, b, i, 7);
            let ln = lerp3([-a[0], -a[1], -a[2]], [-b[0], -b[1], -b[2]], i, 7);
            for k in 0..3 {
                assert_eq!(ln[k], -l[k]);
            }
            let ls = lerp3(
                crate::math::add(a, shift),
                crate::math::add(b, shift),
                i,
                7,
            );
            for k in 0..3 {
                assert_eq!(ls[k], l[k] + shift[k]);
            }
        }
        assert_eq!(lerp3(a, b, 7, 7), b);
    }
}
