//! Lattice strain between an as-assembled cell and its relaxed form.
//!
//! The score is the largest absolute eigenvalue of the symmetrized
//! deformation of the relaxed cell against the reference, so a pure
//! rigid-body rotation of the relaxed cell contributes nothing.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;

/// Symmetrized deformation of `relaxed` measured against `reference`.
/// Returns `None` when the reference cell is singular.
pub fn deformation(reference: &Matrix3<f64>, relaxed: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let inv = reference.try_inverse()?;
    let e = relaxed * inv - Matrix3::identity();
    Some(0.5 * (e + e.transpose()))
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn max_abs_eigenvalue(sym: &Matrix3<f64>) -> f64 {
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Strain score of a cell pair; `None` when the reference is singular.
pub fn strain(reference: &Matrix3<f64>, relaxed: &Matrix3<f64>) -> Option<f64> {
    Some(max_abs_eigenvalue(&deformation(reference, relaxed)?))
}

fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let angles: Vector3<f64> = Vector3::new(
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    *Rotation3::from_euler_angles(angles.x, angles.y, angles.z).matrix()
}

/// Builds a random well-conditioned cell pair whose strain score is exactly
/// `target`: the reference is a rotated anisotropic cell, and the relaxed
/// cell applies a symmetric deformation with spectrum {target, u2, u3},
/// |u2|, |u3| <= target. A zero target returns identical cells.
pub fn synthesize_cells<R: Rng + ?Sized>(
    target: f64,
    rng: &mut R,
) -> (Matrix3<f64>, Matrix3<f64>) {
    let rot = random_rotation(rng);
    let scales = Matrix3::from_diagonal(&Vector3::new(
        rng.gen_range(5.0..15.0),
        rng.gen_range(5.0..15.0),
        rng.gen_range(5.0..15.0),
    ));
    let reference = rot * scales;
    if target <= 0.0 {
        return (reference, reference);
    }
    let q = random_rotation(rng);
    let minor = |rng: &mut R| rng.gen_range(-target..=target);
    let spectrum = Matrix3::from_diagonal(&Vector3::new(target, minor(rng), minor(rng)));
    let deform = q * spectrum * q.transpose();
    let relaxed = (Matrix3::identity() + deform) * reference;
    (reference, relaxed)
}
