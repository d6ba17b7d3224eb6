//! Rotation, interpolation, and closest-point primitives shared across the crate.
//!
//! Rotations are passed around as axis-angle vectors (`Vector3`, radians) and
//! expanded to matrices with the Rodrigues map. The analytic Jacobian of that
//! map is what makes every objective in the solver differentiable, so it gets
//! a series fallback near zero and a finite-difference test of its own.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

/// Threshold below which the Rodrigues coefficients switch to their Taylor series.
const SMALL_ANGLE: f64 = 1e-3;

/// Skew-symmetric cross-product matrix `[w]x` such that `[w]x v = w × v`.
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues map: axis-angle vector to rotation matrix.
pub fn rodrigues(aa: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = aa.norm_squared();
    let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        // sin(t)/t and (1-cos(t))/t^2 via series
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew(aa);
    Matrix3::identity() + k * a + k * k * b
}

/// Partial derivatives of the Rodrigues map: `d R / d aa_i` for i = 0, 1, 2.
///
/// Uses R = I + a [w]x + b [w]x^2 with
///   a = sin t / t,  b = (1 - cos t) / t^2,  t = |w|,
/// and the stable combined coefficients c1_i = a' w_i / t, c2_i = b' w_i / t
/// which stay finite as t -> 0.
pub fn rodrigues_jacobian(aa: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta2 = aa.norm_squared();
    let k = skew(aa);
    let k2 = k * k;
    let (a, b, c1_scale, c2_scale) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            -1.0 / 3.0 + theta2 / 30.0,
            -1.0 / 12.0 + theta2 / 180.0,
        )
    } else {
        let theta = theta2.sqrt();
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta2;
        // a' / t and b' / t, where ' is d/dt
        let da_over_t = (theta * theta.cos() - theta.sin()) / (theta2 * theta);
        let db_over_t = (theta * theta.sin() - 2.0 * (1.0 - theta.cos())) / (theta2 * theta2);
        (a, b, da_over_t, db_over_t)
    };
    let mut out = [Matrix3::zeros(); 3];
    for i in 0..3 {
        let mut e = Vector3::zeros();
        e[i] = 1.0;
        let ke = skew(&e);
        out[i] = k * (c1_scale * aa[i])
            + ke * a
            + k2 * (c2_scale * aa[i])
            + (ke * k + k * ke) * b;
    }
    out
}

/// Contract a matrix cotangent `dL/dR` with the Rodrigues Jacobian, giving `dL/d aa`.
pub fn rotation_grad_to_axis_angle(aa: &Vector3<f64>, d_rot: &Matrix3<f64>) -> Vector3<f64> {
    let jac = rodrigues_jacobian(aa);
    Vector3::new(
        d_rot.component_mul(&jac[0]).sum(),
        d_rot.component_mul(&jac[1]).sum(),
        d_rot.component_mul(&jac[2]).sum(),
    )
}

/// Axis of rotation for a yaw hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpAxis {
    Y,
    Z,
}

impl UpAxis {
    pub fn vector(self) -> Vector3<f64> {
        match self {
            UpAxis::Y => Vector3::y(),
            UpAxis::Z => Vector3::z(),
        }
    }
}

/// Rotation by `angle` radians about the world up axis.
pub fn yaw_rotation(angle: f64, up: UpAxis) -> Matrix3<f64> {
    rodrigues(&(up.vector() * angle))
}

/// Derivative of `yaw_rotation` with respect to the angle.
pub fn yaw_rotation_derivative(angle: f64, up: UpAxis) -> Matrix3<f64> {
    let axis = up.vector();
    skew(&axis) * rodrigues(&(axis * angle))
}

/// Compose an axis-angle pre-rotation onto another: result = R(pre) * R(aa) as axis-angle.
pub fn compose_axis_angle(pre: &Vector3<f64>, aa: &Vector3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_scaled_axis(*pre) * UnitQuaternion::from_scaled_axis(*aa);
    q.scaled_axis()
}

/// Spherical linear interpolation between two axis-angle rotations.
///
/// Takes the shortest path; at t=0 returns `a`, at t=1 a rotation equal to `b`.
pub fn slerp_axis_angle(a: &Vector3<f64>, b: &Vector3<f64>, t: f64) -> Vector3<f64> {
    let qa = UnitQuaternion::from_scaled_axis(*a);
    let mut qb = UnitQuaternion::from_scaled_axis(*b);
    if qa.coords.dot(&qb.coords) < 0.0 {
        qb = UnitQuaternion::new_unchecked(-qb.into_inner());
    }
    let rel = qa.inverse() * qb;
    (qa * rel.powf(t)).scaled_axis()
}

/// Linear interpolation of plain vectors.
pub fn lerp(a: &Vector3<f64>, b: &Vector3<f64>, t: f64) -> Vector3<f64> {
    a + (b - a) * t
}

/// Componentwise median of a point set. Even counts average the two middle values.
pub fn component_median(points: &[Vector3<f64>]) -> Vector3<f64> {
    assert!(!points.is_empty(), "median of empty point set");
    let mut out = Vector3::zeros();
    let mut scratch: Vec<f64> = Vec::with_capacity(points.len());
    for c in 0..3 {
        scratch.clear();
        scratch.extend(points.iter().map(|p| p[c]));
        scratch.sort_by(|x, y| x.partial_cmp(y).expect("non-finite coordinate"));
        let n = scratch.len();
        out[c] = if n % 2 == 1 {
            scratch[n / 2]
        } else {
            0.5 * (scratch[n / 2 - 1] + scratch[n / 2])
        };
    }
    out
}

/// Median of a scalar slice, averaging the middle pair for even counts.
pub fn scalar_median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|x, y| x.partial_cmp(y).expect("non-finite value"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Closest point on a triangle to `p`, returned with its squared distance.
///
/// Region-based algorithm after Eberly's "Distance Between Point and Triangle in 3D".
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> (Vector3<f64>, f64) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;

    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, (p - a).norm_squared());
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, (p - b).norm_squared());
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        let q = a + ab * v;
        return (q, (p - q).norm_squared());
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, (p - c).norm_squared());
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        let q = a + ac * w;
        return (q, (p - q).norm_squared());
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        let q = b + (c - b) * w;
        return (q, (p - q).norm_squared());
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    let q = a + ab * v + ac * w;
    (q, (p - q).norm_squared())
}

/// Area of a triangle.
pub fn triangle_area(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Exact distance from a point to a triangle mesh (scan over all faces;
/// degenerate faces are ignored).
pub fn point_to_mesh_distance(
    point: &Vector3<f64>,
    vertices: &[Vector3<f64>],
    faces: &[[u32; 3]],
) -> f64 {
    let mut best = f64::INFINITY;
    for face in faces {
        let a = &vertices[face[0] as usize];
        let b = &vertices[face[1] as usize];
        let c = &vertices[face[2] as usize];
        if triangle_area(a, b, c) <= 1e-14 {
            continue;
        }
        let (_, d2) = closest_point_on_triangle(point, a, b, c);
        if d2 < best {
            best = d2;
        }
    }
    best.sqrt()
}
