//! Small fixed-size vector, rotation and quaternion helpers.
//!
//! Matrices are row-major `[[f64; 3]; 3]`. Quaternions are `[w, x, y, z]`
//! and composition `q1 ⊗ q2` applies `q2` first.

use crate::math;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];
pub type Quat = [f64; 4];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
pub const QUAT_IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    math::sqrt(dot(a, a))
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        a
    }
}

#[inline]
pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// `mᵀ v`
#[inline]
pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn mat_add(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = *a;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += b[i][j];
        }
    }
    out
}

pub fn mat_scale(a: &Mat3, s: f64) -> Mat3 {
    let mut out = *a;
    for row in &mut out {
        for v in row {
            *v *= s;
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// Frobenius inner product.
pub fn mat_dot(a: &Mat3, b: &Mat3) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        s += dot(a[i], b[i]);
    }
    s
}

/// Cross-product matrix: `skew(a) b == cross(a, b)`.
pub fn skew(a: Vec3) -> Mat3 {
    [[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]]
}

pub fn mat_from_flat(f: &[f64]) -> Mat3 {
    [[f[0], f[1], f[2]], [f[3], f[4], f[5]], [f[6], f[7], f[8]]]
}

pub fn mat_to_flat(m: &Mat3) -> [f64; 9] {
    [
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
    ]
}

/// Max deviation of `mᵀm` from identity.
pub fn orthonormality_error(m: &Mat3) -> f64 {
    let p = mat_mul(&transpose(m), m);
    let mut e: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let t = if i == j { 1.0 } else { 0.0 };
            e = e.max((p[i][j] - t).abs());
        }
    }
    e
}

// Coefficients of R = I + a K + b K^2 and their derivatives divided by theta,
// with Taylor series near zero.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-2 {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = (math::sin(theta), math::cos(theta));
        (
            s / theta,
            (1.0 - c) / t2,
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    }
}

/// Rotation matrix of an axis-angle vector (angle = norm).
pub fn rodrigues(v: Vec3) -> Mat3 {
    let theta = norm(v);
    let (a, b, _, _) = rodrigues_coeffs(theta);
    let k = skew(v);
    let k2 = mat_mul(&k, &k);
    mat_add(&mat_add(&IDENTITY, &mat_scale(&k, a)), &mat_scale(&k2, b))
}

/// `[dR/dv_0, dR/dv_1, dR/dv_2]`.
pub fn rodrigues_jacobian(v: Vec3) -> [Mat3; 3] {
    let theta = norm(v);
    let (a, b, c1, c2) = rodrigues_coeffs(theta);
    let k = skew(v);
    let k2 = mat_mul(&k, &k);
    let mut out = [[[0.0; 3]; 3]; 3];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ei = skew(e);
        let sym = mat_add(&mat_mul(&ei, &k), &mat_mul(&k, &ei));
        let mut m = mat_scale(&k, c1 * v[i]);
        m = mat_add(&m, &mat_scale(&ei, a));
        m = mat_add(&m, &mat_scale(&k2, c2 * v[i]));
        m = mat_add(&m, &mat_scale(&sym, b));
        *slot = m;
    }
    out
}

/// Accumulate `dL/dv` given `dL/dR` for `R = rodrigues(v)`.
pub fn rodrigues_vjp(v: Vec3, grad_r: &Mat3) -> Vec3 {
    let j = rodrigues_jacobian(v);
    [mat_dot(&j[0], grad_r), mat_dot(&j[1], grad_r), mat_dot(&j[2], grad_r)]
}

pub fn quat_mul(a: Quat, b: Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_norm(q: Quat) -> f64 {
    math::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
}

pub fn quat_normalize(q: Quat) -> Quat {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn quat_conj(q: Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_mat(q: Quat) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// `dL/dq` for `R = quat_to_mat(q / |q|)` given `dL/dR`.
pub fn quat_to_mat_vjp(q: Quat, g: &Mat3) -> Quat {
    let n = quat_norm(q);
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let dw = 2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let dx = 2.0
        * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2] + z * g[2][0] + w * g[2][1]
            - 2.0 * x * g[2][2]);
    let dy = 2.0
        * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1]
            - 2.0 * y * g[2][2]);
    let dz = 2.0
        * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]);
    let dh = [dw, dx, dy, dz];
    let qh = [w, x, y, z];
    let proj = dh[0] * qh[0] + dh[1] * qh[1] + dh[2] * qh[2] + dh[3] * qh[3];
    [
        (dh[0] - qh[0] * proj) / n,
        (dh[1] - qh[1] * proj) / n,
        (dh[2] - qh[2] * proj) / n,
        (dh[3] - qh[3] * proj) / n,
    ]
}

/// Unit quaternion of a rotation matrix (Shepperd's method), with `w >= 0`.
pub fn quat_from_mat(m: &Mat3) -> Quat {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = math::sqrt(tr + 1.0) * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = math::sqrt(1.0 + m[0][0] - m[1][1] - m[2][2]) * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = math::sqrt(1.0 + m[1][1] - m[0][0] - m[2][2]) * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = math::sqrt(1.0 + m[2][2] - m[0][0] - m[1][1]) * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    let q = quat_normalize(q);
    if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

pub fn quat_from_axis_angle(v: Vec3) -> Quat {
    let theta = norm(v);
    if theta < 1e-12 {
        return quat_normalize([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]]);
    }
    let s = math::sin(0.5 * theta) / theta;
    [math::cos(0.5 * theta), v[0] * s, v[1] * s, v[2] * s]
}

/// Same rotation up to sign.
pub fn quat_distance(a: Quat, b: Quat) -> f64 {
    let d1: f64 = (0..4).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max);
    let d2: f64 = (0..4).map(|i| (a[i] + b[i]).abs()).fold(0.0, f64::max);
    d1.min(d2)
}
