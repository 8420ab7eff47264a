//! Core geometric and spherical-harmonic math shared by all other modules.
//!
//! Everything here is a pure function on immutable inputs. Forward kernels are
//! paired with `*_vjp` backward kernels (vector-Jacobian products) so the
//! rasterizer can chain analytic gradients from pixels all the way back to
//! quaternions, log-scales, Fourier coefficients and pose deltas.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Maximum spherical-harmonic degree supported by the basis tables.
pub const SH_MAX_DEGREE: usize = 3;

/// How Eq.-style vehicle rotations compose with the per-frame pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RotationConvention {
    /// Rigid-body composition `R_w = R_t R_o` (consistent with the position row).
    #[default]
    Composed,
    /// The literal `R_w = R_o R_t^T` form, kept selectable for comparison.
    Literal,
}

// ---------------------------------------------------------------------------
// Quaternions
// ---------------------------------------------------------------------------

/// Unit quaternion `(w, x, y, z)`.
///
/// Stored parameters may drift off the unit sphere during optimization; every
/// consumer normalizes first and backpropagates through the normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn identity() -> Self {
        Quat::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        Quat::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(&self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(&self, o: &Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Hamilton product `self ⊗ other`.
    pub fn mul(&self, o: &Quat) -> Quat {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (o.w, o.x, o.y, o.z);
        Quat::new(
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        )
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        quat_to_rotmat(self) * v
    }

    /// Exponential map from an axis-angle 3-vector.
    pub fn from_axis_angle(theta: &Vector3<f64>) -> Quat {
        let a = theta.norm();
        let half = 0.5 * a;
        // sin(a/2)/a with a stable small-angle series.
        let s_over_a = if a < 1e-6 {
            0.5 - a * a / 48.0
        } else {
            half.sin() / a
        };
        Quat::new(
            half.cos(),
            theta.x * s_over_a,
            theta.y * s_over_a,
            theta.z * s_over_a,
        )
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 4]) -> Quat {
        Quat::new(a[0], a[1], a[2], a[3])
    }
}

/// Rotation matrix of a normalized quaternion.
///
/// Normalizes internally if the norm deviates beyond 1e-6.
pub fn quat_to_rotmat(q: &Quat) -> Matrix3<f64> {
    let q = if (q.norm() - 1.0).abs() > 1e-6 {
        q.normalized()
    } else {
        *q
    };
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// VJP of [`quat_to_rotmat`] w.r.t. the (unit) quaternion components.
pub fn quat_to_rotmat_vjp(q: &Quat, d_r: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    let g = |m: &Matrix3<f64>| {
        d_r[(0, 0)] * m[(0, 0)]
            + d_r[(0, 1)] * m[(0, 1)]
            + d_r[(0, 2)] * m[(0, 2)]
            + d_r[(1, 0)] * m[(1, 0)]
            + d_r[(1, 1)] * m[(1, 1)]
            + d_r[(1, 2)] * m[(1, 2)]
            + d_r[(2, 0)] * m[(2, 0)]
            + d_r[(2, 1)] * m[(2, 1)]
            + d_r[(2, 2)] * m[(2, 2)]
    };
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    [g(&dw), g(&dx), g(&dy), g(&dz)]
}

/// VJP of quaternion normalization: maps a gradient w.r.t. the normalized
/// quaternion back to the raw stored components.
pub fn quat_normalize_vjp(q_raw: &Quat, d_qn: [f64; 4]) -> [f64; 4] {
    let n = q_raw.norm();
    let qn = q_raw.normalized();
    let proj = qn.w * d_qn[0] + qn.x * d_qn[1] + qn.y * d_qn[2] + qn.z * d_qn[3];
    [
        (d_qn[0] - qn.w * proj) / n,
        (d_qn[1] - qn.x * proj) / n,
        (d_qn[2] - qn.y * proj) / n,
        (d_qn[3] - qn.z * proj) / n,
    ]
}

/// VJP of the Hamilton product `q = a ⊗ b`.
pub fn quat_mul_vjp(a: &Quat, b: &Quat, d: [f64; 4]) -> ([f64; 4], [f64; 4]) {
    let (aw, ax, ay, az) = (a.w, a.x, a.y, a.z);
    let (bw, bx, by, bz) = (b.w, b.x, b.y, b.z);
    let da = [
        d[0] * bw + d[1] * bx + d[2] * by + d[3] * bz,
        -d[0] * bx + d[1] * bw - d[2] * bz + d[3] * by,
        -d[0] * by + d[1] * bz + d[2] * bw - d[3] * bx,
        -d[0] * bz - d[1] * by + d[2] * bx + d[3] * bw,
    ];
    let db = [
        d[0] * aw + d[1] * ax + d[2] * ay + d[3] * az,
        -d[0] * ax + d[1] * aw + d[2] * az - d[3] * ay,
        -d[0] * ay - d[1] * az + d[2] * aw + d[3] * ax,
        -d[0] * az + d[1] * ay - d[2] * ax + d[3] * aw,
    ];
    (da, db)
}

/// VJP of [`Quat::from_axis_angle`].
pub fn axis_angle_to_quat_vjp(theta: &Vector3<f64>, d_q: [f64; 4]) -> Vector3<f64> {
    let a = theta.norm();
    let half = 0.5 * a;
    let (s_over_a, ds_over_a_da) = if a < 1e-6 {
        (0.5 - a * a / 48.0, -a / 24.0)
    } else {
        let s = half.sin();
        (s / a, (0.5 * half.cos() - s / a) / a)
    };
    // q_w = cos(a/2), q_i = theta_i * s_over_a, a = |theta|.
    let dw_da = if a < 1e-6 { -0.5 * half } else { -0.5 * half.sin() };
    let mut grad = Vector3::zeros();
    let dv = Vector3::new(d_q[1], d_q[2], d_q[3]);
    grad += dv * s_over_a;
    if a > 0.0 {
        let da_dtheta = theta / a;
        let chain = d_q[0] * dw_da + dv.dot(theta) * ds_over_a_da;
        grad += da_dtheta * chain;
    }
    grad
}

/// VJP of `v_out = R(q) v` w.r.t. both the unit quaternion and the vector.
pub fn quat_rotate_vjp(q: &Quat, v: &Vector3<f64>, d_out: &Vector3<f64>) -> ([f64; 4], Vector3<f64>) {
    let r = quat_to_rotmat(q);
    let d_r = d_out * v.transpose();
    (quat_to_rotmat_vjp(q, &d_r), r.transpose() * d_out)
}

// ---------------------------------------------------------------------------
// Poses
// ---------------------------------------------------------------------------

/// Rigid transform: rotation followed by translation, `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Quat, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: rotation.normalized(),
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::new(Quat::identity(), Vector3::zeros())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.conjugate();
        let t = -(rot_inv.rotate(&self.translation));
        Pose::new(rot_inv, t)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation.mul(&other.rotation),
            self.rotation.rotate(&other.translation) + self.translation,
        )
    }

    pub fn to_homogeneous(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&quat_to_rotmat(&self.rotation));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// World-frame placement of a vehicle-frame Gaussian (position + rotation).
pub fn transform_to_world(
    pose: &Pose,
    mu_o: &Vector3<f64>,
    r_o: &Quat,
    convention: RotationConvention,
) -> (Vector3<f64>, Quat) {
    let mu_w = pose.transform_point(mu_o);
    let q_w = match convention {
        RotationConvention::Composed => pose.rotation.mul(r_o),
        RotationConvention::Literal => r_o.mul(&pose.rotation.conjugate()),
    };
    (mu_w, q_w)
}

/// Per-frame pose correction: rotation right-multiplied, translation added.
pub fn apply_pose_delta(pose: &Pose, delta_rot: &Quat, delta_trans: &Vector3<f64>) -> Pose {
    Pose {
        rotation: pose.rotation.mul(delta_rot),
        translation: pose.translation + delta_trans,
    }
}

// ---------------------------------------------------------------------------
// Covariance
// ---------------------------------------------------------------------------

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(scale)`.
pub fn build_covariance(scale: &Vector3<f64>, q: &Quat) -> Result<Matrix3<f64>> {
    if scale.x <= 0.0 || scale.y <= 0.0 || scale.z <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "covariance scales must be positive, got {:?}",
            scale
        )));
    }
    let r = quat_to_rotmat(q);
    let d = Matrix3::from_diagonal(&Vector3::new(
        scale.x * scale.x,
        scale.y * scale.y,
        scale.z * scale.z,
    ));
    Ok(r * d * r.transpose())
}

/// VJP of [`build_covariance`]: gradients w.r.t. scale and unit quaternion.
pub fn build_covariance_vjp(
    scale: &Vector3<f64>,
    q: &Quat,
    d_sigma: &Matrix3<f64>,
) -> (Vector3<f64>, [f64; 4]) {
    let r = quat_to_rotmat(q);
    let d = Vector3::new(scale.x * scale.x, scale.y * scale.y, scale.z * scale.z);
    let sym = d_sigma + d_sigma.transpose();
    // dL/dR = (G + Gᵀ) R D
    let d_r = sym * r * Matrix3::from_diagonal(&d);
    let d_q = quat_to_rotmat_vjp(q, &d_r);
    // dL/dD_kk = (Rᵀ G R)_kk, then chain D_kk = s_k².
    let inner = r.transpose() * d_sigma * r;
    let d_scale = Vector3::new(
        2.0 * scale.x * inner[(0, 0)],
        2.0 * scale.y * inner[(1, 1)],
        2.0 * scale.z * inner[(2, 2)],
    );
    (d_scale, d_q)
}

/// Unnormalized Gaussian density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
pub fn eval_gaussian(x: &Vector3<f64>, mu: &Vector3<f64>, sigma: &Matrix3<f64>) -> Result<f64> {
    let eig = sigma.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !cond.is_finite() || cond > 1e12 {
        return Err(Error::DegenerateCovariance { cond, limit: 1e12 });
    }
    let d = x - mu;
    let chol = sigma
        .cholesky()
        .ok_or(Error::DegenerateCovariance { cond, limit: 1e12 })?;
    let solved = chol.solve(&d);
    Ok((-0.5 * d.dot(&solved)).exp())
}

// ---------------------------------------------------------------------------
// Spherical harmonics
// ---------------------------------------------------------------------------

/// Real SH coefficients for 3 color channels, indexed flat over `(l, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoefficients {
    pub degree: usize,
    /// `(degree+1)²` RGB coefficient triples.
    pub coeffs: Vec<Vector3<f64>>,
}

impl ShCoefficients {
    pub fn zeros(degree: usize) -> Self {
        ShCoefficients {
            degree,
            coeffs: vec![Vector3::zeros(); (degree + 1) * (degree + 1)],
        }
    }

    pub fn num_coeffs(&self) -> usize {
        (self.degree + 1) * (self.degree + 1)
    }
}

/// Real SH basis values at a normalized direction, degrees 0..=degree.
pub fn sh_basis(degree: usize, d: &Vector3<f64>) -> Vec<f64> {
    assert!(degree <= SH_MAX_DEGREE);
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = Vec::with_capacity((degree + 1) * (degree + 1));
    b.push(SH_C0);
    if degree >= 1 {
        b.push(-SH_C1 * y);
        b.push(SH_C1 * z);
        b.push(-SH_C1 * x);
    }
    if degree >= 2 {
        b.push(SH_C2[0] * x * y);
        b.push(SH_C2[1] * y * z);
        b.push(SH_C2[2] * (2.0 * z * z - x * x - y * y));
        b.push(SH_C2[3] * x * z);
        b.push(SH_C2[4] * (x * x - y * y));
    }
    if degree >= 3 {
        b.push(SH_C3[0] * y * (3.0 * x * x - y * y));
        b.push(SH_C3[1] * x * y * z);
        b.push(SH_C3[2] * y * (4.0 * z * z - x * x - y * y));
        b.push(SH_C3[3] * z * (2.0 * z * z - 3.0 * x * x - 3.0 * y * y));
        b.push(SH_C3[4] * x * (4.0 * z * z - x * x - y * y));
        b.push(SH_C3[5] * z * (x * x - y * y));
        b.push(SH_C3[6] * x * (x * x - 3.0 * y * y));
    }
    b
}

/// SH basis plus per-basis gradient w.r.t. the (normalized) direction.
pub fn sh_basis_with_grad(degree: usize, d: &Vector3<f64>) -> (Vec<f64>, Vec<Vector3<f64>>) {
    let (x, y, z) = (d.x, d.y, d.z);
    let b = sh_basis(degree, d);
    let mut g = Vec::with_capacity(b.len());
    g.push(Vector3::zeros());
    if degree >= 1 {
        g.push(Vector3::new(0.0, -SH_C1, 0.0));
        g.push(Vector3::new(0.0, 0.0, SH_C1));
        g.push(Vector3::new(-SH_C1, 0.0, 0.0));
    }
    if degree >= 2 {
        g.push(Vector3::new(SH_C2[0] * y, SH_C2[0] * x, 0.0));
        g.push(Vector3::new(0.0, SH_C2[1] * z, SH_C2[1] * y));
        g.push(Vector3::new(
            -2.0 * SH_C2[2] * x,
            -2.0 * SH_C2[2] * y,
            4.0 * SH_C2[2] * z,
        ));
        g.push(Vector3::new(SH_C2[3] * z, 0.0, SH_C2[3] * x));
        g.push(Vector3::new(2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0));
    }
    if degree >= 3 {
        g.push(Vector3::new(
            SH_C3[0] * 6.0 * x * y,
            SH_C3[0] * (3.0 * x * x - 3.0 * y * y),
            0.0,
        ));
        g.push(Vector3::new(SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y));
        g.push(Vector3::new(
            -2.0 * SH_C3[2] * x * y,
            SH_C3[2] * (4.0 * z * z - x * x - 3.0 * y * y),
            8.0 * SH_C3[2] * y * z,
        ));
        g.push(Vector3::new(
            -6.0 * SH_C3[3] * x * z,
            -6.0 * SH_C3[3] * y * z,
            SH_C3[3] * (6.0 * z * z - 3.0 * x * x - 3.0 * y * y),
        ));
        g.push(Vector3::new(
            SH_C3[4] * (4.0 * z * z - 3.0 * x * x - y * y),
            -2.0 * SH_C3[4] * x * y,
            8.0 * SH_C3[4] * x * z,
        ));
        g.push(Vector3::new(
            2.0 * SH_C3[5] * x * z,
            -2.0 * SH_C3[5] * y * z,
            SH_C3[5] * (x * x - y * y),
        ));
        g.push(Vector3::new(
            SH_C3[6] * (3.0 * x * x - 3.0 * y * y),
            -6.0 * SH_C3[6] * x * y,
            0.0,
        ));
    }
    (b, g)
}

/// Pre-activation RGB from SH coefficients at a unit view direction.
pub fn eval_sh(z: &ShCoefficients, dir: &Vector3<f64>) -> Vector3<f64> {
    let basis = sh_basis(z.degree, dir);
    let mut c = Vector3::zeros();
    for (b, coeff) in basis.iter().zip(z.coeffs.iter()) {
        c += coeff * *b;
    }
    c
}

// ---------------------------------------------------------------------------
// Fourier-time spherical harmonics
// ---------------------------------------------------------------------------

/// Per-SH-coefficient real trigonometric expansion over normalized time.
///
/// Basis: DC first, then interleaved cos/sin pairs of increasing harmonic,
/// `z(t) = f₀ + Σ_j f_{2j-1} cos(2πjt) + f_{2j} sin(2πjt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierShCoefficients {
    pub k: usize,
    pub degree: usize,
    /// Flat `(sh_index * k + j)` RGB triples.
    pub coeffs: Vec<Vector3<f64>>,
}

impl FourierShCoefficients {
    pub fn zeros(degree: usize, k: usize) -> Self {
        assert!(k >= 1);
        FourierShCoefficients {
            k,
            degree,
            coeffs: vec![Vector3::zeros(); (degree + 1) * (degree + 1) * k],
        }
    }

    pub fn num_sh(&self) -> usize {
        (self.degree + 1) * (self.degree + 1)
    }
}

/// Trigonometric time basis of length `k` at normalized time `t`.
pub fn fourier_basis(k: usize, t_norm: f64) -> Vec<f64> {
    let mut b = Vec::with_capacity(k);
    b.push(1.0);
    let mut harmonic = 1.0;
    while b.len() < k {
        let phase = 2.0 * std::f64::consts::PI * harmonic * t_norm;
        b.push(phase.cos());
        if b.len() < k {
            b.push(phase.sin());
        }
        harmonic += 1.0;
    }
    b
}

/// Recover SH coefficients at a normalized time in `[0, 1]`.
pub fn fourier_sh_at_time(f: &FourierShCoefficients, t_norm: f64) -> ShCoefficients {
    let basis = fourier_basis(f.k, t_norm);
    let num_sh = f.num_sh();
    let mut out = ShCoefficients::zeros(f.degree);
    for b in 0..num_sh {
        let mut v = Vector3::zeros();
        for (j, w) in basis.iter().enumerate() {
            v += f.coeffs[b * f.k + j] * *w;
        }
        out.coeffs[b] = v;
    }
    out
}

// ---------------------------------------------------------------------------
// Scalar activations
// ---------------------------------------------------------------------------

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
