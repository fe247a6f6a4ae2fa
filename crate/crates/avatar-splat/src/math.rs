pub type Vec2 = nalgebra::Vector2<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;
pub type Vec4 = nalgebra::Vector4<f64>;
pub type Mat2 = nalgebra::Matrix2<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Mat4 = nalgebra::Matrix4<f64>;

/// Below this norm a polynomial quaternion is treated as degenerate.
pub const QUAT_NORM_EPS: f64 = 1e-8;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `sigmoid`. `p` must lie strictly in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Unit quaternion (w, x, y, z) for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: Vec3, angle: f64) -> Vec4 {
    let a = axis.normalize();
    let (s, c) = (angle * 0.5).sin_cos();
    Vec4::new(c, a.x * s, a.y * s, a.z * s)
}

pub const QUAT_IDENTITY: Vec4 = Vec4::new(1.0, 0.0, 0.0, 0.0);

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_matrix(q: Vec4) -> Mat3 {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Mat3::new(
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

/// dL/dq given dL/dR, for R = quat_to_matrix(q) with q unit.
///
/// Each component k uses <dL/dR, dR/dq_k> with the closed-form dR/dq_k,
/// e.g. dR/dw = 2 [[0,-z,y],[z,0,-x],[-y,x,0]].
pub fn quat_to_matrix_backward(q: Vec4, d_r: &Mat3) -> Vec4 {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = |m: &Mat3| (d_r.component_mul(m)).sum();
    let dw = Mat3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    let dx = Mat3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x);
    let dy = Mat3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y);
    let dz = Mat3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0);
    2.0 * Vec4::new(g(&dw), g(&dx), g(&dy), g(&dz))
}

/// Normalizes `u`; returns the unit quaternion and ||u||.
/// Degenerate inputs (||u|| < QUAT_NORM_EPS) yield the identity rotation.
pub fn quat_normalize(u: Vec4) -> (Vec4, f64) {
    let n = u.norm();
    if n < QUAT_NORM_EPS {
        (QUAT_IDENTITY, n)
    } else {
        (u / n, n)
    }
}

/// dL/du for q = u/||u||: (I - q qᵀ) dL/dq / ||u||.
/// Degenerate inputs get zero gradient (the forward pass pinned them to identity).
pub fn quat_normalize_backward(q: Vec4, norm: f64, d_q: Vec4) -> Vec4 {
    if norm < QUAT_NORM_EPS {
        return Vec4::zeros();
    }
    (d_q - q * q.dot(&d_q)) / norm
}

pub fn transform_point(m: &Mat4, p: Vec3) -> Vec3 {
    let h = m * Vec4::new(p.x, p.y, p.z, 1.0);
    Vec3::new(h.x, h.y, h.z)
}

pub fn rotation_part(m: &Mat4) -> Mat3 {
    m.fixed_view::<3, 3>(0, 0).into_owned()
}

pub fn translation_part(m: &Mat4) -> Vec3 {
    Vec3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)])
}

pub fn compose_rt(r: &Mat3, t: Vec3) -> Mat4 {
    let mut m = Mat4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m[(0, 3)] = t.x;
    m[(1, 3)] = t.y;
    m[(2, 3)] = t.z;
    m
}

/// True when `m` is a rigid transform: orthonormal rotation block,
/// last row (0,0,0,1).
pub fn is_rigid(m: &Mat4, tol: f64) -> bool {
    let r = rotation_part(m);
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    let row_ok = m[(3, 0)].abs() <= tol
        && m[(3, 1)].abs() <= tol
        && m[(3, 2)].abs() <= tol
        && (m[(3, 3)] - 1.0).abs() <= tol;
    err <= tol && row_ok && m.iter().all(|v| v.is_finite())
}

/// Inverse of a rigid transform: [Rᵀ | -Rᵀt].
pub fn rigid_inverse(m: &Mat4) -> Mat4 {
    let rt = rotation_part(m).transpose();
    let t = translation_part(m);
    compose_rt(&rt, -(rt * t))
}

/// Distance from `p` to segment [a, b].
pub fn point_segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= f64::EPSILON {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}
