//! Closed-form SO(3) helpers: axis rotations, the viewpoint/in-plane
//! factorization `R = R_vp · R_ip`, the 6D rotation representation, the
//! geodesic error metric and the codecs between angles and spherical bins.
//!
//! Conventions: the zenith is `(0, 0, 1)`; inclination `theta = acos(v_z)`
//! lies in `[0, pi]` and azimuth `phi = atan2(v_y, v_x)` lies in `[0, 2pi)`.
//! With these, `viewpoint_rotation(viewpoint_from_direction(v))` maps the
//! zenith onto `v`. Bin indices are zero-based everywhere.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{invalid, Error, Result};

const TAU: f64 = 2.0 * PI;
const POLE_EPS: f64 = 1e-9;
const UNIT_TOL: f64 = 1e-6;
const SIXD_EPS: f64 = 1e-12;

/// A proper rotation matrix (orthonormal, determinant +1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and orientation to 1e-9 per entry.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("rotation matrix".into()));
        }
        let gram = m.transpose() * m;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if ortho_err > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return invalid(format!(
                "not a rotation (|RᵀR − I|max = {ortho_err:.3e}, det = {det:.12})"
            ));
        }
        Ok(Rotation(m))
    }

    /// Row-major entries.
    pub fn from_row_slice(values: &[f64]) -> Result<Self> {
        if values.len() != 9 {
            return invalid(format!("expected 9 values, got {}", values.len()));
        }
        Self::from_matrix(Matrix3::from_row_slice(values))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn column(&self, j: usize) -> Vector3<f64> {
        self.0.column(j).into_owned()
    }

    pub fn zenith(&self) -> UnitVector {
        UnitVector(self.column(2))
    }

    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let v = self.0 * Vector3::new(p[0], p[1], p[2]);
        [v.x, v.y, v.z]
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.0.transpose() * self.0;
        let e = (gram - Matrix3::identity()).abs().max();
        e.max((self.0.determinant() - 1.0).abs())
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul for &Rotation {
    type Output = Rotation;

    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitVector(Vector3<f64>);

impl UnitVector {
    /// Accepts vectors whose norm is within 1e-6 of one and renormalizes them.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let v = Vector3::new(x, y, z);
        let n = v.norm();
        if !n.is_finite() {
            return Err(Error::NonFinite("direction".into()));
        }
        if (n - 1.0).abs() > UNIT_TOL {
            return invalid(format!("direction norm {n} is not 1"));
        }
        Ok(UnitVector(v / n))
    }

    /// Normalizes an arbitrary nonzero vector.
    pub fn normalize(x: f64, y: f64, z: f64) -> Option<Self> {
        let v = Vector3::new(x, y, z);
        let n = v.norm();
        (n > 0.0 && n.is_finite()).then(|| UnitVector(v / n))
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }
}

/// Azimuth `phi` in `[0, 2pi)` and inclination `theta` in `[0, pi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewpointAngles {
    pub phi: f64,
    pub theta: f64,
}

impl ViewpointAngles {
    pub fn new(phi: f64, theta: f64) -> Result<Self> {
        if !phi.is_finite() || !theta.is_finite() {
            return Err(Error::NonFinite("viewpoint angles".into()));
        }
        if !(0.0..TAU).contains(&phi) {
            return invalid(format!("azimuth {phi} outside [0, 2pi)"));
        }
        if !(0.0..=PI).contains(&theta) {
            return invalid(format!("inclination {theta} outside [0, pi]"));
        }
        Ok(ViewpointAngles { phi, theta })
    }

    /// Unit direction with these spherical angles.
    pub fn direction(&self) -> Vector3<f64> {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        Vector3::new(st * cp, st * sp, ct)
    }
}

fn check_finite(angle: f64) -> Result<()> {
    if angle.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("angle {angle} is not finite")))
    }
}

/// Rotation about the third axis.
pub fn rot_z(angle: f64) -> Result<Rotation> {
    check_finite(angle)?;
    let (s, c) = angle.sin_cos();
    Ok(Rotation(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)))
}

/// Rotation about the second axis.
pub fn rot_y(angle: f64) -> Result<Rotation> {
    check_finite(angle)?;
    let (s, c) = angle.sin_cos();
    Ok(Rotation(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)))
}

pub fn viewpoint_from_direction(v: &UnitVector) -> ViewpointAngles {
    let theta = v.z().clamp(-1.0, 1.0).acos();
    if !(POLE_EPS..=PI - POLE_EPS).contains(&theta) {
        return ViewpointAngles { phi: 0.0, theta };
    }
    let mut phi = v.y().atan2(v.x());
    if phi < 0.0 {
        phi += TAU;
    }
    if phi >= TAU {
        phi = 0.0;
    }
    ViewpointAngles { phi, theta }
}

/// `R_vp = R_z(phi) · R_y(theta)`.
pub fn viewpoint_rotation(a: &ViewpointAngles) -> Rotation {
    let (st, ct) = a.theta.sin_cos();
    let (sp, cp) = a.phi.sin_cos();
    // Expanded product of the two axis rotations.
    Rotation(Matrix3::new(
        cp * ct,
        -sp,
        cp * st,
        sp * ct,
        cp,
        sp * st,
        -st,
        0.0,
        ct,
    ))
}

/// Splits `r` into `(R_vp, R_ip)` with `R_vp · R_ip = r` and `R_ip` fixing
/// the zenith.
pub fn decompose(r: &Rotation) -> (Rotation, Rotation) {
    let angles = viewpoint_from_direction(&r.zenith());
    let r_vp = viewpoint_rotation(&angles);
    let r_ip = Rotation(r_vp.0.transpose() * r.0);
    (r_vp, r_ip)
}

/// Gram–Schmidt map from the 6D representation (two stacked 3-vectors) to
/// a rotation whose first two columns span the same oriented plane.
pub fn sixd_to_rotation(d: &[f64; 6]) -> Result<Rotation> {
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("6D representation {d:?}")));
    }
    let a = Vector3::new(d[0], d[1], d[2]);
    let b = Vector3::new(d[3], d[4], d[5]);
    let na = a.norm();
    if na < SIXD_EPS {
        return Err(Error::DegenerateInput(format!(
            "first 6D triple {a:?} has zero norm"
        )));
    }
    let c1 = a / na;
    let resid = b - c1 * c1.dot(&b);
    let nr = resid.norm();
    if nr < SIXD_EPS * b.norm().max(1.0) {
        return Err(Error::DegenerateInput(format!(
            "second 6D triple {b:?} is parallel to the first"
        )));
    }
    let c2 = resid / nr;
    let c3 = c1.cross(&c2);
    Ok(Rotation(Matrix3::from_columns(&[c1, c2, c3])))
}

/// Angle of the relative rotation `aᵀb`, in degrees.
pub fn geodesic_degrees(a: &Rotation, b: &Rotation) -> f64 {
    let tr = (a.0.transpose() * b.0).trace();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Center azimuth of a zero-based bin.
pub fn decode_azimuth(w_max: usize, width: usize) -> Result<f64> {
    if w_max >= width {
        return invalid(format!("azimuth bin {w_max} out of range 0..{width}"));
    }
    Ok((w_max as f64 + 0.5) / width as f64 * TAU)
}

/// Center inclination of a zero-based bin.
pub fn decode_inclination(h_max: usize, height: usize) -> Result<f64> {
    if h_max >= height {
        return invalid(format!(
            "inclination bin {h_max} out of range 0..{height}"
        ));
    }
    Ok((h_max as f64 + 0.5) / height as f64 * PI)
}

/// Zero-based `(h, w)` bin containing the angles.
pub fn bins_of_angles(a: &ViewpointAngles, height: usize, width: usize) -> (usize, usize) {
    let h = ((a.theta / PI * height as f64).floor() as usize).min(height - 1);
    let w = ((a.phi / TAU * width as f64).floor() as usize) % width;
    (h, w)
}

/// Rotation whose zenith points at the center of bin `(h, w)`.
pub fn bin_rotation(h: usize, w: usize, height: usize, width: usize) -> Result<Rotation> {
    let phi = decode_azimuth(w, width)?;
    let theta = decode_inclination(h, height)?;
    Ok(viewpoint_rotation(&ViewpointAngles { phi, theta }))
}

/// Uniformly distributed rotation (Shoemake's subgroup algorithm).
pub fn uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen::<f64>() * TAU;
    let u3: f64 = rng.gen::<f64>() * TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos());
    Rotation(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_abs(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        (a - b).abs().max()
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> UnitVector {
        loop {
            let v = Vector3::new(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            );
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return UnitVector(v / n);
            }
        }
    }

    #[test]
    fn axis_rotations_at_quarter_turn() {
        let z = rot_z(PI / 2.0).unwrap();
        let expect = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!(max_abs(z.matrix(), &expect) < 1e-15);
        let y = rot_y(PI / 2.0).unwrap();
        let expect = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0);
        assert!(max_abs(y.matrix(), &expect) < 1e-15);
        assert_eq!(rot_z(0.0).unwrap(), Rotation::identity());
        assert_eq!(rot_y(0.0).unwrap(), Rotation::identity());
    }

    #[test]
    fn axis_rotations_reject_non_finite() {
        assert!(matches!(rot_z(f64::NAN), Err(Error::InvalidArgument(_))));
        assert!(matches!(rot_y(f64::INFINITY), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn axis_rotation_group_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = rng.gen::<f64>() * 10.0 - 5.0;
            let b = rng.gen::<f64>() * 10.0 - 5.0;
            let lhs = rot_z(a).unwrap() * rot_z(b).unwrap();
            assert!(max_abs(lhs.matrix(), rot_z(a + b).unwrap().matrix()) < 1e-12);
            let t = rot_y(a).unwrap().transpose();
            assert!(max_abs(t.matrix(), rot_y(-a).unwrap().matrix()) < 1e-15);
        }
    }

    #[test]
    fn viewpoint_of_axes() {
        let a = viewpoint_from_direction(&UnitVector::new(0.0, 0.0, 1.0).unwrap());
        assert_eq!((a.phi, a.theta), (0.0, 0.0));
        let a = viewpoint_from_direction(&UnitVector::new(1.0, 0.0, 0.0).unwrap());
        assert_eq!(a.phi, 0.0);
        assert!((a.theta - PI / 2.0).abs() < 1e-15);
        let a = viewpoint_from_direction(&UnitVector::new(0.0, 1.0, 0.0).unwrap());
        assert!((a.phi - PI / 2.0).abs() < 1e-15);
        assert!((a.theta - PI / 2.0).abs() < 1e-15);
        let a = viewpoint_from_direction(&UnitVector::new(0.0, 0.0, -1.0).unwrap());
        assert_eq!(a.phi, 0.0);
        assert_eq!(a.theta, PI);
    }

    #[test]
    fn non_unit_direction_is_rejected() {
        assert!(matches!(
            UnitVector::new(1.0, 1.0, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(UnitVector::new(1.0 + 1e-7, 0.0, 0.0).is_ok());
    }

    #[test]
    fn angles_validate_ranges() {
        assert!(ViewpointAngles::new(TAU, 0.0).is_err());
        assert!(ViewpointAngles::new(0.0, PI + 1e-9).is_err());
        assert!(ViewpointAngles::new(-0.1, 0.0).is_err());
        assert!(ViewpointAngles::new(0.0, PI).is_ok());
    }

    #[test]
    fn viewpoint_rotation_examples() {
        let r = viewpoint_rotation(&ViewpointAngles::new(0.0, 0.0).unwrap());
        assert_eq!(r, Rotation::identity());
        let r = viewpoint_rotation(&ViewpointAngles::new(0.0, PI / 2.0).unwrap());
        assert!(max_abs(r.matrix(), rot_y(PI / 2.0).unwrap().matrix()) < 1e-15);
    }

    #[test]
    fn viewpoint_rotation_matches_axis_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a = ViewpointAngles::new(rng.gen::<f64>() * TAU, rng.gen::<f64>() * PI).unwrap();
            let product = rot_z(a.phi).unwrap() * rot_y(a.theta).unwrap();
            assert!(max_abs(viewpoint_rotation(&a).matrix(), product.matrix()) < 1e-15);
        }
    }

    #[test]
    fn viewpoint_round_trip_through_third_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let v = random_unit(&mut rng);
            let r = viewpoint_rotation(&viewpoint_from_direction(&v));
            worst = worst.max((r.column(2) - v.as_vector()).abs().max());
        }
        assert!(worst < 1e-12, "worst third-column error {worst:e}");
    }

    #[test]
    fn decompose_special_cases() {
        let (vp, ip) = decompose(&Rotation::identity());
        assert_eq!(vp, Rotation::identity());
        assert_eq!(ip, Rotation::identity());
        for beta in [0.3, 1.7, -2.9, 3.0] {
            let r = rot_z(beta).unwrap();
            let (vp, ip) = decompose(&r);
            assert_eq!(vp, Rotation::identity());
            assert!(max_abs(ip.matrix(), r.matrix()) < 1e-15);
        }
    }

    #[test]
    fn decompose_reconstructs_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let r = uniform_rotation(&mut rng);
            let (vp, ip) = decompose(&r);
            let err = (vp.matrix() * ip.matrix() - r.matrix()).norm();
            assert!(err < 1e-12, "reconstruction error {err:e}");
            assert!((vp.column(2) - r.column(2)).abs().max() < 1e-12);
            assert!((ip.column(2) - Vector3::z()).abs().max() < 1e-9);
            assert!(vp.orthonormality_error() < 1e-9);
            assert!(ip.orthonormality_error() < 1e-9);
        }
    }

    #[test]
    fn sixd_examples() {
        let r = sixd_to_rotation(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(r, Rotation::identity());
        let r = sixd_to_rotation(&[2.0, 0.0, 0.0, 3.0, 1.0, 0.0]).unwrap();
        assert!(max_abs(r.matrix(), &Matrix3::identity()) < 1e-15);
    }

    #[test]
    fn sixd_degenerate_inputs() {
        assert!(matches!(
            sixd_to_rotation(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            sixd_to_rotation(&[1.0, 2.0, 3.0, -2.0, -4.0, -6.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    // Independent orthonormalization: classical Gram–Schmidt over all three
    // standard steps on plain arrays, third column from the explicit cofactor
    // expansion.
    fn gram_schmidt_oracle(d: &[f64; 6]) -> [[f64; 3]; 3] {
        let dot = |u: &[f64; 3], v: &[f64; 3]| u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
        let a = [d[0], d[1], d[2]];
        let b = [d[3], d[4], d[5]];
        let na = dot(&a, &a).sqrt();
        let e1 = [a[0] / na, a[1] / na, a[2] / na];
        let p = dot(&e1, &b);
        let r = [b[0] - p * e1[0], b[1] - p * e1[1], b[2] - p * e1[2]];
        let nr = dot(&r, &r).sqrt();
        let e2 = [r[0] / nr, r[1] / nr, r[2] / nr];
        let e3 = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        // rows of the result
        [
            [e1[0], e2[0], e3[0]],
            [e1[1], e2[1], e3[1]],
            [e1[2], e2[2], e3[2]],
        ]
    }

    #[test]
    fn sixd_matches_gram_schmidt_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let d: [f64; 6] = std::array::from_fn(|_| rng.gen::<f64>() * 4.0 - 2.0);
            let r = sixd_to_rotation(&d).unwrap();
            let o = gram_schmidt_oracle(&d);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((r.matrix()[(i, j)] - o[i][j]).abs() < 1e-12);
                }
            }
            assert!(r.orthonormality_error() < 1e-9);
            let lam = rng.gen::<f64>() * 10.0 + 0.01;
            let scaled = [lam * d[0], lam * d[1], lam * d[2], d[3], d[4], d[5]];
            let rs = sixd_to_rotation(&scaled).unwrap();
            assert!(max_abs(rs.matrix(), r.matrix()) < 1e-12);
        }
    }

    #[test]
    fn geodesic_examples_and_symmetry() {
        let id = Rotation::identity();
        assert_eq!(geodesic_degrees(&id, &id), 0.0);
        assert!((geodesic_degrees(&id, &rot_z(PI / 2.0).unwrap()) - 90.0).abs() < 1e-12);
        assert!((geodesic_degrees(&id, &rot_y(PI).unwrap()) - 180.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (a, b, c) = (
                uniform_rotation(&mut rng),
                uniform_rotation(&mut rng),
                uniform_rotation(&mut rng),
            );
            assert_eq!(geodesic_degrees(&a, &b), geodesic_degrees(&b, &a));
            let ab = geodesic_degrees(&a, &b);
            let bc = geodesic_degrees(&b, &c);
            let ac = geodesic_degrees(&a, &c);
            assert!(ac <= ab + bc + 1e-9);
        }
    }

    #[test]
    fn decode_examples() {
        assert!((decode_azimuth(0, 32).unwrap() - PI / 32.0).abs() < 1e-15);
        assert!((decode_azimuth(31, 32).unwrap() - 63.0 * PI / 32.0).abs() < 1e-15);
        assert!((decode_azimuth(15, 32).unwrap() - 31.0 * PI / 32.0).abs() < 1e-15);
        assert!((decode_inclination(0, 32).unwrap() - PI / 64.0).abs() < 1e-15);
        assert!((decode_inclination(31, 32).unwrap() - 63.0 * PI / 64.0).abs() < 1e-15);
        assert!((decode_inclination(16, 32).unwrap() - 33.0 * PI / 64.0).abs() < 1e-15);
        assert!(decode_azimuth(32, 32).is_err());
        assert!(decode_inclination(32, 32).is_err());
    }

    #[test]
    fn bins_examples() {
        let a = ViewpointAngles::new(PI / 32.0, PI / 64.0).unwrap();
        assert_eq!(bins_of_angles(&a, 32, 32), (0, 0));
        let a = ViewpointAngles::new(TAU - 1e-12, PI - 1e-12).unwrap();
        assert_eq!(bins_of_angles(&a, 32, 32), (31, 31));
        let a = ViewpointAngles::new(0.0, PI).unwrap();
        assert_eq!(bins_of_angles(&a, 32, 32), (31, 0));
    }

    #[test]
    fn bins_decode_round_trip_within_half_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (h, w) in [(32, 32), (16, 16), (7, 10)] {
            for _ in 0..1000 {
                let a = ViewpointAngles::new(rng.gen::<f64>() * TAU, rng.gen::<f64>() * PI).unwrap();
                let (hb, wb) = bins_of_angles(&a, h, w);
                let phi = decode_azimuth(wb, w).unwrap();
                let theta = decode_inclination(hb, h).unwrap();
                assert!((phi - a.phi).abs() <= PI / w as f64 + 1e-12);
                assert!((theta - a.theta).abs() <= PI / (2 * h) as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn uniform_rotations_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            assert!(uniform_rotation(&mut rng).orthonormality_error() < 1e-9);
        }
    }
}
