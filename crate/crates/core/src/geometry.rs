//! Planar geometry in image pixel coordinates.
//!
//! All coordinates use the raster convention: `x` grows to the right, `y`
//! grows downward, and integer coordinates sit on pixel centers. Angles are
//! radians internally and degrees wherever they leave this module.

use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};

/// Points closer than this are treated as coincident.
pub const COINCIDENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3-D cross product.
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn midpoint(self, other: Point2) -> Point2 {
        Point2::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }

    /// Rotates by `angle` radians in the `x -> y` sense.
    pub fn rotated(self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<Point2> for f64 {
    type Output = Point2;
    fn mul(self, rhs: Point2) -> Point2 {
        Point2::new(self * rhs.x, self * rhs.y)
    }
}

/// Similarity transform `p -> scale * R(rotation) * p + translation`.
///
/// Used as the reference frame: it maps frame coordinates to image
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    scale: f64,
    rotation: f64,
    translation: Point2,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub const fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            translation: Point2::new(0.0, 0.0),
        }
    }

    pub fn new(scale: f64, rotation: f64, translation: Point2) -> Result<Self> {
        if !(scale.is_finite() && rotation.is_finite() && translation.is_finite()) {
            return Err(Error::NonFinite("similarity transform"));
        }
        if scale <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "similarity scale must be positive, got {scale}"
            )));
        }
        Ok(Self {
            scale,
            rotation: wrap_angle(rotation),
            translation,
        })
    }

    /// Builds the transform from its complex-multiplier form `p -> a*p + b`.
    fn from_complex(a: Point2, b: Point2) -> Self {
        Self {
            scale: a.norm(),
            rotation: a.y.atan2(a.x),
            translation: b,
        }
    }

    fn multiplier(&self) -> Point2 {
        let (s, c) = self.rotation.sin_cos();
        Point2::new(self.scale * c, self.scale * s)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> f64 {
        self.rotation
    }

    pub fn rotation_deg(&self) -> f64 {
        self.rotation.to_degrees()
    }

    pub fn translation(&self) -> Point2 {
        self.translation
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        complex_mul(self.multiplier(), p) + self.translation
    }

    pub fn invert(&self) -> Self {
        let inv = complex_inv(self.multiplier());
        Self::from_complex(inv, -1.0 * complex_mul(inv, self.translation))
    }

    /// `compose(a, b)` applies `b` first, then `a`.
    pub fn compose(a: &Self, b: &Self) -> Self {
        let ma = a.multiplier();
        Self::from_complex(
            complex_mul(ma, b.multiplier()),
            complex_mul(ma, b.translation) + a.translation,
        )
    }

    /// The unique similarity `T` with `T(q0) = p0` and `T(q1) = p1`.
    ///
    /// `q0`, `q1` are the fixed positions in the frame and `p0`, `p1` the
    /// detected positions in the image.
    pub fn from_point_pair(p0: Point2, p1: Point2, q0: Point2, q1: Point2) -> Result<Self> {
        if !(p0.is_finite() && p1.is_finite() && q0.is_finite() && q1.is_finite()) {
            return Err(Error::NonFinite("point pair"));
        }
        let dp = p1 - p0;
        let dq = q1 - q0;
        if dp.norm() < COINCIDENT_EPS || dq.norm() < COINCIDENT_EPS {
            return Err(Error::DegeneratePair);
        }
        let a = complex_mul(dp, complex_inv(dq));
        let b = p0 - complex_mul(a, q0);
        Ok(Self::from_complex(a, b))
    }
}

pub fn frame_from_point_pair(
    p0: Point2,
    p1: Point2,
    q0: Point2,
    q1: Point2,
) -> Result<SimilarityTransform> {
    SimilarityTransform::from_point_pair(p0, p1, q0, q1)
}

fn complex_mul(a: Point2, b: Point2) -> Point2 {
    Point2::new(a.x * b.x - a.y * b.y, a.x * b.y + a.y * b.x)
}

fn complex_inv(a: Point2) -> Point2 {
    let n2 = a.dot(a);
    Point2::new(a.x / n2, -a.y / n2)
}

/// Wraps an angle in radians into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    use std::f64::consts::PI;
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Signed angle from `u` to `v` in degrees, in `(-180, 180]`.
///
/// Positive when `u` turns onto `v` in the `+x -> +y` sense, which on a
/// y-down display is a clockwise turn.
pub fn signed_angle_deg(u: Point2, v: Point2) -> Result<f64> {
    if !(u.is_finite() && v.is_finite()) {
        return Err(Error::NonFinite("angle operand"));
    }
    if u.norm() == 0.0 || v.norm() == 0.0 {
        return Err(Error::ZeroVector);
    }
    let deg = u.cross(v).atan2(u.dot(v)).to_degrees();
    // atan2 gives -180 for (-0.0, negative); fold onto the closed end.
    Ok(if deg <= -180.0 { 180.0 } else { deg })
}

/// An open chain of segments with nonzero total length.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Point2>,
}

impl Polyline {
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidPolyline("needs at least two points"));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("polyline"));
        }
        let length: f64 = points.windows(2).map(|w| w[0].distance(w[1])).sum();
        if length <= 0.0 {
            return Err(Error::InvalidPolyline("total length is zero"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].distance(w[1])).sum()
    }

    /// Minimum Euclidean distance from `p` to any closed segment.
    pub fn distance_to(&self, p: Point2) -> f64 {
        self.points
            .windows(2)
            .map(|w| point_to_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn point_to_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(a + t * ab)
}

pub fn point_to_polyline_distance(p: Point2, curve: &Polyline) -> f64 {
    curve.distance_to(p)
}
