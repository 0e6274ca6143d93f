//! Procedural knee phantoms with exact landmarks and known alignment.
//!
//! Shapes are built in bone-local units where the tibial plateau is one unit
//! wide. Every landmark pair is mirror-symmetric about its bone's axis, so
//! pair midpoints lie on the axes and the measured angle equals the
//! constructed one up to rounding.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::image::{read_pgm, write_pgm, GrayImage};
use crate::landmarks::{read_pts, write_pts, Contour, LandmarkSet, Roles, Schema, Side};

pub const MIN_LANDMARKS: usize = 12;
pub const MAX_LANDMARKS: usize = 181;
pub const DEFAULT_LANDMARKS: usize = 40;

/// Landmarks must stay this far inside the image.
pub const IMAGE_MARGIN: f64 = 8.0;

const NOISE_STREAM: u64 = 0x6e6f_6973_655f_7631;

/// Fully specified phantom. Lengths in pixels, angles in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomParams {
    pub true_atfa: f64,
    pub width: usize,
    pub height: usize,
    /// Distance between the plateau corners.
    pub plateau_width: f64,
    pub femoral_shaft_width: f64,
    pub tibial_shaft_width: f64,
    pub condyle_width: f64,
    pub notch_width: f64,
    /// Height of the condyles above the distal femoral line.
    pub condyle_height: f64,
    /// Height of the notch roof above the distal femoral line.
    pub notch_offset: f64,
    /// Proximal extent of the femoral contour above the distal line.
    pub femoral_length: f64,
    /// Distal extent of the tibial contour below the plateau.
    pub tibial_length: f64,
    pub joint_gap: f64,
    /// In-plane rotation of the whole knee.
    pub rotation: f64,
    pub joint_center: Point2,
    pub side: Side,
    pub landmark_count: usize,
    pub post_op: bool,
    pub noise_sd: f64,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl PhantomParams {
    /// Mid-range left knee with zero angle.
    pub fn nominal(seed: u64) -> Self {
        let p = 38.0;
        Self {
            true_atfa: 0.0,
            width: 128,
            height: 128,
            plateau_width: p,
            femoral_shaft_width: 0.57 * p,
            tibial_shaft_width: 0.55 * p,
            condyle_width: 0.97 * p,
            notch_width: 0.24 * p,
            condyle_height: 0.19 * p,
            notch_offset: 0.29 * p,
            femoral_length: 1.01 * p,
            tibial_length: 1.01 * p,
            joint_gap: 0.065 * p,
            rotation: 0.0,
            joint_center: Point2::new(63.5, 63.5),
            side: Side::Left,
            landmark_count: DEFAULT_LANDMARKS,
            post_op: false,
            noise_sd: 0.02,
            blur_sigma: 0.7,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(-20.0..=20.0).contains(&self.true_atfa) {
            return bad(format!("true_atfa {} outside [-20, 20]", self.true_atfa));
        }
        if !(MIN_LANDMARKS..=MAX_LANDMARKS).contains(&self.landmark_count) {
            return bad(format!(
                "landmark count {} outside [{MIN_LANDMARKS}, {MAX_LANDMARKS}]",
                self.landmark_count
            ));
        }
        for (name, v) in [
            ("femoral_shaft_width", self.femoral_shaft_width),
            ("tibial_shaft_width", self.tibial_shaft_width),
            ("notch_width", self.notch_width),
            ("plateau_width", self.plateau_width),
        ] {
            if !(v > 4.0) {
                return bad(format!("{name} must exceed 4 px, got {v}"));
            }
        }
        let p = self.plateau_width;
        if !(self.notch_width < self.condyle_width
            && self.femoral_shaft_width < self.condyle_width
            && self.tibial_shaft_width < p
            && self.condyle_height < self.notch_offset
            && 0.6 * p < self.femoral_length
            && 0.4 * p < self.tibial_length)
        {
            return bad("inconsistent phantom proportions".into());
        }
        if !(self.noise_sd >= 0.0 && self.blur_sigma >= 0.0 && self.joint_gap >= 0.0) {
            return bad("noise, blur and gap must be non-negative".into());
        }
        Ok(())
    }
}

/// Sampling ranges for [`PhantomParams::sample`]. Shape ranges are fractions
/// of the plateau width.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomRanges {
    pub atfa: (f64, f64),
    pub plateau_width: (f64, f64),
    pub femoral_shaft: (f64, f64),
    pub tibial_shaft: (f64, f64),
    pub condyle: (f64, f64),
    pub notch: (f64, f64),
    pub condyle_height: (f64, f64),
    pub notch_offset: (f64, f64),
    pub femoral_length: (f64, f64),
    pub tibial_length: (f64, f64),
    pub joint_gap: (f64, f64),
    pub rotation: (f64, f64),
    /// Joint center offset from the image center, per axis.
    pub center_jitter: f64,
    pub right_fraction: f64,
    pub post_op_fraction: f64,
    pub noise_sd: f64,
    pub blur_sigma: f64,
    pub width: usize,
    pub height: usize,
    pub landmark_count: usize,
}

impl Default for PhantomRanges {
    fn default() -> Self {
        Self {
            atfa: (-15.0, 15.0),
            plateau_width: (34.0, 42.0),
            femoral_shaft: (0.52, 0.62),
            tibial_shaft: (0.50, 0.60),
            condyle: (0.93, 1.01),
            notch: (0.21, 0.27),
            condyle_height: (0.17, 0.21),
            notch_offset: (0.26, 0.32),
            femoral_length: (0.98, 1.04),
            tibial_length: (0.98, 1.04),
            joint_gap: (0.05, 0.08),
            rotation: (-8.0, 8.0),
            center_jitter: 4.0,
            right_fraction: 0.5,
            post_op_fraction: 0.2,
            noise_sd: 0.02,
            blur_sigma: 0.7,
            width: 128,
            height: 128,
            landmark_count: DEFAULT_LANDMARKS,
        }
    }
}

impl PhantomRanges {
    pub const KEYS: [&'static str; 20] = [
        "atfa",
        "plateau_width",
        "femoral_shaft",
        "tibial_shaft",
        "condyle",
        "notch",
        "condyle_height",
        "notch_offset",
        "femoral_length",
        "tibial_length",
        "joint_gap",
        "rotation",
        "center_jitter",
        "right_fraction",
        "post_op_fraction",
        "noise_sd",
        "blur_sigma",
        "width",
        "height",
        "landmark_count",
    ];

    /// Overrides from `<prefix><key>` entries; ranges are written `lo hi`.
    pub fn from_config(c: &FlatConfig, prefix: &str) -> Result<Self> {
        let mut r = Self::default();
        let key = |k: &str| format!("{prefix}{k}");
        let range = |k: &str, slot: &mut (f64, f64)| -> Result<()> {
            if let Some(v) = c.raw(&key(k)) {
                let parts: Vec<f64> = v
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Config(format!("`{}`: {e}", key(k))))?;
                match parts[..] {
                    [lo, hi] if lo <= hi => *slot = (lo, hi),
                    _ => return Err(Error::Config(format!("`{}` needs `lo hi`", key(k)))),
                }
            }
            Ok(())
        };
        range("atfa", &mut r.atfa)?;
        range("plateau_width", &mut r.plateau_width)?;
        range("femoral_shaft", &mut r.femoral_shaft)?;
        range("tibial_shaft", &mut r.tibial_shaft)?;
        range("condyle", &mut r.condyle)?;
        range("notch", &mut r.notch)?;
        range("condyle_height", &mut r.condyle_height)?;
        range("notch_offset", &mut r.notch_offset)?;
        range("femoral_length", &mut r.femoral_length)?;
        range("tibial_length", &mut r.tibial_length)?;
        range("joint_gap", &mut r.joint_gap)?;
        range("rotation", &mut r.rotation)?;
        macro_rules! scalar {
            ($k:literal, $f:ident) => {
                if let Some(v) = c.get(&key($k))? {
                    r.$f = v;
                }
            };
        }
        scalar!("center_jitter", center_jitter);
        scalar!("right_fraction", right_fraction);
        scalar!("post_op_fraction", post_op_fraction);
        scalar!("noise_sd", noise_sd);
        scalar!("blur_sigma", blur_sigma);
        scalar!("width", width);
        scalar!("height", height);
        scalar!("landmark_count", landmark_count);
        if r.atfa.0 < -20.0 || r.atfa.1 > 20.0 {
            return Err(Error::Config("angle range must lie within [-20, 20]".into()));
        }
        Ok(r)
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl PhantomParams {
    /// Draws a phantom from `ranges`, redrawing shapes that do not fit the
    /// image. Deterministic in `seed`.
    pub fn sample(ranges: &PhantomRanges, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = PhantomLayout::new(ranges.landmark_count)?;
        let mut last = None;
        for _ in 0..64 {
            let p = draw(&mut rng, ranges.plateau_width);
            let cx = (ranges.width as f64 - 1.0) / 2.0;
            let cy = (ranges.height as f64 - 1.0) / 2.0;
            let j = ranges.center_jitter;
            let params = Self {
                true_atfa: draw(&mut rng, ranges.atfa),
                width: ranges.width,
                height: ranges.height,
                plateau_width: p,
                femoral_shaft_width: p * draw(&mut rng, ranges.femoral_shaft),
                tibial_shaft_width: p * draw(&mut rng, ranges.tibial_shaft),
                condyle_width: p * draw(&mut rng, ranges.condyle),
                notch_width: p * draw(&mut rng, ranges.notch),
                condyle_height: p * draw(&mut rng, ranges.condyle_height),
                notch_offset: p * draw(&mut rng, ranges.notch_offset),
                femoral_length: p * draw(&mut rng, ranges.femoral_length),
                tibial_length: p * draw(&mut rng, ranges.tibial_length),
                joint_gap: p * draw(&mut rng, ranges.joint_gap),
                rotation: draw(&mut rng, ranges.rotation),
                joint_center: Point2::new(cx + draw(&mut rng, (-j, j)), cy + draw(&mut rng, (-j, j))),
                side: if rng.random::<f64>() < ranges.right_fraction {
                    Side::Right
                } else {
                    Side::Left
                },
                landmark_count: ranges.landmark_count,
                post_op: rng.random::<f64>() < ranges.post_op_fraction,
                noise_sd: ranges.noise_sd,
                blur_sigma: ranges.blur_sigma,
                seed,
            };
            match build_geometry(&params, &layout) {
                Ok(_) => return Ok(params),
                Err(e @ Error::GeometryOverflow(_)) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Landmark bookkeeping for a given count: how many contour points fall
/// between consecutive role points, and the resulting schema.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomLayout {
    schema: Schema,
    femur: BoneLayout,
    tibia: BoneLayout,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BoneLayout {
    offset: usize,
    count: usize,
    /// Filler points per half-contour segment, outer end first.
    fillers: [usize; 4],
}

impl BoneLayout {
    fn half(&self) -> usize {
        self.count / 2
    }

    fn has_center(&self) -> bool {
        self.count % 2 == 1
    }

    /// Position within the left half of role anchor `a` (0..3).
    fn anchor_pos(&self, a: usize) -> usize {
        self.fillers[..=a].iter().sum::<usize>() + a
    }

    fn pair(&self, a: usize) -> (usize, usize) {
        let i = self.anchor_pos(a);
        (self.offset + i, self.offset + self.count - 1 - i)
    }
}

/// Splits `total` in proportion to `weights` by largest remainder.
fn apportion(total: usize, weights: [f64; 4]) -> [usize; 4] {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out = [0usize; 4];
    for (o, e) in out.iter_mut().zip(&exact) {
        *o = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total - out.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

fn bone_layout(offset: usize, count: usize, path: &HalfPath) -> BoneLayout {
    BoneLayout {
        offset,
        count,
        fillers: apportion(count / 2 - 3, path.segment_lengths()),
    }
}

impl PhantomLayout {
    pub fn new(landmark_count: usize) -> Result<Self> {
        if !(MIN_LANDMARKS..=MAX_LANDMARKS).contains(&landmark_count) {
            return Err(Error::InvalidParameter(format!(
                "landmark count {landmark_count} outside [{MIN_LANDMARKS}, {MAX_LANDMARKS}]"
            )));
        }
        let nominal = PhantomParams::nominal(0);
        let shape = BoneShapes::new(&nominal);
        let kf = landmark_count / 2;
        let femur = bone_layout(0, kf, &shape.femur);
        let tibia = bone_layout(kf, landmark_count - kf, &shape.tibia);
        let roles = Roles {
            femoral_shaft_yellow: femur.pair(0),
            femoral_shaft_red: femur.pair(1),
            femoral_notch_purple: femur.pair(2),
            tibial_shaft_blue: tibia.pair(0),
            tibial_shaft_black: tibia.pair(1),
            plateau_corners: tibia.pair(2),
        };
        let mut mirror = Vec::with_capacity(landmark_count);
        for b in [&femur, &tibia] {
            for i in 0..b.count {
                mirror.push(b.offset + b.count - 1 - i);
            }
        }
        let contours = vec![
            Contour {
                name: "femur".into(),
                indices: (0..kf).collect(),
            },
            Contour {
                name: "tibia".into(),
                indices: (kf..landmark_count).collect(),
            },
        ];
        Ok(Self {
            schema: Schema::new(landmark_count, roles, Some(mirror), contours)?,
            femur,
            tibia,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }
}

/// One half of a bone outline, from its outer end to the axis, with the
/// three role anchors as vertices.
#[derive(Debug, Clone)]
struct HalfPath {
    points: Vec<Point2>,
    /// Vertex indices of the three anchors; the last vertex is on the axis.
    anchors: [usize; 3],
}

impl HalfPath {
    fn builder() -> PathBuilder {
        PathBuilder { points: Vec::new(), anchors: Vec::new() }
    }

    /// Arc-length boundaries: start, three anchors, axis end.
    fn stations(&self) -> [usize; 5] {
        [0, self.anchors[0], self.anchors[1], self.anchors[2], self.points.len() - 1]
    }

    fn length_between(&self, a: usize, b: usize) -> f64 {
        self.points[a..=b].windows(2).map(|w| w[0].distance(w[1])).sum()
    }

    fn segment_lengths(&self) -> [f64; 4] {
        let s = self.stations();
        [0, 1, 2, 3].map(|i| self.length_between(s[i], s[i + 1]))
    }

    /// Point at arc-length fraction `t` between vertices `a` and `b`.
    fn point_at(&self, a: usize, b: usize, t: f64) -> Point2 {
        let total = self.length_between(a, b);
        let mut remaining = t * total;
        for w in self.points[a..=b].windows(2) {
            let len = w[0].distance(w[1]);
            if remaining <= len && len > 0.0 {
                let f = remaining / len;
                return w[0] + f * (w[1] - w[0]);
            }
            remaining -= len;
        }
        self.points[b]
    }

    /// Landmarks of the left half in index order, plus the axis point when
    /// the bone has an odd count.
    fn landmarks(&self, layout: &BoneLayout) -> Vec<Point2> {
        let s = self.stations();
        let f = layout.fillers;
        let mut out = Vec::with_capacity(layout.half() + 1);
        // outer segment: start at the free end, stop short of the anchor
        for i in 0..f[0] {
            out.push(self.point_at(s[0], s[1], i as f64 / f[0] as f64));
        }
        for seg in 1..4 {
            out.push(self.points[s[seg]]);
            let m = f[seg];
            // the axis segment is shared with the mirror half when the
            // count is even, so its spacing straddles the axis evenly
            let denom = if seg == 3 && !layout.has_center() {
                m as f64 + 0.5
            } else {
                m as f64 + 1.0
            };
            for i in 1..=m {
                out.push(self.point_at(s[seg], s[seg + 1], i as f64 / denom));
            }
        }
        if layout.has_center() {
            out.push(self.points[s[4]]);
        }
        out
    }

    /// Full closed outline: this half, then its mirror in reverse.
    fn outline(&self) -> Vec<Point2> {
        let mut pts = self.points.clone();
        pts.extend(self.points.iter().rev().skip(1).map(|p| Point2::new(-p.x, p.y)));
        pts
    }
}

struct PathBuilder {
    points: Vec<Point2>,
    anchors: Vec<usize>,
}

impl PathBuilder {
    fn to(mut self, u: f64, v: f64) -> Self {
        self.points.push(Point2::new(u, v));
        self
    }

    fn anchor(mut self, u: f64, v: f64) -> Self {
        self.anchors.push(self.points.len());
        self.points.push(Point2::new(u, v));
        self
    }

    /// Smoothstep blend from the last point to `(u, v)`, easing in `u`.
    fn flare(mut self, u: f64, v: f64, steps: usize) -> Self {
        let a = *self.points.last().expect("flare needs a start point");
        for i in 1..=steps {
            let t = i as f64 / steps as f64;
            let s = t * t * (3.0 - 2.0 * t);
            self.points.push(Point2::new(a.x + s * (u - a.x), a.y + t * (v - a.y)));
        }
        self
    }

    fn build(self) -> HalfPath {
        HalfPath {
            points: self.points,
            anchors: self.anchors.try_into().expect("three anchors"),
        }
    }
}

/// Both bones' left half-outlines in plateau units.
///
/// Femur coordinates: `u` across, `v` up from the distal line. Tibia: `u`
/// across, `v` down from the plateau line.
struct BoneShapes {
    femur: HalfPath,
    tibia: HalfPath,
}

const YELLOW_BELOW_TOP: f64 = 0.06;
const RED_HEIGHT: f64 = 0.55;
const BLUE_ABOVE_BOTTOM: f64 = 0.06;
const BLACK_DEPTH: f64 = 0.3;

impl BoneShapes {
    fn new(p: &PhantomParams) -> Self {
        let s = 1.0 / p.plateau_width;
        let hf = 0.5 * p.femoral_shaft_width * s;
        let hc = 0.5 * p.condyle_width * s;
        let wn = 0.5 * p.notch_width * s;
        let ch = p.condyle_height * s;
        let nr = p.notch_offset * s;
        let lf = p.femoral_length * s;
        let ht = 0.5 * p.tibial_shaft_width * s;
        let lt = p.tibial_length * s;

        let mut femur = HalfPath::builder()
            .to(-hf, lf)
            .anchor(-hf, lf - YELLOW_BELOW_TOP)
            .anchor(-hf, RED_HEIGHT)
            .to(-hf, RED_HEIGHT - 0.1)
            .flare(-hc, ch, 8);
        // condyle: lower half of an ellipse from the outer side to the notch
        let (uc, a) = (-0.5 * (hc + wn), 0.5 * (hc - wn));
        for i in 1..=12 {
            let t = std::f64::consts::PI * (1.0 + i as f64 / 12.0);
            femur = femur.to(uc + a * t.cos(), ch + ch * t.sin());
        }
        let femur = femur.anchor(-wn, 0.5 * (ch + nr)).to(-wn, nr).to(0.0, nr).build();

        let tibia = HalfPath::builder()
            .to(-ht, lt)
            .anchor(-ht, lt - BLUE_ABOVE_BOTTOM)
            .anchor(-ht, BLACK_DEPTH)
            .to(-ht, BLACK_DEPTH - 0.03)
            .flare(-0.5, 0.05, 8)
            .anchor(-0.5, 0.0)
            .to(-0.3, -0.015)
            .to(-0.13, -0.02)
            .to(-0.06, -0.07)
            .to(0.0, -0.04)
            .build();
        Self { femur, tibia }
    }
}

/// Maps bone-local coordinates into the left-knee image.
struct Placement {
    scale: f64,
    half_gap: f64,
    tibia_turn: f64,
    rotation: f64,
    center: Point2,
}

impl Placement {
    fn new(p: &PhantomParams) -> Self {
        Self {
            scale: p.plateau_width,
            half_gap: 0.5 * p.joint_gap,
            // turning by -theta sends the tibial "down" (0, 1) to
            // (sin theta, cos theta): the ankle end moves toward +x
            tibia_turn: -p.true_atfa.to_radians(),
            rotation: p.rotation.to_radians(),
            center: p.joint_center,
        }
    }

    fn femur(&self, q: Point2) -> Point2 {
        let local = Point2::new(q.x * self.scale, -(q.y * self.scale + self.half_gap));
        self.center + local.rotated(self.rotation)
    }

    fn tibia(&self, q: Point2) -> Point2 {
        let local = Point2::new(q.x * self.scale, q.y * self.scale + self.half_gap);
        self.center + local.rotated(self.tibia_turn).rotated(self.rotation)
    }
}

/// Landmarks and render polygons of one phantom, left-knee orientation.
struct Geometry {
    landmarks: Vec<Point2>,
    /// `(polygon, intensity)` layers, composed additively.
    layers: Vec<(Vec<Point2>, f32)>,
}

const BACKGROUND: f32 = 0.08;
const SOFT_TISSUE: f32 = 0.07;
const BONE: f32 = 0.42;
const IMPLANT: f32 = 0.3;

fn half_landmarks(path: &HalfPath, layout: &BoneLayout, map: impl Fn(Point2) -> Point2) -> Vec<Point2> {
    let left = path.landmarks(layout);
    let half = layout.half();
    let mut out: Vec<Point2> = left.iter().map(|&q| map(q)).collect();
    out.extend(left[..half].iter().rev().map(|q| map(Point2::new(-q.x, q.y))));
    out
}

fn rect(u0: f64, u1: f64, v0: f64, v1: f64) -> Vec<Point2> {
    vec![
        Point2::new(u0, v0),
        Point2::new(u1, v0),
        Point2::new(u1, v1),
        Point2::new(u0, v1),
    ]
}

fn build_geometry(p: &PhantomParams, layout: &PhantomLayout) -> Result<Geometry> {
    p.validate()?;
    if layout.schema.landmark_count() != p.landmark_count {
        return Err(Error::SchemaMismatch(format!(
            "layout for {} landmarks, phantom wants {}",
            layout.schema.landmark_count(),
            p.landmark_count
        )));
    }
    let shapes = BoneShapes::new(p);
    let place = Placement::new(p);
    let fm = |q| place.femur(q);
    let tm = |q| place.tibia(q);

    let mut landmarks = half_landmarks(&shapes.femur, &layout.femur, fm);
    landmarks.extend(half_landmarks(&shapes.tibia, &layout.tibia, tm));

    let (w, h) = (p.width as f64, p.height as f64);
    for (i, q) in landmarks.iter().enumerate() {
        if q.x < IMAGE_MARGIN || q.y < IMAGE_MARGIN || q.x > w - 1.0 - IMAGE_MARGIN || q.y > h - 1.0 - IMAGE_MARGIN {
            return Err(Error::GeometryOverflow(format!(
                "landmark {i} at ({:.1}, {:.1}) is within {IMAGE_MARGIN} px of the border",
                q.x, q.y
            )));
        }
    }

    // shafts run on past the image border
    let far = 4.0;
    let extend = |mut outline: Vec<Point2>| {
        let first = outline[0];
        let last = *outline.last().expect("outline");
        outline.push(Point2::new(last.x, last.y + far));
        outline.insert(0, Point2::new(first.x, first.y + far));
        outline
    };
    let femur = extend(shapes.femur.outline());
    let tibia = extend(shapes.tibia.outline());
    let s = 1.0 / p.plateau_width;
    let hc = 0.5 * p.condyle_width * s;
    let ch = p.condyle_height * s;

    let mut layers = vec![
        (rect(-0.85, 0.85, -0.15, far).into_iter().map(fm).collect(), SOFT_TISSUE),
        (rect(-0.8, 0.8, -0.15, far).into_iter().map(tm).collect(), SOFT_TISSUE),
        (femur.into_iter().map(fm).collect(), BONE),
        (tibia.into_iter().map(tm).collect(), BONE),
    ];
    if p.post_op {
        layers.push((rect(-hc, hc, -0.01, 0.6 * ch).into_iter().map(fm).collect(), IMPLANT));
        layers.push((rect(-0.49, 0.49, 0.0, 0.07).into_iter().map(tm).collect(), IMPLANT));
        layers.push((rect(-0.05, 0.05, 0.07, 0.4).into_iter().map(tm).collect(), IMPLANT));
    }
    Ok(Geometry { landmarks, layers })
}

/// Ground-truth landmarks only, in the phantom's own orientation.
pub fn phantom_landmarks(p: &PhantomParams, layout: &PhantomLayout) -> Result<LandmarkSet> {
    let g = build_geometry(p, layout)?;
    orient(LandmarkSet::left(g.landmarks), p, layout)
}

fn orient(set: LandmarkSet, p: &PhantomParams, layout: &PhantomLayout) -> Result<LandmarkSet> {
    match p.side {
        Side::Left => Ok(set),
        Side::Right => set.mirrored(p.width, layout.schema.mirror().expect("phantom mirror table")),
    }
}

/// Area fraction of each pixel inside `poly` (even-odd rule), estimated
/// with `sub` scanlines per pixel row and exact coverage along each.
fn accumulate_coverage(img: &mut [f32], width: usize, height: usize, poly: &[Point2], weight: f32, sub: usize) {
    let mut xs = Vec::new();
    let mut row = vec![0.0f32; width];
    for y in 0..height {
        row.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..sub {
            let ys = y as f64 - 0.5 + (k as f64 + 0.5) / sub as f64;
            xs.clear();
            for i in 0..poly.len() {
                let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
                if (a.y <= ys) != (b.y <= ys) {
                    xs.push(a.x + (ys - a.y) * (b.x - a.x) / (b.y - a.y));
                }
            }
            xs.sort_by(f64::total_cmp);
            for span in xs.chunks_exact(2) {
                let (x0, x1) = (span[0].max(-0.5), span[1].min(width as f64 - 0.5));
                if x1 <= x0 {
                    continue;
                }
                let first = (x0 + 0.5).floor() as usize;
                let last = ((x1 + 0.5).ceil() as usize).min(width) - 1;
                for (px, r) in row.iter_mut().enumerate().take(last + 1).skip(first) {
                    let lo = (px as f64 - 0.5).max(x0);
                    let hi = (px as f64 + 0.5).min(x1);
                    if hi > lo {
                        *r += (hi - lo) as f32;
                    }
                }
            }
        }
        let scale = weight / sub as f32;
        for (dst, r) in img[y * width..(y + 1) * width].iter_mut().zip(&row) {
            *dst += scale * r;
        }
    }
}

/// A rendered phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: GrayImage,
    pub landmarks: LandmarkSet,
    pub true_atfa: f64,
}

pub fn generate(p: &PhantomParams) -> Result<Phantom> {
    let layout = PhantomLayout::new(p.landmark_count)?;
    generate_with(p, &layout)
}

pub fn generate_with(p: &PhantomParams, layout: &PhantomLayout) -> Result<Phantom> {
    let g = build_geometry(p, layout)?;
    let (w, h) = (p.width, p.height);
    let mut data = vec![BACKGROUND; w * h];
    for (poly, intensity) in &g.layers {
        accumulate_coverage(&mut data, w, h, poly, *intensity, 4);
    }
    let mut image = GrayImage::from_vec(w, h, data)?.gaussian_blur(p.blur_sigma);
    if p.noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ NOISE_STREAM);
        let sd = p.noise_sd as f32;
        for v in image.data_mut() {
            let n: f32 = rng.sample(StandardNormal);
            *v += sd * n;
        }
    }
    let mut image = image.quantized();
    let mut landmarks = LandmarkSet::left(g.landmarks);
    if p.side == Side::Right {
        image = image.flipped_horizontally();
        landmarks = orient(landmarks, p, layout)?;
    }
    Ok(Phantom {
        image,
        landmarks,
        true_atfa: p.true_atfa,
    })
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub true_atfa: f64,
    pub side: Side,
    pub post_op: bool,
    pub seed: u64,
}

pub const MANIFEST_HEADER: &str = "id,true_atfa,side,post_op,seed";

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        let _ = writeln!(s, "{},{},{},{},{}", e.id, e.true_atfa, e.side, u8::from(e.post_op), e.seed);
    }
    s
}

pub fn parse_manifest(text: &str) -> std::result::Result<Vec<ManifestEntry>, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(format!("expected header `{MANIFEST_HEADER}`"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let row = n + 2;
            if f.len() != 5 {
                return Err(format!("row {row}: expected 5 fields"));
            }
            Ok(ManifestEntry {
                id: f[0].to_string(),
                true_atfa: f[1].parse().map_err(|e| format!("row {row}: {e}"))?,
                side: f[2].parse().map_err(|e| format!("row {row}: {e}"))?,
                post_op: match f[3] {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    o => return Err(format!("row {row}: bad post_op `{o}`")),
                },
                seed: f[4].parse().map_err(|e| format!("row {row}: {e}"))?,
            })
        })
        .collect()
}

pub fn phantom_id(i: usize) -> String {
    format!("p{i:04}")
}

/// Per-phantom seeds drawn from one master seed.
pub fn phantom_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Writes `n` phantoms under `out`: `images/<id>.pgm`, `points/<id>.pts`,
/// `schema.txt` and `manifest.csv`.
pub fn make_dataset(out: &Path, n: usize, ranges: &PhantomRanges, seed: u64) -> Result<Vec<ManifestEntry>> {
    make_dataset_from(out, ranges, &phantom_seeds(seed, n), 0)
}

/// Like [`make_dataset`] with explicit per-phantom seeds; ids start at `first_id`.
pub fn make_dataset_from(out: &Path, ranges: &PhantomRanges, seeds: &[u64], first_id: usize) -> Result<Vec<ManifestEntry>> {
    use rayon::prelude::*;
    if seeds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let layout = PhantomLayout::new(ranges.landmark_count)?;
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("points"))?;
    layout.schema.save(&out.join("schema.txt"))?;
    let entries = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| -> Result<ManifestEntry> {
            let params = PhantomParams::sample(ranges, seed)?;
            let ph = generate_with(&params, &layout)?;
            let id = phantom_id(first_id + i);
            write_pgm(&out.join("images").join(format!("{id}.pgm")), &ph.image)?;
            write_pts(&out.join("points").join(format!("{id}.pts")), &ph.landmarks.points)?;
            Ok(ManifestEntry {
                id,
                true_atfa: params.true_atfa,
                side: params.side,
                post_op: params.post_op,
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::write(out.join("manifest.csv"), format_manifest(&entries))?;
    Ok(entries)
}

/// A dataset directory as written by [`make_dataset`].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub schema: Schema,
    pub entries: Vec<ManifestEntry>,
}

/// One loaded sample in its stored orientation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub landmarks: LandmarkSet,
    pub true_atfa: f64,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let schema = Schema::load(&root.join("schema.txt"))?;
        let manifest = root.join("manifest.csv");
        let text = std::fs::read_to_string(&manifest)?;
        let entries = parse_manifest(&text).map_err(|m| Error::format(&manifest, m))?;
        if entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            root: root.to_path_buf(),
            schema,
            entries,
        })
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.pgm"))
    }

    pub fn points_path(&self, id: &str) -> PathBuf {
        self.root.join("points").join(format!("{id}.pts"))
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let e = &self.entries[index];
        let image = read_pgm(&self.image_path(&e.id))?;
        let landmarks = LandmarkSet::new(read_pts(&self.points_path(&e.id))?, e.side);
        self.schema.check(&landmarks)?;
        Ok(Sample {
            id: e.id.clone(),
            image,
            landmarks,
            true_atfa: e.true_atfa,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        use rayon::prelude::*;
        (0..self.entries.len()).into_par_iter().map(|i| self.load(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{atfa_fnts, atfa_fts};

    fn left_angles(p: &PhantomParams) -> (f64, f64) {
        let layout = PhantomLayout::new(p.landmark_count).unwrap();
        let g = build_geometry(p, &layout).unwrap();
        let set = LandmarkSet::left(g.landmarks);
        let r = layout.schema().roles();
        (atfa_fts(&set, r).unwrap(), atfa_fnts(&set, r).unwrap())
    }

    #[test]
    fn straight_and_valgus_closure() {
        let mut p = PhantomParams::nominal(1);
        let (a, b) = left_angles(&p);
        assert!(a.abs() < 0.05 && b.abs() < 0.05, "{a} {b}");
        p.true_atfa = 7.0;
        p.rotation = 5.0;
        let (a, b) = left_angles(&p);
        assert!((a - 7.0).abs() < 0.05 && (b - 7.0).abs() < 0.05, "{a} {b}");
    }

    #[test]
    fn layout_counts_and_roles() {
        for k in [MIN_LANDMARKS, 13, 40, 41, 134, MAX_LANDMARKS] {
            let l = PhantomLayout::new(k).unwrap();
            assert_eq!(l.schema().landmark_count(), k);
            let p = PhantomParams {
                landmark_count: k,
                ..PhantomParams::nominal(0)
            };
            let g = build_geometry(&p, &l).unwrap();
            assert_eq!(g.landmarks.len(), k);
        }
        assert!(PhantomLayout::new(11).is_err());
        assert!(PhantomLayout::new(182).is_err());
    }

    #[test]
    fn role_pairs_are_mirror_partners() {
        let l = PhantomLayout::new(40).unwrap();
        let m = l.schema().mirror().unwrap();
        let r = l.schema().roles();
        for (a, b) in [
            r.femoral_shaft_red,
            r.femoral_shaft_yellow,
            r.tibial_shaft_black,
            r.tibial_shaft_blue,
            r.femoral_notch_purple,
            r.plateau_corners,
        ] {
            assert_eq!(m[a], b);
        }
        // plateau corners are one plateau width apart
        let p = PhantomParams::nominal(0);
        let set = phantom_landmarks(&p, &l).unwrap();
        let (a, b) = set.pair(r.plateau_corners);
        assert!((a.distance(b) - p.plateau_width).abs() < 1e-9);
        assert!(a.x < b.x);
    }

    #[test]
    fn overflow_is_reported() {
        let p = PhantomParams {
            joint_center: Point2::new(20.0, 63.5),
            ..PhantomParams::nominal(0)
        };
        assert!(matches!(generate(&p), Err(Error::GeometryOverflow(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let r = PhantomRanges::default();
        let a = generate(&PhantomParams::sample(&r, 42).unwrap()).unwrap();
        let b = generate(&PhantomParams::sample(&r, 42).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn right_knee_flips_back_to_the_left_one() {
        let mut p = PhantomParams::nominal(3);
        p.true_atfa = -6.0;
        let left = generate(&p).unwrap();
        p.side = Side::Right;
        let right = generate(&p).unwrap();
        assert_eq!(right.image.flipped_horizontally(), left.image);
        let layout = PhantomLayout::new(p.landmark_count).unwrap();
        let back = right.landmarks.mirrored(p.width, layout.schema().mirror().unwrap()).unwrap();
        for (a, b) in back.points.iter().zip(&left.landmarks.points) {
            assert!(a.distance(*b) < 1e-9);
        }
    }

    #[test]
    fn coverage_of_an_axis_aligned_square() {
        let mut img = vec![0.0f32; 36];
        let sq = rect(1.0, 4.0, 1.0, 4.0);
        accumulate_coverage(&mut img, 6, 6, &sq, 1.0, 4);
        let total: f32 = img.iter().sum();
        assert!((total - 9.0).abs() < 1e-4, "{total}");
        assert!((img[2 * 6 + 2] - 1.0).abs() < 1e-6);
        assert!((img[6 + 1] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn manifest_round_trip() {
        let e = vec![ManifestEntry {
            id: "p0000".into(),
            true_atfa: -1.0 / 3.0,
            side: Side::Right,
            post_op: true,
            seed: u64::MAX,
        }];
        assert_eq!(parse_manifest(&format_manifest(&e)).unwrap(), e);
    }
}
