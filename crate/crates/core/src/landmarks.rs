//! Landmark sets, the schema that names their roles, and `.pts` files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::config::{join_indices, FlatConfig};
use crate::error::{Error, Result};
use crate::geometry::{Point2, Polyline};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Side {
    #[default]
    Left,
    Right,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

impl FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "left" | "L" => Ok(Side::Left),
            "right" | "R" => Ok(Side::Right),
            other => Err(Error::Config(format!("unknown side `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<Point2>,
    pub side: Side,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point2>, side: Side) -> Self {
        Self { points, side }
    }

    pub fn left(points: Vec<Point2>) -> Self {
        Self::new(points, Side::Left)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn pair(&self, (a, b): (usize, usize)) -> (Point2, Point2) {
        (self.points[a], self.points[b])
    }

    pub fn pair_midpoint(&self, pair: (usize, usize)) -> Point2 {
        let (a, b) = self.pair(pair);
        a.midpoint(b)
    }

    pub fn map(&self, f: impl Fn(Point2) -> Point2) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
            side: self.side,
        }
    }

    /// Mirror image for a raster `width` pixels wide: `x -> (W - 1) - x`,
    /// indices swapped through `mirror`, side toggled.
    pub fn mirrored(&self, width: usize, mirror: &[usize]) -> Result<Self> {
        if mirror.len() != self.len() {
            return Err(Error::SchemaMismatch(format!(
                "mirror table has {} entries for {} landmarks",
                mirror.len(),
                self.len()
            )));
        }
        let w = width as f64 - 1.0;
        Ok(Self {
            points: mirror
                .iter()
                .map(|&j| {
                    let p = self.points[j];
                    Point2::new(w - p.x, p.y)
                })
                .collect(),
            side: self.side.other(),
        })
    }
}

/// Index pairs carrying anatomical meaning. The first index of each pair is
/// the one further left in a left-knee image.
///
/// Femoral shaft pairs: `yellow` is proximal, `red` distal (nearer the
/// joint). Tibial shaft pairs: `black` is proximal, `blue` distal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roles {
    pub femoral_shaft_red: (usize, usize),
    pub femoral_shaft_yellow: (usize, usize),
    pub tibial_shaft_black: (usize, usize),
    pub tibial_shaft_blue: (usize, usize),
    pub femoral_notch_purple: (usize, usize),
    /// Tibial plateau corners: global-stage reference points and the
    /// reference length for relative errors.
    pub plateau_corners: (usize, usize),
}

impl Roles {
    const KEYS: [&'static str; 6] = [
        "role.femoral_shaft_red",
        "role.femoral_shaft_yellow",
        "role.tibial_shaft_black",
        "role.tibial_shaft_blue",
        "role.femoral_notch_purple",
        "role.plateau_corners",
    ];

    fn pairs(&self) -> [(usize, usize); 6] {
        [
            self.femoral_shaft_red,
            self.femoral_shaft_yellow,
            self.tibial_shaft_black,
            self.tibial_shaft_blue,
            self.femoral_notch_purple,
            self.plateau_corners,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    pub name: String,
    pub indices: Vec<usize>,
}

/// Role map, mirror table and contour connectivity for one landmark layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    landmark_count: usize,
    roles: Roles,
    mirror: Option<Vec<usize>>,
    contours: Vec<Contour>,
    contour_of: Vec<usize>,
}

impl Schema {
    pub fn new(
        landmark_count: usize,
        roles: Roles,
        mirror: Option<Vec<usize>>,
        contours: Vec<Contour>,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::SchemaMismatch(m));
        let mut seen = vec![false; landmark_count];
        for (a, b) in roles.pairs() {
            for i in [a, b] {
                if i >= landmark_count {
                    return bad(format!("role index {i} out of range {landmark_count}"));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return bad(format!("role index {i} used twice"));
                }
            }
        }
        if let Some(m) = &mirror {
            if m.len() != landmark_count {
                return bad(format!("mirror table has {} entries, expected {landmark_count}", m.len()));
            }
            for (i, &j) in m.iter().enumerate() {
                if j >= landmark_count || m[j] != i {
                    return bad(format!("mirror table is not an involution at {i}"));
                }
            }
        }
        let mut contour_of = vec![usize::MAX; landmark_count];
        for (ci, c) in contours.iter().enumerate() {
            if c.indices.len() < 2 {
                return bad(format!("contour `{}` needs two or more points", c.name));
            }
            for &i in &c.indices {
                if i >= landmark_count {
                    return bad(format!("contour index {i} out of range"));
                }
                if contour_of[i] != usize::MAX {
                    return bad(format!("landmark {i} belongs to two contours"));
                }
                contour_of[i] = ci;
            }
        }
        if let Some(i) = contour_of.iter().position(|&c| c == usize::MAX) {
            return bad(format!("landmark {i} is on no contour"));
        }
        Ok(Self {
            landmark_count,
            roles,
            mirror,
            contours,
            contour_of,
        })
    }

    pub fn landmark_count(&self) -> usize {
        self.landmark_count
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn mirror(&self) -> Option<&[usize]> {
        self.mirror.as_deref()
    }

    pub fn contours(&self) -> &[Contour] {
        &self.contours
    }

    pub fn contour_of(&self, landmark: usize) -> &Contour {
        &self.contours[self.contour_of[landmark]]
    }

    pub fn check(&self, set: &LandmarkSet) -> Result<()> {
        if set.len() != self.landmark_count {
            return Err(Error::SchemaMismatch(format!(
                "landmark set has {} points, schema expects {}",
                set.len(),
                self.landmark_count
            )));
        }
        Ok(())
    }

    /// Polylines through `set` along each contour, in contour order.
    pub fn curves(&self, set: &LandmarkSet) -> Result<Vec<Polyline>> {
        self.check(set)?;
        self.contours
            .iter()
            .map(|c| Polyline::new(c.indices.iter().map(|&i| set.points[i]).collect()))
            .collect()
    }

    pub fn to_config(&self) -> FlatConfig {
        let mut c = FlatConfig::new();
        c.set("landmark_count", self.landmark_count);
        for (key, (a, b)) in Roles::KEYS.iter().zip(self.roles.pairs()) {
            c.set(key, format!("{a} {b}"));
        }
        if let Some(m) = &self.mirror {
            c.set("mirror", join_indices(m));
        }
        for contour in &self.contours {
            c.set(&format!("contour.{}", contour.name), join_indices(&contour.indices));
        }
        c
    }

    pub fn from_config(c: &FlatConfig) -> Result<Self> {
        c.reject_unknown(|k| {
            k == "landmark_count" || k == "mirror" || k.starts_with("contour.") || Roles::KEYS.contains(&k)
        })?;
        let count: usize = c.require("landmark_count")?;
        let pair = |key: &str| -> Result<(usize, usize)> {
            match c.indices(key)?.as_deref() {
                Some(&[a, b]) => Ok((a, b)),
                Some(_) => Err(Error::Config(format!("`{key}` needs exactly two indices"))),
                None => Err(Error::Config(format!("missing key `{key}`"))),
            }
        };
        let roles = Roles {
            femoral_shaft_red: pair(Roles::KEYS[0])?,
            femoral_shaft_yellow: pair(Roles::KEYS[1])?,
            tibial_shaft_black: pair(Roles::KEYS[2])?,
            tibial_shaft_blue: pair(Roles::KEYS[3])?,
            femoral_notch_purple: pair(Roles::KEYS[4])?,
            plateau_corners: pair(Roles::KEYS[5])?,
        };
        let contours = c
            .keys()
            .filter_map(|k| k.strip_prefix("contour."))
            .map(|name| {
                Ok(Contour {
                    name: name.to_string(),
                    indices: c.indices(&format!("contour.{name}"))?.unwrap_or_default(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Schema::new(count, roles, c.indices("mirror")?, contours)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_config().to_text(
            "knee landmark schema\n\
             role pairs list the image-left index first; mirror maps each index\n\
             to its partner after a horizontal flip; contours are ordered runs",
        );
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_config(&FlatConfig::load(path)?)
    }
}

/// Writes the `.pts` text format.
pub fn format_pts(points: &[Point2]) -> String {
    let mut s = format!("version: 1\nn_points: {}\n{{\n", points.len());
    for p in points {
        // `{}` prints the shortest string that parses back to the same f64
        s.push_str(&format!("{} {}\n", p.x, p.y));
    }
    s.push_str("}\n");
    s
}

pub fn parse_pts(text: &str) -> std::result::Result<Vec<Point2>, String> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let version = lines.next().ok_or("empty file")?;
    if version.replace(' ', "") != "version:1" {
        return Err(format!("expected `version: 1`, found `{version}`"));
    }
    let count_line = lines.next().ok_or("missing n_points")?;
    let count: usize = count_line
        .strip_prefix("n_points:")
        .ok_or_else(|| format!("expected `n_points: K`, found `{count_line}`"))?
        .trim()
        .parse()
        .map_err(|e| format!("bad n_points: {e}"))?;
    if lines.next() != Some("{") {
        return Err("expected `{`".into());
    }
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or("fewer points than n_points")?;
        let mut it = line.split_whitespace();
        let mut coord = || -> std::result::Result<f64, String> {
            let t = it.next().ok_or_else(|| format!("short point line `{line}`"))?;
            let v: f64 = t.parse().map_err(|e| format!("bad coordinate `{t}`: {e}"))?;
            if !v.is_finite() {
                return Err(format!("non-finite coordinate `{t}`"));
            }
            Ok(v)
        };
        let (x, y) = (coord()?, coord()?);
        if it.next().is_some() {
            return Err(format!("extra fields on point line `{line}`"));
        }
        points.push(Point2::new(x, y));
    }
    if lines.next() != Some("}") {
        return Err("expected `}` after the points".into());
    }
    if lines.next().is_some() {
        return Err("content after closing `}`".into());
    }
    Ok(points)
}

pub fn write_pts(path: &Path, points: &[Point2]) -> Result<()> {
    std::fs::write(path, format_pts(points))?;
    Ok(())
}

pub fn read_pts(path: &Path) -> Result<Vec<Point2>> {
    let text = std::fs::read_to_string(path)?;
    parse_pts(&text).map_err(|m| Error::format(path, m))
}
