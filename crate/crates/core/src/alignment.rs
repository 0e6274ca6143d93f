//! Anatomical tibiofemoral angle from landmark pairs.
//!
//! Angles are deviations from parallel axes. Valgus is positive and varus
//! negative for a left knee (right knees are flipped to left first).

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{signed_angle_deg, Point2};
use crate::landmarks::{LandmarkSet, Roles, Side};

/// Ties the y-down signed angle to the valgus-positive convention.
///
/// The phantom generator builds valgus by swinging the ankle end of the
/// tibial axis toward +x, which is a clockwise turn on screen and so a
/// negative raw signed angle.
pub const VALGUS_SIGN: f64 = -1.0;

/// Axes closer than this are treated as collapsed.
const AXIS_EPS: f64 = 1e-9;

/// Directed axis from `from` to `to`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub from: Point2,
    pub to: Point2,
}

impl Axis {
    fn direction(&self, name: &'static str) -> Result<Point2> {
        let d = self.to - self.from;
        if d.norm() < AXIS_EPS {
            Err(Error::DegenerateAxis(name))
        } else {
            Ok(d)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentResult {
    pub atfa_fts: f64,
    pub atfa_fnts: f64,
    pub femoral_axis_fts: Axis,
    pub femoral_axis_fnts: Axis,
    pub tibial_axis: Axis,
}

pub fn midpoint(a: Point2, b: Point2) -> Point2 {
    a.midpoint(b)
}

fn tibial_axis(set: &LandmarkSet, roles: &Roles) -> Axis {
    Axis {
        from: set.pair_midpoint(roles.tibial_shaft_black),
        to: set.pair_midpoint(roles.tibial_shaft_blue),
    }
}

fn fts_femoral_axis(set: &LandmarkSet, roles: &Roles) -> Axis {
    Axis {
        from: set.pair_midpoint(roles.femoral_shaft_yellow),
        to: set.pair_midpoint(roles.femoral_shaft_red),
    }
}

fn fnts_femoral_axis(set: &LandmarkSet, roles: &Roles) -> Axis {
    Axis {
        from: set.pair_midpoint(roles.femoral_shaft_red),
        to: set.pair_midpoint(roles.femoral_notch_purple),
    }
}

fn axis_angle(femoral: Axis, tibial: Axis) -> Result<f64> {
    let f = femoral.direction("femoral axis")?;
    let t = tibial.direction("tibial axis")?;
    Ok(VALGUS_SIGN * signed_angle_deg(f, t)?)
}

/// Femoral axis through the two shaft midpoints.
pub fn atfa_fts(set: &LandmarkSet, roles: &Roles) -> Result<f64> {
    axis_angle(fts_femoral_axis(set, roles), tibial_axis(set, roles))
}

/// Femoral axis from the distal shaft midpoint to the notch midpoint.
pub fn atfa_fnts(set: &LandmarkSet, roles: &Roles) -> Result<f64> {
    axis_angle(fnts_femoral_axis(set, roles), tibial_axis(set, roles))
}

pub fn measure(set: &LandmarkSet, roles: &Roles) -> Result<AlignmentResult> {
    let femoral_axis_fts = fts_femoral_axis(set, roles);
    let femoral_axis_fnts = fnts_femoral_axis(set, roles);
    let tibial_axis = tibial_axis(set, roles);
    Ok(AlignmentResult {
        atfa_fts: axis_angle(femoral_axis_fts, tibial_axis)?,
        atfa_fnts: axis_angle(femoral_axis_fnts, tibial_axis)?,
        femoral_axis_fts,
        femoral_axis_fnts,
        tibial_axis,
    })
}

/// One row of the measurement CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRow {
    pub id: String,
    pub side: Side,
    pub atfa_fts: f64,
    pub atfa_fnts: f64,
    /// `;`-joined, empty when clean.
    pub flags: Vec<String>,
}

pub const MEASUREMENT_HEADER: &str = "id,side,atfa_fts_deg,atfa_fnts_deg,flags";

pub fn format_measurements(rows: &[MeasurementRow]) -> String {
    let mut s = String::from(MEASUREMENT_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{}",
            r.id,
            r.side,
            r.atfa_fts,
            r.atfa_fnts,
            r.flags.join(";")
        );
    }
    s
}

pub fn write_measurements(path: &Path, rows: &[MeasurementRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(format_measurements(rows).as_bytes())?;
    Ok(())
}

pub fn parse_measurements(text: &str) -> std::result::Result<Vec<MeasurementRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == MEASUREMENT_HEADER => {}
        other => return Err(format!("expected header `{MEASUREMENT_HEADER}`, found {other:?}")),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(format!("row {}: expected 5 fields, got {}", n + 2, f.len()));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("row {}: {e}", n + 2));
            Ok(MeasurementRow {
                id: f[0].to_string(),
                side: f[1].parse().map_err(|e| format!("row {}: {e}", n + 2))?,
                atfa_fts: num(f[2])?,
                atfa_fnts: num(f[3])?,
                flags: f[4]
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect(),
            })
        })
        .collect()
}

pub fn read_measurements(path: &Path) -> Result<Vec<MeasurementRow>> {
    let text = std::fs::read_to_string(path)?;
    parse_measurements(&text).map_err(|m| Error::format(path, m))
}
