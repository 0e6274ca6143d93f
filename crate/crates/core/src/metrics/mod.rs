//! Localization errors relative to a reference length, and agreement
//! statistics between two series of angle measurements.

mod report;
pub mod special;

use crate::error::{Error, Result};
use crate::geometry::point_to_polyline_distance;
use crate::landmarks::{LandmarkSet, Schema};

pub use report::{
    agreement_csv, bland_altman_svg, localization_csv, table1_text, table2_text, MethodAgreement,
};

/// Distance between the ground-truth plateau corners.
pub fn reference_length(gt: &LandmarkSet, schema: &Schema) -> Result<f64> {
    schema.check(gt)?;
    let (a, b) = gt.pair(schema.roles().plateau_corners);
    let l = a.distance(b);
    if l < 1e-12 {
        Err(Error::ZeroReferenceLength)
    } else {
        Ok(l)
    }
}

fn check_pair(auto: &LandmarkSet, gt: &LandmarkSet, schema: &Schema) -> Result<f64> {
    schema.check(auto)?;
    reference_length(gt, schema)
}

/// Mean point-to-point distance as a percentage of the reference length.
pub fn rp2p(auto: &LandmarkSet, gt: &LandmarkSet, schema: &Schema) -> Result<f64> {
    let l = check_pair(auto, gt, schema)?;
    let total: f64 = auto
        .points
        .iter()
        .zip(&gt.points)
        .map(|(a, g)| a.distance(*g))
        .sum();
    Ok(100.0 * total / (auto.len() as f64 * l))
}

/// Mean distance from each point to the ground-truth contour it belongs
/// to, as a percentage of the reference length.
pub fn rp2c(auto: &LandmarkSet, gt: &LandmarkSet, schema: &Schema) -> Result<f64> {
    let l = check_pair(auto, gt, schema)?;
    let curves = schema.curves(gt)?;
    let mut owner = vec![0usize; schema.landmark_count()];
    for (ci, c) in schema.contours().iter().enumerate() {
        for &i in &c.indices {
            owner[i] = ci;
        }
    }
    let total: f64 = auto
        .points
        .iter()
        .enumerate()
        .map(|(k, &p)| point_to_polyline_distance(p, &curves[owner[k]]))
        .sum();
    Ok(100.0 * total / (auto.len() as f64 * l))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distribution {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

/// Per-image rP2P and rP2C values with their summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationErrorSummary {
    pub rp2p: Vec<f64>,
    pub rp2c: Vec<f64>,
    pub rp2p_stats: Distribution,
    pub rp2c_stats: Distribution,
}

impl LocalizationErrorSummary {
    pub fn new(rp2p: Vec<f64>, rp2c: Vec<f64>) -> Result<Self> {
        if rp2p.len() != rp2c.len() {
            return Err(Error::LengthMismatch {
                left: rp2p.len(),
                right: rp2c.len(),
            });
        }
        if rp2p.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            rp2p_stats: distribution(&rp2p),
            rp2c_stats: distribution(&rp2c),
            rp2p,
            rp2c,
        })
    }

    /// Scores every `(auto, gt)` pair.
    pub fn evaluate(pairs: &[(LandmarkSet, LandmarkSet)], schema: &Schema) -> Result<Self> {
        let mut p2p = Vec::with_capacity(pairs.len());
        let mut p2c = Vec::with_capacity(pairs.len());
        for (auto, gt) in pairs {
            p2p.push(rp2p(auto, gt, schema)?);
            p2c.push(rp2c(auto, gt, schema)?);
        }
        Self::new(p2p, p2c)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (divisor `n - 1`); zero for fewer than two values.
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Nearest-rank percentile: the value at rank `ceil(p/100 * n)`.
pub fn percentile_nearest_rank(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = (p * s.len() as f64 / 100.0).ceil() as usize;
    s[rank.clamp(1, s.len()) - 1]
}

fn distribution(v: &[f64]) -> Distribution {
    Distribution {
        mean: mean(v),
        median: median(v),
        p95: percentile_nearest_rank(v, 95.0),
    }
}

fn check_lengths(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < min {
        return Err(Error::TooFewSubjects {
            needed: min,
            got: a.len(),
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("measurement series"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Icc {
    pub value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// Mean squares of the two-way ANOVA without replication on an `n x k`
/// table (subjects by raters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSquares {
    pub rows: f64,
    pub cols: f64,
    pub error: f64,
}

pub fn two_way_mean_squares(table: &[Vec<f64>]) -> MeanSquares {
    let n = table.len();
    let k = table[0].len();
    let grand = table.iter().flatten().sum::<f64>() / (n * k) as f64;
    let row_means: Vec<f64> = table.iter().map(|r| r.iter().sum::<f64>() / k as f64).collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| table.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let ss_rows = k as f64 * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_cols = n as f64 * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_total: f64 = table.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    let ss_error = (ss_total - ss_rows - ss_cols).max(0.0);
    MeanSquares {
        rows: ss_rows / (n - 1) as f64,
        cols: ss_cols / (k - 1) as f64,
        error: ss_error / ((n - 1) * (k - 1)) as f64,
    }
}

/// ICC(2,1) with the Shrout-Fleiss 95% interval.
///
/// Value and bounds are clamped to `[-1, 1]`. Without any residual or rater
/// variance the raters agree perfectly and the result is 1 with `[1, 1]`.
pub fn icc_2_1(a: &[f64], b: &[f64]) -> Result<Icc> {
    check_lengths(a, b, 3)?;
    let table: Vec<Vec<f64>> = a.iter().zip(b).map(|(&x, &y)| vec![x, y]).collect();
    let ms = two_way_mean_squares(&table);
    Ok(icc_from_mean_squares(ms, a.len(), 2))
}

pub fn icc_from_mean_squares(ms: MeanSquares, n: usize, k: usize) -> Icc {
    let perfect = Icc {
        value: 1.0,
        ci_lower: 1.0,
        ci_upper: 1.0,
    };
    let scale = ms.rows.max(ms.cols).max(ms.error);
    if scale == 0.0 || (ms.error <= 1e-15 * scale && ms.cols <= 1e-15 * scale) {
        return perfect;
    }
    let (nf, kf) = (n as f64, k as f64);
    let MeanSquares {
        rows: msr,
        cols: msc,
        error: mse,
    } = ms;
    let rho = (msr - mse) / (msr + (kf - 1.0) * mse + kf * (msc - mse) / nf);
    let aa = kf * rho / (nf * (1.0 - rho));
    let bb = 1.0 + kf * rho * (nf - 1.0) / (nf * (1.0 - rho));
    let v = (aa * msc + bb * mse).powi(2)
        / ((aa * msc).powi(2) / (kf - 1.0) + (bb * mse).powi(2) / ((nf - 1.0) * (kf - 1.0)));
    let (lower, upper) = if v.is_finite() && v > 0.0 {
        let fl = special::f_quantile(0.975, nf - 1.0, v);
        let fu = special::f_quantile(0.975, v, nf - 1.0);
        let c = kf * msc + (kf * nf - kf - nf) * mse;
        (
            nf * (msr - fl * mse) / (fl * c + nf * msr),
            nf * (fu * msr - mse) / (c + nf * fu * msr),
        )
    } else {
        (-1.0, 1.0)
    };
    let value = rho.clamp(-1.0, 1.0);
    Icc {
        value,
        ci_lower: lower.clamp(-1.0, 1.0).min(value),
        ci_upper: upper.clamp(-1.0, 1.0).max(value),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mad {
    pub value: f64,
    pub sd: f64,
}

/// Mean absolute difference and the sample SD of the absolute differences.
pub fn mad(a: &[f64], b: &[f64]) -> Result<Mad> {
    check_lengths(a, b, 1)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
    Ok(Mad {
        value: mean(&d),
        sd: sample_sd(&d),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlandAltman {
    pub bias: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Differences `a - b`: mean, sample SD and `bias +- 1.96 SD`.
pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman> {
    check_lengths(a, b, 2)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let bias = mean(&d);
    let sd = sample_sd(&d);
    Ok(BlandAltman {
        bias,
        sd,
        lower: bias - 1.96 * sd,
        upper: bias + 1.96 * sd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgreementReport {
    pub icc: Icc,
    pub mad: Mad,
    pub baa: BlandAltman,
    pub n: usize,
}

/// Agreement of `auto` against `reference`; differences are `auto - reference`.
pub fn agreement(auto: &[f64], reference: &[f64]) -> Result<AgreementReport> {
    Ok(AgreementReport {
        icc: icc_2_1(auto, reference)?,
        mad: mad(auto, reference)?,
        baa: bland_altman(auto, reference)?,
        n: auto.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;
    use crate::landmarks::{Contour, Roles};

    fn schema() -> Schema {
        let roles = Roles {
            femoral_shaft_red: (0, 1),
            femoral_shaft_yellow: (2, 3),
            tibial_shaft_black: (4, 5),
            tibial_shaft_blue: (7, 10),
            femoral_notch_purple: (8, 9),
            plateau_corners: (6, 11),
        };
        let contours = vec![
            Contour {
                name: "a".into(),
                indices: (0..6).collect(),
            },
            Contour {
                name: "b".into(),
                indices: (6..12).collect(),
            },
        ];
        Schema::new(12, roles, None, contours).unwrap()
    }

    /// Two straight horizontal contours; plateau corners 10 px apart.
    fn gt() -> LandmarkSet {
        let mut pts: Vec<Point2> = (0..6).map(|i| Point2::new(2.0 * i as f64, 0.0)).collect();
        pts.extend((0..6).map(|i| Point2::new(2.0 * i as f64, 20.0)));
        LandmarkSet::left(pts)
    }

    #[test]
    fn rp2p_examples() {
        let s = schema();
        let g = gt();
        assert_eq!(rp2p(&g, &g, &s).unwrap(), 0.0);
        let l = reference_length(&g, &s).unwrap();
        assert_eq!(l, 10.0);
        let shifted = g.map(|p| Point2::new(p.x + l / 100.0, p.y));
        assert!((rp2p(&shifted, &g, &s).unwrap() - 1.0).abs() < 1e-12);
        let double = |p: Point2| Point2::new(2.0 * p.x, 2.0 * p.y);
        assert!((rp2p(&shifted.map(double), &g.map(double), &s).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rp2c_examples() {
        let s = schema();
        let g = gt();
        assert_eq!(rp2c(&g, &g, &s).unwrap(), 0.0);
        // slide an interior point along its straight contour
        let mut slid = g.clone();
        slid.points[2].x += 0.7;
        assert!(rp2c(&slid, &g, &s).unwrap() < 1e-12);
        assert!(rp2p(&slid, &g, &s).unwrap() > 0.0);
        // push every point off its contour by L/50
        let off = g.map(|p| Point2::new(p.x, p.y + 10.0 / 50.0));
        assert!((rp2c(&off, &g, &s).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn errors_on_bad_inputs() {
        let s = schema();
        let g = gt();
        let short = LandmarkSet::left(g.points[..5].to_vec());
        assert!(matches!(rp2p(&short, &g, &s), Err(Error::SchemaMismatch(_))));
        let mut z = g.clone();
        z.points[11] = z.points[6];
        assert!(matches!(rp2p(&g, &z, &s), Err(Error::ZeroReferenceLength)));
    }

    #[test]
    fn percentile_and_summaries() {
        assert_eq!(percentile_nearest_rank(&[3.0; 20], 95.0), 3.0);
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile_nearest_rank(&v, 95.0), 19.0);
        assert_eq!(percentile_nearest_rank(&v, 100.0), 20.0);
        assert_eq!(median(&[4.0, 1.0, 3.0]), 3.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn icc_examples() {
        let a = [1.0, 2.0, 4.0, 3.0, 7.0];
        assert_eq!(icc_2_1(&a, &a).unwrap().value, 1.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!(icc_2_1(&a, &neg).unwrap().value < 0.0);
        let c = icc_2_1(&[2.0; 4], &[2.0; 4]).unwrap();
        assert_eq!((c.value, c.ci_lower, c.ci_upper), (1.0, 1.0, 1.0));
        assert!(matches!(icc_2_1(&a[..2], &a[..2]), Err(Error::TooFewSubjects { .. })));
        assert!(matches!(icc_2_1(&a, &a[..4]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn icc_ci_brackets_value() {
        let a = [10.0, 12.5, 9.0, 14.0, 11.0, 8.5, 13.0];
        let b = [10.4, 12.0, 9.8, 13.1, 11.6, 8.0, 13.9];
        let r = icc_2_1(&a, &b).unwrap();
        assert!(r.ci_lower <= r.value && r.value <= r.ci_upper);
        assert!(r.value > 0.8 && r.value < 1.0);
    }

    #[test]
    fn mad_and_bland_altman_examples() {
        let z = mad(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((z.value, z.sd), (0.0, 0.0));
        let m = mad(&[1.0, 0.0, 3.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!((m.value - 5.0 / 3.0).abs() < 1e-15);
        assert!((m.sd - sample_sd(&[1.0, 1.0, 3.0])).abs() < 1e-15);
        let swapped = mad(&[0.0, 1.0, 0.0], &[1.0, 0.0, 3.0]).unwrap();
        assert_eq!(m, swapped);

        let b = bland_altman(&[1.5, 2.5, 3.5], &[1.0, 2.0, 3.0]).unwrap();
        assert!((b.bias - 0.5).abs() < 1e-15 && b.sd.abs() < 1e-15);
        let d = [0.2, -0.4, 0.6, -0.4];
        let b = bland_altman(&d, &[0.0; 4]).unwrap();
        let oracle = (d.iter().map(|x| x * x).sum::<f64>() / 3.0).sqrt();
        assert!(b.bias.abs() < 1e-15 && (b.sd - oracle).abs() < 1e-15);
        assert!((b.upper - 1.96 * oracle).abs() < 1e-12);
    }
}
