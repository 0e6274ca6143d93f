//! Text and CSV reports laid out like the localization and agreement
//! tables, plus a Bland-Altman SVG.

use std::fmt::Write as _;

use super::{AgreementReport, LocalizationErrorSummary};

/// One measurement method's agreement with the reference angles.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodAgreement {
    pub method: String,
    pub report: AgreementReport,
    /// `(auto, reference)` pairs, for plotting.
    pub pairs: Vec<(f64, f64)>,
}

pub fn table1_text(label: &str, s: &LocalizationErrorSummary) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "Landmark localization error (% of reference length), n = {}", s.rp2p.len());
    let _ = writeln!(t, "{:<16} {:>8} {:>8} {:>8}   {:>8} {:>8} {:>8}", "", "rP2P", "", "", "rP2C", "", "");
    let _ = writeln!(
        t,
        "{:<16} {:>8} {:>8} {:>8}   {:>8} {:>8} {:>8}",
        "Method", "Mean", "Median", "95%", "Mean", "Median", "95%"
    );
    let (p, c) = (s.rp2p_stats, s.rp2c_stats);
    let _ = writeln!(
        t,
        "{:<16} {:>8.2} {:>8.2} {:>8.2}   {:>8.2} {:>8.2} {:>8.2}",
        label, p.mean, p.median, p.p95, c.mean, c.median, c.p95
    );
    t
}

pub fn localization_csv(label: &str, s: &LocalizationErrorSummary) -> String {
    let mut t = String::from("method,metric,mean,median,p95,n\n");
    for (name, d) in [("rp2p", s.rp2p_stats), ("rp2c", s.rp2c_stats)] {
        let _ = writeln!(t, "{label},{name},{:.6},{:.6},{:.6},{}", d.mean, d.median, d.p95, s.rp2p.len());
    }
    t
}

pub fn table2_text(rows: &[MethodAgreement]) -> String {
    let mut t = String::new();
    let n = rows.first().map_or(0, |r| r.report.n);
    let _ = writeln!(t, "Agreement of automated and reference aTFA (degrees), n = {n}");
    let _ = writeln!(
        t,
        "{:<8} {:>7} {:>17}   {:>7} {:>7}   {:>7} {:>7} {:>17}",
        "Method", "ICC", "CI 95%", "MAD", "SD", "Bias", "SD", "Limits"
    );
    for r in rows {
        let (i, m, b) = (r.report.icc, r.report.mad, r.report.baa);
        let _ = writeln!(
            t,
            "{:<8} {:>7.3} {:>17}   {:>7.2} {:>7.2}   {:>7.2} {:>7.2} {:>17}",
            r.method,
            i.value,
            format!("[{:.3}, {:.3}]", i.ci_lower, i.ci_upper),
            m.value,
            m.sd,
            b.bias,
            b.sd,
            format!("[{:.2}, {:.2}]", b.lower, b.upper)
        );
    }
    t
}

pub fn agreement_csv(rows: &[MethodAgreement]) -> String {
    let mut t = String::from(
        "method,n,icc,icc_ci_lower,icc_ci_upper,mad,mad_sd,baa_bias,baa_sd,baa_lower,baa_upper\n",
    );
    for r in rows {
        let (i, m, b) = (r.report.icc, r.report.mad, r.report.baa);
        let _ = writeln!(
            t,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.method, r.report.n, i.value, i.ci_lower, i.ci_upper, m.value, m.sd, b.bias, b.sd, b.lower, b.upper
        );
    }
    t
}

/// Difference against mean, with bias and limit lines.
pub fn bland_altman_svg(row: &MethodAgreement) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    let pts: Vec<(f64, f64)> = row.pairs.iter().map(|&(a, r)| (0.5 * (a + r), a - r)).collect();
    let b = row.report.baa;
    let (mut x0, mut x1) = pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (mut y0, mut y1) = pts
        .iter()
        .map(|p| p.1)
        .chain([b.lower, b.upper])
        .fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if x1 - x0 < 1e-9 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">Bland-Altman: {}</text>"#,
        W / 2.0,
        row.method
    );
    for (v, dash, label) in [(b.bias, "", "bias"), (b.lower, "4 3", "-1.96 SD"), (b.upper, "4 3", "+1.96 SD")] {
        let y = sy(v);
        let _ = writeln!(
            s,
            r#"<line x1="{PAD}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="gray" stroke-dasharray="{dash}"/>"#,
            W - PAD
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{label} {v:.2}</text>"#,
            W - PAD,
            y - 3.0
        );
    }
    for (x, y) in &pts {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, sx(*x), sy(*y));
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">mean of methods (deg)</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">difference (deg)</text>"#,
        H / 2.0,
        H / 2.0
    );
    s.push_str("</svg>\n");
    s
}
