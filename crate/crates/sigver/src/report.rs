//! Evaluation report files: `report.json`, per-type DET CSVs and an optional SVG.

use std::fmt::Write as _;
use std::path::Path;

use sigver_core::evaluation::{DetCurve, EvaluationReport};

use crate::error::AppResult;
use crate::fsutil::{write_atomic, write_json};

fn threshold_text(t: f64) -> String {
    if t == f64::INFINITY {
        "inf".into()
    } else if t == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        t.to_string()
    }
}

/// `far,frr,threshold` rows in ascending threshold order.
pub fn det_csv(curve: &DetCurve) -> String {
    let mut s = String::from("far,frr,threshold\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{}", p.far, p.frr, threshold_text(p.threshold));
    }
    s
}

/// Linear-axis FAR/FRR plot of the available curves.
pub fn det_svg(report: &EvaluationReport) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let curves = [
        ("random", report.det_curves.random.as_ref(), "#1f77b4"),
        ("skilled", report.det_curves.skilled.as_ref(), "#d62728"),
        ("overall", Some(&report.det_curves.overall), "#2ca02c"),
    ];
    let full = SIZE + 2.0 * PAD;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" viewBox="0 0 {full} {full}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">FAR</text>"#,
        PAD + SIZE / 2.0,
        full - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">FRR</text>"#,
        PAD + SIZE / 2.0,
        PAD + SIZE / 2.0
    );
    for (i, (name, curve, colour)) in curves.iter().enumerate() {
        let Some(curve) = curve else { continue };
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", PAD + p.far * SIZE, PAD + (1.0 - p.frr) * SIZE))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{colour}">{name}</text>"#,
            PAD + SIZE - 70.0,
            PAD + 18.0 + 16.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_report(dir: &Path, report: &EvaluationReport, svg: bool) -> AppResult<()> {
    write_json(&dir.join("report.json"), report)?;
    let empty = DetCurve::default();
    let curves = [
        ("det_random.csv", report.det_curves.random.as_ref().unwrap_or(&empty)),
        ("det_skilled.csv", report.det_curves.skilled.as_ref().unwrap_or(&empty)),
        ("det_overall.csv", &report.det_curves.overall),
    ];
    for (name, curve) in curves {
        write_atomic(&dir.join(name), det_csv(curve).as_bytes())?;
    }
    if svg {
        write_atomic(&dir.join("det.svg"), det_svg(report).as_bytes())?;
    }
    Ok(())
}
