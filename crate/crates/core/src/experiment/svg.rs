use std::fmt::Write;

use crate::error::{Error, Result};
use crate::metrics::GaussianMoments;
use crate::scenario::LabeledDataset;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 24.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Points on the 1σ and 2σ ellipses of a 2-D Gaussian.
fn ellipse(m: &GaussianMoments, radius: f64) -> Vec<[f64; 2]> {
    let eig = m.cov.clone().symmetric_eigen();
    (0..=64)
        .map(|i| {
            let a = i as f64 / 64.0 * std::f64::consts::TAU;
            let (u, v) = (a.cos(), a.sin());
            let mut p = [m.mean[0], m.mean[1]];
            for k in 0..2 {
                let s = radius * eig.eigenvalues[k].max(0.0).sqrt() * if k == 0 { u } else { v };
                p[0] += s * eig.eigenvectors[(0, k)];
                p[1] += s * eig.eigenvectors[(1, k)];
            }
            p
        })
        .collect()
}

/// A 2-D scatter of `points`, one `<circle>` each, drawn over the 1σ and 2σ
/// contours of every class in `real`.
pub fn scatter_svg(points: &[Vec<f64>], real: Option<&LabeledDataset>, title: &str) -> Result<String> {
    if points.iter().any(|p| p.len() != 2) {
        return Err(Error::Shape("scatter plots need 2-D points".into()));
    }
    let mut contours = Vec::new();
    if let Some(ds) = real {
        if ds.dim != 2 {
            return Err(Error::Shape("scatter plots need 2-D reference data".into()));
        }
        for k in 0..ds.class_count() {
            let pts = ds.points_of(k);
            if pts.len() >= 3 {
                let m = GaussianMoments::fit(&pts)?;
                contours.push((k, ellipse(&m, 1.0), ellipse(&m, 2.0)));
            }
        }
    }
    let all = points
        .iter()
        .map(|p| [p[0], p[1]])
        .chain(contours.iter().flat_map(|(_, a, b)| a.iter().chain(b).copied()));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in all {
        for j in 0..2 {
            lo[j] = lo[j].min(p[j]);
            hi[j] = hi[j].max(p[j]);
        }
    }
    if !lo[0].is_finite() {
        lo = [-1.0, -1.0];
        hi = [1.0, 1.0];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let px = |p: [f64; 2]| (MARGIN + (p[0] - lo[0]) * scale, SIZE - MARGIN - (p[1] - lo[1]) * scale);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="16" font-size="12" font-family="sans-serif">{}</text>"#, escape(title));
    for (k, one, two) in &contours {
        let color = PALETTE[k % PALETTE.len()];
        for (ring, opacity) in [(one, 0.8), (two, 0.4)] {
            let pts: Vec<String> = ring
                .iter()
                .map(|&p| {
                    let (x, y) = px(p);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline class="contour" points="{}" fill="none" stroke="{color}" stroke-opacity="{opacity}"/>"#,
                pts.join(" ")
            );
        }
    }
    for p in points {
        let (x, y) = px([p[0], p[1]]);
        let _ = writeln!(s, r#"<circle class="sample" cx="{x:.2}" cy="{y:.2}" r="2.5" fill="black" fill-opacity="0.6"/>"#);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_marker_per_point() {
        let pts: Vec<Vec<f64>> = (0..17).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let mut real = LabeledDataset::empty(2);
        for i in 0..10 {
            real.push(vec![i as f64 * 0.3, (i % 3) as f64], 0, vec![]);
        }
        let svg = scatter_svg(&pts, Some(&real), "<tiger_cat> & co").unwrap();
        assert_eq!(svg.matches("<circle").count(), 17);
        assert_eq!(svg.matches("class=\"contour\"").count(), 2);
        assert!(svg.contains("&lt;tiger_cat&gt; &amp; co"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn rejects_non_planar_points() {
        assert!(scatter_svg(&[vec![1.0, 2.0, 3.0]], None, "").is_err());
    }
}
