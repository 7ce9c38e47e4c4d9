//! SVG snapshots of the trained and reference clouds.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Square viewport `[-EXTENT, EXTENT]²` shared by all frames.
pub const EXTENT: f64 = 1.6;
const PIXELS: f64 = 480.0;
const REFERENCE_COLOR: &str = "#4c72b0";
const TRAINED_COLOR: &str = "#dd8452";

fn to_px(x: f64) -> f64 {
    (x + EXTENT) / (2.0 * EXTENT) * PIXELS
}

fn dots(svg: &mut String, cloud: &PointCloud, color: &str, radius: f64) {
    for p in cloud.points() {
        let (x, y) = (p[0], p.get(1).copied().unwrap_or(0.0));
        if x.abs() > EXTENT || y.abs() > EXTENT {
            continue;
        }
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{radius}" fill="{color}"/>"#,
            to_px(x),
            PIXELS - to_px(y)
        );
    }
}

/// Renders the first two coordinates of both clouds; points outside the
/// viewport are left out.
pub fn render_frame(trained: &PointCloud, reference: &PointCloud, step: usize) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PIXELS}" height="{PIXELS}" viewBox="0 0 {PIXELS} {PIXELS}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    dots(&mut svg, reference, REFERENCE_COLOR, 2.0);
    dots(&mut svg, trained, TRAINED_COLOR, 2.0);
    let _ = writeln!(
        svg,
        r#"<text x="8" y="20" font-family="monospace" font-size="14">step {step}</text>"#
    );
    svg.push_str("</svg>\n");
    svg
}

pub fn write_frame(
    path: impl AsRef<Path>,
    trained: &PointCloud,
    reference: &PointCloud,
    step: usize,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_frame(trained, reference, step)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_has_one_circle_per_visible_point() {
        let a = PointCloud::new(vec![vec![0.0, 0.0], vec![5.0, 0.0]]).unwrap();
        let b = PointCloud::new(vec![vec![1.0, 1.0]]).unwrap();
        let svg = render_frame(&a, &b, 7);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("step 7"));
        assert!(svg.contains(r#"cx="240.00" cy="240.00""#));
    }
}
