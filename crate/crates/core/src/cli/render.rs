//! Standalone SVG plots of a scene, its ground truth and generated trajectories.

use std::fmt::Write as _;
use std::path::Path;

use crate::env::{RobotPose, SensorConfig, TraversabilityGrid};
use crate::error::{Error, Result};
use crate::oracle::Trajectory;

pub const GROUND_TRUTH_COLOR: &str = "#ffd400";
pub const GENERATED_COLOR: &str = "#8b3fd9";
const TRAVERSABLE_COLOR: &str = "#1e1e24";
const BLOCKED_COLOR: &str = "#ffffff";
const BEAM_COLOR: &str = "#3fa7d6";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layers {
    pub grid: bool,
    pub ground_truth: bool,
    pub generated: bool,
    pub beams: bool,
    /// Fade generated strokes by confidence.
    pub confidence: bool,
}

impl Default for Layers {
    fn default() -> Self {
        Layers {
            grid: true,
            ground_truth: true,
            generated: true,
            beams: false,
            confidence: true,
        }
    }
}

impl Layers {
    /// Comma-separated subset of `grid,gt,generated,beams,confidence`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut l = Layers {
            grid: false,
            ground_truth: false,
            generated: false,
            beams: false,
            confidence: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "grid" => l.grid = true,
                "gt" => l.ground_truth = true,
                "generated" => l.generated = true,
                "beams" => l.beams = true,
                "confidence" => l.confidence = true,
                _ => return Err(Error::usage(format!("unknown plot layer `{part}`"))),
            }
        }
        Ok(l)
    }

    fn any(&self) -> bool {
        self.grid || self.ground_truth || self.generated || self.beams || self.confidence
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlotSpec {
    pub layers: Layers,
    /// Pixels per meter.
    pub scale: f64,
}

impl PlotSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.layers.any() {
            return Err(Error::usage("plot needs at least one layer"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::usage(format!("plot scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

/// Everything a plot can show. Trajectories are in the robot frame;
/// `confidence[i]` belongs to `generated[i]`.
pub struct PlotInput<'s> {
    pub grid: &'s TraversabilityGrid,
    pub pose: &'s RobotPose,
    pub ground_truth: &'s [Trajectory],
    pub generated: &'s [Trajectory],
    pub confidence: &'s [f64],
    /// Latest scan frame and the sensor that produced it.
    pub beams: Option<(&'s [f64], &'s SensorConfig)>,
}

/// Stroke opacity: 1 at full confidence, fading toward 0.15.
pub fn opacity(confidence: f64) -> f64 {
    0.15 + 0.85 * confidence.clamp(0.0, 1.0)
}

struct Frame {
    scale: f64,
    w: f64,
    h: f64,
}

impl Frame {
    /// World meters to pixels, y up, clipped to the grid.
    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        let x = p[0].clamp(0.0, self.w);
        let y = p[1].clamp(0.0, self.h);
        (x * self.scale, (self.h - y) * self.scale)
    }
}

fn polyline(out: &mut String, f: &Frame, pose: &RobotPose, t: &Trajectory, attrs: &str) {
    let mut d = String::new();
    for (i, &p) in t.waypoints.iter().enumerate() {
        let (x, y) = f.px(pose.to_world(p));
        let _ = write!(d, "{}{x:.2} {y:.2}", if i == 0 { "M" } else { " L" });
    }
    let _ = writeln!(out, r#"<path d="{d}" fill="none" {attrs}/>"#);
}

pub fn render(input: &PlotInput<'_>, spec: &PlotSpec) -> Result<String> {
    spec.validate()?;
    let g = input.grid;
    let [w, h] = g.extent();
    let f = Frame { scale: spec.scale, w, h };
    let res = g.resolution();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.2} {:.2}">"#,
        w * f.scale,
        h * f.scale,
        w * f.scale,
        h * f.scale
    );
    if spec.layers.grid {
        let _ = writeln!(s, r#"<g id="grid"><rect width="100%" height="100%" fill="{TRAVERSABLE_COLOR}"/>"#);
        for row in 0..g.height() {
            let mut col = 0;
            while col < g.width() {
                if g.traversable_at(col as i64, row as i64) {
                    col += 1;
                    continue;
                }
                let start = col;
                while col < g.width() && !g.traversable_at(col as i64, row as i64) {
                    col += 1;
                }
                let (x, y) = f.px([start as f64 * res, (row + 1) as f64 * res]);
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{BLOCKED_COLOR}"/>"#,
                    (col - start) as f64 * res * f.scale,
                    res * f.scale
                );
            }
        }
        s.push_str("</g>\n");
    }
    if spec.layers.beams {
        if let Some((ranges, sensor)) = input.beams {
            s.push_str("<g id=\"beams\">\n");
            let (x0, y0) = f.px([input.pose.x, input.pose.y]);
            let n = ranges.len();
            for (k, &r) in ranges.iter().enumerate() {
                let a = -sensor.fov / 2.0 + sensor.fov * k as f64 / (n.max(2) - 1) as f64;
                let (x1, y1) = f.px(input.pose.to_world([r * a.cos(), r * a.sin()]));
                let _ = writeln!(
                    s,
                    r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="{BEAM_COLOR}" stroke-width="0.5" stroke-opacity="0.6"/>"#
                );
            }
            s.push_str("</g>\n");
        }
    }
    if spec.layers.ground_truth {
        s.push_str("<g id=\"ground-truth\">\n");
        for t in input.ground_truth {
            polyline(&mut s, &f, input.pose, t, &format!(r#"stroke="{GROUND_TRUTH_COLOR}" stroke-width="2""#));
        }
        s.push_str("</g>\n");
    }
    if spec.layers.generated {
        s.push_str("<g id=\"generated\">\n");
        for (i, t) in input.generated.iter().enumerate() {
            let alpha = match (spec.layers.confidence, input.confidence.get(i)) {
                (true, Some(&c)) => opacity(c),
                _ => 1.0,
            };
            polyline(
                &mut s,
                &f,
                input.pose,
                t,
                &format!(r#"stroke="{GENERATED_COLOR}" stroke-width="2" stroke-opacity="{alpha:.4}""#),
            );
        }
        s.push_str("</g>\n");
    }
    let (x, y) = f.px([input.pose.x, input.pose.y]);
    let _ = writeln!(s, r##"<circle cx="{x:.2}" cy="{y:.2}" r="{:.2}" fill="#e4572e"/>"##, 0.3 * f.scale);
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_to_file(input: &PlotInput<'_>, spec: &PlotSpec, path: &Path) -> Result<()> {
    let svg = render(input, spec)?;
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_lists() {
        let l = Layers::parse("gt, beams").unwrap();
        assert!(l.ground_truth && l.beams && !l.grid && !l.generated);
        assert!(Layers::parse("grid,sky").is_err());
        let none = PlotSpec { layers: Layers::parse("").unwrap(), scale: 10.0 };
        assert!(none.validate().is_err());
        let flat = PlotSpec { layers: Layers::default(), scale: 0.0 };
        assert!(flat.validate().is_err());
    }

    #[test]
    fn opacity_range() {
        assert_eq!(opacity(1.0), 1.0);
        assert_eq!(opacity(0.0), 0.15);
        assert_eq!(opacity(7.0), 1.0);
        assert!(opacity(0.3) < opacity(0.6));
    }

    #[test]
    fn points_map_to_flipped_pixels() {
        let grid = TraversabilityGrid::new(20, 10, 0.5, true).unwrap();
        let pose = RobotPose::new(1.0, 1.0, 0.0);
        let gt = [Trajectory::new(vec![[1.0, 0.0], [2.0, 1.0], [50.0, 0.0]])];
        let input = PlotInput {
            grid: &grid,
            pose: &pose,
            ground_truth: &gt,
            generated: &[],
            confidence: &[],
            beams: None,
        };
        let spec = PlotSpec { layers: Layers::parse("gt").unwrap(), scale: 2.0 };
        let svg = render(&input, &spec).unwrap();
        assert!(svg.contains(r#"width="20" height="10""#));
        assert!(svg.contains(r#"d="M4.00 8.00 L6.00 6.00 L20.00 8.00""#), "{svg}");
        assert!(!svg.contains("id=\"grid\""));
    }
}
