//! Deterministic top-down (x-z) trajectory plots as SVG.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::evaluation::Trajectory;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn fmt(v: f64) -> String {
    // fixed decimals keep the byte output stable across inputs
    format!("{v:.3}")
}

/// Render named trajectories as x-z polylines with axes and a legend. Output
/// bytes are a pure function of the input.
pub fn plot_trajectories(trajectories: &[(String, Trajectory)]) -> Result<String> {
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    for (name, t) in trajectories {
        if t.is_empty() {
            return Err(Error::InvalidArgument(format!("trajectory {name:?} is empty")));
        }
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut z0, mut z1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, t) in trajectories {
        for p in &t.poses {
            x0 = x0.min(p.translation.x);
            x1 = x1.max(p.translation.x);
            z0 = z0.min(p.translation.z);
            z1 = z1.max(p.translation.z);
        }
    }
    // pad degenerate and thin extents so the scale stays finite
    let pad_x = ((x1 - x0) * 0.05).max(1e-6);
    let pad_z = ((z1 - z0) * 0.05).max(1e-6);
    x0 -= pad_x;
    x1 += pad_x;
    z0 -= pad_z;
    z1 += pad_z;
    let sx = (WIDTH - 2.0 * MARGIN) / (x1 - x0);
    let sz = (HEIGHT - 2.0 * MARGIN) / (z1 - z0);
    let s = sx.min(sz); // equal aspect so paths keep their shape
    let cx = (x0 + x1) / 2.0;
    let cz = (z0 + z1) / 2.0;
    let to_px = |x: f64, z: f64| {
        let px = WIDTH / 2.0 + (x - cx) * s;
        let py = HEIGHT / 2.0 - (z - cz) * s; // z up on screen
        (px, py)
    };

    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    )
    .unwrap();
    writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>").unwrap();
    writeln!(
        svg,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333333\"/>",
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    )
    .unwrap();
    writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"14\">x [m]</text>",
        fmt(WIDTH / 2.0),
        fmt(HEIGHT - 15.0)
    )
    .unwrap();
    writeln!(
        svg,
        "<text x=\"20\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"14\" transform=\"rotate(-90 20 {})\">z [m]</text>",
        fmt(HEIGHT / 2.0),
        fmt(HEIGHT / 2.0)
    )
    .unwrap();
    // extent labels at the plot corners
    writeln!(
        svg,
        "<text x=\"{MARGIN}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\">x: {} .. {}</text>",
        fmt(HEIGHT - MARGIN + 20.0),
        fmt(x0),
        fmt(x1)
    )
    .unwrap();
    writeln!(
        svg,
        "<text x=\"{MARGIN}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\">z: {} .. {}</text>",
        fmt(MARGIN - 10.0),
        fmt(z0),
        fmt(z1)
    )
    .unwrap();
    for (i, (_, t)) in trajectories.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut points = String::new();
        for p in &t.poses {
            let (px, py) = to_px(p.translation.x, p.translation.z);
            write!(points, "{},{} ", fmt(px), fmt(py)).unwrap();
        }
        writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            points.trim_end()
        )
        .unwrap();
    }
    for (i, (name, _)) in trajectories.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = MARGIN + 20.0 + i as f64 * 18.0;
        writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            fmt(WIDTH - MARGIN - 150.0),
            fmt(y - 4.0),
            fmt(WIDTH - MARGIN - 120.0),
            fmt(y - 4.0)
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">{}</text>",
            fmt(WIDTH - MARGIN - 112.0),
            fmt(y),
            escape_xml(name)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PoseSE3;
    use nalgebra::{Matrix3, Vector3};

    fn line_traj(n: usize, dir: (f64, f64)) -> Trajectory {
        Trajectory::from_poses(
            (0..n)
                .map(|k| PoseSE3 {
                    rotation: Matrix3::identity(),
                    translation: Vector3::new(dir.0 * k as f64, 0.0, dir.1 * k as f64),
                })
                .collect(),
        )
    }

    #[test]
    fn straight_line_gives_single_polyline() {
        let svg = plot_trajectories(&[("run".into(), line_traj(10, (1.0, 2.0)))]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("x [m]"));
        assert!(svg.contains(">run</text>"));
    }

    #[test]
    fn two_inputs_give_two_polylines_and_legend_entries() {
        let svg = plot_trajectories(&[
            ("ground truth".into(), line_traj(10, (1.0, 2.0))),
            ("prediction".into(), line_traj(10, (1.1, 1.9))),
        ])
        .unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">ground truth</text>"));
        assert!(svg.contains(">prediction</text>"));
        assert!(svg.contains("#1f77b4") && svg.contains("#d62728"));
    }

    #[test]
    fn output_is_deterministic() {
        let input = [("a".into(), line_traj(25, (0.3, 1.0)))];
        assert_eq!(plot_trajectories(&input).unwrap(), plot_trajectories(&input).unwrap());
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(plot_trajectories(&[]).is_err());
        let empty = Trajectory::from_poses(vec![]);
        assert!(plot_trajectories(&[("x".into(), empty)]).is_err());
    }

    #[test]
    fn names_are_xml_escaped() {
        let svg = plot_trajectories(&[("a<b&c".into(), line_traj(3, (1.0, 1.0)))]).unwrap();
        assert!(svg.contains("a&lt;b&amp;c"));
        assert!(!svg.contains("a<b"));
    }
}
