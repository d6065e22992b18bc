//! Trajectory rendering. Paths become polylines, final positions become
//! body-radius circles, and each pedestrian is tinted by its mean
//! deviation estimate on a blue-to-pink ramp. The robot stays black.
//! Output is deterministic for a given log.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::traj::TrajRecord;
use crate::vec2::Vec2;

#[derive(Clone, Copy, Debug)]
pub struct SvgStyle {
    /// Pixel width of the drawing area; height follows the data aspect.
    pub width: f64,
    pub margin: f64,
    pub stroke_width: f64,
}

impl Default for SvgStyle {
    fn default() -> SvgStyle {
        SvgStyle {
            width: 640.0,
            margin: 40.0,
            stroke_width: 2.0,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SvgError {
    #[error("no records to draw")]
    Empty,
    #[error("log mixes episodes {0} and {1}; filter to one before drawing")]
    MixedEpisodes(u64, u64),
}

/// Calm blue at 0 to vivid pink at 1, linear per channel.
pub fn ramp_color(rho: f64) -> (u8, u8, u8) {
    let t = rho.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    (lerp(45.0, 235.0), lerp(90.0, 70.0), lerp(220.0, 180.0))
}

fn color_attr(rgb: (u8, u8, u8)) -> String {
    format!("rgb({},{},{})", rgb.0, rgb.1, rgb.2)
}

/// Render one episode's log. Pedestrian stroke color uses the mean of the
/// rho column over the steps where it is present, zero otherwise.
pub fn emit_svg_trajectory(records: &[TrajRecord], style: &SvgStyle) -> Result<String, SvgError> {
    if records.is_empty() {
        return Err(SvgError::Empty);
    }
    let episode = records[0].episode;
    if let Some(other) = records.iter().find(|r| r.episode != episode) {
        return Err(SvgError::MixedEpisodes(episode, other.episode));
    }

    // Group by agent; BTreeMap fixes the draw order.
    let mut agents: BTreeMap<u32, Vec<&TrajRecord>> = BTreeMap::new();
    for r in records {
        agents.entry(r.agent).or_default().push(r);
    }
    for track in agents.values_mut() {
        track.sort_by_key(|r| r.step);
    }

    let max_radius = records.iter().fold(0.0f64, |m, r| m.max(r.radius));
    let (mut lo, mut hi) = (
        Vec2 {
            x: f64::INFINITY,
            y: f64::INFINITY,
        },
        Vec2 {
            x: f64::NEG_INFINITY,
            y: f64::NEG_INFINITY,
        },
    );
    for r in records {
        lo.x = lo.x.min(r.pos.x);
        lo.y = lo.y.min(r.pos.y);
        hi.x = hi.x.max(r.pos.x);
        hi.y = hi.y.max(r.pos.y);
    }
    lo.x -= max_radius;
    lo.y -= max_radius;
    hi.x += max_radius;
    hi.y += max_radius;
    let span_x = (hi.x - lo.x).max(1e-9);
    let span_y = (hi.y - lo.y).max(1e-9);
    let inner = style.width - 2.0 * style.margin;
    let scale = inner / span_x.max(span_y);
    let width = style.width;
    // Extra band below the plot for the legend and the scale bar.
    let plot_h = span_y * scale + 2.0 * style.margin;
    let height = plot_h + 70.0;
    // World y grows upward, SVG y grows downward.
    let px = |p: Vec2| {
        (
            style.margin + (p.x - lo.x) * scale,
            style.margin + (hi.y - p.y) * scale,
        )
    };

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\">"
    );
    let _ = writeln!(
        out,
        "<rect x=\"0\" y=\"0\" width=\"{width:.0}\" height=\"{height:.0}\" fill=\"white\"/>"
    );

    for (&agent, track) in &agents {
        let color = if agent == 0 {
            "rgb(0,0,0)".to_string()
        } else {
            let vals: Vec<f64> = track.iter().filter_map(|r| r.rho).collect();
            let mean = if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            color_attr(ramp_color(mean))
        };
        let mut points = String::new();
        for r in track.iter() {
            let (x, y) = px(r.pos);
            let _ = write!(points, "{x:.3},{y:.3} ");
        }
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"{:.1}\" points=\"{}\"/>",
            style.stroke_width,
            points.trim_end(),
        );
        let last = track.last().unwrap();
        let (cx, cy) = px(last.pos);
        let _ = writeln!(
            out,
            "<circle cx=\"{cx:.3}\" cy=\"{cy:.3}\" r=\"{:.3}\" fill=\"{color}\" fill-opacity=\"0.5\" stroke=\"{color}\"/>",
            last.radius * scale,
        );
    }

    // Legend: the deviation ramp in ten swatches with end labels.
    let legend_y = plot_h + 18.0;
    let swatch = 18.0;
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">deviation</text>",
        style.margin,
        legend_y - 4.0
    );
    for i in 0..10 {
        let color = color_attr(ramp_color((i as f64 + 0.5) / 10.0));
        let _ = writeln!(
            out,
            "<rect x=\"{:.1}\" y=\"{legend_y:.1}\" width=\"{swatch:.1}\" height=\"12\" fill=\"{color}\"/>",
            style.margin + i as f64 * swatch,
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">0</text>",
        style.margin,
        legend_y + 24.0
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">1</text>",
        style.margin + 10.0 * swatch - 6.0,
        legend_y + 24.0
    );

    // Scale bar: one metre in plot units.
    let bar_x = width - style.margin - scale;
    let bar_y = legend_y + 6.0;
    let _ = writeln!(
        out,
        "<line x1=\"{bar_x:.3}\" y1=\"{bar_y:.1}\" x2=\"{:.3}\" y2=\"{bar_y:.1}\" stroke=\"black\" stroke-width=\"2\"/>",
        bar_x + scale,
    );
    let _ = writeln!(
        out,
        "<text x=\"{bar_x:.3}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">1 m</text>",
        bar_y + 16.0
    );

    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vec2::vec2;

    fn record(agent: u32, step: u64, x: f64, y: f64, rho: Option<f64>) -> TrajRecord {
        TrajRecord {
            episode: 0,
            step,
            agent,
            pos: vec2(x, y),
            vel: vec2(0.0, 0.0),
            radius: 0.3,
            rho,
        }
    }

    /// Minimal well-formedness scan: every opened tag closes, in order.
    /// Output never puts '<' or '>' inside attribute values, so a tag-level
    /// scan is exact for this generator.
    fn assert_well_formed(svg: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = svg;
        while let Some(start) = rest.find('<') {
            let end = rest[start..].find('>').expect("unclosed tag") + start;
            let tag = &rest[start + 1..end];
            rest = &rest[end + 1..];
            if let Some(name) = tag.strip_prefix('/') {
                assert_eq!(stack.pop().as_deref(), Some(name), "mismatched close");
            } else if !tag.ends_with('/') {
                let name = tag.split_whitespace().next().unwrap();
                stack.push(name.to_string());
            }
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
    }

    #[test]
    fn empty_crowd_is_a_single_black_polyline() {
        let records: Vec<TrajRecord> = (0..5)
            .map(|k| record(0, k, k as f64 * 0.25, 0.0, None))
            .collect();
        let svg = emit_svg_trajectory(&records, &SvgStyle::default()).unwrap();
        assert_well_formed(&svg);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("stroke=\"rgb(0,0,0)\""));
        assert!(svg.contains("1 m"));
        assert!(svg.contains("deviation"));
    }

    #[test]
    fn output_is_byte_identical_across_calls() {
        let records: Vec<TrajRecord> = (0..4)
            .flat_map(|k| {
                [
                    record(0, k, k as f64 * 0.3, 0.1, None),
                    record(1, k, 1.0, k as f64 * 0.2, Some(0.6)),
                ]
            })
            .collect();
        let a = emit_svg_trajectory(&records, &SvgStyle::default()).unwrap();
        let b = emit_svg_trajectory(&records, &SvgStyle::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn higher_deviation_draws_strictly_pinker() {
        let records: Vec<TrajRecord> = (0..4)
            .flat_map(|k| {
                [
                    record(0, k, k as f64, 0.0, None),
                    record(1, k, k as f64, 1.0, Some(0.1)),
                    record(2, k, k as f64, 2.0, Some(0.9)),
                ]
            })
            .collect();
        let svg = emit_svg_trajectory(&records, &SvgStyle::default()).unwrap();
        assert_well_formed(&svg);
        let calm = color_attr(ramp_color(0.1));
        let wild = color_attr(ramp_color(0.9));
        assert!(svg.contains(&calm));
        assert!(svg.contains(&wild));
        assert!(ramp_color(0.9).0 > ramp_color(0.1).0, "red channel must rise");
        assert!(ramp_color(0.9).2 < ramp_color(0.1).2, "blue channel must fall");
        // The whole ramp is strictly monotone in the red channel.
        for i in 1..=10 {
            assert!(ramp_color(i as f64 / 10.0).0 > ramp_color((i - 1) as f64 / 10.0).0);
        }
    }

    #[test]
    fn mixed_episode_logs_are_rejected() {
        let mut records = vec![record(0, 0, 0.0, 0.0, None), record(0, 1, 1.0, 0.0, None)];
        records.push(TrajRecord {
            episode: 3,
            ..record(0, 2, 2.0, 0.0, None)
        });
        assert_eq!(
            emit_svg_trajectory(&records, &SvgStyle::default()),
            Err(SvgError::MixedEpisodes(0, 3))
        );
        assert_eq!(
            emit_svg_trajectory(&[], &SvgStyle::default()),
            Err(SvgError::Empty)
        );
    }
}
