//! Static SVG rendering of risk traces.

use std::fmt::Write as _;

use crate::Usage;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const TRACE_HEADER: [&str; 6] = ["clip_id", "snippet_index", "t_start_s", "logit", "prob", "attention"];

/// Parses either the per-snippet trace layout (one series of probabilities
/// per clip) or a wide layout whose first column is time and every further
/// column is a series named by its header.
pub fn parse_trace_csv(text: &str) -> Result<PlotData, Usage> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Usage(format!("trace CSV line 1: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.len() < 2 || headers.iter().any(String::is_empty) {
        return Err(Usage("trace CSV line 1: expected a header with at least two columns".into()));
    }
    let long = headers.iter().map(String::as_str).eq(TRACE_HEADER);

    let mut data = PlotData {
        x_label: if long { "t_start_s".into() } else { headers[0].clone() },
        y_label: if long { "prob".into() } else { "value".into() },
        series: if long {
            Vec::new()
        } else {
            headers[1..]
                .iter()
                .map(|h| Series {
                    label: h.clone(),
                    points: Vec::new(),
                })
                .collect()
        },
    };
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Usage(format!("trace CSV line {line}: {e}"))
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64, Usage> {
            let raw = row.get(i).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Usage(format!("trace CSV line {line}: column '{}' is not a number: '{raw}'", headers[i])))
        };
        if long {
            let id = row.get(0).unwrap_or("").trim();
            if id.is_empty() {
                return Err(Usage(format!("trace CSV line {line}: empty clip_id")));
            }
            let (x, y) = (num(2)?, num(4)?);
            match data.series.iter_mut().find(|s| s.label == id) {
                Some(s) => s.points.push((x, y)),
                None => data.series.push(Series {
                    label: id.to_string(),
                    points: vec![(x, y)],
                }),
            }
        } else {
            let x = num(0)?;
            for (k, s) in data.series.iter_mut().enumerate() {
                s.points.push((x, num(k + 1)?));
            }
        }
    }
    if data.series.iter().all(|s| s.points.is_empty()) {
        return Err(Usage("trace CSV has no data rows".into()));
    }
    Ok(data)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

pub fn render_svg(data: &PlotData) -> String {
    let pts = || data.series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = range(pts().map(|p| p.0));
    let (y0, y1) = if data.y_label == "prob" {
        (0.0, 1.0)
    } else {
        range(pts().map(|p| p.1))
    };
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}"/></g>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(&data.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {:.1})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(&data.y_label)
    );
    for (v, anchor, x, y) in [
        (x0, "middle", left, bottom + 16.0),
        (x1, "middle", right, bottom + 16.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}" font-size="10">{v}</text>"#);
    }
    for (v, y) in [(y0, bottom), (y1, top)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{v}</text>"#,
            left - 4.0,
            y + 3.0
        );
    }

    for (i, series) in data.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let label = escape(&series.label);
        let coords: Vec<String> = series
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(s, r#"<g class="series" data-label="{label}">"#);
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        for &(x, y) in &series.points {
            let _ = writeln!(
                s,
                r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                px(x),
                py(y)
            );
        }
        let _ = writeln!(s, "</g>");
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<g class="legend"><rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}" font-size="11">{label}</text></g>"#,
            right - 110.0,
            ly - 9.0,
            right - 95.0,
            ly
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_layout_groups_by_clip() {
        let text = "clip_id,snippet_index,t_start_s,logit,prob,attention\n\
                    a,0,0,0.1,0.5,0.5\na,1,2,0.3,0.6,0.5\nb,0,0,-1,0.2,1\n";
        let d = parse_trace_csv(text).unwrap();
        assert_eq!(d.series.len(), 2);
        assert_eq!(d.series[0].points, vec![(0.0, 0.5), (2.0, 0.6)]);
    }

    #[test]
    fn wide_layout_uses_headers_as_labels() {
        let d = parse_trace_csv("t,mil,no_mil\n0,0.1,0.4\n1,0.9,0.5\n").unwrap();
        let labels: Vec<&str> = d.series.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(labels, ["mil", "no_mil"]);
        let svg = render_svg(&d);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches(r#"class="marker""#).count(), 4);
    }

    #[test]
    fn bad_cell_names_its_line() {
        let err = parse_trace_csv("t,mil\n0,0.1\n1,oops\n").unwrap_err();
        assert!(err.0.contains("line 3"), "{}", err.0);
        let err = parse_trace_csv("t,mil\n0,0.1\n1\n").unwrap_err();
        assert!(err.0.contains("line 3"), "{}", err.0);
    }

    #[test]
    fn header_only_is_rejected() {
        assert!(parse_trace_csv("t,mil\n").is_err());
        assert!(parse_trace_csv("").is_err());
    }

    #[test]
    fn labels_are_escaped() {
        let d = parse_trace_csv("t,a<b\n0,1\n").unwrap();
        assert!(render_svg(&d).contains("a&lt;b"));
    }
}
