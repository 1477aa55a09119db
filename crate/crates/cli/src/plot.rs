//! Minimal SVG renderings plus the CSV they were drawn from. Output is a
//! pure function of the input text, numbers are printed at fixed precision.

use std::collections::BTreeMap;
use std::fmt::Write;

use discon::pipeline::parse_metrics_csv;

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub const SAMPLES_FILE: &str = "samples.csv";
pub const SAMPLES_HEADER_PREFIX: &str = "sample,position,code,mode";

#[derive(Clone, Copy, Debug)]
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut f = Frame {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            return Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        let pad = |lo: &mut f64, hi: &mut f64| {
            if *hi - *lo < 1e-12 {
                *lo -= 0.5;
                *hi += 0.5;
            }
        };
        pad(&mut f.x0, &mut f.x1);
        pad(&mut f.y0, &mut f.y1);
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn open_svg(title: &str, f: &Frame, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="16" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, escape(title));
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(s, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{l}" y="{}" text-anchor="middle">{:.3}</text>"#, b + 14.0, f.x0);
    let _ = writeln!(s, r#"<text x="{r}" y="{}" text-anchor="middle">{:.3}</text>"#, b + 14.0, f.x1);
    let _ = writeln!(s, r#"<text x="{}" y="{b}" text-anchor="end">{:.3}</text>"#, l - 4.0, f.y0);
    let _ = writeln!(s, r#"<text x="{}" y="{t}" text-anchor="end">{:.3}</text>"#, l - 4.0, f.y1);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 8.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter of the first two coordinates of every token in `samples_csv`,
/// colored by nearest mode. Returns `(svg, csv)`.
pub fn scatter(samples_csv: &str) -> Result<(String, String), String> {
    let mut lines = samples_csv.lines();
    let header = lines.next().ok_or("samples file is empty")?;
    if !header.starts_with(SAMPLES_HEADER_PREFIX) {
        return Err(format!("unexpected samples header `{header}`"));
    }
    let mut pts = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let num = |k: usize| -> Result<f64, String> {
            f.get(k)
                .ok_or_else(|| format!("line {}: missing column {k}", i + 2))?
                .parse::<f64>()
                .map_err(|e| format!("line {}: {e}", i + 2))
        };
        let mode: usize = f
            .get(3)
            .and_then(|m| m.parse().ok())
            .ok_or_else(|| format!("line {}: bad mode column", i + 2))?;
        let y = if f.len() > 5 { num(5)? } else { 0.0 };
        pts.push((num(4)?, y, mode));
    }
    let frame = Frame::fit(pts.iter().map(|&(x, y, _)| (x, y)));
    let mut svg = open_svg(&format!("generated tokens (n={})", pts.len()), &frame, "x0", "x1");
    let mut csv = String::from("x,y,mode\n");
    for &(x, y, m) in &pts {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{}"/>"#,
            frame.px(x),
            frame.py(y),
            PALETTE[m % PALETTE.len()]
        );
        let _ = writeln!(csv, "{x},{y},{m}");
    }
    svg.push_str("</svg>\n");
    Ok((svg, csv))
}

/// One polyline per `(split, metric)` series of a metrics file, value
/// against step. The CSV has one row per metric record.
pub fn curve(metrics_csv: &str) -> Result<(String, String), String> {
    let records = parse_metrics_csv(metrics_csv)?;
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut csv = String::from("series,x,y\n");
    for r in &records {
        let name = format!("{}/{}", r.split, r.metric);
        let _ = writeln!(csv, "{name},{},{}", r.step, r.value);
        series.entry(name).or_default().push((r.step as f64, r.value));
    }
    let frame = Frame::fit(series.values().flatten().copied());
    let mut svg = open_svg("metrics", &frame, "step", "value");
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .enumerate()
            .map(|(i, &(x, y))| format!("{}{:.2} {:.2}", if i == 0 { "M" } else { "L" }, frame.px(x), frame.py(y)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(svg, r#"<path d="{}" fill="none" stroke="{color}"/>"#, path.join(" "));
        }
        for &(x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}"/>"#, frame.px(x), frame.py(y));
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - MARGIN + 4.0 - 120.0,
            MARGIN + 12.0 * k as f64,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    Ok((svg, csv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scatter_has_axes_only() {
        let (svg, csv) = scatter("sample,position,code,mode,x0,x1\n").unwrap();
        assert!(svg.contains("<path"));
        assert!(!svg.contains("<circle"));
        assert_eq!(csv, "x,y,mode\n");
    }

    #[test]
    fn curve_rows_match_records() {
        let m = "step,split,metric,value\n0,val,loss,2\n1,train,loss,1.5\n1,val,loss,1.2\n";
        let (svg, csv) = curve(m).unwrap();
        assert_eq!(csv.lines().count() - 1, 3);
        assert_eq!(svg.matches("<circle").count(), 3);
    }
}
