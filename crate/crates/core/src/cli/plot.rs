//! Deterministic SVG rendering of sweep curves and analysis reports.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

/// Parses a `lambda,accuracy` curve.
pub fn parse_curve_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == "lambda,accuracy" => {}
        Some((i, _)) => return Err(Error::schema(Some(i + 1), "expected header `lambda,accuracy`")),
        None => return Err(Error::schema(None, "empty curve file")),
    }
    let mut curve = Vec::new();
    for (i, line) in lines {
        let bad = |m: &str| Error::schema(Some(i + 1), m.to_string());
        let (l, a) = line.split_once(',').ok_or_else(|| bad("expected two columns"))?;
        let l: f64 = l.trim().parse().map_err(|_| bad("lambda is not a number"))?;
        let a: f64 = a.trim().parse().map_err(|_| bad("accuracy is not a number"))?;
        if !(0.0..=1.0).contains(&l) || !(0.0..=1.0).contains(&a) {
            return Err(bad("values must lie in [0, 1]"));
        }
        curve.push((l, a));
    }
    if curve.is_empty() {
        return Err(Error::schema(None, "curve has no data rows"));
    }
    Ok(curve)
}

/// First maximum of the curve, lowest lambda on ties.
pub fn curve_optimum(curve: &[(f64, f64)]) -> (f64, f64) {
    let mut best = curve[0];
    for &(l, a) in &curve[1..] {
        if a > best.1 || (a == best.1 && l < best.0) {
            best = (l, a);
        }
    }
    best
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn axes(s: &mut String, x_label: &str, y_label: &str, y_max: f64) {
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(s, r##"<line x1="{x0:.1}" y1="{y0:.1}" x2="{x1:.1}" y2="{y0:.1}" stroke="#333"/>"##);
    let _ = writeln!(s, r##"<line x1="{x0:.1}" y1="{y0:.1}" x2="{x0:.1}" y2="{y1:.1}" stroke="#333"/>"##);
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.2}</text>"#,
            x0 - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

/// Accuracy against lambda, with the optimum marked.
pub fn curve_svg(curve: &[(f64, f64)], title: &str) -> Result<String> {
    if curve.is_empty() {
        return Err(Error::schema(None, "curve has no points"));
    }
    let (x0, y0) = (MARGIN, HEIGHT - MARGIN);
    let (w, h) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let px = |l: f64| x0 + w * l;
    let py = |a: f64| y0 - h * a;
    let mut s = header(title);
    axes(&mut s, "lambda", "accuracy", 1.0);
    for k in 0..=4 {
        let l = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{l:.2}</text>"#,
            px(l),
            y0 + 16.0
        );
    }
    let points: Vec<String> = curve.iter().map(|&(l, a)| format!("{:.2},{:.2}", px(l), py(a))).collect();
    let _ = writeln!(
        s,
        r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##,
        points.join(" ")
    );
    for &(l, a) in curve {
        let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#1f77b4"/>"##, px(l), py(a));
    }
    let (bl, ba) = curve_optimum(curve);
    let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="5" fill="none" stroke="#d62728" stroke-width="2"/>"##, px(bl), py(ba));
    let _ = writeln!(
        s,
        r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" fill="#d62728">best lambda={bl:.2} acc={ba:.4}</text>"##,
        (px(bl) + 8.0).min(WIDTH - MARGIN - 150.0),
        (py(ba) - 10.0).max(MARGIN + 12.0)
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// Grouped bars, one group per label.
pub fn bars_svg(title: &str, y_label: &str, labels: &[String], series: &[(&str, Vec<f64>)], y_max: f64) -> Result<String> {
    if labels.is_empty() || series.is_empty() {
        return Err(Error::schema(None, "nothing to plot"));
    }
    if series.iter().any(|(_, v)| v.len() != labels.len() || v.iter().any(|x| !x.is_finite())) {
        return Err(Error::schema(None, "series do not match labels"));
    }
    const COLORS: [&str; 4] = ["#2ca02c", "#d62728", "#1f77b4", "#ff7f0e"];
    let (x0, y0) = (MARGIN, HEIGHT - MARGIN);
    let (w, h) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let group = w / labels.len() as f64;
    let bar = group * 0.8 / series.len() as f64;
    let mut s = header(title);
    axes(&mut s, "", y_label, y_max);
    for (g, label) in labels.iter().enumerate() {
        let gx = x0 + group * g as f64 + group * 0.1;
        for (k, (_, values)) in series.iter().enumerate() {
            let v = values[g].clamp(0.0, y_max);
            let bh = h * v / y_max;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + bar * k as f64,
                y0 - bh,
                bar,
                bh,
                COLORS[k % COLORS.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            gx + group * 0.4,
            y0 + 16.0,
            escape(label)
        );
    }
    for (k, (name, _)) in series.iter().enumerate() {
        let y = MARGIN + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11">{}</text>"#,
            WIDTH - MARGIN - 110.0,
            y - 9.0,
            COLORS[k % COLORS.len()],
            WIDTH - MARGIN - 95.0,
            y,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn report_svg(v: &Value) -> Result<String> {
    let rows = v
        .get("rows")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::schema(None, "report has no `rows` array"))?;
    let text = |r: &Value, k: &str| -> Result<String> {
        r.get(k)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::schema(None, format!("row lacks `{k}`")))
    };
    let num = |r: &Value, k: &str| -> Result<f64> {
        r.get(k)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::schema(None, format!("row lacks numeric `{k}`")))
    };
    let first = rows.first().ok_or_else(|| Error::schema(None, "report has no rows"))?;
    if first.get("helpful_pct").is_some() {
        let labels = rows.iter().map(|r| text(r, "benchmark")).collect::<Result<Vec<_>>>()?;
        let helpful = rows.iter().map(|r| num(r, "helpful_pct")).collect::<Result<Vec<_>>>()?;
        let harmful = rows.iter().map(|r| num(r, "harmful_pct")).collect::<Result<Vec<_>>>()?;
        bars_svg("Helpful and harmful imagination", "% of items", &labels, &[("helpful", helpful), ("harmful", harmful)], 100.0)
    } else if first.get("mean_relevance").is_some() {
        let labels = rows.iter().map(|r| text(r, "dataset")).collect::<Result<Vec<_>>>()?;
        let means = rows.iter().map(|r| num(r, "mean_relevance")).collect::<Result<Vec<_>>>()?;
        bars_svg("Image-text relevance", "relevance", &labels, &[("mean relevance", means)], 100.0)
    } else {
        Err(Error::schema(None, "unrecognized report rows"))
    }
}

/// Renders a sweep CSV or an analysis report JSON to SVG text, chosen by
/// the input's extension.
pub fn render_input(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    let is_json = path.extension().and_then(|e| e.to_str()) == Some("json");
    if is_json {
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::schema(Some(e.line()), e.to_string()))?;
        report_svg(&v)
    } else {
        let curve = parse_curve_csv(&text)?;
        curve_svg(&curve, "Accuracy across ensemble weights")
    }
}
