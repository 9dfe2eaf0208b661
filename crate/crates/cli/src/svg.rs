//! Standalone SVG charts rendered from CSV tables.

use std::fmt::Write;

/// A parsed CSV table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn parse_csv(text: &str) -> anyhow::Result<Table> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| anyhow::anyhow!("empty CSV"))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if row.len() != header.len() {
            anyhow::bail!("row {} has {} fields, header has {}", i + 2, row.len(), header.len());
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Numeric values of a column. Empty cells are missing (NaN); anything
    /// else non-numeric is an error.
    pub fn numbers(&self, col: usize) -> anyhow::Result<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                if r[col].is_empty() {
                    return Ok(f64::NAN);
                }
                r[col]
                    .parse::<f64>()
                    .map_err(|_| anyhow::anyhow!("`{}` in column {} is not a number", r[col], self.header[col]))
            })
            .collect()
    }
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const LINE_MIN_ROWS: usize = 20;
const COLORS: [&str; 6] = ["#3366cc", "#dc3912", "#ff9900", "#109618", "#990099", "#0099c6"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str, lo: f64, hi: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#,
        H - PAD
    );
    for (v, y) in [(hi, PAD), (lo, H - PAD)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            PAD - 4.0,
            y + 4.0,
            fmt_num(v)
        );
    }
    s
}

fn fmt_num(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn y_of(v: f64, lo: f64, hi: f64) -> f64 {
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    H - PAD - t * (H - 2.0 * PAD)
}

fn range(series: &[(String, Vec<f64>)]) -> (f64, f64) {
    let all = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        (0.0, 1.0)
    } else {
        (lo.min(0.0), hi.max(lo.min(0.0) + 1e-12))
    }
}

/// Grouped bar chart: one group per label, one bar per series.
pub fn bar_chart(title: &str, labels: &[String], series: &[(String, Vec<f64>)]) -> String {
    let (lo, hi) = range(series);
    let mut s = frame(title, lo, hi);
    let n = labels.len().max(1) as f64;
    let group = (W - 2.0 * PAD) / n;
    let bar = group * 0.8 / series.len().max(1) as f64;
    for (i, label) in labels.iter().enumerate() {
        let gx = PAD + group * i as f64 + group * 0.1;
        for (j, (_, values)) in series.iter().enumerate() {
            let v = values.get(i).copied().unwrap_or(f64::NAN);
            if !v.is_finite() {
                continue;
            }
            let (y0, y1) = (y_of(0.0f64.max(lo), lo, hi), y_of(v, lo, hi));
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + bar * j as f64,
                y1.min(y0),
                bar,
                (y0 - y1).abs(),
                COLORS[j % COLORS.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            gx + group * 0.4,
            H - PAD + 14.0,
            escape(label)
        );
    }
    legend(&mut s, series);
    s.push_str("</svg>\n");
    s
}

/// Line chart of several series over shared x values.
pub fn line_chart(title: &str, xs: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let (lo, hi) = range(series);
    let mut s = frame(title, lo, hi);
    let (x0, x1) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let x_of = |x: f64| {
        let t = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.5 };
        PAD + t * (W - 2.0 * PAD)
    };
    for (j, (_, values)) in series.iter().enumerate() {
        let points: Vec<String> = xs
            .iter()
            .zip(values)
            .filter(|(_, v)| v.is_finite())
            .map(|(&x, &v)| format!("{:.2},{:.2}", x_of(x), y_of(v, lo, hi)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            COLORS[j % COLORS.len()],
            points.join(" ")
        );
    }
    if x1 >= x0 {
        for (v, anchor) in [(x0, "start"), (x1, "end")] {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="{anchor}">{}</text>"#,
                x_of(v),
                H - PAD + 14.0,
                fmt_num(v)
            );
        }
    }
    legend(&mut s, series);
    s.push_str("</svg>\n");
    s
}

fn legend(s: &mut String, series: &[(String, Vec<f64>)]) {
    for (j, (name, _)) in series.iter().enumerate() {
        let y = PAD + 14.0 * j as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            W - PAD - 110.0,
            y - 9.0,
            COLORS[j % COLORS.len()],
            W - PAD - 96.0,
            y,
            escape(name)
        );
    }
}

/// Chooses a chart for a table: a line chart for long series whose first
/// column is numeric and strictly increasing (training logs), bars otherwise.
/// Every other numeric column becomes a series.
pub fn chart_for(title: &str, table: &Table) -> anyhow::Result<String> {
    let series: Vec<(String, Vec<f64>)> = (1..table.header.len())
        .filter_map(|c| table.numbers(c).ok().map(|v| (table.header[c].clone(), v)))
        .filter(|(_, v)| v.iter().any(|x| x.is_finite()))
        .collect();
    if series.is_empty() {
        anyhow::bail!("no numeric column to plot");
    }
    match table.numbers(0) {
        Ok(xs) if xs.len() > LINE_MIN_ROWS && xs.windows(2).all(|w| w[0] < w[1]) => Ok(line_chart(title, &xs, &series)),
        _ => {
            let labels: Vec<String> = table.rows.iter().map(|r| r[0].clone()).collect();
            Ok(bar_chart(title, &labels, &series))
        }
    }
}
