//! Self-contained SVG 1.1 figures from the CSV files the other verbs write.
//!
//! Elements are emitted in input order and coordinates are printed with a
//! fixed number of decimals, so equal inputs give byte-equal files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use icd_core::{IcdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Scatter,
    Trajectory,
    Frontier,
    LossCurve,
}

impl FromStr for PlotKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "scatter" => Ok(Self::Scatter),
            "trajectory" => Ok(Self::Trajectory),
            "frontier" => Ok(Self::Frontier),
            "loss-curve" => Ok(Self::LossCurve),
            _ => Err(format!("unknown plot kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub kind: PlotKind,
    pub inputs: Vec<PathBuf>,
    pub title: String,
}

const W: f64 = 480.0;
const H: f64 = 480.0;
const PAD: f64 = 40.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Header and numeric rows of a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IcdError::Parse {
                line: 1,
                reason: format!("missing column {name:?}"),
            })
    }
}

/// Parses a CSV whose cells are all numeric; empty cells read as NaN.
pub fn parse_table(text: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let csv_err = |e: csv::Error| IcdError::Parse {
        line: e.position().map_or(0, |p| p.line() as usize),
        reason: e.to_string(),
    };
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let mut rows = vec![];
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row = rec
            .iter()
            .map(|c| {
                let c = c.trim();
                if c.is_empty() {
                    Ok(f64::NAN)
                } else {
                    c.parse::<f64>().map_err(|_| IcdError::Parse {
                        line,
                        reason: format!("not a number: {c:?}"),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}

pub fn read_table(path: &Path) -> Result<Table> {
    parse_table(&std::fs::read_to_string(path)?)
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone, equal: bool) -> Self {
        let span = |v: &mut dyn Iterator<Item = f64>| {
            v.filter(|x| x.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
        };
        let (mut x0, mut x1) = span(&mut xs.clone());
        let (mut y0, mut y1) = span(&mut ys.clone());
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if !y0.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            (x0, x1) = (x0 - 0.5, x1 + 0.5);
        }
        if y1 - y0 < 1e-12 {
            (y0, y1) = (y0 - 0.5, y1 + 0.5);
        }
        let mut f = Self { x0, x1, y0, y1 };
        if equal {
            let half = (x1 - x0).max(y1 - y0) / 2.0;
            let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            f = Self {
                x0: cx - half,
                x1: cx + half,
                y0: cy - half,
                y1: cy + half,
            };
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn open(title: &str, f: &Frame, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>
<text x="{:.1}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>
<rect x="{PAD}" y="{PAD}" width="{:.1}" height="{:.1}" fill="none" stroke="black" stroke-width="1"/>"#,
        W / 2.0,
        escape(title),
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{:.1}" font-family="sans-serif" font-size="10">{}</text>
<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>
<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>
<text x="8" y="{:.1}" font-family="sans-serif" font-size="10">{}</text>
<text x="8" y="{PAD}" font-family="sans-serif" font-size="10">{}</text>
<text x="{PAD}" y="{:.1}" font-family="sans-serif" font-size="10">{}</text>"#,
        H - PAD + 14.0,
        tick(f.x0),
        W - PAD,
        H - PAD + 14.0,
        tick(f.x1),
        W / 2.0,
        H - 8.0,
        escape(xlabel),
        H - PAD,
        tick(f.y0),
        tick(f.y1),
        PAD - 6.0,
        escape(ylabel),
    );
    s
}

fn tick(v: f64) -> String {
    format!("{v:.3}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn close(mut s: String) -> String {
    s.push_str("</svg>\n");
    s
}

fn circle(s: &mut String, f: &Frame, x: f64, y: f64, r: f64, color: &str) {
    if x.is_finite() && y.is_finite() {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{color}" fill-opacity="0.6"/>"#,
            f.px(x),
            f.py(y)
        );
    }
}

fn polyline(s: &mut String, f: &Frame, pts: &[(f64, f64)], color: &str, width: f64) {
    let coords: Vec<String> = pts
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
        .collect();
    if coords.len() >= 2 {
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}"/>"#,
            coords.join(" ")
        );
    }
}

fn legend(s: &mut String, i: usize, name: &str) {
    let y = PAD + 12.0 + 12.0 * i as f64;
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{y:.1}" font-family="sans-serif" font-size="10" fill="{}">{}</text>"#,
        PAD + 6.0,
        PALETTE[i % PALETTE.len()],
        escape(name)
    );
}

/// Points colored by an optional `label` column; `x`, `y` required.
pub fn scatter(t: &Table, title: &str) -> Result<String> {
    let (cx, cy) = (t.column("x")?, t.column("y")?);
    let cl = t.column("label").ok();
    let f = Frame::fit(t.rows.iter().map(|r| r[cx]), t.rows.iter().map(|r| r[cy]), true);
    let mut s = open(title, &f, "x", "y");
    for r in &t.rows {
        let k = cl.map_or(0, |c| r[c].max(0.0) as usize);
        circle(&mut s, &f, r[cx], r[cy], 1.5, PALETTE[k % PALETTE.len()]);
    }
    Ok(close(s))
}

/// Sources, edited points and mode centers on one canvas.
pub fn overlay(sources: &[[f64; 2]], edited: &[[f64; 2]], centers: &[[f64; 2]], title: &str) -> String {
    let all = || sources.iter().chain(edited).chain(centers);
    let f = Frame::fit(all().map(|p| p[0]), all().map(|p| p[1]), true);
    let mut s = open(title, &f, "x", "y");
    for p in sources {
        circle(&mut s, &f, p[0], p[1], 1.5, PALETTE[0]);
    }
    for p in edited {
        circle(&mut s, &f, p[0], p[1], 1.5, PALETTE[3]);
    }
    for p in centers {
        circle(&mut s, &f, p[0], p[1], 4.0, "black");
    }
    legend(&mut s, 0, "source");
    legend(&mut s, 3, "edited");
    close(s)
}

/// One polyline per `sample`, ordered by `step`.
pub fn trajectory(t: &Table, title: &str) -> Result<String> {
    let (cs, ci, cx, cy) = (t.column("step")?, t.column("sample")?, t.column("x")?, t.column("y")?);
    let f = Frame::fit(t.rows.iter().map(|r| r[cx]), t.rows.iter().map(|r| r[cy]), true);
    let mut paths: std::collections::BTreeMap<u64, Vec<(f64, f64, f64)>> = Default::default();
    for r in &t.rows {
        paths.entry(r[ci] as u64).or_default().push((r[cs], r[cx], r[cy]));
    }
    let mut s = open(title, &f, "x", "y");
    for (i, p) in paths.values_mut().enumerate() {
        p.sort_by(|a, b| a.0.total_cmp(&b.0));
        let pts: Vec<(f64, f64)> = p.iter().map(|&(_, x, y)| (x, y)).collect();
        let color = PALETTE[i % PALETTE.len()];
        polyline(&mut s, &f, &pts, color, 0.8);
        if let Some(&(x, y)) = pts.last() {
            circle(&mut s, &f, x, y, 2.0, color);
        }
    }
    Ok(close(s))
}

/// Edit success against preservation, one point per `tau`.
pub fn frontier(t: &Table, title: &str) -> Result<String> {
    let (ct, cs, cp) = (t.column("tau")?, t.column("edit_success")?, t.column("preservation")?);
    let f = Frame::fit(t.rows.iter().map(|r| r[cp]), t.rows.iter().map(|r| r[cs]), false);
    let mut s = open(title, &f, "mean displacement", "edit success");
    let pts: Vec<(f64, f64)> = t.rows.iter().map(|r| (r[cp], r[cs])).collect();
    polyline(&mut s, &f, &pts, PALETTE[0], 1.0);
    for r in &t.rows {
        circle(&mut s, &f, r[cp], r[cs], 3.0, PALETTE[0]);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="9">tau={}</text>"#,
            f.px(r[cp]) + 4.0,
            f.py(r[cs]) - 4.0,
            r[ct]
        );
    }
    Ok(close(s))
}

/// Every column after the first against the first; log10 scale when all
/// values are positive.
pub fn loss_curve(t: &Table, title: &str) -> Result<String> {
    if t.header.len() < 2 {
        return Err(IcdError::Parse {
            line: 1,
            reason: "loss curve needs a step column and at least one series".into(),
        });
    }
    let series: Vec<usize> = (1..t.header.len())
        .filter(|&c| t.rows.iter().any(|r| r[c].is_finite() && r[c] != 0.0))
        .collect();
    let log = t
        .rows
        .iter()
        .all(|r| series.iter().all(|&c| !r[c].is_finite() || r[c] > 0.0));
    let tf = |v: f64| if log { v.log10() } else { v };
    let f = Frame::fit(
        t.rows.iter().map(|r| r[0]),
        t.rows.iter().flat_map(|r| series.iter().map(|&c| tf(r[c])).collect::<Vec<_>>()),
        false,
    );
    let ylabel = if log { "log10 loss" } else { "loss" };
    let mut s = open(title, &f, &t.header[0], ylabel);
    for (i, &c) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = t.rows.iter().map(|r| (r[0], tf(r[c]))).collect();
        polyline(&mut s, &f, &pts, PALETTE[i % PALETTE.len()], 1.0);
        legend(&mut s, i, &t.header[c]);
    }
    Ok(close(s))
}

pub fn render(spec: &PlotSpec) -> Result<String> {
    let Some(first) = spec.inputs.first() else {
        return Err(IcdError::Contract("plot needs an input file".into()));
    };
    for p in &spec.inputs {
        if !p.exists() {
            return Err(IcdError::Contract(format!("input {} does not exist", p.display())));
        }
    }
    let t = read_table(first)?;
    match spec.kind {
        PlotKind::Scatter => scatter(&t, &spec.title),
        PlotKind::Trajectory => trajectory(&t, &spec.title),
        PlotKind::Frontier => frontier(&t, &spec.title),
        PlotKind::LossCurve => loss_curve(&t, &spec.title),
    }
}

pub fn emit_plot(spec: &PlotSpec, output: &Path) -> Result<()> {
    let svg = render(spec)?;
    if let Some(p) = output.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(output, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_csv_reports_its_line() {
        match parse_table("x,y\n1,2\n3,oops\n") {
            Err(IcdError::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_table("x,y\n1,2\n3\n") {
            Err(IcdError::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scatter_draws_one_circle_per_row() {
        let t = parse_table("x,y,label\n0,0,0\n1,1,1\n2,0,2\n").unwrap();
        let svg = scatter(&t, "pts").unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.starts_with("<?xml") && svg.ends_with("</svg>\n"));
        assert!(!svg.contains("href"));
        assert_eq!(svg, scatter(&t, "pts").unwrap());
    }

    #[test]
    fn loss_curve_uses_log_scale_for_positive_series() {
        let t = parse_table("step,loss\n0,1\n1,0.1\n2,0.01\n").unwrap();
        let svg = loss_curve(&t, "l").unwrap();
        assert!(svg.contains("log10 loss"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn trajectories_group_by_sample() {
        let t = parse_table("step,t,sample,x,y\n0,999,0,1,1\n0,999,1,2,2\n1,19,0,0,0\n1,19,1,3,3\n").unwrap();
        let svg = trajectory(&t, "tr").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn missing_input_is_rejected() {
        let spec = PlotSpec {
            kind: PlotKind::Scatter,
            inputs: vec![PathBuf::from("/nonexistent/data.csv")],
            title: String::new(),
        };
        assert!(render(&spec).is_err());
    }
}
