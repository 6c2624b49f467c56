//! CSV tables and standalone SVG plots. Output bytes depend only on the
//! aggregates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::eval::{Aggregates, CellSummary, PassRow};
use crate::guidance::GuidanceKind;

const PALETTE: [&str; 8] = ["#1b6ca8", "#d1495b", "#2e8b57", "#edae49", "#6a4c93", "#00798c", "#8d6e63", "#444444"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;

pub fn pass_csv(rows: &[PassRow]) -> String {
    let mut out = String::from("guidance,theta,alpha,k,mean,se,n\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{},{}", r.guidance, r.theta, r.alpha, r.k, r.mean, r.se, r.n);
    }
    out
}

pub fn cells_csv(cells: &[CellSummary]) -> String {
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    let mut out = String::from("guidance,theta,alpha,runs,failed,batch,pass_at_1,pass_at_batch,diversity\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.guidance,
            c.theta,
            c.alpha,
            c.runs,
            c.failed,
            c.batch,
            opt(c.pass_at_1),
            opt(c.pass_at_batch),
            opt(c.diversity)
        );
    }
    out
}

struct Frame {
    x_min: f64,
    x_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(f64::EPSILON);
        MARGIN + (v - self.x_min) / span * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - v.clamp(0.0, 1.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn svg_open(title: &str, x_label: &str, y_label: &str, frame: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<g class="axes" stroke="black" fill="none">"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
    let _ = writeln!(s, "</g>");
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{v}</text>"#, MARGIN - 6.0, frame.y(v) + 4.0);
    }
    for v in [frame.x_min, frame.x_max] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{v}</text>"#, frame.x(v), HEIGHT - MARGIN + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(s: &mut String, index: usize, label: &str, color: &str) {
    let y = MARGIN + 14.0 * index as f64;
    let x = WIDTH - MARGIN - 120.0;
    let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/>"#, y - 9.0);
    let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(label));
}

/// Pass@k against k for every (θ, α) cell of one guidance method.
pub fn pass_at_k_svg(rows: &[PassRow], guidance: GuidanceKind) -> String {
    let mut curves: BTreeMap<(u64, u64), Vec<&PassRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.guidance == guidance) {
        curves.entry((r.theta.to_bits(), r.alpha.to_bits())).or_default().push(r);
    }
    let k_max = curves.values().flatten().map(|r| r.k).max().unwrap_or(1);
    let frame = Frame { x_min: 1.0, x_max: k_max as f64 };
    let mut s = svg_open(&format!("Pass@k, guidance = {guidance}"), "k", "Pass@k", &frame);
    for (index, ((theta, alpha), points)) in curves.iter().enumerate() {
        let color = PALETTE[index % PALETTE.len()];
        let label = format!("θ={} α={}", f64::from_bits(*theta), f64::from_bits(*alpha));
        let coords: Vec<String> =
            points.iter().map(|r| format!("{:.2},{:.2}", frame.x(r.k as f64), frame.y(r.mean))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="curve" fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
            coords.join(" "),
            escape(&label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Pass@1 against Pass@B, one series per guidance method.
pub fn pareto_svg(cells: &[CellSummary]) -> String {
    let mut series: BTreeMap<GuidanceKind, Vec<&CellSummary>> = BTreeMap::new();
    for c in cells.iter().filter(|c| c.pass_at_1.is_some() && c.pass_at_batch.is_some()) {
        series.entry(c.guidance).or_default().push(c);
    }
    let frame = Frame { x_min: 0.0, x_max: 1.0 };
    let mut s = svg_open("Pass@1 vs Pass@B", "Pass@1", "Pass@B", &frame);
    for (index, (guidance, points)) in series.iter().enumerate() {
        let color = PALETTE[index % PALETTE.len()];
        let _ = writeln!(s, r#"<g class="series" data-guidance="{guidance}" fill="{color}">"#);
        for c in points {
            let (x, y) = (c.pass_at_1.unwrap_or(0.0), c.pass_at_batch.unwrap_or(0.0));
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4"><title>θ={} α={}</title></circle>"#,
                frame.x(x),
                frame.y(y),
                c.theta,
                c.alpha
            );
        }
        let _ = writeln!(s, "</g>");
        legend(&mut s, index, guidance.as_str(), color);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the tables and plots for `aggregates` into `dir`.
pub fn write_artifacts(dir: impl AsRef<Path>, aggregates: &Aggregates) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut files: Vec<(PathBuf, String)> = vec![
        (dir.join("pass_at_k.csv"), pass_csv(&aggregates.pass)),
        (dir.join("cells.csv"), cells_csv(&aggregates.cells)),
        (dir.join("pareto.svg"), pareto_svg(&aggregates.cells)),
    ];
    let mut kinds: Vec<GuidanceKind> = aggregates.pass.iter().map(|r| r.guidance).collect();
    kinds.dedup();
    for kind in kinds {
        files.push((dir.join(format!("pass_at_k_{kind}.svg")), pass_at_k_svg(&aggregates.pass, kind)));
    }
    for (path, text) in &files {
        fs::write(path, text)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}
