//! SVG figures. Output depends only on the inputs; the plotted data is
//! repeated in comments so a figure can be audited without its run.

use std::fmt::Write as _;
use std::fs;
use std::str::FromStr;

use crate::manifest::RunManifest;
use crate::protocol::{CurveSet, RETRAIN};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// ROC-style tradeoff curves per method.
    Tradeoff,
    /// Bars of the updated GUS per method, retrain as a dashed line.
    Gus,
    /// Model shift against the removed fraction.
    Shift,
    /// Per-step cosine of the unlearning gradient with the shift directions.
    Alignment,
}

impl FromStr for PlotKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "tradeoff" => Ok(PlotKind::Tradeoff),
            "gus" => Ok(PlotKind::Gus),
            "shift" => Ok(PlotKind::Shift),
            "alignment" => Ok(PlotKind::Alignment),
            other => Err(CliError::Config(format!(
                "unknown plot kind {other} (expected tradeoff, gus, shift or alignment)"
            ))),
        }
    }
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let widen = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Frame { x: widen(x), y: widen(y) }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }
}

struct Svg {
    body: String,
    comments: String,
}

impl Svg {
    fn new() -> Self {
        Svg {
            body: String::new(),
            comments: String::new(),
        }
    }

    fn data(&mut self, line: &str) {
        // "--" may not appear inside an XML comment
        let _ = writeln!(self.comments, "<!-- data {} -->", line.replace("--", "- -"));
    }

    fn axes(&mut self, f: &Frame, title: &str, xlabel: &str, ylabel: &str) {
        let (x0, x1, y0, y1) = (f.px(f.x.0), f.px(f.x.1), f.py(f.y.0), f.py(f.y.1));
        let _ = writeln!(
            self.body,
            r#"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
            x1 - x0,
            y0 - y1
        );
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = f.x.0 + t * (f.x.1 - f.x.0);
            let yv = f.y.0 + t * (f.y.1 - f.y.0);
            let _ = writeln!(
                self.body,
                r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
                f.px(xv),
                y0 + 16.0,
                tick(xv)
            );
            let _ = writeln!(
                self.body,
                r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"#,
                x0 - 6.0,
                f.py(yv) + 4.0,
                tick(yv)
            );
        }
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            escape(title)
        );
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            H - 20.0,
            escape(xlabel)
        );
        let _ = writeln!(
            self.body,
            r#"<text x="18" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(ylabel)
        );
    }

    fn line(&mut self, f: &Frame, pts: &[(f64, f64)], color: &str, dashed: bool) {
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            coords.join(" ")
        );
    }

    fn legend(&mut self, i: usize, label: &str, color: &str, dashed: bool) {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"{dash}/>"#,
            x + 20.0
        );
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
            x + 26.0,
            y + 4.0,
            escape(label)
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n{}<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.comments, self.body
        )
    }
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn label(manifests: &[RunManifest], m: &RunManifest, name: &str) -> String {
    if manifests.len() > 1 {
        format!("{} {name}", &m.config_hash[..8])
    } else {
        name.to_string()
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn read_csv(m: &RunManifest, artifact: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let path = m
        .artifact(artifact)
        .ok_or_else(|| CliError::Config(format!("run {} has no {artifact} artifact", m.config_hash)))?;
    let text = fs::read_to_string(path).map_err(|e| CliError::step("plot", e))?;
    text.lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .map(|c| c.parse::<f64>().map_err(|e| CliError::step("plot", format!("{}: {e}", path.display()))))
                .collect()
        })
        .collect()
}

pub fn render(kind: PlotKind, manifests: &[RunManifest]) -> Result<String, CliError> {
    if manifests.is_empty() {
        return Err(CliError::Config("plot needs at least one manifest".into()));
    }
    match kind {
        PlotKind::Tradeoff => tradeoff(manifests),
        PlotKind::Gus => gus_bars(manifests),
        PlotKind::Shift => series(
            manifests,
            "shift",
            "Model shift",
            "removed fraction",
            "l1 distance",
            &[(1, "poison"), (3, "random")],
        ),
        PlotKind::Alignment => series(
            manifests,
            "alignment",
            "Gradient alignment",
            "step",
            "cosine",
            &[(1, "poison direction"), (2, "random direction")],
        ),
    }
}

fn tradeoff(manifests: &[RunManifest]) -> Result<String, CliError> {
    let mut svg = Svg::new();
    let f = Frame::new((0.0, 1.0), (0.0, 1.0));
    svg.axes(&f, "Tradeoff curves", "false positive rate", "true positive rate");
    svg.line(&f, &[(0.0, 0.0), (1.0, 1.0)], "black", true);
    svg.legend(0, "diagonal", "black", true);
    svg.data("diagonal 0,0;1,1");
    let mut k = 0;
    for m in manifests {
        let path = m
            .artifact("curves")
            .ok_or_else(|| CliError::Config(format!("run {} has no tradeoff curves", m.config_hash)))?;
        let text = fs::read_to_string(path).map_err(|e| CliError::step("plot", e))?;
        let set: CurveSet = serde_json::from_str(&text).map_err(|e| CliError::step("plot", e))?;
        for (name, pts) in &set.curves {
            let l = label(manifests, m, name);
            let data: Vec<String> = pts.iter().map(|(x, y)| format!("{x},{y}")).collect();
            svg.data(&format!("{l} {}", data.join(";")));
            svg.line(&f, pts, color(k), false);
            svg.legend(k + 1, &l, color(k), false);
            k += 1;
        }
    }
    Ok(svg.finish())
}

fn gus_bars(manifests: &[RunManifest]) -> Result<String, CliError> {
    let mut bars = Vec::new();
    let mut baselines = Vec::new();
    for m in manifests {
        for r in &m.rows {
            let Some(v) = r.get("mu-updated") else {
                return Err(CliError::Config(format!("run {} has no mu-updated values", m.config_hash)));
            };
            if r.method == RETRAIN {
                baselines.push((label(manifests, m, RETRAIN), v));
            } else {
                bars.push((label(manifests, m, &r.method), v));
            }
        }
    }
    let (lo, hi) = bounds(bars.iter().chain(&baselines).map(|b| b.1).chain([0.0]));
    let f = Frame::new((0.0, bars.len() as f64), (lo, hi));
    let mut svg = Svg::new();
    svg.axes(&f, "Gaussian unlearning score", "method", "mean score");
    let zero = f.py(0.0);
    let slot = (W - LEFT - RIGHT) / bars.len().max(1) as f64;
    for (i, (name, v)) in bars.iter().enumerate() {
        svg.data(&format!("bar {name} {v}"));
        let top = f.py(*v).min(zero);
        let _ = writeln!(
            svg.body,
            r#"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            LEFT + slot * (i as f64 + 0.15),
            slot * 0.7,
            (f.py(*v) - zero).abs(),
            color(i)
        );
        let cx = LEFT + slot * (i as f64 + 0.5);
        let _ = writeln!(
            svg.body,
            r#"<text x="{cx:.2}" y="{:.2}" font-size="10" text-anchor="end" transform="rotate(-45 {cx:.2} {:.2})">{}</text>"#,
            H - BOTTOM + 30.0,
            H - BOTTOM + 30.0,
            escape(name)
        );
    }
    for (j, (name, v)) in baselines.iter().enumerate() {
        svg.data(&format!("baseline {name} {v}"));
        svg.line(&f, &[(0.0, *v), (bars.len() as f64, *v)], "black", true);
        svg.legend(j, name, "black", true);
    }
    Ok(svg.finish())
}

fn series(
    manifests: &[RunManifest],
    artifact: &str,
    title: &str,
    xlabel: &str,
    ylabel: &str,
    columns: &[(usize, &str)],
) -> Result<String, CliError> {
    let mut lines = Vec::new();
    for m in manifests {
        let rows = read_csv(m, artifact)?;
        for &(c, name) in columns {
            let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[c])).collect();
            lines.push((label(manifests, m, name), pts));
        }
    }
    let xs = bounds(lines.iter().flat_map(|l| l.1.iter().map(|p| p.0)));
    let ys = bounds(lines.iter().flat_map(|l| l.1.iter().map(|p| p.1)).chain([0.0]));
    let f = Frame::new(xs, ys);
    let mut svg = Svg::new();
    svg.axes(&f, title, xlabel, ylabel);
    for (i, (name, pts)) in lines.iter().enumerate() {
        let data: Vec<String> = pts.iter().map(|(x, y)| format!("{x},{y}")).collect();
        svg.data(&format!("{name} {}", data.join(";")));
        svg.line(&f, pts, color(i), false);
        svg.legend(i, name, color(i), false);
    }
    Ok(svg.finish())
}
