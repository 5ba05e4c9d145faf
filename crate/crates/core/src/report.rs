//! Result tables, SVG plots and run manifests.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{EvalReport, Metrics};
use crate::transformer::PositionMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    Accuracy,
    F1,
    Auc,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [Self::Accuracy, Self::F1, Self::Auc];

    pub fn name(self) -> &'static str {
        match self {
            Self::Accuracy => "Accuracy",
            Self::F1 => "F1",
            Self::Auc => "AUC",
        }
    }

    pub fn value(self, m: &Metrics) -> Option<f64> {
        match self {
            Self::Accuracy => Some(m.accuracy),
            Self::F1 => Some(m.f1),
            Self::Auc => m.auc,
        }
    }

    fn display(self, m: &Metrics) -> String {
        match (self, self.value(m)) {
            (_, None) => "n/a".into(),
            (Self::Accuracy, Some(v)) => format!("{:.1}%", 100.0 * v),
            (_, Some(v)) => format!("{v:.2}"),
        }
    }
}

/// Column label used for a position configuration.
pub fn position_label(mode: PositionMode) -> &'static str {
    match mode {
        PositionMode::None => "no position",
        PositionMode::Sequence => "sequence",
        PositionMode::Segment => "segment",
        PositionMode::Both => "sequence and segment",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub cells: Vec<Option<Metrics>>,
}

/// One row per theme and one column group per configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub axis: String,
    pub metrics: Vec<MetricKind>,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn from_reports(axis: &str, shown: &[MetricKind], columns: &[String], reports: &[EvalReport]) -> Self {
        let mut themes: Vec<&str> = Vec::new();
        for r in reports {
            for t in &r.themes {
                if !themes.contains(&t.theme.as_str()) {
                    themes.push(&t.theme);
                }
            }
        }
        let rows = themes
            .iter()
            .map(|&theme| ReportRow {
                label: theme.to_string(),
                cells: reports.iter().map(|r| r.theme(theme).map(|t| t.metrics)).collect(),
            })
            .collect();
        Self { axis: axis.to_string(), metrics: shown.to_vec(), columns: columns.to_vec(), rows }
    }

    /// The position-configuration table for reports of different modes.
    pub fn positions(reports: &[EvalReport]) -> Self {
        let columns: Vec<String> = reports.iter().map(|r| position_label(r.config.transformer.positions).to_string()).collect();
        Self::from_reports("positional information", &MetricKind::ALL, &columns, reports)
    }

    fn headers(&self) -> Vec<String> {
        let mut h = vec!["Themes".to_string()];
        for c in &self.columns {
            if self.metrics.len() == 1 {
                h.push(c.clone());
            } else {
                h.extend(self.metrics.iter().map(|m| format!("{c} {}", m.name())));
            }
        }
        h
    }

    pub fn to_markdown(&self) -> String {
        let headers = self.headers();
        let mut s = format!("**{}**\n\n| {} |\n|", self.axis, headers.join(" | "));
        s.push_str(&"---|".repeat(headers.len()));
        s.push('\n');
        for row in &self.rows {
            let mut cells = vec![row.label.clone()];
            for cell in &row.cells {
                for m in &self.metrics {
                    cells.push(cell.as_ref().map_or("n/a".into(), |c| m.display(c)));
                }
            }
            let _ = writeln!(s, "| {} |", cells.join(" | "));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let quote = |s: &str| if s.contains([',', '"']) { format!("\"{}\"", s.replace('"', "\"\"")) } else { s.to_string() };
        let mut s = self.headers().iter().map(|h| quote(h)).collect::<Vec<_>>().join(",");
        s.push('\n');
        for row in &self.rows {
            let mut cells = vec![quote(&row.label)];
            for cell in &row.cells {
                for m in &self.metrics {
                    cells.push(cell.as_ref().and_then(|c| m.value(c)).map_or(String::new(), |v| format!("{v:.4}")));
                }
            }
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn axes(s: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    let _ = writeln!(s, "<path d=\"M{x0:.1} {y1:.1} L{x0:.1} {y0:.1} L{x1:.1} {y0:.1}\" stroke=\"black\" fill=\"none\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

/// Stepped segment-ordinal traces, one curve per labelled series: the
/// x axis is the sequence ordinal, the y axis the segment ordinal.
pub fn trace_svg(title: &str, traces: &[(String, Vec<usize>)]) -> String {
    let mut s = svg_open(title);
    axes(&mut s, "sequence", "segment");
    let max_x = traces.iter().map(|t| t.1.len()).max().unwrap_or(1).max(1) as f64;
    let max_y = traces.iter().flat_map(|t| t.1.iter().copied()).max().unwrap_or(0).max(1) as f64;
    let px = |m: f64| MARGIN + m / max_x * (W - 2.0 * MARGIN);
    let py = |v: f64| H - MARGIN - v / max_y * (H - 2.0 * MARGIN);
    for (i, (label, trace)) in traces.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        for (m, &seg) in trace.iter().enumerate() {
            let (x0, x1, y) = (px(m as f64), px(m as f64 + 1.0), py(seg as f64));
            let _ = write!(d, "{}{x0:.2} {y:.2} L{x1:.2} {y:.2} ", if m == 0 { "M" } else { "L" });
        }
        let _ = writeln!(s, "<path d=\"{}\" stroke=\"{colour}\" stroke-width=\"2\" fill=\"none\"/>", d.trim_end());
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{colour}\">{}</text>",
            W - MARGIN + 4.0,
            MARGIN + 14.0 * i as f64,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars of one metric: a group per table row, a bar per column.
pub fn bar_svg(title: &str, table: &ReportTable, metric: MetricKind) -> String {
    let mut s = svg_open(title);
    axes(&mut s, "theme", metric.name());
    let groups = table.rows.len().max(1) as f64;
    let bars = table.columns.len().max(1) as f64;
    let group_w = (W - 2.0 * MARGIN) / groups;
    let bar_w = group_w * 0.8 / bars;
    for (g, row) in table.rows.iter().enumerate() {
        for (b, cell) in row.cells.iter().enumerate() {
            let v = cell.as_ref().and_then(|c| metric.value(c)).unwrap_or(0.0).clamp(0.0, 1.0);
            let h = v * (H - 2.0 * MARGIN);
            let x = MARGIN + g as f64 * group_w + group_w * 0.1 + b as f64 * bar_w;
            let _ = writeln!(
                s,
                "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"/>",
                H - MARGIN - h,
                bar_w * 0.9,
                PALETTE[b % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            MARGIN + (g as f64 + 0.5) * group_w,
            H - MARGIN + 14.0,
            escape(&row.label)
        );
    }
    for (b, c) in table.columns.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{}\">{}</text>",
            W - MARGIN - 150.0,
            MARGIN + 14.0 * b as f64,
            PALETTE[b % PALETTE.len()],
            escape(c)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Per theme, a segment trace plot over its participants and a bar chart of
/// the pooled metrics. Returns the written files in order.
pub fn emit_plots(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if report.themes.is_empty() {
        return Ok(written);
    }
    fs::create_dir_all(dir)?;
    let table = ReportTable::positions(std::slice::from_ref(report));
    for t in &report.themes {
        let mut videos: Vec<_> = t.videos.iter().collect();
        videos.sort_by(|a, b| a.participant_id.cmp(&b.participant_id).then(a.video_id.cmp(&b.video_id)));
        let traces: Vec<(String, Vec<usize>)> =
            videos.iter().map(|v| (format!("{} ({})", v.participant_id, v.label), v.segment_trace.clone())).collect();
        let path = dir.join(format!("traces_{}.svg", file_stem(&t.theme)));
        fs::write(&path, trace_svg(&format!("{}: segments and sequences", t.theme), &traces))?;
        written.push(path);
        let single = ReportTable { rows: table.rows.iter().filter(|r| r.label == t.theme).cloned().collect(), ..table.clone() };
        for metric in MetricKind::ALL {
            let path = dir.join(format!("{}_{}.svg", file_stem(&t.theme), metric.name().to_lowercase()));
            fs::write(&path, bar_svg(&format!("{}: {}", t.theme, metric.name()), &single, metric))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self { path: path.display().to_string(), sha256: path_sha256(path)? })
    }
}

/// Provenance of one command run; appended as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub dataset_hash: Option<String>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub tool_version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn append(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut line = serde_json::to_vec(self)?;
        line.push(b'\n');
        f.write_all(&line)?;
        Ok(())
    }

    pub fn read_all(path: &Path) -> Result<Vec<Self>> {
        let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
    }
}

/// SHA-256 of a file, or of a directory's relative paths and file digests.
pub fn path_sha256(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if meta.is_file() {
        let bytes = fs::read(path)?;
        return Ok(hex(&Sha256::digest(&bytes)));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let digest = path_sha256(&path.join(&rel))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(digest.as_bytes());
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("inside root").to_path_buf());
        }
    }
    Ok(())
}
