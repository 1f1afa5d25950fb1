use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use probelight_core::eval::EvalReport;
use serde::{Deserialize, Serialize};

use crate::args::ReportArgs;
use crate::estimate::{NfeFile, NFE_FILE};
use crate::failure::{io_at, CliResult, Failure};

pub const EVAL_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run: String,
    pub pipeline: String,
    pub nfe: u64,
    /// NFE relative to the cheapest run in the table.
    pub nfe_ratio: f64,
    pub si_rmse: Option<f64>,
    pub angular_deg: Option<f64>,
    pub norm_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTable {
    pub rows: Vec<RunRow>,
}

fn read_nfe(dir: &Path) -> CliResult<NfeFile> {
    let path = dir.join(NFE_FILE);
    let text = fs::read_to_string(&path).map_err(io_at(&path))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::io(format!("{}: malformed file: {e}", path.display())))
}

/// Mean of each metric over every entry of the run's evaluation, if any.
fn read_scores(dir: &Path) -> CliResult<Option<[f64; 3]>> {
    let path = dir.join(EVAL_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let report = EvalReport::read(&path)?;
    if report.entries.is_empty() {
        return Ok(None);
    }
    let n = report.entries.len() as f64;
    let mean = |f: fn(&probelight_core::eval::EvalEntry) -> f64| {
        report.entries.iter().map(f).sum::<f64>() / n
    };
    Ok(Some([
        mean(|e| e.si_rmse),
        mean(|e| e.angular_deg),
        mean(|e| e.norm_rmse),
    ]))
}

pub fn build_table(runs: &[impl AsRef<Path>]) -> CliResult<RunTable> {
    if runs.is_empty() {
        return Err(Failure::config("no run directories given"));
    }
    let mut rows = Vec::with_capacity(runs.len());
    for dir in runs {
        let dir = dir.as_ref();
        let nfe = read_nfe(dir)?;
        let scores = read_scores(dir)?;
        rows.push(RunRow {
            run: dir.display().to_string(),
            pipeline: nfe.pipeline.to_string(),
            nfe: nfe.report.total,
            nfe_ratio: 0.0,
            si_rmse: scores.map(|s| s[0]),
            angular_deg: scores.map(|s| s[1]),
            norm_rmse: scores.map(|s| s[2]),
        });
    }
    let cheapest = rows.iter().map(|r| r.nfe).min().unwrap_or(0).max(1);
    for r in &mut rows {
        r.nfe_ratio = r.nfe as f64 / cheapest as f64;
    }
    Ok(RunTable { rows })
}

impl RunTable {
    pub fn to_csv(&self) -> CliResult<String> {
        let fail = |e: &dyn std::fmt::Display| Failure::config(format!("cannot format table: {e}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| fail(&e))?;
        }
        let bytes = w.into_inner().map_err(|e| fail(&e))?;
        String::from_utf8(bytes).map_err(|e| fail(&e))
    }

    /// Bar per run, height proportional to NFE, labelled with its score.
    pub fn to_svg(&self) -> String {
        let (bar, gap, top, plot_h) = (60.0, 30.0, 30.0, 200.0);
        let width = gap + self.rows.len() as f64 * (bar + gap);
        let height = top + plot_h + 70.0;
        let max = self.rows.iter().map(|r| r.nfe).max().unwrap_or(1).max(1) as f64;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
        );
        let _ = writeln!(
            s,
            "  <text x=\"{gap}\" y=\"18\" font-family=\"sans-serif\" font-size=\"12\">denoiser calls per run (si-RMSE above each bar)</text>"
        );
        let base = top + plot_h;
        let _ = writeln!(
            s,
            "  <line x1=\"{}\" y1=\"{base}\" x2=\"{}\" y2=\"{base}\" stroke=\"black\"/>",
            gap / 2.0,
            width - gap / 2.0
        );
        for (i, r) in self.rows.iter().enumerate() {
            let x = gap + i as f64 * (bar + gap);
            let h = (r.nfe as f64 / max * plot_h).max(1.0);
            let y = base - h;
            let _ = writeln!(
                s,
                "  <rect x=\"{x}\" y=\"{y}\" width=\"{bar}\" height=\"{h}\" fill=\"#4a78b5\"><title>{} ({} calls)</title></rect>",
                xml_escape(&r.run),
                r.nfe
            );
            let label = r
                .si_rmse
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "n/a".into());
            let cx = x + bar / 2.0;
            let _ = writeln!(
                s,
                "  <text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{label}</text>",
                y - 4.0
            );
            let _ = writeln!(
                s,
                "  <text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{}</text>",
                base + 14.0,
                xml_escape(&r.pipeline)
            );
            let _ = writeln!(
                s,
                "  <text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{} ({:.1}x)</text>",
                base + 28.0,
                r.nfe,
                r.nfe_ratio
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn cmd_report(args: &ReportArgs) -> CliResult {
    let table = build_table(&args.runs)?;
    let json =
        serde_json::to_string_pretty(&table).map_err(|e| Failure::config(e.to_string()))? + "\n";
    let out = &args.output;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_at(parent))?;
    }
    fs::write(out, json).map_err(io_at(out))?;
    let csv = out.with_extension("csv");
    fs::write(&csv, table.to_csv()?).map_err(io_at(&csv))?;
    let svg = out.with_extension("svg");
    fs::write(&svg, table.to_svg()).map_err(io_at(&svg))?;
    for r in &table.rows {
        println!(
            "{:<40} {:<14} {:>6} {:>7.2}x",
            r.run, r.pipeline, r.nfe, r.nfe_ratio
        );
    }
    println!(
        "wrote {}, {}, {}",
        out.display(),
        csv.display(),
        svg.display()
    );
    Ok(())
}
