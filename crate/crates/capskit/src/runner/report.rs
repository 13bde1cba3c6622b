//! Result records and their CSV/SVG emission.
//!
//! The results CSV carries one row per `(method, test set, seed)` with the
//! fixed column order `method,set,mIoU,precision,recall,f1,mvIoU,mvda,seed`.
//! Numbers print with six significant digits. Charts are emitted as
//! self-contained SVG without any plotting dependency.

use crate::error::{Error, Result};
use crate::metrics::EquivReport;
use crate::tensor::Real;
use std::fmt::Write as _;
use std::path::Path;

/// One result row.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub method: String,
    pub set: String,
    pub report: EquivReport,
    pub seed: u64,
}

/// Everything a command run produced.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config_echo: String,
    pub rows: Vec<ReportRow>,
    /// `(label, seconds)` wall-clock timings; informational only, kept out
    /// of the deterministic CSV.
    pub timings: Vec<(String, f64)>,
    pub build_stamp: String,
}

impl RunRecord {
    pub fn new(config_echo: String) -> Self {
        RunRecord {
            config_echo,
            rows: Vec::new(),
            timings: Vec::new(),
            build_stamp: format!("capskit {}", env!("CARGO_PKG_VERSION")),
        }
    }
}

/// Formats with six significant digits.
pub fn fmt_sig6(x: Real) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (5 - exp).clamp(0, 17) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub const RESULTS_HEADER: &str = "method,set,mIoU,precision,recall,f1,mvIoU,mvda,seed";

/// Renders the results CSV (header plus one line per row).
pub fn results_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.method,
            r.set,
            fmt_sig6(r.report.miou),
            fmt_sig6(r.report.precision),
            fmt_sig6(r.report.recall),
            fmt_sig6(r.report.f1),
            fmt_sig6(r.report.mviou),
            fmt_sig6(r.report.mvda),
            r.seed
        );
    }
    out
}

/// Parses a results CSV back into rows (per-subset details are not stored
/// in the CSV and come back empty).
pub fn parse_results_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != RESULTS_HEADER {
                return Err(Error::Parse(format!("unexpected results header '{line}'")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Parse(format!("results line {}: expected 9 fields", i + 1)));
        }
        let num = |s: &str| -> Result<Real> {
            s.parse().map_err(|_| Error::Parse(format!("bad number '{s}' on line {}", i + 1)))
        };
        rows.push(ReportRow {
            method: f[0].to_string(),
            set: f[1].to_string(),
            report: EquivReport {
                miou: num(f[2])?,
                precision: num(f[3])?,
                recall: num(f[4])?,
                f1: num(f[5])?,
                mviou: num(f[6])?,
                mvda: num(f[7])?,
                per_subset_miou: Vec::new(),
                per_subset_marea: Vec::new(),
            },
            seed: f[8].parse().map_err(|_| Error::Parse("bad seed".into()))?,
        });
    }
    Ok(rows)
}

fn median(values: &mut Vec<Real>) -> Real {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return Real::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median over seeds of one metric for every `(method, set)` pair, in first
/// appearance order.
fn aggregate(rows: &[ReportRow], metric: fn(&EquivReport) -> Real) -> Vec<(String, String, Real)> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.set.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(m, s)| {
            let mut vals: Vec<Real> = rows
                .iter()
                .filter(|r| r.method == m && r.set == s)
                .map(|r| metric(&r.report))
                .collect();
            let v = median(&mut vals);
            (m, s, v)
        })
        .collect()
}

const SET_COLORS: [(&str, &str); 2] = [("mdt", "#c23b22"), ("bdt", "#33658a")];

fn color_for(set: &str) -> &'static str {
    SET_COLORS
        .iter()
        .find(|(name, _)| *name == set)
        .map(|(_, c)| *c)
        .unwrap_or("#666666")
}

/// Grouped bar chart of one metric per method, one bar per test set.
/// Returns a complete standalone SVG document.
pub fn bar_chart_svg(title: &str, data: &[(String, String, Real)]) -> String {
    let methods: Vec<String> = {
        let mut m = Vec::new();
        for (method, _, _) in data {
            if !m.contains(method) {
                m.push(method.clone());
            }
        }
        m
    };
    let sets: Vec<String> = {
        let mut s = Vec::new();
        for (_, set, _) in data {
            if !s.contains(set) {
                s.push(set.clone());
            }
        }
        s
    };
    let max_v = data.iter().map(|(_, _, v)| *v).fold(0.0, Real::max).max(1e-12);
    let (w, h) = (160 + 110 * methods.len(), 320);
    let (left, bottom, top) = (70.0, 40.0, 30.0);
    let plot_h = h as Real - bottom - top;
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = write!(svg, "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{title}</text>", w / 2);
    // y axis with 4 ticks
    for t in 0..=4 {
        let v = max_v * t as Real / 4.0;
        let y = top + plot_h * (1.0 - t as Real / 4.0);
        let _ = write!(
            svg,
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            w - 20,
            left - 6.0,
            y + 4.0,
            fmt_sig6(v)
        );
    }
    let group_w = 110.0;
    let bar_w = (group_w - 30.0) / sets.len() as Real;
    for (mi, method) in methods.iter().enumerate() {
        let gx = left + 20.0 + mi as Real * group_w;
        for (si, set) in sets.iter().enumerate() {
            if let Some((_, _, v)) = data.iter().find(|(m, s, _)| m == method && s == set) {
                let bh = plot_h * (v / max_v);
                let x = gx + si as Real * bar_w;
                let y = top + plot_h - bh;
                let _ = write!(
                    svg,
                    "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"{}\"/>\
                     <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"9\">{}</text>",
                    bar_w - 4.0,
                    color_for(set),
                    x + bar_w / 2.0,
                    y - 3.0,
                    fmt_sig6(*v)
                );
            }
        }
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{method}</text>",
            gx + (sets.len() as Real * bar_w) / 2.0,
            h as Real - bottom + 16.0
        );
    }
    // legend
    for (si, set) in sets.iter().enumerate() {
        let x = left + si as Real * 70.0;
        let y = h as Real - 12.0;
        let _ = write!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>\
             <text x=\"{:.1}\" y=\"{y:.1}\">{set}</text>",
            y - 9.0,
            color_for(set),
            x + 14.0
        );
    }
    svg.push_str("</svg>");
    svg
}

/// Line chart of `(x, value)` series, one polyline per named series.
pub fn line_chart_svg(
    title: &str,
    xlabel: &str,
    series: &[(String, Vec<(Real, Real)>)],
) -> String {
    let (w, h) = (560, 320);
    let (left, right, bottom, top) = (80.0, 30.0, 50.0, 30.0);
    let plot_w = w as Real - left - right;
    let plot_h = h as Real - bottom - top;
    let xs: Vec<Real> = series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.0)).collect();
    let ys: Vec<Real> = series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.1)).collect();
    let (xmin, xmax) = xs.iter().fold((Real::INFINITY, Real::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let ymax = ys.iter().cloned().fold(0.0, Real::max).max(1e-12);
    let xspan = (xmax - xmin).max(1e-12);
    let colors = ["#c23b22", "#33658a", "#4f7a28", "#8350a0", "#a06a00"];
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = write!(svg, "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{title}</text>", w / 2);
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}</text>",
        w / 2,
        h - 8
    );
    for t in 0..=4 {
        let v = ymax * t as Real / 4.0;
        let y = top + plot_h * (1.0 - t as Real / 4.0);
        let _ = write!(
            svg,
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            w as Real - right,
            left - 6.0,
            y + 4.0,
            fmt_sig6(v)
        );
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let mut path = String::new();
        for (j, (x, y)) in pts.iter().enumerate() {
            let px = left + plot_w * ((x - xmin) / xspan);
            let py = top + plot_h * (1.0 - y / ymax);
            let _ = write!(path, "{}{px:.1},{py:.1} ", if j == 0 { "" } else { "" });
            let _ = write!(
                svg,
                "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"3\" fill=\"{color}\"/>"
            );
        }
        let _ = write!(
            svg,
            "<polyline points=\"{path}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>"
        );
        let _ = write!(
            svg,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\">{name}</text>",
            left + 8.0 + 120.0 * i as Real,
            h as Real - 34.0,
            left + 22.0 + 120.0 * i as Real,
            h as Real - 25.0
        );
    }
    svg.push_str("</svg>");
    svg
}

/// Writes the record's outputs: `results.csv`, `run_record.txt`, and when
/// `svg` is requested, median bar charts for mvda and mvIoU plus a sweep
/// line chart when sweep-style rows (`*_beta*` / `*_T*`) are present.
pub fn emit_report<P: AsRef<Path>>(record: &RunRecord, formats: &[String], out_dir: P) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    if formats.iter().any(|f| f == "csv") {
        std::fs::write(dir.join("results.csv"), results_csv(&record.rows))?;
    }
    let mut sidecar = String::new();
    let _ = writeln!(sidecar, "# build: {}", record.build_stamp);
    let _ = writeln!(sidecar, "# timings (seconds):");
    for (label, secs) in &record.timings {
        let _ = writeln!(sidecar, "#   {label}: {secs:.3}");
    }
    let _ = writeln!(sidecar, "# config:");
    for line in record.config_echo.lines() {
        let _ = writeln!(sidecar, "#   {line}");
    }
    std::fs::write(dir.join("run_record.txt"), sidecar)?;

    if formats.iter().any(|f| f == "svg") && !record.rows.is_empty() {
        let mvda = aggregate(&record.rows, |r| r.mvda);
        std::fs::write(dir.join("mvda.svg"), bar_chart_svg("mvda per method (median over seeds)", &mvda))?;
        let mviou = aggregate(&record.rows, |r| r.mviou);
        std::fs::write(
            dir.join("mviou.svg"),
            bar_chart_svg("mvIoU per method (median over seeds)", &mviou),
        )?;
        let sweeps = sweep_series(&record.rows);
        if !sweeps.is_empty() {
            std::fs::write(
                dir.join("sweeps.svg"),
                line_chart_svg("mvda across sweep values", "sweep value", &sweeps),
            )?;
        }
    }
    Ok(())
}

/// Extracts `(x, mvda)` series from sweep-style method names of the form
/// `caps_beta<value>` and `caps_T<value>`, per test set.
fn sweep_series(rows: &[ReportRow]) -> Vec<(String, Vec<(Real, Real)>)> {
    let mut out: Vec<(String, Vec<(Real, Real)>)> = Vec::new();
    for (prefix, label) in [("caps_beta", "beta"), ("caps_T", "T")] {
        for set in ["mdt", "bdt"] {
            let mut pts: Vec<(Real, Real)> = Vec::new();
            for r in rows.iter().filter(|r| r.set == set) {
                if let Some(rest) = r.method.strip_prefix(prefix) {
                    let rest = rest.trim_end_matches("_default");
                    if let Ok(x) = rest.parse::<Real>() {
                        pts.push((x, r.report.mvda));
                    }
                }
            }
            if pts.len() >= 2 {
                pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                out.push((format!("{label} ({set})"), pts));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, set: &str, mvda: Real, seed: u64) -> ReportRow {
        ReportRow {
            method: method.into(),
            set: set.into(),
            report: EquivReport {
                miou: 0.75,
                precision: 0.8,
                recall: 0.9,
                f1: 0.847059,
                mviou: 0.0025,
                mvda,
                per_subset_miou: vec![],
                per_subset_marea: vec![],
            },
            seed,
        }
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(2.41391), "2.41391");
        assert_eq!(fmt_sig6(49.333333), "49.3333");
        assert_eq!(fmt_sig6(0.0025), "0.0025");
        assert_eq!(fmt_sig6(123456.78), "123457");
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row("caps", "mdt", 2.41391, 0), row("maxpool", "bdt", 103.403, 1)];
        let text = results_csv(&rows);
        assert!(text.starts_with(RESULTS_HEADER));
        let parsed = parse_results_csv(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].method, "caps");
        assert_eq!(parsed[1].seed, 1);
        // values survive the trip exactly as printed
        let text2 = results_csv(&parsed);
        assert_eq!(text, text2);
    }

    #[test]
    fn empty_record_is_header_only() {
        let text = results_csv(&[]);
        assert_eq!(text, format!("{RESULTS_HEADER}\n"));
    }

    #[test]
    fn bar_chart_contains_methods_and_bars() {
        let data = vec![
            ("caps".to_string(), "mdt".to_string(), 2.4),
            ("caps".to_string(), "bdt".to_string(), 3.5),
            ("maxpool".to_string(), "mdt".to_string(), 103.0),
            ("maxpool".to_string(), "bdt".to_string(), 132.9),
        ];
        let svg = bar_chart_svg("mvda", &data);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>"));
        assert!(svg.contains("caps") && svg.contains("maxpool"));
        assert_eq!(svg.matches("<rect").count(), 4 + 2, "4 bars + 2 legend swatches");
    }

    #[test]
    fn sweep_series_extraction() {
        let rows = vec![
            row("caps_beta0", "mdt", 5.0, 0),
            row("caps_beta0.25_default", "mdt", 2.0, 0),
            row("caps_T0.001_default", "mdt", 2.0, 0),
            row("caps_T1", "mdt", 9.0, 0),
            row("maxpool", "mdt", 100.0, 0),
        ];
        let series = sweep_series(&rows);
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].1.len(), 2);
    }

    #[test]
    fn emit_report_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut record = RunRecord::new("beta = 0.25".into());
        record.rows = vec![row("caps", "mdt", 2.4, 0), row("maxpool", "mdt", 103.0, 0)];
        record.timings.push(("train caps".into(), 1.25));
        emit_report(&record, &["csv".into(), "svg".into()], dir.path()).unwrap();
        assert!(dir.path().join("results.csv").exists());
        assert!(dir.path().join("run_record.txt").exists());
        assert!(dir.path().join("mvda.svg").exists());
        assert!(dir.path().join("mviou.svg").exists());
    }
}
