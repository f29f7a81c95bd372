//! `report`: markdown summary plus static SVG line charts of earlier runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use matrix_lab::grounding::{AasTable, Variant};
use matrix_lab::{LabError, Result};

use crate::config::RunConfig;
use crate::manifest::Run;

type Series = (String, Vec<(f64, f64)>);

const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Axis-scaled polyline chart with a legend.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let (w, h, pad) = (480.0, 300.0, 44.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"monospace\" font-size=\"10\">\n\
         <text x=\"{pad}\" y=\"16\" font-size=\"12\">{title}</text>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#000\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"#000\"/>\n\
         <text x=\"{r}\" y=\"{xl}\" text-anchor=\"end\">{x_label}</text>\n\
         <text x=\"4\" y=\"{pad}\">{y1:.3}</text>\n<text x=\"4\" y=\"{b}\">{y0:.3}</text>\n\
         <text x=\"{pad}\" y=\"{xl}\">{x0}</text>\n",
        b = h - pad,
        r = w - pad,
        xl = h - pad + 16.0,
    );
    for (i, (name, p)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let path: Vec<String> = p
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{name}</text>",
            w - pad - 90.0,
            pad + 12.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))
}

/// Loss ledger columns as chart series.
fn loss_series(text: &str) -> Result<Vec<Series>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let mut cols: Vec<Series> = header[1..]
        .iter()
        .map(|h| (h.to_string(), Vec::new()))
        .collect();
    for line in lines.filter(|l| !l.is_empty()) {
        let v: Vec<f64> = line
            .split(',')
            .map(|x| {
                x.parse()
                    .map_err(|_| LabError::data(format!("bad loss ledger value '{x}'")))
            })
            .collect::<Result<_>>()?;
        for (c, &y) in cols.iter_mut().zip(&v[1..]) {
            c.1.push((v[0], y));
        }
    }
    Ok(cols)
}

/// Mean AAS per layer for each variant.
fn layer_means(table: &AasTable) -> Vec<Series> {
    Variant::ALL
        .into_iter()
        .filter_map(|v| {
            let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for r in table.rows.iter().filter(|r| r.variant == v) {
                let e = acc.entry(r.layer).or_default();
                e.0 += r.aas;
                e.1 += 1;
            }
            (!acc.is_empty()).then(|| {
                let pts = acc
                    .into_iter()
                    .map(|(l, (s, n))| (l as f64, s / n as f64))
                    .collect();
                (v.as_str().to_string(), pts)
            })
        })
        .collect()
}

pub fn run(cfg: &RunConfig, runs: &[PathBuf], mut out: Run) -> Result<()> {
    let mut md = String::from("# Run report\n");
    for (i, dir) in runs.iter().enumerate() {
        out.input(dir);
        if !dir.is_dir() {
            return Err(LabError::data(format!(
                "{} is not a run directory",
                dir.display()
            )));
        }
        let _ = write!(md, "\n## {}\n", dir.display());
        let mut found = false;
        let ledger = dir.join("loss_ledger.csv");
        if ledger.exists() {
            found = true;
            let series = loss_series(&read(&ledger)?)?;
            let name = format!("run{i}_loss.svg");
            out.write_text(&name, &line_chart("training losses", "step", &series))?;
            md.push_str("\n| term | first | last |\n|---|---|---|\n");
            for (n, p) in &series {
                if let (Some(a), Some(b)) = (p.first(), p.last()) {
                    let _ = writeln!(md, "| {n} | {:.4} | {:.4} |", a.1, b.1);
                }
            }
            let _ = writeln!(md, "\n![losses]({name})");
        }
        let aas = dir.join("aas.csv");
        if aas.exists() {
            found = true;
            let series = layer_means(&AasTable::read_csv(&aas)?);
            let name = format!("run{i}_layer_aas.svg");
            out.write_text(&name, &line_chart("mean AAS per layer", "layer", &series))?;
            md.push_str("\n| variant | peak layer | peak mean AAS |\n|---|---|---|\n");
            for (n, p) in &series {
                if let Some(best) = p.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
                    let _ = writeln!(md, "| {n} | {} | {:.4} |", best.0, best.1);
                }
            }
            let _ = writeln!(md, "\n![layer AAS]({name})");
        }
        let scores = dir.join("scores.csv");
        if scores.exists() {
            found = true;
            let text = read(&scores)?;
            let header = text.lines().next().unwrap_or_default();
            let mean = text
                .lines()
                .find(|l| l.starts_with("mean,"))
                .unwrap_or_default();
            let _ = write!(md, "\n```\n{header}\n{mean}\n```\n");
        }
        for name in ["rankings.json", "train_summary.json", "sample.json"] {
            let p = dir.join(name);
            if p.exists() {
                found = true;
                let _ = write!(
                    md,
                    "\n`{name}`:\n\n```json\n{}\n```\n",
                    read(&p)?.trim_end()
                );
            }
        }
        if !found {
            md.push_str("\nno recognized outputs\n");
        }
    }
    out.write_text("report.md", &md)?;
    println!("report written to {}", out.dir.display());
    out.finish(cfg).map(|_| ())
}
