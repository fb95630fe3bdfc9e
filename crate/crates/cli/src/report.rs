use std::fs;
use std::path::Path;

use serde::Serialize;
use sonar_core::metrics::{forgetting_rate, EvalReport};

use crate::args::Report;
use crate::Failure;

#[derive(Debug, Serialize)]
struct Row {
    label: String,
    stage: u32,
    retention_map: f64,
    baseline_map: f64,
    forgetting_rate: f64,
    codebook_utilization: f64,
    codebook_perplexity: f64,
    probes: Vec<Probe>,
}

#[derive(Debug, Serialize)]
struct Probe {
    domain: String,
    accuracy: f64,
    macro_f1: f64,
}

fn load(dir: &Path) -> Result<Vec<EvalReport>, Failure> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("eval-") && name.ends_with(".jsonl")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Input(format!("no eval-*.jsonl files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            EvalReport::from_jsonl(&text).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn rows(reports: &[EvalReport]) -> Result<Vec<Row>, Failure> {
    let mut out: Vec<Row> = reports
        .iter()
        .map(|r| {
            Ok(Row {
                label: r.label.clone(),
                stage: r.stage,
                retention_map: r.retention_map,
                baseline_map: r.baseline_map,
                forgetting_rate: forgetting_rate(r.baseline_map, r.retention_map)?,
                codebook_utilization: r.codebook.utilization,
                codebook_perplexity: r.codebook.perplexity,
                probes: r
                    .probes
                    .iter()
                    .map(|p| Probe { domain: p.domain.clone(), accuracy: p.accuracy, macro_f1: p.macro_f1 })
                    .collect(),
            })
        })
        .collect::<Result<_, sonar_core::Error>>()?;
    out.sort_by(|a, b| a.stage.cmp(&b.stage).then_with(|| a.label.cmp(&b.label)));
    Ok(out)
}

/// Left-aligned first column, right-aligned numbers.
fn table(header: &[&str], body: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut s = line(header.to_vec()) + "\n";
    s += &(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ") + "\n");
    for r in body {
        s += &(line(r.iter().map(String::as_str).collect()) + "\n");
    }
    s
}

fn render(rows: &[Row]) -> String {
    let retention: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.stage.to_string(),
                format!("{:.2}", r.retention_map),
                format!("{:.2}", r.forgetting_rate),
                format!("{:.3}", r.codebook_utilization),
                format!("{:.2}", r.codebook_perplexity),
            ]
        })
        .collect();
    let probes: Vec<Vec<String>> = rows
        .iter()
        .flat_map(|r| {
            r.probes.iter().map(move |p| {
                vec![r.label.clone(), p.domain.clone(), format!("{:.2}", p.accuracy), format!("{:.2}", p.macro_f1)]
            })
        })
        .collect();
    let base = rows.first().map_or(0.0, |r| r.baseline_map);
    let mut s = format!("Retention (baseline mAP {base:.2})\n");
    s += &table(&["method", "stage", "mAP", "FR", "util", "perplexity"], &retention);
    if !probes.is_empty() {
        s += "\nDomain probes\n";
        s += &table(&["method", "domain", "accuracy", "macro-F1"], &probes);
    }
    s
}

pub fn run(a: Report) -> Result<(), Failure> {
    let rows = rows(&load(&a.run)?)?;
    let text = render(&rows);
    let out = a.out.unwrap_or_else(|| a.run.clone());
    fs::create_dir_all(&out)?;
    fs::write(out.join("report.txt"), &text)?;
    let json = serde_json::to_string_pretty(&rows).map_err(|e| Failure::Input(e.to_string()))?;
    fs::write(out.join("report.json"), json + "\n")?;
    print!("{text}");
    Ok(())
}
