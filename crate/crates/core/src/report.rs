//! Configuration files, output tables, the run manifest and the SVG chart.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{
    label_ratio_series, run_experiment, sweep_weak_cost, AggregateRow, ExperimentConfig, ExperimentResult,
};
use crate::label::{synth_generate, Dataset, SynthConfig};
use crate::rational::{self, Cost};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Line (1-based) of a byte offset in `text`.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn toml_error(path: &Path, text: &str, err: toml::de::Error) -> Error {
    let line = err.span().map_or(0, |span| line_of(text, span.start));
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: err.message().trim().to_string(),
    }
}

/// Parses a scalar override value: TOML syntax when it parses, a list when
/// it contains commas, a bare string otherwise.
fn override_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    if let Ok(mut table) = toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        return table.remove("v").expect("single key");
    }
    if raw.contains(',') {
        return toml::Value::Array(raw.split(',').map(override_value).collect());
    }
    toml::Value::String(raw.to_string())
}

/// Sets `key.path=value` pairs on a parsed table, creating sections as
/// needed. A single value for a key that `template` holds as an array is
/// wrapped into a one-element array.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String], template: &toml::Table) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}`: expected key=value")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("override `{item}`: empty key segment")));
        }
        let (last, sections) = parts.split_last().expect("non-empty");
        let mut shape = Some(template);
        let mut node = &mut *table;
        for section in sections {
            let entry = node
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{item}`: `{section}` is not a section")))?;
            shape = shape.and_then(|t| t.get(*section)).and_then(toml::Value::as_table);
        }
        let mut value = override_value(raw);
        let wants_array = shape.and_then(|t| t.get(*last)).is_some_and(toml::Value::is_array);
        if wants_array && !value.is_array() {
            value = toml::Value::Array(vec![value]);
        }
        node.insert(last.to_string(), value);
    }
    Ok(())
}

/// Parses config text. Relative paths inside resolve against `base_dir`.
pub fn parse_config_str(text: &str, path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| toml_error(path, text, e))?;
    let mut cfg: ExperimentConfig = if overrides.is_empty() {
        toml::from_str(text).map_err(|e| toml_error(path, text, e))?
    } else {
        let template: toml::Table = toml::from_str(&emit_config(&ExperimentConfig::default())?)
            .expect("default config round-trips");
        apply_overrides(&mut table, overrides, &template)?;
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("after overrides: {}", e.message().trim())))?
    };
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config_with(path, &[])
}

pub fn parse_config_with(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text, path, overrides)
}

/// Canonical text form with every default written out.
pub fn emit_config(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(emit_config(cfg)?.as_bytes())))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
    pub overrides: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Output files relative to the run directory.
    pub files: Vec<String>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_text<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Domain(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Domain(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    method: &'a str,
    seed: u64,
    round: usize,
    accuracy: f64,
    full_count: usize,
    weak_count: usize,
    cost_spent_num: i64,
    cost_spent_den: i64,
}

pub fn metrics_csv(result: &ExperimentResult) -> Result<String> {
    let rows = result.methods.iter().flat_map(|m| {
        m.runs.iter().flat_map(move |run| {
            run.reports.iter().map(move |r| MetricsRow {
                method: m.method.name(),
                seed: run.seed,
                round: r.round,
                accuracy: r.accuracy,
                full_count: r.full_count,
                weak_count: r.weak_count,
                cost_spent_num: *r.cost_spent.numer(),
                cost_spent_den: *r.cost_spent.denom(),
            })
        })
    });
    csv_text(rows)
}

#[derive(Serialize)]
struct AggregateCsvRow<'a> {
    method: &'a str,
    round: usize,
    mean_acc: f64,
    std_acc: f64,
}

pub fn aggregate_csv(result: &ExperimentResult) -> Result<String> {
    let rows = result.methods.iter().flat_map(|m| {
        m.aggregate.iter().map(move |a| AggregateCsvRow {
            method: m.method.name(),
            round: a.round,
            mean_acc: a.mean_acc,
            std_acc: a.std_acc,
        })
    });
    csv_text(rows)
}

#[derive(Serialize)]
struct RatioRow<'a> {
    method: &'a str,
    seed: u64,
    round: usize,
    train_full: usize,
    train_weak: usize,
    full_fraction: f64,
    weak_fraction: f64,
}

pub fn ratios_csv(result: &ExperimentResult) -> Result<String> {
    let mut rows = Vec::new();
    for m in &result.methods {
        for run in &m.runs {
            for (r, (full, weak)) in run.reports.iter().zip(label_ratio_series(&run.reports)) {
                rows.push(RatioRow {
                    method: m.method.name(),
                    seed: run.seed,
                    round: r.round,
                    train_full: r.train_full,
                    train_weak: r.train_weak,
                    full_fraction: full,
                    weak_fraction: weak,
                });
            }
        }
    }
    csv_text(rows)
}

/// Writes every table, the allocation audit and the chart into `dir`.
/// Returns the written paths relative to `dir`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let mut put = |name: String, contents: String| -> Result<()> {
        write_file(&dir.join(&name), &contents)?;
        files.push(name);
        Ok(())
    };
    put("metrics.csv".into(), metrics_csv(result)?)?;
    put("aggregate.csv".into(), aggregate_csv(result)?)?;
    put("ratios.csv".into(), ratios_csv(result)?)?;
    for m in &result.methods {
        for run in &m.runs {
            for r in &run.reports {
                let name = format!("allocations/{}/seed{}/round{}.jsonl", m.method, run.seed, r.round);
                put(name, r.plan.to_jsonl())?;
            }
            if let Some(last) = run.reports.last() {
                put(
                    format!("transitions/{}/seed{}.csv", m.method, run.seed),
                    last.transition.to_csv(),
                )?;
            }
        }
    }
    put("chart.svg".into(), chart_svg(&chart_series(result))?)?;
    for m in &result.methods {
        for run in &m.runs {
            for r in &run.reports {
                for w in &r.warnings {
                    log::warn!("{} seed {}: {w}", m.method, run.seed);
                }
            }
        }
    }
    Ok(files)
}

/// One named curve of the accuracy chart.
#[derive(Clone, Debug)]
pub struct ChartSeries {
    pub name: String,
    pub rows: Vec<AggregateRow>,
}

pub fn chart_series(result: &ExperimentResult) -> Vec<ChartSeries> {
    result
        .methods
        .iter()
        .map(|m| ChartSeries {
            name: m.method.name().to_string(),
            rows: m.aggregate.clone(),
        })
        .collect()
}

/// Vertical extent of the chart: `[min(mean - std), max(mean + std)]`
/// widened by 5% of its span on each side.
pub fn chart_y_range(series: &[ChartSeries]) -> Option<(f64, f64)> {
    let rows = series.iter().flat_map(|s| &s.rows);
    let lo = rows.clone().map(|r| r.mean_acc - r.std_acc).reduce(f64::min)?;
    let hi = rows.map(|r| r.mean_acc + r.std_acc).reduce(f64::max)?;
    let span = if hi > lo { hi - lo } else { lo.abs().max(1.0) * 0.1 };
    Some((lo - 0.05 * span, hi + 0.05 * span))
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Static SVG line chart of mean accuracy per round with a ±1 std band.
pub fn chart_svg(series: &[ChartSeries]) -> Result<String> {
    let (y_lo, y_hi) = chart_y_range(series).ok_or_else(|| Error::Domain("chart: no data".into()))?;
    let rounds: Vec<usize> = series.iter().flat_map(|s| s.rows.iter().map(|r| r.round)).collect();
    let x_lo = *rounds.iter().min().expect("non-empty") as f64;
    let x_hi = *rounds.iter().max().expect("non-empty") as f64;

    let (width, height) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 20.0, 45.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let px = |x: f64| {
        if x_hi > x_lo {
            left + (x - x_lo) / (x_hi - x_lo) * plot_w
        } else {
            left + plot_w / 2.0
        }
    };
    let py = |y: f64| top + (y_hi - y) / (y_hi - y_lo) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##);
    let _ = writeln!(
        svg,
        r##"<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444444"/>"##
    );
    for i in 0..=4 {
        let y = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"##,
            left,
            py(y),
            left + plot_w,
            py(y),
            left - 6.0,
            py(y) + 4.0,
            y
        );
    }
    let mut ticks: Vec<usize> = rounds.clone();
    ticks.sort_unstable();
    ticks.dedup();
    for r in &ticks {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{r}</text>"#,
            px(*r as f64),
            top + plot_h + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">round</text>"#,
        left + plot_w / 2.0,
        height - 8.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">test accuracy</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(svg, r#"<g class="series" data-name="{}">"#, s.name);
        if s.rows.len() > 1 {
            let upper = s.rows.iter().map(|r| (px(r.round as f64), py(r.mean_acc + r.std_acc)));
            let lower = s.rows.iter().rev().map(|r| (px(r.round as f64), py(r.mean_acc - r.std_acc)));
            let band: Vec<String> = upper.chain(lower).map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                band.join(" ")
            );
            let line: Vec<String> = s
                .rows
                .iter()
                .map(|r| format!("{:.2},{:.2}", px(r.round as f64), py(r.mean_acc)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                line.join(" ")
            );
        } else {
            for r in &s.rows {
                let (x, y) = (px(r.round as f64), py(r.mean_acc));
                let _ = writeln!(
                    svg,
                    r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}" stroke-opacity="0.4" stroke-width="6"/><circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#,
                    py(r.mean_acc + r.std_acc),
                    py(r.mean_acc - r.std_acc)
                );
            }
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + plot_w + 14.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            s.name
        );
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn render_chart(series: &[ChartSeries], path: &Path) -> Result<()> {
    write_file(path, &chart_svg(series)?)
}

/// `run`: one experiment into `out`.
pub fn cmd_run(config: &Path, out: &Path, overrides: &[String]) -> Result<RunManifest> {
    let cfg = parse_config_with(config, overrides)?;
    let started_unix = unix_now();
    let result = run_experiment(&cfg)?;
    let mut files = write_outputs(&result, out)?;
    let config_name = "config.toml".to_string();
    write_file(&out.join(&config_name), &emit_config(&cfg)?)?;
    files.push(config_name);
    files.push("manifest.json".into());
    let manifest = RunManifest {
        config_hash: config_hash(&cfg)?,
        version: VERSION.to_string(),
        seeds: cfg.seeds.clone(),
        methods: cfg.methods.iter().map(|m| m.name().to_string()).collect(),
        overrides: overrides.to_vec(),
        started_unix,
        finished_unix: unix_now(),
        files,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out.join("manifest.json"), &(json + "\n"))?;
    Ok(manifest)
}

#[derive(Serialize)]
struct SweepRow<'a> {
    c_weak: String,
    method: &'a str,
    round: usize,
    mean_acc: f64,
    std_acc: f64,
    mean_weak_count: f64,
}

fn sweep_dir_name(c: &Cost) -> String {
    format!("cw-{}_{}", c.numer(), c.denom())
}

/// `sweep-cost`: one experiment per weak cost, each in its own
/// subdirectory, plus a combined `sweep.csv`.
pub fn cmd_sweep(config: &Path, values: &[Cost], out: &Path, overrides: &[String]) -> Result<Vec<String>> {
    let cfg = parse_config_with(config, overrides)?;
    let results = sweep_weak_cost(&cfg, values)?;
    let mut rows = Vec::new();
    let mut files = Vec::new();
    for (c_weak, result) in &results {
        let sub = sweep_dir_name(c_weak);
        for f in write_outputs(result, &out.join(&sub))? {
            files.push(format!("{sub}/{f}"));
        }
        for m in &result.methods {
            for a in &m.aggregate {
                let weak: Vec<f64> = m.runs.iter().map(|r| r.reports[a.round - 1].weak_count as f64).collect();
                rows.push(SweepRow {
                    c_weak: rational::format_rational(c_weak),
                    method: m.method.name(),
                    round: a.round,
                    mean_acc: a.mean_acc,
                    std_acc: a.std_acc,
                    mean_weak_count: weak.iter().sum::<f64>() / weak.len() as f64,
                });
            }
        }
    }
    write_file(&out.join("sweep.csv"), &csv_text(rows)?)?;
    files.push("sweep.csv".into());
    Ok(files)
}

/// Parses a comma-separated list of `p/q` costs.
pub fn parse_cost_list(text: &str) -> Result<Vec<Cost>> {
    text.split(',').filter(|s| !s.trim().is_empty()).map(rational::parse_rational).collect()
}

/// `gen-data`: reads a synthetic-data config (a `seed` key plus any
/// generator fields) and writes the training CSV to `out`, the test CSV
/// next to it as `<stem>.test.csv`, and the label space as
/// `<stem>.labels.json`.
pub fn cmd_gen_data(config: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| toml_error(config, &text, e))?;
    let seed = match table.remove("seed") {
        None => 0,
        Some(toml::Value::Integer(n)) if n >= 0 => n as u64,
        Some(other) => return Err(Error::Config(format!("seed: expected a non-negative integer, got {other}"))),
    };
    let synth: SynthConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().trim().to_string()))?;
    let data = synth_generate(&synth, seed)?;
    write_dataset(&data.dataset, out)
}

/// Companion paths of a training CSV: test CSV and label-space JSON.
pub fn companion_paths(train: &Path) -> (PathBuf, PathBuf) {
    let stem = train.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    (
        train.with_file_name(format!("{stem}.test.csv")),
        train.with_file_name(format!("{stem}.labels.json")),
    )
}

pub fn write_dataset(ds: &Dataset, train_path: &Path) -> Result<Vec<PathBuf>> {
    let (test_path, labels_path) = companion_paths(train_path);
    for p in [train_path, &test_path] {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Dataset::write_features(ds.train(), ds.space(), train_path)?;
    Dataset::write_features(ds.test(), ds.space(), &test_path)?;
    ds.space().save_json(&labels_path)?;
    Ok(vec![train_path.to_path_buf(), test_path, labels_path])
}
