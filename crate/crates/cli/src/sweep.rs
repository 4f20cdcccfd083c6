//! Grid sweeps over a config template.
//!
//! A grid file maps dotted config keys to arrays of values, for example
//! `"attack.budget_fraction" = [0.015, 0.02]`. Points are the cartesian
//! product in sorted key order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::protocol::{run_dir, run_protocol};
use crate::CliError;

pub type Grid = BTreeMap<String, Vec<toml::Value>>;

pub fn parse_grid(text: &str) -> Result<Grid, CliError> {
    let table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(format!("grid: {e}")))?;
    let mut grid = Grid::new();
    for (k, v) in table {
        match v {
            toml::Value::Array(vals) if !vals.is_empty() => {
                grid.insert(k, vals);
            }
            _ => return Err(CliError::Config(format!("grid key {k} needs a nonempty array"))),
        }
    }
    Ok(grid)
}

/// One assignment of grid values.
pub type Point = Vec<(String, toml::Value)>;

pub fn points(grid: &Grid) -> Vec<Point> {
    if grid.is_empty() {
        return Vec::new();
    }
    let mut out: Vec<Point> = vec![Vec::new()];
    for (k, vals) in grid {
        out = out
            .into_iter()
            .flat_map(|p| {
                vals.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((k.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    out
}

/// Substitute a point into the template and parse the result.
pub fn instantiate(template: &toml::Table, point: &Point) -> Result<RunConfig, CliError> {
    let mut doc = template.clone();
    for (key, value) in point {
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().expect("split yields at least one part");
        let mut table = &mut doc;
        for p in parents {
            table = table
                .get_mut(*p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| CliError::Config(format!("grid key {key}: no section {p}")))?;
        }
        table.insert(last.to_string(), value.clone());
    }
    let text = toml::to_string(&doc).map_err(|e| CliError::Config(e.to_string()))?;
    RunConfig::parse(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("grid point {}: {m}", describe(point))),
        other => other,
    })
}

pub fn describe(point: &Point) -> String {
    point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

#[derive(Debug)]
pub struct PointResult {
    pub point: Point,
    pub hash: String,
    pub outcome: Result<RunManifest, String>,
}

/// Run every point with at most `jobs` workers. Points whose manifest already
/// exists under the output root are loaded instead of rerun. Failures are
/// recorded per point. Writes `summary.csv` under `root`.
pub fn sweep(
    template: &toml::Table,
    grid: &Grid,
    root: &Path,
    jobs: usize,
    filter: &dyn Fn(RunConfig) -> Result<RunConfig, CliError>,
) -> Result<Vec<PointResult>, CliError> {
    let pts = points(grid);
    let configs = pts
        .iter()
        .map(|p| instantiate(template, p).and_then(filter))
        .collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(root).map_err(|e| CliError::step("sweep", e))?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<PointResult>>> = Mutex::new((0..pts.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(pts.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= pts.len() {
                    break;
                }
                let cfg = &configs[i];
                let hash = cfg.hash();
                let existing = run_dir(root, cfg).join("manifest.json");
                let outcome = match RunManifest::read(&existing) {
                    Ok(m) if m.config_hash == hash => Ok(m),
                    _ => run_protocol(cfg, root).map_err(|e| e.to_string()),
                };
                results.lock().unwrap()[i] = Some(PointResult {
                    point: pts[i].clone(),
                    hash,
                    outcome,
                });
            });
        }
    });
    let results: Vec<PointResult> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every point is visited"))
        .collect();
    write_summary(&root.join("summary.csv"), grid, &results)?;
    Ok(results)
}

/// One line per (point, metrics row); failed points get one line with the error.
pub fn write_summary(path: &Path, grid: &Grid, results: &[PointResult]) -> Result<PathBuf, CliError> {
    let metric_names: Vec<String> = results
        .iter()
        .find_map(|r| r.outcome.as_ref().ok())
        .and_then(|m| m.rows.first())
        .map(|r| r.metrics.keys().cloned().collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::step("summary", e))?;
    let mut header = vec!["point".to_string(), "config_hash".to_string(), "status".to_string()];
    header.extend(grid.keys().cloned());
    header.push("method".to_string());
    header.extend(metric_names.iter().cloned());
    w.write_record(&header).map_err(|e| CliError::step("summary", e))?;
    for (i, r) in results.iter().enumerate() {
        let mut base = vec![i.to_string(), r.hash.clone()];
        let values: Vec<String> = r.point.iter().map(|(_, v)| v.to_string()).collect();
        match &r.outcome {
            Ok(m) => {
                for row in &m.rows {
                    let mut rec = base.clone();
                    rec.push("ok".into());
                    rec.extend(values.iter().cloned());
                    rec.push(row.method.clone());
                    rec.extend(
                        metric_names
                            .iter()
                            .map(|n| row.get(n).map(|v| v.to_string()).unwrap_or_default()),
                    );
                    w.write_record(&rec).map_err(|e| CliError::step("summary", e))?;
                }
            }
            Err(e) => {
                base.push(format!("failed: {e}"));
                base.extend(values);
                base.push(String::new());
                base.extend(metric_names.iter().map(|_| String::new()));
                w.write_record(&base).map_err(|e| CliError::step("summary", e))?;
            }
        }
    }
    w.flush().map_err(|e| CliError::step("summary", e))?;
    Ok(path.to_path_buf())
}
