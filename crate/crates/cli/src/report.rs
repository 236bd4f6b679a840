//! Report files written after a batch of runs.

use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use dmpc_core::simulator::record::distance_parameters;
use dmpc_core::simulator::{cost_ratio, Controller, RunRecord, Scenario};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("writing {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("writing {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>, ReportError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, ReportError> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Writes every report for `records` into `out_dir` and returns the file list.
pub fn emit_reports(
    scenario: &Scenario,
    records: &[RunRecord],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();

    for rec in records {
        let stem = format!("{}_{}", scenario.name, rec.controller.name());
        let path = out_dir.join(format!("{stem}.csv"));
        rec.write_csv(create(&path)?).map_err(csv_err(&path))?;
        written.push(path);

        let path = out_dir.join(format!("{stem}_summary.json"));
        serde_json::to_writer_pretty(create(&path)?, &rec.summary(scenario)).map_err(|source| {
            ReportError::Json {
                path: path.clone(),
                source,
            }
        })?;
        written.push(path);
    }

    let path = out_dir.join("distances.csv");
    write_distances(scenario, records, &path)?;
    written.push(path);
    let path = out_dir.join("trajectories.csv");
    write_trajectories(records, &path)?;
    written.push(path);
    let path = out_dir.join("cost_table.csv");
    write_costs(scenario, records, &path)?;
    written.push(path);
    let path = out_dir.join("timing_table.csv");
    write_timing(scenario, records, &path)?;
    written.push(path);
    Ok(written)
}

/// Pairwise distances with the hard limit and the limit above which a
/// reference point is no longer adopted (`d_max − c̄_i − c̄_j`, with `c̄` the
/// radius of the consistency set on the distance coordinates).
fn write_distances(
    scenario: &Scenario,
    records: &[RunRecord],
    path: &Path,
) -> Result<(), ReportError> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record([
        "controller",
        "k",
        "agent_i",
        "agent_j",
        "distance",
        "d_max",
        "adoption_threshold",
    ])
    .map_err(&err)?;
    for rec in records {
        for c in &scenario.couplings {
            let Some((d_max, slice)) = distance_parameters(&c.constraint) else {
                continue;
            };
            let (Some(i), Some(j)) = (rec.index_of(c.agents.0), rec.index_of(c.agents.1)) else {
                continue;
            };
            let radius = |a: usize| {
                rec.consistency_sets[a]
                    .max_norm_on(slice)
                    .unwrap_or(f64::INFINITY)
            };
            let threshold = d_max - radius(i) - radius(j);
            for (k, xs) in rec.states.iter().enumerate() {
                let d = slice
                    .iter()
                    .map(|&s| (xs[i][s] - xs[j][s]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                w.write_record([
                    rec.controller.name().to_string(),
                    k.to_string(),
                    c.agents.0.to_string(),
                    c.agents.1.to_string(),
                    num(d),
                    num(d_max),
                    num(threshold),
                ])
                .map_err(&err)?;
            }
        }
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_trajectories(records: &[RunRecord], path: &Path) -> Result<(), ReportError> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    let n = records
        .iter()
        .flat_map(|r| r.states[0].iter().map(|x| x.len()))
        .max()
        .unwrap_or(0);
    let mut header = vec![
        "controller".to_string(),
        "k".into(),
        "t".into(),
        "agent".into(),
    ];
    header.extend((0..n).map(|d| format!("x{d}")));
    w.write_record(&header).map_err(&err)?;
    for rec in records {
        for (k, xs) in rec.states.iter().enumerate() {
            for (a, x) in xs.iter().enumerate() {
                let mut row = vec![
                    rec.controller.name().to_string(),
                    k.to_string(),
                    num(k as f64 * rec.dt),
                    rec.agent_ids[a].to_string(),
                ];
                row.extend((0..n).map(|d| x.get(d).map_or(String::new(), |v| num(*v))));
                w.write_record(&row).map_err(&err)?;
            }
        }
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Actual cost per agent, relative to the proposed controller's when that
/// run is part of the batch (`0/0` counts as 1).
fn write_costs(scenario: &Scenario, records: &[RunRecord], path: &Path) -> Result<(), ReportError> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["controller", "agent", "actual_cost", "relative_to_proposed"])
        .map_err(&err)?;
    let summaries: Vec<_> = records.iter().map(|r| r.summary(scenario)).collect();
    let base = summaries
        .iter()
        .find(|s| s.controller == Controller::Proposed);
    for s in &summaries {
        for (a, cost) in s.metrics.agents.iter().zip(&s.metrics.actual_cost) {
            let rel = base
                .and_then(|b| {
                    let idx = b.metrics.agents.iter().position(|x| x == a)?;
                    Some(cost_ratio(*cost, b.metrics.actual_cost[idx]))
                })
                .map_or(String::new(), num);
            w.write_record([
                s.controller.name().to_string(),
                a.to_string(),
                num(*cost),
                rel,
            ])
            .map_err(&err)?;
        }
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_timing(
    scenario: &Scenario,
    records: &[RunRecord],
    path: &Path,
) -> Result<(), ReportError> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record([
        "controller",
        "transport",
        "convention",
        "mean_step_s",
        "max_step_s",
        "mean_wall_step_s",
    ])
    .map_err(&err)?;
    for rec in records {
        let t = rec.summary(scenario).timing;
        let walls: Vec<f64> = rec
            .steps
            .iter()
            .map(|rows| {
                let it = rows.iter().map(|r| r.solve_wall_s);
                match rec.controller {
                    Controller::Sequential => it.sum(),
                    _ => it.fold(0.0, f64::max),
                }
            })
            .collect();
        let mean_wall = walls.iter().sum::<f64>() / walls.len().max(1) as f64;
        w.write_record([
            rec.controller.name().to_string(),
            rec.transport.clone(),
            t.convention,
            num(t.mean_step_s),
            num(t.max_step_s),
            num(mean_wall),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}
