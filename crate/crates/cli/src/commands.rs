//! Subcommand drivers. Results reach disk only through the calling thread.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use openlens_core::evaluation::DEFAULT_THRESHOLDS;
use openlens_core::{compare_heatmaps, filter_vision_dependent, ComparisonScores, ModelAdapter, RelianceStats, SampleDrop};
use serde::Serialize;

use crate::adapters::{resolve, LoadedAdapter};
use crate::artifacts::{read_heatmap, write_file, write_sample_dir};
use crate::config::{set_param, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::{strip_choices, DatasetManifest, ManifestEntry};
use crate::pipeline::{self, EvaluationRecord};
use crate::runner::run_queue;

/// Outcome of a subcommand that ran to completion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub failures: usize,
    pub written: Vec<PathBuf>,
}

fn report_failure(context: &str, err: &CliError) {
    match err {
        CliError::Sample { .. } if context.is_empty() => eprintln!("[openlens] {err}"),
        _ => eprintln!("[openlens] {context}: {err}"),
    }
}

fn workers_for(adapter: &dyn ModelAdapter, run: &RunConfig) -> usize {
    if adapter.capabilities().thread_safe {
        run.workers
    } else {
        1
    }
}

fn load(run: &RunConfig, manifest: &Path) -> Result<(LoadedAdapter, DatasetManifest)> {
    run.validate()?;
    let adapter = resolve(&run.adapter)?;
    let manifest = DatasetManifest::load(manifest)?;
    Ok((adapter, manifest))
}

/// Writes `<output>/<sample_id>/` with the five artifact files per entry.
pub fn explain(run: &RunConfig, manifest_path: &Path) -> Result<Outcome> {
    let (adapter, manifest) = load(run, manifest_path)?;
    pipeline::require_gradients(&adapter, &adapter.name)?;
    let mut written = Vec::new();
    let failures = run_queue(
        &manifest.entries,
        workers_for(&adapter, run),
        run.fail_fast,
        |entry: &ManifestEntry| {
            let started = Instant::now();
            let explained = pipeline::explain(&adapter, &manifest, entry, run)?;
            let files = explained.files(entry, &adapter.name)?;
            Ok((files, explained.trace.steps.len(), started.elapsed()))
        },
        |i, result: Result<_>| {
            let entry = &manifest.entries[i];
            let dir = run.output_dir.join(&entry.sample_id);
            let outcome = result.and_then(|(files, steps, elapsed)| {
                write_sample_dir(&dir, &files)?;
                eprintln!(
                    "[openlens] {}: {steps} steps in {:.3}s",
                    entry.sample_id,
                    elapsed.as_secs_f64()
                );
                Ok(())
            });
            match outcome {
                Ok(()) => {
                    written.push(dir);
                    Ok(())
                }
                Err(e) => {
                    let e = e.for_sample(&entry.sample_id);
                    report_failure("", &e);
                    Err(e)
                }
            }
        },
    );
    Ok(Outcome { failures, written })
}

fn heatmap_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(id).join("heatmap.raw")
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-tag mean AUCs, keyed and therefore ordered by tag.
fn aggregate(records: &[EvaluationRecord]) -> BTreeMap<String, (usize, f64, f64)> {
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let g = groups.entry(r.dataset_tag.clone()).or_default();
        g.0.push(r.deletion.auc);
        g.1.push(r.insertion.auc);
    }
    groups
        .into_iter()
        .map(|(tag, (d, i))| (tag, (d.len(), mean(&d), mean(&i))))
        .collect()
}

/// Scores heatmaps from `<heatmap_dir>/<sample_id>/heatmap.raw` and writes
/// `evaluation/<id>.json` plus the aggregate `table1.csv`.
pub fn evaluate(run: &RunConfig, manifest_path: &Path, heatmap_dir: &Path, method: &str) -> Result<Outcome> {
    let (adapter, manifest) = load(run, manifest_path)?;
    let mut records: Vec<Option<EvaluationRecord>> = vec![None; manifest.entries.len()];
    let mut written = Vec::new();
    let failures = run_queue(
        &manifest.entries,
        workers_for(&adapter, run),
        run.fail_fast,
        |entry: &ManifestEntry| {
            let path = heatmap_path(heatmap_dir, &entry.sample_id);
            if !path.is_file() {
                return Err(CliError::MissingHeatmap {
                    id: entry.sample_id.clone(),
                    path,
                });
            }
            let heatmap = read_heatmap(&path)?;
            let prepared = pipeline::prepare(&adapter, &manifest, entry, run)?;
            pipeline::evaluate(&adapter, &prepared, entry, &heatmap, run.num_points)
        },
        |i, result| {
            let id = &manifest.entries[i].sample_id;
            let outcome = result.and_then(|record| {
                let path = run.output_dir.join("evaluation").join(format!("{id}.json"));
                write_file(&path, serde_json::to_vec_pretty(&record)?)?;
                written.push(path);
                records[i] = Some(record);
                Ok(())
            });
            outcome.map_err(|e| {
                let e = e.for_sample(id);
                report_failure("", &e);
                e
            })
        },
    );
    let records: Vec<EvaluationRecord> = records.into_iter().flatten().collect();
    let table = run.output_dir.join("table1.csv");
    write_file(&table, table1_csv(method, &records)?)?;
    written.push(table);
    Ok(Outcome { failures, written })
}

pub fn table1_csv(method: &str, records: &[EvaluationRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "dataset", "samples", "del", "ins"])?;
    for (tag, (n, del, ins)) in aggregate(records) {
        w.write_record([
            method.to_string(),
            tag,
            n.to_string(),
            format!("{del:.6}"),
            format!("{ins:.6}"),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Config(e.to_string()))
}

pub const RELIANCE_HEADER: [&str; 7] = [
    "adapter",
    "dataset",
    "samples",
    "drop_lt_30",
    "drop_30_70",
    "drop_gt_70",
    "table_cell",
];

pub fn reliance_csv(adapter: &str, per_tag: &BTreeMap<String, RelianceStats>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RELIANCE_HEADER)?;
    for (tag, stats) in per_tag {
        let [low, mid, high] = stats.percentages();
        w.write_record([
            adapter.to_string(),
            tag.clone(),
            stats.samples.len().to_string(),
            format!("{low:.1}"),
            format!("{mid:.1}"),
            format!("{high:.1}"),
            stats.table_cell(),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Config(e.to_string()))
}

fn id_list(ids: impl IntoIterator<Item = String>) -> String {
    ids.into_iter().map(|id| id + "\n").collect()
}

/// Writes `reliance.csv`, `reliance_samples.csv`, `reliance_stats.json` and
/// `vision_dependent.txt`.
pub fn reliance(run: &RunConfig, manifest_path: &Path) -> Result<Outcome> {
    let (adapter, manifest) = load(run, manifest_path)?;
    let mut rows = vec![None; manifest.entries.len()];
    let failures = run_queue(
        &manifest.entries,
        workers_for(&adapter, run),
        run.fail_fast,
        |entry: &ManifestEntry| pipeline::reliance(&adapter, &manifest, entry, run),
        |i, result| {
            let id = &manifest.entries[i].sample_id;
            result
                .map(|row| rows[i] = Some(row))
                .map_err(|e| {
                    let e = e.for_sample(id);
                    report_failure("", &e);
                    e
                })
        },
    );

    let mut all = RelianceStats::new(adapter.name.clone(), DEFAULT_THRESHOLDS);
    let mut per_tag: BTreeMap<String, RelianceStats> = BTreeMap::new();
    let mut samples = csv::Writer::from_writer(Vec::new());
    samples.write_record(["sample_id", "dataset", "drop_pct", "bucket", "degenerate"])?;
    for (entry, row) in manifest.entries.iter().zip(rows) {
        let Some(row) = row else { continue };
        let drop = SampleDrop {
            sample_id: entry.sample_id.clone(),
            drop_pct: row.drop_pct,
            degenerate: row.degenerate,
        };
        let bucket = ["lt_30", "30_70", "gt_70"][all.bucket_of(drop.drop_pct)];
        samples.write_record([
            entry.sample_id.clone(),
            entry.dataset_tag.clone(),
            format!("{:.6}", drop.drop_pct),
            bucket.to_string(),
            drop.degenerate.to_string(),
        ])?;
        per_tag
            .entry(entry.dataset_tag.clone())
            .or_insert_with(|| RelianceStats::new(adapter.name.clone(), DEFAULT_THRESHOLDS))
            .push(drop.clone());
        all.push(drop);
    }

    let out = &run.output_dir;
    let paths = [
        out.join("reliance.csv"),
        out.join("reliance_samples.csv"),
        out.join("reliance_stats.json"),
        out.join("vision_dependent.txt"),
    ];
    write_file(&paths[0], reliance_csv(&adapter.name, &per_tag)?)?;
    write_file(
        &paths[1],
        samples.into_inner().map_err(|e| CliError::Config(e.to_string()))?,
    )?;
    write_file(&paths[2], serde_json::to_vec_pretty(&all)?)?;
    let kept = if all.samples.is_empty() {
        Default::default()
    } else {
        filter_vision_dependent(std::slice::from_ref(&all), run.min_drop)?
    };
    write_file(&paths[3], id_list(kept))?;
    Ok(Outcome {
        failures,
        written: paths.to_vec(),
    })
}

/// Intersects `reliance_stats.json` files from several models.
pub fn filter(run: &RunConfig, stats_paths: &[PathBuf]) -> Result<Outcome> {
    if stats_paths.is_empty() {
        return Err(CliError::Config("filter needs at least one --stats file".into()));
    }
    let mut stats = Vec::new();
    for p in stats_paths {
        let text = fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
        let s: RelianceStats = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid stats file {}: {e}", p.display())))?;
        stats.push(s);
    }
    let kept = filter_vision_dependent(&stats, run.min_drop)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let path = run.output_dir.join("vision_dependent.txt");
    eprintln!("[openlens] {} sample(s) kept at min-drop {}", kept.len(), run.min_drop);
    write_file(&path, id_list(kept))?;
    Ok(Outcome {
        failures: 0,
        written: vec![path],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    /// Per-tag mean deletion and insertion AUCs.
    pub means: BTreeMap<String, (f64, f64)>,
    pub failures: usize,
    pub traces: Vec<openlens_core::OptimizationTrace>,
}

/// Explains and evaluates every sample at one grid value, in memory.
pub fn sweep_point(
    adapter: &LoadedAdapter,
    manifest: &DatasetManifest,
    run: &RunConfig,
    param: &str,
    value: f64,
) -> Result<SweepPoint> {
    let mut point_run = run.clone();
    set_param(&mut point_run.optimization, param, value)?;
    point_run
        .optimization
        .validate()
        .map_err(|e| CliError::Config(format!("{param}={value}: {e}")))?;
    let mut results = vec![None; manifest.entries.len()];
    let failures = run_queue(
        &manifest.entries,
        workers_for(adapter, run),
        false,
        |entry: &ManifestEntry| {
            let explained = pipeline::explain(adapter, manifest, entry, &point_run)?;
            let record = pipeline::evaluate(
                adapter,
                &explained.prepared,
                entry,
                &explained.heatmap,
                run.num_points,
            )?;
            Ok((record, explained.trace))
        },
        |i, result: Result<_>| {
            let id = &manifest.entries[i].sample_id;
            result.map(|r| results[i] = Some(r)).map_err(|e| {
                let e = e.for_sample(id);
                report_failure(&format!("{param}={value}"), &e);
                e
            })
        },
    );
    let (records, traces): (Vec<_>, Vec<_>) = results.into_iter().flatten().unzip();
    let means = aggregate(&records)
        .into_iter()
        .map(|(tag, (_, d, i))| (tag, (d, i)))
        .collect();
    Ok(SweepPoint {
        value,
        means,
        failures,
        traces,
    })
}

/// One row per grid value with `<tag>_del,<tag>_ins` columns; writes `sweep.csv`.
pub fn sweep(run: &RunConfig, manifest_path: &Path, param: &str, values: &[f64]) -> Result<Outcome> {
    if values.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    let (adapter, manifest) = load(run, manifest_path)?;
    pipeline::require_gradients(&adapter, &adapter.name)?;
    let mut probe = run.optimization.clone();
    for &v in values {
        set_param(&mut probe, param, v)?;
    }
    let tags: Vec<String> = manifest
        .entries
        .iter()
        .map(|e| e.dataset_tag.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["param".to_string(), "value".to_string()];
    for t in &tags {
        header.push(format!("{t}_del"));
        header.push(format!("{t}_ins"));
    }
    header.push("failures".into());
    w.write_record(&header)?;

    let mut failures = 0;
    for &value in values {
        let point = match sweep_point(&adapter, &manifest, run, param, value) {
            Ok(p) => p,
            Err(e) => {
                report_failure(&format!("{param}={value}"), &e);
                SweepPoint {
                    value,
                    means: BTreeMap::new(),
                    failures: manifest.entries.len(),
                    traces: Vec::new(),
                }
            }
        };
        failures += point.failures;
        let mut row = vec![param.to_string(), value.to_string()];
        for t in &tags {
            match point.means.get(t) {
                Some((d, i)) => {
                    row.push(format!("{d:.6}"));
                    row.push(format!("{i:.6}"));
                }
                None => row.extend([String::new(), String::new()]),
            }
        }
        row.push(point.failures.to_string());
        w.write_record(&row)?;
    }
    let path = run.output_dir.join("sweep.csv");
    write_file(&path, w.into_inner().map_err(|e| CliError::Config(e.to_string()))?)?;
    Ok(Outcome {
        failures,
        written: vec![path],
    })
}

pub fn compare(a: &Path, b: &Path) -> Result<ComparisonScores> {
    let read = |p: &Path| {
        if p.is_file() {
            read_heatmap(p)
        } else {
            Err(CliError::Config(format!("no heatmap at {}", p.display())))
        }
    };
    compare_heatmaps(&read(a)?, &read(b)?).map_err(|e| CliError::Config(e.to_string()))
}

/// Strips choice blocks from every question of a manifest.
pub fn prep(input: &Path, output: &Path, marker: &str) -> Result<Outcome> {
    let text = fs::read_to_string(input)
        .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", input.display())))?;
    let mut manifest = DatasetManifest::parse(&text, PathBuf::new())?;
    for e in &mut manifest.entries {
        e.question = strip_choices(&e.question, marker);
    }
    write_file(output, manifest.to_jsonl())?;
    Ok(Outcome {
        failures: 0,
        written: vec![output.to_path_buf()],
    })
}
