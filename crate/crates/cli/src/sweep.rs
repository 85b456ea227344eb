//! Ablation sweeps: one axis, several runs, one summary.
//!
//! A sweep spec is `axis=values` where axis is one of `k`, `seeds`, `nodes`,
//! `epochs`, and values are either a comma list (`1,2,4,8`) or an inclusive
//! range (`0..4` ⇒ 0,1,2,3,4). Points are independent searches and may run
//! concurrently under `--jobs`; the summary is written once after all of
//! them finish.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use pcdarts_core::config::Config;
use pcdarts_core::search::run_search;

use crate::plot;
use crate::{runtime, usage, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    K,
    Seeds,
    Nodes,
    Epochs,
}

impl Axis {
    pub fn key(self) -> &'static str {
        match self {
            Axis::K => "k",
            Axis::Seeds => "seed",
            Axis::Nodes => "nodes",
            Axis::Epochs => "epochs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<u64>,
}

/// Parses `k=1,2,4,8` / `seeds=0..4` / `nodes=5,6,7` / `epochs=50,75,100,125`.
pub fn parse_sweep(spec: &str) -> Result<SweepSpec, String> {
    let (key, rest) = spec
        .split_once('=')
        .ok_or_else(|| format!("sweep spec '{spec}' is missing '=' (expected axis=values)"))?;
    let axis = match key.trim() {
        "k" => Axis::K,
        "seeds" => Axis::Seeds,
        "nodes" => Axis::Nodes,
        "epochs" => Axis::Epochs,
        other => {
            return Err(format!(
                "unknown sweep axis '{other}' (expected k, seeds, nodes, or epochs)"
            ))
        }
    };
    let rest = rest.trim();
    let values: Vec<u64> = if let Some((lo, hi)) = rest.split_once("..") {
        let lo: u64 =
            lo.trim().parse().map_err(|_| format!("bad range start '{lo}' in '{spec}'"))?;
        let hi: u64 =
            hi.trim().parse().map_err(|_| format!("bad range end '{hi}' in '{spec}'"))?;
        if hi < lo {
            return Err(format!("empty range {lo}..{hi} in '{spec}'"));
        }
        (lo..=hi).collect()
    } else {
        rest.split(',')
            .map(|v| v.trim().parse::<u64>().map_err(|_| format!("bad value '{v}' in '{spec}'")))
            .collect::<Result<_, _>>()?
    };
    if values.is_empty() {
        return Err(format!("sweep spec '{spec}' has no values"));
    }
    Ok(SweepSpec { axis, values })
}

/// Applies one axis value to a config copy.
pub fn apply(cfg: &Config, axis: Axis, value: u64) -> Config {
    let mut c = cfg.clone();
    match axis {
        Axis::K => c.search.k = value as usize,
        Axis::Seeds => c.search.seed = value,
        Axis::Nodes => c.search.nodes = value as usize,
        Axis::Epochs => c.search.epochs = value as usize,
    }
    c
}

#[derive(Debug, Clone)]
pub struct PointResult {
    pub value: u64,
    pub w_acc: f64,
    pub a_acc: f64,
    pub peak_act_elems: u64,
    pub wall_secs: f64,
}

pub fn summary_csv(axis: Axis, rows: &[PointResult]) -> String {
    let mut out = format!("{},final_w_acc,final_a_acc,peak_act_elems,wall_secs\n", axis.key());
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:.4},{},{:.3}\n",
            r.value, r.w_acc, r.a_acc, r.peak_act_elems, r.wall_secs
        ));
    }
    out
}

fn run_point(cfg: &Config, axis: Axis, value: u64) -> Result<PointResult, String> {
    let cfg = apply(cfg, axis, value);
    cfg.validate().map_err(|e| format!("{}={}: {e}", axis.key(), value))?;
    let started = Instant::now();
    let dataset = cfg.load_dataset().map_err(|e| e.to_string())?;
    let outcome =
        run_search::<f32>(&cfg, &dataset).map_err(|e| format!("{}={}: {e}", axis.key(), value))?;
    if let Some(reason) = outcome.aborted {
        return Err(format!("{}={} aborted: {reason}", axis.key(), value));
    }
    let last = outcome.log.records.last().expect("at least one epoch");
    let peak = outcome.log.records.iter().map(|r| r.peak_act_elems).max().unwrap_or(0);
    Ok(PointResult {
        value,
        w_acc: last.w_acc,
        a_acc: last.a_acc,
        peak_act_elems: peak,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

pub fn cmd_ablate(config: &Path, sweep: &str, out: &Path, jobs: usize) -> Result<(), Failure> {
    let spec = parse_sweep(sweep).map_err(Failure::Usage)?;
    if jobs == 0 {
        return Err(Failure::Usage("--jobs must be ≥ 1".into()));
    }
    let base = Config::load(config).map_err(usage)?;
    fs::create_dir_all(out)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;

    // Work-stealing over the point list; each slot is filled exactly once.
    let results: Vec<Mutex<Option<Result<PointResult, String>>>> =
        spec.values.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(spec.values.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&value) = spec.values.get(i) else { break };
                let r = run_point(&base, spec.axis, value);
                *results[i].lock().unwrap() = Some(r);
            });
        }
    });

    let mut rows = Vec::with_capacity(results.len());
    for cell in results {
        match cell.into_inner().unwrap().expect("every point ran") {
            Ok(row) => rows.push(row),
            Err(msg) => return Err(Failure::Runtime(msg)),
        }
    }

    let csv = summary_csv(spec.axis, &rows);
    let csv_path = out.join("summary.csv");
    fs::write(&csv_path, &csv)
        .map_err(|e| runtime(format!("cannot write {}: {e}", csv_path.display())))?;

    let points: Vec<plot::Point> = rows
        .iter()
        .map(|r| plot::Point {
            x: r.peak_act_elems as f64,
            y: r.a_acc,
            label: format!("{}={}", spec.axis.key(), r.value),
        })
        .collect();
    let svg = plot::scatter_svg(
        &points,
        "peak activation elements",
        "held-out accuracy",
        &format!("{} sweep", spec.axis.key()),
    );
    let svg_path = out.join("scatter.svg");
    fs::write(&svg_path, &svg)
        .map_err(|e| runtime(format!("cannot write {}: {e}", svg_path.display())))?;

    println!(
        "ablation done: {} points on axis '{}', summary in {}",
        rows.len(),
        spec.axis.key(),
        out.display()
    );
    Ok(())
}
