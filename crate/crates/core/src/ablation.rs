//! Ablation grid and the false-negative study.
//!
//! A grid file is a flat key/value file:
//!
//! ```text
//! seeds = 1,2,3
//! base.steps = 2000
//! base.synth.p_overlap = 0.5
//! cell.context-16 = context_len=16
//! cell.w/o label-data = policy=only_image_text
//! ```
//!
//! `base.*` keys form a run config; each `cell.<name>` lists training-key
//! overrides. For seed `s` every cell trains with `seed = s` on the same
//! data (synthetic data uses generator seed `synth.seed + s`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{apply_train_keys, DataSourceConfig, KeyValues, RunConfig, RunData};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalMetrics, EvalTasks, ProbeConfig};
use crate::objective::LossKind;
use crate::par;
use crate::run_dir::RunDirectory;
use crate::training::{train, RunStatus, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub name: String,
    /// Overrides as written in the grid file.
    pub delta: Vec<(String, String)>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

fn parse_delta(text: &str) -> Result<Vec<(String, String)>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("cell override `{pair}` is not key=value")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

impl AblationGrid {
    pub fn new(base: RunConfig, seeds: Vec<u64>, cells: Vec<(String, String)>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::Config("grid needs at least one seed".into()));
        }
        if cells.is_empty() {
            return Err(Error::Config("grid has no cells".into()));
        }
        let cells = cells
            .into_iter()
            .map(|(name, delta)| {
                let delta = parse_delta(&delta)?;
                if delta.iter().any(|(k, _)| k == "seed") {
                    return Err(Error::Config(format!(
                        "cell `{name}` overrides the seed; seeds are shared by every cell"
                    )));
                }
                let mut kv =
                    KeyValues::from_pairs(delta.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
                let mut config = base.train.clone();
                apply_train_keys(&mut config, &mut kv)?;
                kv.finish()?;
                config
                    .validate()
                    .map_err(|e| Error::Config(format!("cell `{name}`: {e}")))?;
                Ok(AblationCell {
                    name,
                    delta,
                    config,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut names: Vec<&str> = cells.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate cell `{}`", w[0])));
        }
        Ok(Self { base, seeds, cells })
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut kv = KeyValues::parse(text, "<grid>")?;
        Self::from_kv(&mut kv, base_dir)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut kv = KeyValues::load(path)?;
        Self::from_kv(&mut kv, path.parent().unwrap_or(Path::new(".")))
    }

    fn from_kv(kv: &mut KeyValues, base_dir: &Path) -> Result<Self> {
        let seeds = kv
            .take_raw("seeds")
            .unwrap_or_else(|| "0".into())
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|e| Error::Config(format!("bad seed `{s}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut base_kv = kv.take_prefixed("base.");
        let base = RunConfig::from_kv(&mut base_kv, base_dir)?;
        if let Err(Error::UnknownKey(k)) = base_kv.finish() {
            return Err(Error::UnknownKey(format!("base.{k}")));
        }
        let mut cell_kv = kv.take_prefixed("cell.");
        let names: Vec<String> = cell_kv.keys().map(String::from).collect();
        let cells = names
            .into_iter()
            .map(|n| {
                let v = cell_kv.take_raw(&n).expect("listed key");
                (n, v)
            })
            .collect();
        kv.clone().finish()?;
        Self::new(base, seeds, cells)
    }

    /// Run config for `cell` under `seed`.
    pub fn cell_run(&self, cell: &AblationCell, seed: u64) -> RunConfig {
        let mut run = seeded(&self.base, seed);
        run.train = TrainConfig {
            seed,
            ..cell.config.clone()
        };
        run
    }
}

/// `base` with the training seed and (for synthetic data) the generator
/// seed shifted by `seed`.
pub fn seeded(base: &RunConfig, seed: u64) -> RunConfig {
    let mut run = base.clone();
    run.train.seed = seed;
    if let DataSourceConfig::Synthetic(s) = &mut run.data {
        s.seed = s.seed.wrapping_add(seed);
    }
    run
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    s.split('-')
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

/// Trains one configuration and evaluates it on the held-out set. When
/// `dir` is given the run directory is populated along the way.
pub fn train_and_evaluate(
    run: &RunConfig,
    data: &RunData,
    tasks: &EvalTasks,
    dir: Option<&Path>,
) -> Result<EvalMetrics> {
    let eval = data
        .eval
        .as_ref()
        .ok_or_else(|| Error::Task("run has no evaluation set".into()))?;
    let dir = dir.map(RunDirectory::create).transpose()?;
    if let Some(d) = &dir {
        d.write_config(&run.to_kv())?;
    }
    let outcome = train(&run.train, &data.datasets, &data.registry)?;
    if let Some(d) = &dir {
        d.write_metrics(&outcome.log)?;
        d.save_checkpoint(&outcome.checkpoint)?;
    }
    if let RunStatus::Aborted { step, reason } = outcome.status {
        return Err(Error::NonFinite(format!(
            "aborted at step {step}: {reason}"
        )));
    }
    let metrics = evaluate(&outcome.checkpoint, eval, tasks)?;
    if let Some(d) = &dir {
        d.write_eval(&metrics)?;
        d.mark_complete()?;
    }
    Ok(metrics)
}

fn grid_tasks(seed: u64) -> EvalTasks {
    EvalTasks {
        zero_shot: true,
        ensemble: true,
        probe: true,
        retrieval: false,
        ks: Vec::new(),
        probe_config: ProbeConfig {
            seed,
            ..ProbeConfig::default()
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub name: String,
    /// Medians over seeds; `None` when the cell failed.
    pub zero_shot_acc: Option<f64>,
    pub zero_shot_acc_ens: Option<f64>,
    pub probe_acc: Option<f64>,
    pub per_seed: Vec<(u64, EvalMetrics)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    /// Sorted by cell name.
    pub rows: Vec<CellResult>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

impl GridReport {
    pub fn row(&self, name: &str) -> Option<&CellResult> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,zero_shot_acc,zero_shot_acc_ens,probe_acc,error\n");
        for r in &self.rows {
            let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.name,
                fmt_opt(r.zero_shot_acc),
                fmt_opt(r.zero_shot_acc_ens),
                fmt_opt(r.probe_acc),
                err
            );
        }
        out
    }

    /// Plain-text table, one row per cell.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}  {:>8}",
            "Cell", "ACC", "ACC-ENS", "Probe"
        );
        let _ = writeln!(out, "{}", "-".repeat(width + 30));
        for r in &self.rows {
            match &r.error {
                Some(e) => {
                    let _ = writeln!(out, "{:<width$}  failed: {e}", r.name);
                }
                None => {
                    let _ = writeln!(
                        out,
                        "{:<width$}  {:>8}  {:>8}  {:>8}",
                        r.name,
                        fmt_opt(r.zero_shot_acc),
                        fmt_opt(r.zero_shot_acc_ens),
                        fmt_opt(r.probe_acc)
                    );
                }
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, body) in [
            ("results.csv", self.to_csv()),
            ("results.txt", self.to_table()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Loads (or generates) the data for every seed once, up front.
fn data_per_seed(base: &RunConfig, seeds: &[u64]) -> Vec<Result<RunData>> {
    par::map(seeds, |&s| seeded(base, s).load_data())
}

/// Per-seed metrics plus the first error seen.
type CellRuns = (Vec<(u64, EvalMetrics)>, Option<String>);

/// Trains and evaluates every (cell, seed) pair, at most `jobs` at a time.
/// A failing cell is reported in its row; the others still run.
pub fn run_grid(
    grid: &AblationGrid,
    out: Option<&Path>,
    jobs: Option<usize>,
) -> Result<GridReport> {
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let report = par::with_threads(jobs, || {
        let data = data_per_seed(&grid.base, &grid.seeds);
        let jobs: Vec<(usize, usize)> = (0..grid.cells.len())
            .flat_map(|c| (0..grid.seeds.len()).map(move |s| (c, s)))
            .collect();
        let results = par::map(&jobs, |&(c, s)| {
            let cell = &grid.cells[c];
            let seed = grid.seeds[s];
            let data = data[s].as_ref().map_err(|e| e.to_string())?;
            let dir: Option<PathBuf> =
                out.map(|o| o.join(slug(&cell.name)).join(format!("seed-{seed}")));
            log::info!("cell `{}` seed {seed}", cell.name);
            train_and_evaluate(
                &grid.cell_run(cell, seed),
                data,
                &grid_tasks(seed),
                dir.as_deref(),
            )
            .map_err(|e| e.to_string())
        });
        let mut by_cell: BTreeMap<&str, CellRuns> = BTreeMap::new();
        for (&(c, s), r) in jobs.iter().zip(results) {
            let entry = by_cell.entry(grid.cells[c].name.as_str()).or_default();
            match r {
                Ok(m) => entry.0.push((grid.seeds[s], m)),
                Err(e) if entry.1.is_none() => {
                    entry.1 = Some(format!("seed {}: {e}", grid.seeds[s]))
                }
                Err(_) => {}
            }
        }
        let rows = by_cell
            .into_iter()
            .map(|(name, (per_seed, error))| {
                let pick = |f: fn(&EvalMetrics) -> Option<f64>| {
                    if error.is_some() {
                        return None;
                    }
                    let v: Vec<f64> = per_seed.iter().filter_map(|(_, m)| f(m)).collect();
                    median(&v)
                };
                CellResult {
                    name: name.to_string(),
                    zero_shot_acc: pick(|m| m.zero_shot_acc),
                    zero_shot_acc_ens: pick(|m| m.zero_shot_acc_ens),
                    probe_acc: pick(|m| m.probe_acc),
                    per_seed,
                    error,
                }
            })
            .collect();
        GridReport { rows }
    });
    if let Some(out) = out {
        report.write(out)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FalseNegativeRow {
    pub p_overlap: f64,
    /// Median zero-shot accuracy over seeds.
    pub umcl_acc: f64,
    pub baseline_acc: f64,
    pub umcl_per_seed: Vec<f64>,
    pub baseline_per_seed: Vec<f64>,
}

/// For each overlap level, trains the soft-target loss and the hard-target
/// InfoNCE baseline on identical data and seeds and compares held-out
/// zero-shot accuracy.
pub fn false_negative_study(
    base: &RunConfig,
    overlap_levels: &[f64],
    seeds: &[u64],
    jobs: Option<usize>,
) -> Result<Vec<FalseNegativeRow>> {
    if !matches!(base.data, DataSourceConfig::Synthetic(_)) {
        return Err(Error::Config(
            "the false-negative study needs synthetic data".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed required".into()));
    }
    let runs: Vec<(f64, u64, LossKind)> = overlap_levels
        .iter()
        .flat_map(|&p| {
            seeds
                .iter()
                .flat_map(move |&s| [LossKind::Umcl, LossKind::HardInfoNce].map(|k| (p, s, k)))
        })
        .collect();
    let accs = par::with_threads(jobs, || {
        par::try_map(&runs, |&(p, s, kind)| {
            let mut run = seeded(base, s);
            if let DataSourceConfig::Synthetic(spec) = &mut run.data {
                spec.config.p_overlap = p;
            }
            run.train.loss = kind;
            let data = run.load_data()?;
            let tasks = EvalTasks {
                ensemble: false,
                ..EvalTasks::default()
            };
            let m = train_and_evaluate(&run, &data, &tasks, None)?;
            Ok::<f64, Error>(m.zero_shot_acc.expect("zero-shot requested"))
        })
    })?;
    let mut rows = Vec::new();
    for (i, &p) in overlap_levels.iter().enumerate() {
        let chunk = &accs[i * seeds.len() * 2..(i + 1) * seeds.len() * 2];
        let umcl: Vec<f64> = chunk.iter().step_by(2).copied().collect();
        let hard: Vec<f64> = chunk.iter().skip(1).step_by(2).copied().collect();
        rows.push(FalseNegativeRow {
            p_overlap: p,
            umcl_acc: median(&umcl).expect("non-empty"),
            baseline_acc: median(&hard).expect("non-empty"),
            umcl_per_seed: umcl,
            baseline_per_seed: hard,
        });
    }
    Ok(rows)
}

pub fn false_negative_csv(rows: &[FalseNegativeRow]) -> String {
    let mut out = String::from("p_overlap,umcl_acc,baseline_acc\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.4},{:.4}",
            r.p_overlap, r.umcl_acc, r.baseline_acc
        );
    }
    out
}
