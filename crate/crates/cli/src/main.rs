use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use umcl::ablation::{false_negative_csv, false_negative_study, run_grid, AblationGrid};
use umcl::config::{RunConfig, SynthSpec};
use umcl::data::{generate_synthetic, load_eval_set, write_dataset, write_eval_set, DataSpec};
use umcl::evaluation::{evaluate, export_embeddings, EvalTasks, DEFAULT_KS};
use umcl::objective::{gradcheck, GradcheckOptions};
use umcl::prompt::Vocabulary;
use umcl::run_dir::RunDirectory;
use umcl::training::{train, Checkpoint, RunStatus};

/// Output root used when `--out` is omitted.
const RUN_ROOT_ENV: &str = "UMCL_RUN_ROOT";

#[derive(Parser)]
#[command(
    name = "umcl",
    version,
    about = "Image-text-label contrastive pretraining with continuous prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key=value run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a labelled evaluation set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL with `image`, `class` and optional `text` fields.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: zero_shot, probe, retrieval.
        #[arg(long, default_value = "zero_shot")]
        tasks: String,
        /// Also report prompt-ensemble zero-shot accuracy.
        #[arg(long)]
        ensemble: bool,
        /// Comma-separated K values for retrieval.
        #[arg(long)]
        ks: Option<String>,
        /// Metrics JSON destination.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write image embeddings with a 2-D PCA projection as CSV.
        #[arg(long)]
        export_embeddings: Option<PathBuf>,
    },
    /// Run an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Maximum concurrent worker threads.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Compare soft-target and hard-target training across overlap levels.
    FalseNegative {
        /// Run config with synthetic data.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "0,0.5")]
        levels: String,
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus as JSONL.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(explicit: Option<PathBuf>, default_name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        std::env::var_os(RUN_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(default_name)
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad {what} `{s}`: {e}"))
        })
        .collect()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<ExitCode> {
    let mut run =
        RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    let dir = out_dir(out, &format!("{}-seed{}", stem(config), run.train.seed));
    let dir = RunDirectory::create(&dir)?;
    dir.write_config(&run.to_kv())?;
    let data = run.load_data().context("loading training data")?;
    if let Some(eval) = &data.eval {
        write_eval_set(dir.file("eval.jsonl"), eval)?;
    }
    log::info!(
        "training {} steps on {} image-text / {} image-label samples",
        run.train.steps,
        data.datasets.image_text.len(),
        data.datasets.image_label.len()
    );
    let outcome = train(&run.train, &data.datasets, &data.registry)?;
    dir.write_metrics(&outcome.log)?;
    dir.save_checkpoint(&outcome.checkpoint)?;
    if let RunStatus::Aborted { step, reason } = &outcome.status {
        eprintln!("training aborted at step {step}: {reason}");
        eprintln!("partial run left in {}", dir.path().display());
        return Ok(ExitCode::FAILURE);
    }
    if let Some(eval) = &data.eval {
        let metrics = evaluate(&outcome.checkpoint, eval, &EvalTasks::default())?;
        dir.write_eval(&metrics)?;
        print!("{}", metrics.summary());
    }
    dir.mark_complete()?;
    println!("run written to {}", dir.path().display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    tasks: &str,
    ensemble: bool,
    ks: Option<String>,
    out: Option<PathBuf>,
    export: Option<PathBuf>,
) -> Result<ExitCode> {
    let mut t = EvalTasks {
        zero_shot: false,
        ensemble,
        probe: false,
        retrieval: false,
        ks: DEFAULT_KS.to_vec(),
        ..EvalTasks::default()
    };
    for task in parse_list::<String>(tasks, "task")? {
        match task.as_str() {
            "zero_shot" => t.zero_shot = true,
            "probe" => t.probe = true,
            "retrieval" => t.retrieval = true,
            other => bail!("unknown task `{other}` (expected zero_shot, probe, retrieval)"),
        }
    }
    if let Some(ks) = ks {
        t.ks = parse_list(&ks, "k")?;
    }
    let ckpt = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let spec = DataSpec {
        num_classes: ckpt.num_classes(),
        image_dim: ckpt.config.image_dim,
        vocab: ckpt.vocab,
    };
    let set = load_eval_set(data, &spec).with_context(|| format!("loading {}", data.display()))?;
    let metrics = evaluate(&ckpt, &set, &t)?;
    let out = out_dir(out, "eval.json");
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write(&out, &(serde_json::to_string_pretty(&metrics)? + "\n"))?;
    if let Some(path) = export {
        export_embeddings(&set, &ckpt, Some(&path))?;
    }
    print!("{}", metrics.summary());
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(grid: &Path, out: Option<PathBuf>, jobs: Option<usize>) -> Result<ExitCode> {
    let g = AblationGrid::load(grid).with_context(|| format!("loading {}", grid.display()))?;
    let out = out_dir(out, &stem(grid));
    std::fs::create_dir_all(&out)?;
    let report = run_grid(&g, Some(&out), jobs)?;
    print!("{}", report.to_table());
    println!("results written to {}", out.display());
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} cell(s) failed");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_false_negative(
    config: &Path,
    levels: &str,
    seeds: &str,
    out: Option<PathBuf>,
    jobs: Option<usize>,
) -> Result<ExitCode> {
    let run = RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let levels: Vec<f64> = parse_list(levels, "overlap level")?;
    let seeds: Vec<u64> = parse_list(seeds, "seed")?;
    let rows = false_negative_study(&run, &levels, &seeds, jobs)?;
    let out = out_dir(out, "false-negative");
    std::fs::create_dir_all(&out)?;
    let csv = false_negative_csv(&rows);
    write(&out.join("false_negative.csv"), &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64, out: Option<PathBuf>) -> Result<ExitCode> {
    let report = gradcheck(seed, &GradcheckOptions::default())?;
    let out = out_dir(out, "gradcheck");
    std::fs::create_dir_all(&out)?;
    write(&out.join("gradcheck.txt"), &report.table())?;
    write(&out.join("gradcheck.json"), &(report.to_json()? + "\n"))?;
    print!("{}", report.table());
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        for row in report.failures() {
            eprintln!("FAIL {}/{}: {:.3e}", row.suite, row.tensor, row.max_rel_err);
        }
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_synth(config: &Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let spec = SynthSpec::load(config).with_context(|| format!("loading {}", config.display()))?;
    let vocab = Vocabulary::default();
    let corpus = generate_synthetic(&spec.config, spec.seed, &vocab)?;
    let out = out_dir(out, "synth");
    std::fs::create_dir_all(&out)?;
    write(&out.join("synth.kv"), &spec.to_kv(""))?;
    write_dataset(out.join("image_text.jsonl"), &corpus.image_text)?;
    write_dataset(out.join("image_label.jsonl"), &corpus.image_label)?;
    write_eval_set(out.join("eval.jsonl"), &corpus.eval)?;
    let mut gt = String::from("source,index,classes\n");
    for g in &corpus.ground_truth {
        let classes: Vec<String> = g.classes.iter().map(usize::to_string).collect();
        let _ = writeln!(
            gt,
            "{},{},{}",
            g.source.as_str(),
            g.index,
            classes.join(";")
        );
    }
    write(&out.join("ground_truth.csv"), &gt)?;
    write(
        &out.join("class_names.txt"),
        &(corpus.class_names.join("\n") + "\n"),
    )?;
    println!(
        "{} image-text, {} image-label, {} eval samples written to {}",
        corpus.image_text.len(),
        corpus.image_label.len(),
        corpus.eval.samples.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, out, seed),
        Command::Eval {
            checkpoint,
            data,
            tasks,
            ensemble,
            ks,
            out,
            export_embeddings,
        } => cmd_eval(
            &checkpoint,
            &data,
            &tasks,
            ensemble,
            ks,
            out,
            export_embeddings,
        ),
        Command::Ablate { grid, out, jobs } => cmd_ablate(&grid, out, jobs),
        Command::FalseNegative {
            config,
            levels,
            seeds,
            out,
            jobs,
        } => cmd_false_negative(&config, &levels, &seeds, out, jobs),
        Command::Gradcheck { seed, out } => cmd_gradcheck(seed, out),
        Command::Synth { config, out } => cmd_synth(&config, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
