use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use lfm_bench::eval::{aggregate, GroupBy, ScoredInstance};
use lfm_bench::extract::{extract_choice, extract_preference, extract_rating, patterns};
use lfm_bench::report::{self, all_figures, parse_figure_list};
use lfm_bench::runner::{
    self, dump_prompts, load_profiles, load_records, log_runtime, planned_instance_ids, write_runtime_csv,
    ExperimentConfig, RunManifest, RunOptions,
};
use lfm_bench::synth::{generate_world, write_world, SynthWorldConfig};

#[derive(Parser)]
#[command(name = "lfm-bench", version, about = "Language-profile vs matrix-factorization recommendation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new run from a TOML config.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after writing this many records (resume later).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Finish an interrupted run.
    Resume { dir: PathBuf },
    /// Emit figure tables, SVG charts and a profile dump for a finished run.
    Report {
        dir: PathBuf,
        /// Comma-separated figure ids.
        #[arg(long, default_value = "2,3,4,5,6")]
        figures: String,
        /// Profiles to dump per (history size, word limit).
        #[arg(long, default_value_t = 0)]
        profiles: usize,
        /// Defaults to `<dir>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic world (ratings.csv, movies.csv, registry.json) and a mock-backend config.toml.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        users: usize,
        #[arg(long, default_value_t = 0)]
        background_users: usize,
        #[arg(long, default_value_t = 400)]
        movies: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Prompt inspection.
    Prompts {
        #[command(subcommand)]
        action: PromptsAction,
    },
    /// Run the answer extractor on a piece of model output.
    Parse {
        #[arg(long, required_unless_present = "show_patterns")]
        text: Option<String>,
        #[arg(long, value_enum, default_value_t = ParseTask::Rating)]
        task: ParseTask,
        /// Print the exact regular expressions and exit.
        #[arg(long)]
        show_patterns: bool,
    },
}

#[derive(Subcommand)]
enum PromptsAction {
    /// Print every rendered prompt for one task instance.
    Dump {
        /// A run directory (uses its config snapshot and stored profiles).
        #[arg(long, conflicts_with = "config")]
        run: Option<PathBuf>,
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Instance id; the first planned instance when omitted.
        #[arg(long)]
        instance: Option<String>,
        /// List instance ids instead.
        #[arg(long)]
        list: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ParseTask {
    Rating,
    Preference,
    Choice,
}

fn summarize(m: &RunManifest) {
    println!(
        "{}: {} instances, {} scored records, {} records written now (profiles included), {} backend calls, {}",
        m.dir.display(),
        m.n_instances,
        m.n_records,
        m.new_records,
        m.backend_calls,
        if m.complete { "complete" } else { "incomplete, run `lfm-bench resume` to continue" }
    );
}

fn cmd_report(dir: &Path, figures: &str, profiles: usize, out: Option<PathBuf>) -> Result<()> {
    let specs = if figures.trim().is_empty() { all_figures() } else { parse_figure_list(figures)? };
    let out = out.unwrap_or_else(|| dir.join("report"));
    let scored: Vec<ScoredInstance> = load_records(dir)?.into_iter().map(|r| r.scored).collect();
    if scored.is_empty() {
        bail!("{} has no scored records", dir.display());
    }
    let metrics = aggregate(&scored, GroupBy::ALL)?;
    let mut files = report::emit_tables(&metrics, &specs, &out)?;
    files.extend(report::emit_charts(&metrics, &specs, &out)?);
    let runtime = log_runtime(dir)?;
    let runtime_path = out.join("runtime.csv");
    write_runtime_csv(&runtime_path, &runtime)?;
    files.push(runtime_path);
    if profiles > 0 {
        let text = report::dump_profiles(dir, profiles)?;
        let path = out.join("profiles.txt");
        std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        print!("{text}");
        files.push(path);
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

const SAMPLE_CONFIG: &str = r#"# Hermetic run against the synthetic world in this directory.
out_dir = "run"
seed = 0
methods = ["lfm", "direct", "nmf", "default"]
tasks = ["rating", "preference", "choice"]
profile_word_limits = [50, 100, 200]
background_sizes = [BACKGROUND_SIZES]
workers = 4

[data]
ratings = "ratings.csv"
movies = "movies.csv"

[pool]
exact_count = RATINGS_PER_USER
n_eval = N_EVAL
n_background = N_BACKGROUND

[sampling]
history_sizes = [10, 20, 30]
items_per_cell = 3

[nmf]
n_factors = 15
n_epochs = 10

[backend]
kind = "mock"
registry = "registry.json"
refusal_rate = 0.0
"#;

fn cmd_synth(out: &Path, config: SynthWorldConfig) -> Result<()> {
    let world = generate_world(&config)?;
    let mut files = write_world(&world, out)?;
    let bg = config.n_background_users;
    let sizes = if bg == 0 { "0".to_string() } else { format!("0, {}, {bg}", bg / 2) };
    let text = SAMPLE_CONFIG
        .replace("BACKGROUND_SIZES", &sizes)
        .replace("RATINGS_PER_USER", &config.ratings_per_user.to_string())
        .replace("N_EVAL", &config.n_users.to_string())
        .replace("N_BACKGROUND", &bg.to_string());
    let path = out.join("config.toml");
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    files.push(path);
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_prompts_dump(run: Option<PathBuf>, config: Option<PathBuf>, instance: Option<String>, list: bool) -> Result<()> {
    let (cfg, profiles) = match (run, config) {
        (Some(dir), _) => (report::load_run_config(&dir)?, load_profiles(&dir).unwrap_or_default()),
        (None, Some(path)) => (ExperimentConfig::from_toml_file(&path)?, Vec::new()),
        (None, None) => bail!("pass --run <dir> or --config <file>"),
    };
    if list {
        for id in planned_instance_ids(&cfg)? {
            println!("{id}");
        }
        return Ok(());
    }
    let id = match instance {
        Some(id) => id,
        None => planned_instance_ids(&cfg)?.into_iter().next().context("configuration plans no instances")?,
    };
    for (stage, prompt) in dump_prompts(&cfg, &id, &profiles)? {
        println!("===== {id} {stage}\n{prompt}\n");
    }
    Ok(())
}

fn cmd_parse(text: Option<String>, task: ParseTask, show_patterns: bool) {
    if show_patterns {
        for (name, re) in patterns() {
            println!("{name}\n  {re}");
        }
        return;
    }
    let text = text.unwrap_or_default();
    let prediction = match task {
        ParseTask::Rating => extract_rating(&text),
        ParseTask::Preference => extract_preference("", &text),
        ParseTask::Choice => extract_choice(&text),
    };
    println!("{}", serde_json::to_string(&prediction).unwrap_or_else(|_| format!("{prediction:?}")));
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, stop_after } => {
            let mut cfg = ExperimentConfig::from_toml_file(&config)?;
            if let Some(out) = out {
                cfg.out_dir = std::path::absolute(out)?;
            }
            let m = runner::run_experiment_with(&cfg, &RunOptions { stop_after, ..Default::default() })?;
            summarize(&m);
        }
        Command::Resume { dir } => summarize(&runner::resume(&dir)?),
        Command::Report { dir, figures, profiles, out } => cmd_report(&dir, &figures, profiles, out)?,
        Command::Synth { out, users, background_users, movies, seed } => cmd_synth(
            &out,
            SynthWorldConfig { n_users: users, n_background_users: background_users, n_movies: movies, seed, ..Default::default() },
        )?,
        Command::Prompts { action: PromptsAction::Dump { run, config, instance, list } } => {
            cmd_prompts_dump(run, config, instance, list)?
        }
        Command::Parse { text, task, show_patterns } => cmd_parse(text, task, show_patterns),
    }
    Ok(())
}
