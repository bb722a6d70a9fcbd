//! Subcommands of the `reftrack` binary. Each returns the text it prints on
//! success; errors carry their exit code via [`exit_code`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use reftrack::dataset::{compute_stats, read_benchmark, Benchmark};
use reftrack::generate::{generate_benchmark, write_split, BenchmarkConfig};
use reftrack::nn::{primitive_suite, PRIMITIVE_TOL};
use reftrack::refeval::evaluate_benchmark;
use reftrack::tracker::{
    composite_suite, load_checkpoint, predict_benchmark, prepare, save_checkpoint, tolerance, train, Model,
    RunConfig,
};
use reftrack::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "reftrack", version, about = "Referring multi-object tracking lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a train/test benchmark from a scene config.
    Generate(GenerateArgs),
    /// Print dataset statistics of a benchmark (or of both halves of a split).
    Stats(StatsArgs),
    /// Train the tracker and write a checkpoint.
    Train(TrainArgs),
    /// Track every prompt of a benchmark and write prediction files.
    Track(TrackArgs),
    /// Score predictions against a benchmark.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Benchmark TOML (world, prompts, split sizes).
    #[arg(long)]
    pub config: PathBuf,
    /// Base world seed; video k uses seed + k.
    #[arg(long)]
    pub seed: u64,
    /// Output root; receives `train/` and `test/`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Benchmark directory, or a split root holding `train/` and `test/`.
    pub root: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training benchmark directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Run TOML with `[tracker]` and `[train]` tables; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Checkpoint path; the model config lands beside it as `.toml`, the
    /// per-step losses as `.loss.tsv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Benchmark directory to track.
    #[arg(long)]
    pub data: PathBuf,
    /// Prediction root; one `<video>/<prompt>.txt` per prompt.
    #[arg(long)]
    pub out: PathBuf,
    /// Keep only prompts whose id or text contains this string.
    #[arg(long)]
    pub prompt: Option<String>,
    /// Overrides the checkpoint's referring threshold.
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Also write `key = value` metrics here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random points per primitive.
    #[arg(long, default_value_t = 10)]
    pub points: usize,
}

/// 2 for filesystem failures, 1 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Stats(a) => stats(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Track(a) => track(&a),
        Command::Eval(a) => eval(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        })
    }
}

fn read_nonempty(path: &Path) -> Result<Benchmark> {
    require_dir(path)?;
    let b = read_benchmark(path)?;
    if b.videos.is_empty() {
        return Err(Error::Validation(format!("{} holds no videos", path.display())));
    }
    Ok(b)
}

fn generate(a: &GenerateArgs) -> Result<String> {
    let mut cfg = BenchmarkConfig::from_file(&a.config)?;
    cfg.world.seed = a.seed;
    let split = generate_benchmark(&cfg)?;
    write_split(&a.out, &split)?;
    Ok(format!(
        "wrote {} train videos ({} prompts) and {} test videos ({} prompts) to {}\n",
        split.train.videos.len(),
        split.train.prompt_count(),
        split.test.videos.len(),
        split.test.prompt_count(),
        a.out.display()
    ))
}

fn stats(a: &StatsArgs) -> Result<String> {
    let (train, test) = (a.root.join("train"), a.root.join("test"));
    if train.is_dir() && test.is_dir() {
        let mut s = String::new();
        for (name, dir) in [("train", train), ("test", test)] {
            let _ = writeln!(s, "[{name}]");
            s.push_str(&compute_stats(&read_benchmark(&dir)?).table());
        }
        return Ok(s);
    }
    Ok(compute_stats(&read_nonempty(&a.root)?).table())
}

fn train_cmd(a: &TrainArgs) -> Result<String> {
    let mut run = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    run.train.seed = a.seed;
    if let Some(s) = a.steps {
        run.train.steps = s;
    }
    let bench = read_nonempty(&a.data)?;
    let videos = bench
        .videos
        .iter()
        .map(|v| prepare(v, &run.tracker))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::new(run.tracker.clone())?;
    let report = train(&mut model, &videos, &run.train)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.into(),
            source: e,
        })?;
    }
    save_checkpoint(&model, &a.out)?;
    let mut log = String::from("step\tloss\n");
    for (i, l) in report.losses.iter().enumerate() {
        let _ = writeln!(log, "{}\t{l:.9}", i + 1);
    }
    let log_path = a.out.with_extension("loss.tsv");
    fs::write(&log_path, log).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    log::info!("trained {} steps in {:.1}s", report.steps, report.seconds);
    let tail = (report.steps / 10).max(1);
    Ok(format!(
        "trained {} steps; final loss {:.4}; checkpoint {}\n",
        report.steps,
        report.mean_loss(report.steps.saturating_sub(tail), report.steps),
        a.out.display()
    ))
}

fn track(a: &TrackArgs) -> Result<String> {
    let mut model = load_checkpoint(&a.checkpoint)?;
    if let Some(b) = a.beta {
        model.config.beta_ref = b;
        model.config.validate()?;
    }
    let mut bench = read_nonempty(&a.data)?;
    if let Some(f) = &a.prompt {
        for v in &mut bench.videos {
            let keep: Vec<bool> = v.prompts.iter().map(|p| p.id.contains(f.as_str()) || p.text.contains(f.as_str())).collect();
            let mut k = keep.iter();
            v.prompts.retain(|_| *k.next().expect("parallel"));
            let mut k = keep.iter();
            v.referrals.retain(|_| *k.next().expect("parallel"));
        }
        if bench.prompt_count() == 0 {
            return Err(Error::Validation(format!("no prompt matches {f:?}")));
        }
    }
    let n = predict_benchmark(&model, &bench, &a.out)?;
    Ok(format!("wrote {n} prediction files to {}\n", a.out.display()))
}

fn eval(a: &EvalArgs) -> Result<String> {
    let bench = read_nonempty(&a.data)?;
    require_dir(&a.pred)?;
    let report = evaluate_benchmark(&bench, &a.pred)?;
    if let Some(out) = &a.out {
        fs::write(out, report.key_values()).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
    }
    Ok(report.table())
}

fn gradcheck(a: &GradcheckArgs) -> Result<String> {
    let mut lines = String::new();
    let mut failed = 0;
    let mut emit = |name: &str, err: f64, tol: f64| {
        let ok = err < tol;
        failed += usize::from(!ok);
        let _ = writeln!(lines, "{} {name:<24} rel_err {err:.3e} (tol {tol:.0e})", if ok { "PASS" } else { "FAIL" });
    };
    for e in primitive_suite(a.seed, a.points)? {
        emit(e.name, e.report.max_rel_err, PRIMITIVE_TOL);
    }
    for e in composite_suite(a.seed)? {
        emit(e.name, e.report.max_rel_err, tolerance(e.name));
    }
    if failed > 0 {
        // the listing is the useful part; the error stays one line
        print!("{lines}");
        return Err(Error::Validation(format!("{failed} gradient checks failed")));
    }
    Ok(lines)
}
