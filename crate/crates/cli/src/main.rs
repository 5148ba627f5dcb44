//! `modx` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use modx_core::analysis::{rotation_flip_demo, AngleHistogram};
use modx_core::config::{RunConfig, OUTPUT_DIR_KEY};
use modx_core::datastream::PhaseDataset;
use modx_core::encoder::DualEncoderSnapshot;
use modx_core::experiment::{
    alpha_sweep, diagnose, persist_run, render_sweep_table, run_experiment, Benchmark, Diagnostics,
};
use modx_core::report::render_report;
use modx_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "modx", version, about = "Continual dual-encoder contrastive lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the benchmark's datasets as CSV.
    Generate(ExperimentArgs),
    /// Pretrain and run one strategy over all phases.
    Train(ExperimentArgs),
    /// Diagnose drift between two snapshots on a dataset.
    Analyze(AnalyzeArgs),
    /// Run Mod-X for several alphas from one shared pretrained snapshot.
    Sweep(SweepArgs),
    /// Show how rotating one modality alone breaks retrieval.
    DemoRotation(DemoArgs),
    /// Render tables from persisted phase records.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (config key `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config key `seed`.
    #[arg(long)]
    seed: Option<String>,
    /// Config key `strategy`.
    #[arg(long)]
    strategy: Option<String>,
    /// Config key `alpha`.
    #[arg(long)]
    alpha: Option<String>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        for (key, value) in [
            ("seed", &self.seed),
            ("strategy", &self.strategy),
            ("alpha", &self.alpha),
        ] {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if let Some(out) = &self.out {
            cfg.set(OUTPUT_DIR_KEY, &out.to_string_lossy())?;
        }
        cfg.experiment.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Earlier snapshot file.
    #[arg(long)]
    before: PathBuf,
    /// Later snapshot file.
    #[arg(long)]
    after: PathBuf,
    /// Dataset CSV to embed.
    #[arg(long)]
    data: PathBuf,
    /// Require correct retrieval in both directions for ImAV.
    #[arg(long)]
    imav_both_directions: bool,
    /// Also write the diagnostics as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Comma-separated alphas.
    #[arg(long, value_delimiter = ',', default_value = "10,15,20,25,30")]
    alphas: Vec<f64>,
}

#[derive(Args, Debug)]
struct DemoArgs {
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run or sweep directory.
    dir: PathBuf,
}

fn output_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.output_dir
        .as_deref()
        .ok_or_else(|| Error::Config("an output directory is required (--out or output_dir)".into()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join("config.resolved"), &cfg.render())
}

fn generate(args: &ExperimentArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let dir = output_dir(&cfg)?;
    let bench = Benchmark::generate(&cfg.experiment)?;
    echo_config(dir, &cfg)?;
    for d in bench.domains() {
        d.train.write_csv(&dir.join(format!("{}_train.csv", d.name)))?;
        d.test.write_csv(&dir.join(format!("{}_test.csv", d.name)))?;
    }
    for (t, phase) in bench.phases.iter().enumerate() {
        phase.write_csv(&dir.join(format!("phase_{}.csv", t + 1)))?;
    }
    println!("wrote benchmark data to {}", dir.display());
    Ok(())
}

fn train(args: &ExperimentArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let dir = output_dir(&cfg)?;
    echo_config(dir, &cfg)?;
    let run = run_experiment(&cfg.experiment)?;
    persist_run(dir, &run)?;
    for rec in &run.records {
        let line: Vec<String> = rec
            .retrieval
            .iter()
            .map(|(domain, r)| {
                let (i2t, t2i) = r.r1();
                format!("{domain} R@1 i2t {i2t:.4} t2i {t2i:.4}")
            })
            .collect();
        println!("{} phase {}: {}", run.strategy, rec.phase, line.join(", "));
    }
    println!("wrote {} phase records to {}", run.records.len(), dir.display());
    Ok(())
}

fn hist_line(name: &str, h: Option<&AngleHistogram>) -> String {
    match h {
        Some(h) => {
            let cells: Vec<String> = h
                .labels()
                .iter()
                .zip(&h.fractions)
                .map(|(l, f)| format!("{l} {f:.4}"))
                .collect();
            format!("{name:<20} n={:<6} {}\n", h.total(), cells.join("  "))
        }
        None => format!("{name:<20} no correctly retrieved samples\n"),
    }
}

fn render_diagnostics(d: &Diagnostics) -> String {
    let mut s = String::new();
    s.push_str(&hist_line("SAM-delta vision", Some(&d.sam_delta_vision)));
    s.push_str(&hist_line("SAM-delta language", Some(&d.sam_delta_language)));
    s.push_str(&hist_line("RAM vision", Some(&d.ram_vision)));
    s.push_str(&hist_line("RAM language", Some(&d.ram_language)));
    s.push_str(&hist_line("ImAV", d.imav.as_ref()));
    s
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let before = DualEncoderSnapshot::load(&args.before)?;
    let after = DualEncoderSnapshot::load(&args.after)?;
    let data = PhaseDataset::read_csv(&args.data)?;
    if data.is_empty() {
        return Err(Error::Config(format!("{} contains no samples", args.data.display())));
    }
    let diag = diagnose(&before, &after, &data, args.imav_both_directions)?;
    print!("{}", render_diagnostics(&diag));
    if let Some(path) = &args.json {
        write(path, &(serde_json::to_string_pretty(&diag)? + "\n"))?;
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    if args.alphas.is_empty() {
        return Err(Error::Config("--alphas must list at least one value".into()));
    }
    let cfg = args.experiment.resolve()?;
    let dir = output_dir(&cfg)?;
    echo_config(dir, &cfg)?;
    let runs = alpha_sweep(&cfg.experiment, &args.alphas)?;
    for (alpha, run) in args.alphas.iter().zip(&runs) {
        persist_run(&dir.join(format!("alpha_{alpha}")), run)?;
    }
    let table = render_sweep_table(&runs);
    write(&dir.join("sweep.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn demo(args: &DemoArgs) -> Result<()> {
    let demo = rotation_flip_demo(args.dim, args.n, args.seed)?;
    print!("{}", demo.render());
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let (text, json) = render_report(&args.dir)?;
    write(&args.dir.join("report.txt"), &text)?;
    write(&args.dir.join("report.json"), &json)?;
    print!("{text}");
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Analyze(a) => analyze(a),
        Command::Sweep(a) => sweep(a),
        Command::DemoRotation(a) => demo(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
