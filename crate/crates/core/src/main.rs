use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gpexperts::data::{synthetic_gp_data, write_csv};
use gpexperts::harness::{run_benchmark, run_repeated, RunConfig};
use gpexperts::{HyperParams, KernelSpec, Result, Rule, Scheme};

#[derive(Parser)]
#[command(name = "gpexperts", version, about = "Pool Gaussian process experts and benchmark the pooling rules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an ensemble, pool with each rule, and report SNLP/SMSE as JSON.
    Benchmark(BenchArgs),
    /// Write a synthetic GP dataset to CSV (gzipped when the name ends in .gz).
    Synth(SynthArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// JSON run configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Draw a synthetic train/test pair instead of reading files.
    #[arg(long, conflicts_with_all = ["train", "test"])]
    synthetic: bool,
    #[arg(long, requires = "synthetic")]
    n_train: Option<usize>,
    #[arg(long, requires = "synthetic")]
    n_test: Option<usize>,
    #[arg(long, requires = "synthetic")]
    dim: Option<usize>,
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Comma-separated: bcm,rbcm,gpoe,dlop
    #[arg(long, value_delimiter = ',')]
    rules: Option<Vec<Rule>>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    subset_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    dlop_steps: Option<usize>,
    /// Kernel for every expert, e.g. seard or seard+matern32.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    /// Repeat over this many consecutive seeds and report mean ± std.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    d: usize,
    /// Noise standard deviation grows as 1 + |x₁|.
    #[arg(long)]
    hetero: bool,
    #[arg(long, default_value = "seard")]
    kernel: String,
    #[arg(long, default_value_t = 1.0)]
    lengthscale: f64,
    #[arg(long, default_value_t = 1.0)]
    signal_variance: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_variance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn build_config(a: BenchArgs) -> Result<(RunConfig, usize)> {
    let mut c = match &a.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    if a.train.is_some() || a.test.is_some() {
        c.synthetic = None;
    }
    if let Some(v) = a.train {
        c.train_path = Some(v);
    }
    if let Some(v) = a.test {
        c.test_path = Some(v);
    }
    if a.synthetic {
        c.train_path = None;
        c.test_path = None;
        let mut s = c.synthetic.take().unwrap_or_default();
        s.n_train = a.n_train.unwrap_or(s.n_train);
        s.n_test = a.n_test.unwrap_or(s.n_test);
        s.dim = a.dim.unwrap_or(s.dim);
        c.synthetic = Some(s);
    }
    c.scheme = a.scheme.unwrap_or(c.scheme);
    c.rules = a.rules.unwrap_or(c.rules);
    c.n_experts = a.experts.unwrap_or(c.n_experts);
    c.subset_size = a.subset_size.unwrap_or(c.subset_size);
    c.seed = a.seed.unwrap_or(c.seed);
    c.lambda = a.lambda.unwrap_or(c.lambda);
    c.dlop_steps = a.dlop_steps.unwrap_or(c.dlop_steps);
    c.kernel_default = a.kernel.unwrap_or(c.kernel_default);
    c.threads = a.threads.or(c.threads);
    c.output_path = a.out.or(c.output_path);
    c.validate()?;
    Ok((c, a.seeds))
}

fn benchmark(a: BenchArgs) -> Result<()> {
    let (config, seeds) = build_config(a)?;
    let to_stdout = config.output_path.is_none();
    let json = if seeds > 1 {
        let agg = run_repeated(&config, seeds)?;
        for r in &agg.rules {
            eprintln!(
                "{:>5}  snlp {:+.4} ± {:.4}  smse {:.4} ± {:.4}  predict {:.3}s",
                r.rule.name(), r.snlp.mean, r.snlp.std, r.smse.mean, r.smse.std, r.predict_s.mean
            );
        }
        for f in &agg.failed_seeds {
            eprintln!("seed {} failed: {}", f.seed, f.error);
        }
        serde_json::to_string_pretty(&agg)?
    } else {
        let rep = run_benchmark(&config)?;
        eprintln!("train {:.3}s, expert predictions {:.3}s", rep.train_s, rep.map_s);
        for m in &rep.rules {
            eprintln!(
                "{:>5}  snlp {:+.4}  smse {:.4}  predict {:.3}s  failures {}",
                m.rule.name(), m.snlp, m.smse, m.wall_times.predict_s, m.failures
            );
        }
        serde_json::to_string_pretty(&rep)?
    };
    if to_stdout {
        println!("{json}");
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = KernelSpec::parse(&a.kernel, a.d)?;
    let params = HyperParams::uniform(&spec, a.lengthscale, a.signal_variance, a.noise_variance);
    let ds = synthetic_gp_data(a.n, a.d, &spec, &params, a.hetero, a.seed)?;
    write_csv(&a.out, &ds)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Benchmark(a) => benchmark(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
