//! Benchmark orchestration: load or synthesize data, train one ensemble,
//! evaluate every requested rule on the same expert predictions, and report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combine::{combine, mean_prior_precision, CombinedPrediction, DlopConfig, Rule};
use crate::data::{self, Dataset};
use crate::ensemble::{expert_predictions, train_ensemble};
use crate::error::{Error, Result};
use crate::gp::ExpertPrediction;
use crate::kernel::{HyperParams, KernelSpec};
use crate::metrics::{smse, snlp, MetricsReport, WallTimes};
use crate::optimize::OptConfig;
use crate::partition::{Scheme, SchemeConfig};

/// Parameters of a synthetic GP dataset drawn jointly and split into train
/// and test parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub kernel: String,
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub heteroscedastic: bool,
    /// Fixed data seed; when absent the run seed is used.
    pub seed: Option<u64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 4000,
            n_test: 1000,
            dim: 2,
            kernel: "seard".into(),
            lengthscale: 1.0,
            signal_variance: 1.0,
            noise_variance: 0.1,
            heteroscedastic: true,
            seed: None,
        }
    }
}

impl SyntheticConfig {
    /// Draws `n_train + n_test` points and splits them in order.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::input("synthetic n_train and n_test must be positive"));
        }
        let spec = KernelSpec::parse(&self.kernel, self.dim)?;
        let params = HyperParams::uniform(&spec, self.lengthscale, self.signal_variance, self.noise_variance);
        let all = data::synthetic_gp_data(
            self.n_train + self.n_test,
            self.dim,
            &spec,
            &params,
            self.heteroscedastic,
            self.seed.unwrap_or(seed),
        )?;
        all.split(self.n_train)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(alias = "train")]
    pub train_path: Option<PathBuf>,
    #[serde(alias = "test")]
    pub test_path: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
    pub scheme: Scheme,
    pub rules: Vec<Rule>,
    #[serde(alias = "experts")]
    pub n_experts: usize,
    pub subset_size: usize,
    pub seed: u64,
    pub lambda: f64,
    pub dlop_steps: usize,
    pub kernel_default: String,
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
    #[serde(alias = "out")]
    pub output_path: Option<PathBuf>,
    pub optimizer: OptConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_path: None,
            test_path: None,
            synthetic: None,
            scheme: Scheme::Sod,
            rules: Rule::ALL.to_vec(),
            n_experts: 128,
            subset_size: 512,
            seed: 0,
            lambda: 1.0,
            dlop_steps: 1,
            kernel_default: "seard".into(),
            threads: None,
            output_path: None,
            optimizer: OptConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.rules.is_empty() {
            return Err(Error::input("at least one rule is required"));
        }
        match (&self.train_path, &self.test_path, &self.synthetic) {
            (Some(_), Some(_), None) | (None, None, Some(_)) => {}
            (None, None, None) => {
                return Err(Error::input("give either train/test paths or a synthetic block"))
            }
            (_, _, Some(_)) => return Err(Error::input("data paths and synthetic block are exclusive")),
            _ => return Err(Error::input("train and test paths must be given together")),
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::input(format!("lambda must be finite and nonnegative, got {}", self.lambda)));
        }
        if self.threads == Some(0) {
            return Err(Error::input("threads must be at least 1"));
        }
        self.scheme_config().validate()
    }

    pub fn scheme_config(&self) -> SchemeConfig {
        SchemeConfig {
            scheme: self.scheme,
            subset_size: self.subset_size,
            n_experts: self.n_experts,
            seed: self.seed,
        }
    }

    pub fn dlop_config(&self) -> DlopConfig {
        DlopConfig { lambda: self.lambda, steps: self.dlop_steps }
    }

    /// Loads or draws the raw (unstandardized) train and test sets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        match (&self.train_path, &self.test_path, &self.synthetic) {
            (Some(tr), Some(te), _) => Ok((data::load_csv(tr)?, data::load_csv(te)?)),
            (_, _, Some(syn)) => syn.generate(self.seed),
            _ => unreachable!("validated above"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub n_experts: usize,
    /// Experts refitted from default hyperparameters after a failed optimization.
    pub fallback_experts: usize,
    pub train_s: f64,
    /// Time for every expert to predict at every test point, shared by all rules.
    pub map_s: f64,
    pub rules: Vec<MetricsReport>,
}

impl RunReport {
    pub fn rule(&self, rule: Rule) -> Option<&MetricsReport> {
        self.rules.iter().find(|r| r.rule == rule)
    }
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        b = b.num_threads(t);
    }
    let pool = b
        .build()
        .map_err(|e| Error::input(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Pools one rule at every test point. Committee rules whose precision turns
/// nonpositive are replaced by the prior at that point and counted.
pub fn reduce(
    rule: Rule,
    grid: &[Vec<ExpertPrediction>],
    dlop: &DlopConfig,
) -> Result<(Vec<CombinedPrediction>, usize)> {
    let out: Vec<(CombinedPrediction, bool)> = grid
        .par_iter()
        .enumerate()
        .map(|(j, preds)| match combine(rule, preds, dlop) {
            Ok(c) => Ok((c, false)),
            Err(Error::Numerical(_)) if matches!(rule, Rule::Bcm | Rule::Rbcm) => {
                let prior = CombinedPrediction {
                    mean: 0.0,
                    variance: 1.0 / mean_prior_precision(preds),
                    rule,
                    weights: None,
                };
                Ok((prior, true))
            }
            Err(e) => Err(Error::numerical(format!("{rule} at test point {j}: {e}"))),
        })
        .collect::<Result<_>>()?;
    let failures = out.iter().filter(|(_, f)| *f).count();
    Ok((out.into_iter().map(|(c, _)| c).collect(), failures))
}

/// Runs one benchmark on already-loaded raw data. Both sets are standardized
/// with the training moments, and metrics are computed in that space.
pub fn run_on_data(config: &RunConfig, train: &Dataset, test: &Dataset) -> Result<RunReport> {
    if train.dim() != test.dim() {
        return Err(Error::input(format!(
            "train has {} inputs but test has {}",
            train.dim(),
            test.dim()
        )));
    }
    let kernel = KernelSpec::parse(&config.kernel_default, train.dim())?;
    let (train, test) = data::standardize(train, test)?;
    let scheme_cfg = config.scheme_config();
    let dlop = config.dlop_config();

    with_pool(config.threads, || {
        let t0 = Instant::now();
        let ensemble = train_ensemble(&train, &scheme_cfg, &kernel, &config.optimizer)?;
        let train_s = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let grid = expert_predictions(&ensemble, &test.x)?;
        let map_s = t0.elapsed().as_secs_f64();

        let y_test = test.y.as_slice();
        let (ym, yv) = (0.0, 1.0);
        let mut rules = Vec::with_capacity(config.rules.len());
        for &rule in &config.rules {
            let t0 = Instant::now();
            let (preds, failures) = reduce(rule, &grid, &dlop)?;
            let reduce_s = t0.elapsed().as_secs_f64();
            let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
            rules.push(MetricsReport {
                rule,
                scheme: config.scheme,
                snlp: snlp(&preds, y_test, ym, yv)?,
                smse: smse(&means, y_test, ym, yv)?,
                n_test: test.len(),
                wall_times: WallTimes { train_s, predict_s: map_s + reduce_s, reduce_s },
                failures,
            });
        }
        Ok(RunReport {
            config: config.clone(),
            n_train: train.len(),
            n_test: test.len(),
            input_dim: train.dim(),
            n_experts: ensemble.len(),
            fallback_experts: ensemble.fallbacks.len(),
            train_s,
            map_s,
            rules,
        })
    })?
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads the configured data, runs, and writes the report to `output_path`
/// when one is set.
pub fn run_benchmark(config: &RunConfig) -> Result<RunReport> {
    let (train, test) = config.load_data()?;
    let report = run_on_data(config, &train, &test)?;
    if let Some(path) = &config.output_path {
        write_json(path, &report)?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Arithmetic mean and sample (n − 1) standard deviation; a single value
    /// has std 0.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleAggregate {
    pub rule: Rule,
    pub snlp: MeanStd,
    pub smse: MeanStd,
    pub predict_s: MeanStd,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub config: RunConfig,
    pub n_seeds: usize,
    pub failed_seeds: Vec<SeedFailure>,
    pub rules: Vec<RuleAggregate>,
    pub runs: Vec<RunReport>,
}

/// Runs seeds `seed..seed + n_seeds` and aggregates per rule over the seeds
/// that succeeded.
pub fn run_repeated(config: &RunConfig, n_seeds: usize) -> Result<AggregateReport> {
    if n_seeds == 0 {
        return Err(Error::input("n_seeds must be at least 1"));
    }
    config.validate()?;
    let mut runs = Vec::new();
    let mut failed_seeds = Vec::new();
    for seed in config.seed..config.seed + n_seeds as u64 {
        let cfg = RunConfig { seed, output_path: None, ..config.clone() };
        match config.load_data_for(seed).and_then(|(tr, te)| run_on_data(&cfg, &tr, &te)) {
            Ok(r) => runs.push(r),
            Err(e) => failed_seeds.push(SeedFailure { seed, error: e.to_string() }),
        }
    }
    if runs.is_empty() {
        return Err(Error::numerical(format!(
            "all {n_seeds} seeds failed; first error: {}",
            failed_seeds[0].error
        )));
    }
    let report = AggregateReport {
        config: config.clone(),
        n_seeds,
        failed_seeds,
        rules: aggregate(&config.rules, &runs),
        runs,
    };
    if let Some(path) = &config.output_path {
        write_json(path, &report)?;
    }
    Ok(report)
}

impl RunConfig {
    fn load_data_for(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        RunConfig { seed, ..self.clone() }.load_data()
    }
}

pub fn aggregate(rules: &[Rule], runs: &[RunReport]) -> Vec<RuleAggregate> {
    rules
        .iter()
        .map(|&rule| {
            let rows: Vec<&MetricsReport> = runs.iter().filter_map(|r| r.rule(rule)).collect();
            let pick = |f: fn(&MetricsReport) -> f64| MeanStd::of(&rows.iter().map(|m| f(m)).collect::<Vec<_>>());
            RuleAggregate {
                rule,
                snlp: pick(|m| m.snlp),
                smse: pick(|m| m.smse),
                predict_s: pick(|m| m.wall_times.predict_s),
                failures: rows.iter().map(|m| m.failures).sum(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            synthetic: Some(SyntheticConfig { n_train: 300, n_test: 60, ..Default::default() }),
            n_experts: 4,
            subset_size: 64,
            seed: 11,
            threads: Some(1),
            optimizer: OptConfig { max_iters: 40, restarts: 0, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(small().validate().is_ok());
        let mut c = small();
        c.rules.clear();
        assert!(c.validate().is_err());
        let mut c = small();
        c.train_path = Some("a.csv".into());
        assert!(c.validate().is_err());
        let mut c = small();
        c.synthetic = None;
        assert!(c.validate().is_err());
        let mut c = small();
        c.lambda = f64::NAN;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_accepts_short_keys() {
        let c: RunConfig = serde_json::from_str(
            r#"{"train": "a.csv", "test": "b.csv", "scheme": "tree", "rules": ["gpoe", "dlop"],
                "experts": 16, "subset_size": 64, "lambda": 0.5, "out": "r.json"}"#,
        )
        .unwrap();
        assert_eq!(c.scheme, Scheme::Tree);
        assert_eq!(c.rules, vec![Rule::Gpoe, Rule::Dlop]);
        assert_eq!(c.n_experts, 16);
        assert_eq!(c.dlop_steps, 1);
        assert_eq!(c.kernel_default, "seard");
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"rules": ["nope"]}"#).is_err());
    }

    #[test]
    fn rules_share_map_phase_and_report_all() {
        let r = run_benchmark(&small()).unwrap();
        assert_eq!(r.rules.len(), 4);
        assert_eq!(r.n_experts, 4);
        for m in &r.rules {
            assert!(m.snlp.is_finite() && m.smse.is_finite());
            assert_eq!(m.wall_times.train_s, r.train_s);
            assert!(m.wall_times.predict_s >= r.map_s);
        }
    }

    #[test]
    fn thread_count_does_not_change_metrics() {
        let a = run_benchmark(&small()).unwrap();
        let b = run_benchmark(&RunConfig { threads: Some(3), ..small() }).unwrap();
        for (x, y) in a.rules.iter().zip(&b.rules) {
            assert_eq!(x.snlp.to_bits(), y.snlp.to_bits());
            assert_eq!(x.smse.to_bits(), y.smse.to_bits());
            assert_eq!(x.failures, y.failures);
        }
    }

    #[test]
    fn single_seed_aggregate_has_zero_std() {
        let agg = run_repeated(&small(), 1).unwrap();
        let single = run_benchmark(&small()).unwrap();
        for (a, s) in agg.rules.iter().zip(&single.rules) {
            assert_eq!(a.snlp.mean, s.snlp);
            assert_eq!(a.snlp.std, 0.0);
            assert_eq!(a.smse.mean, s.smse);
        }
    }

    #[test]
    fn aggregate_is_mean_of_runs() {
        let cfg = RunConfig { rules: vec![Rule::Gpoe, Rule::Dlop], ..small() };
        let agg = run_repeated(&cfg, 3).unwrap();
        assert_eq!(agg.runs.len(), 3);
        assert!(agg.failed_seeds.is_empty());
        for a in &agg.rules {
            let vals: Vec<f64> = agg.runs.iter().map(|r| r.rule(a.rule).unwrap().snlp).collect();
            let mean = vals.iter().sum::<f64>() / 3.0;
            assert!((a.snlp.mean - mean).abs() < 1e-12);
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
            assert!((a.snlp.std - var.sqrt()).abs() < 1e-12);
        }
        let again = run_repeated(&cfg, 3).unwrap();
        for (a, b) in agg.rules.iter().zip(&again.rules) {
            assert_eq!((a.snlp, a.smse), (b.snlp, b.smse));
        }
    }

    #[test]
    fn failed_seed_is_recorded() {
        // subset larger than the data makes every seed fail
        let cfg = RunConfig { subset_size: 1000, ..small() };
        assert!(run_repeated(&cfg, 2).is_err());
    }

    #[test]
    fn committee_failures_fall_back_to_prior() {
        // experts no more certain than the prior drive the BCM precision negative
        let p = ExpertPrediction { mean: 1.0, variance: 1.0, prior_variance: 0.2 };
        let grid = vec![vec![p; 3], vec![ExpertPrediction { variance: 0.05, ..p }; 3]];
        let (out, fails) = reduce(Rule::Bcm, &grid, &DlopConfig::default()).unwrap();
        assert_eq!(fails, 1);
        assert_eq!(out[0].mean, 0.0);
        assert!((out[0].variance - 0.2).abs() < 1e-15);
        assert!(out[1].variance > 0.0 && out[1].mean != 0.0);
    }
}
