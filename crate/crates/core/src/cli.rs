//! Command-line front end: configuration, training loops and reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::data::{load_idx, make_four_digit, synth_classification, synth_ranking, IdxFile, RankingBatch};
use crate::diffsort::{self, GroundTruthPermutation};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::model::Mlp;
use crate::network::{NetworkKind, SortingNetwork};
use crate::optim::{
    kendall_tau, newton_loss_grad_with, resgro_target, CurvatureKind, CurvatureMatrix, LossKind,
    NewtonLossSpec, NoiseKind, OptimizerKind, OptimizerState, ResgroSpec, SecondOrderLoss, DEFAULT_DAMPING,
};
use crate::props::{self, PropsOptions};
use crate::sigmoid::{SigmoidKind, SigmoidSpec, DEFAULT_ART_EPS, DEFAULT_ART_LAMBDA};
use crate::topk::{TopKConfig, TopKDistribution, TopKLoss};

const EVAL_SALT: u64 = 0xe7a1_5eed;
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "diffsort", version, about = "Differentiable sorting networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an MLP scorer from ranking supervision.
    TrainRank(CommonArgs),
    /// Train a classifier with the top-k loss.
    TrainTopk(CommonArgs),
    /// Run the invariant suites.
    Props(CommonArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(CommonArgs),
    /// Print layer and comparator counts.
    BenchLayers {
        #[command(flatten)]
        common: CommonArgs,
        /// Also print every comparator of the selected network.
        #[arg(long)]
        dump: bool,
    },
}

#[derive(Args, Debug, Default, Clone)]
pub struct CommonArgs {
    /// key=value configuration file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    /// logistic, logistic_art, reciprocal, cauchy or optimal.
    #[arg(long)]
    pub sigmoid: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// odd_even or bitonic.
    #[arg(long)]
    pub network: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Output directory for metrics.csv and summary.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub mnist_dir: Option<PathBuf>,
    /// Train on negative Kendall's tau with RESGRO targets.
    #[arg(long)]
    pub resgro: bool,
    /// Train on the Newton-loss surrogate of the ranking loss.
    #[arg(long)]
    pub newton: bool,
    /// Write the relaxed permutation matrix of the first held-out tuple as CSV.
    #[arg(long, value_name = "PATH")]
    pub dump_p: Option<PathBuf>,
    /// Extra configuration entries, same keys as the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    TrainRank,
    TrainTopk,
    Props,
    Gradcheck,
    BenchLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    RankingCe,
    Resgro,
    Newton,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "ranking_ce" => Ok(Objective::RankingCe),
            "resgro" => Ok(Objective::Resgro),
            "newton" => Ok(Objective::Newton),
            _ => Err(Error::InvalidParameter(format!("unknown objective {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub task: Task,
    pub network: NetworkKind,
    pub sigmoid: SigmoidKind,
    /// `None` selects [`default_beta`] for the sigmoid.
    pub beta: Option<f64>,
    pub art_lambda: f64,
    pub art_eps: f64,
    pub n: usize,
    /// Feature dimension of the synthetic tasks.
    pub d: usize,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub objective: Objective,
    pub curvature: CurvatureKind,
    pub damping: f64,
    pub resgro_k: usize,
    pub resgro_m: usize,
    pub resgro_sigma: f64,
    pub resgro_noise: NoiseKind,
    pub mnist_dir: Option<PathBuf>,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_tuples: usize,
    pub out: Option<PathBuf>,
    /// When false the wall_time column is written as 0.
    pub record_time: bool,
    pub dump_p: Option<PathBuf>,
    pub topk_classes: usize,
    pub topk_dist: Vec<f64>,
    pub topk_m: Option<usize>,
    pub topk_mixture: bool,
    pub topk_temperature: f64,
    pub props_scale: f64,
    pub gradcheck_cases: usize,
}

/// Inverse temperatures used for `n = 5` odd-even ranking.
pub fn default_beta(kind: SigmoidKind) -> f64 {
    match kind {
        SigmoidKind::Logistic => 30.0,
        SigmoidKind::LogisticArt => 20.0,
        SigmoidKind::Reciprocal => 60.0,
        SigmoidKind::Cauchy => 51.0 * std::f64::consts::PI,
        SigmoidKind::Optimal => 20.0,
    }
}

impl RunConfig {
    pub fn new(task: Task) -> Self {
        RunConfig {
            task,
            network: NetworkKind::OddEven,
            sigmoid: SigmoidKind::Cauchy,
            beta: None,
            art_lambda: DEFAULT_ART_LAMBDA,
            art_eps: DEFAULT_ART_EPS,
            n: 5,
            d: 16,
            hidden: vec![64, 64],
            optimizer: OptimizerKind::AdaptiveMoments,
            lr: 10f64.powf(-3.5),
            objective: Objective::RankingCe,
            curvature: CurvatureKind::EmpiricalFisher,
            damping: DEFAULT_DAMPING,
            resgro_k: 64,
            resgro_m: 64,
            resgro_sigma: 0.1,
            resgro_noise: NoiseKind::Gaussian,
            mnist_dir: None,
            steps: 20_000,
            batch: 64,
            seed: 0,
            eval_every: 500,
            eval_tuples: 1000,
            out: None,
            record_time: true,
            dump_p: None,
            topk_classes: 10,
            topk_dist: vec![0.5, 0.0, 0.0, 0.0, 0.5],
            topk_m: None,
            topk_mixture: false,
            topk_temperature: 1.0,
            props_scale: 1.0,
            gradcheck_cases: 50,
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or_else(|| default_beta(self.sigmoid))
    }

    pub fn sigmoid_spec(&self) -> Result<SigmoidSpec> {
        SigmoidSpec::with_art(self.sigmoid, self.beta(), self.art_lambda, self.art_eps)
    }

    /// Applies one configuration entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidParameter(format!("{key}: cannot parse {v:?}")))
        }
        fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        match key {
            "network" => self.network = value.parse()?,
            "sigmoid" => self.sigmoid = value.parse()?,
            "beta" => self.beta = Some(num(key, value)?),
            "art.lambda" => self.art_lambda = num(key, value)?,
            "art.eps" => self.art_eps = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "hidden" => self.hidden = if value.is_empty() { Vec::new() } else { list(key, value)? },
            "optimizer" => self.optimizer = value.parse()?,
            "lr" => self.lr = num(key, value)?,
            "objective" => self.objective = value.parse()?,
            "curvature" => self.curvature = value.parse()?,
            "damping" => self.damping = num(key, value)?,
            "resgro.k" => self.resgro_k = num(key, value)?,
            "resgro.m" => self.resgro_m = num(key, value)?,
            "resgro.sigma" => self.resgro_sigma = num(key, value)?,
            "resgro.noise" => self.resgro_noise = value.parse()?,
            "mnist_dir" => self.mnist_dir = Some(PathBuf::from(value)),
            "steps" => self.steps = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "eval_tuples" => self.eval_tuples = num(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            "record_time" => self.record_time = num(key, value)?,
            "dump_p" => self.dump_p = Some(PathBuf::from(value)),
            "topk.classes" => self.topk_classes = num(key, value)?,
            "topk.dist" => self.topk_dist = list(key, value)?,
            "topk.m" => self.topk_m = Some(num(key, value)?),
            "topk.mixture" => self.topk_mixture = num(key, value)?,
            "topk.temperature" => self.topk_temperature = num(key, value)?,
            "props.scale" => self.props_scale = num(key, value)?,
            "gradcheck.cases" => self.gradcheck_cases = num(key, value)?,
            _ => return Err(Error::InvalidParameter(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.sigmoid_spec()?;
        if self.steps == 0 || self.batch == 0 || self.eval_every == 0 || self.eval_tuples == 0 {
            return Err(Error::InvalidParameter(
                "steps, batch, eval_every and eval_tuples must be > 0".into(),
            ));
        }
        if self.n == 0 || self.d == 0 {
            return Err(Error::InvalidParameter("n and d must be > 0".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidParameter("hidden widths must be > 0".into()));
        }
        OptimizerState::new(self.optimizer, self.lr)?;
        if self.task == Task::TrainRank {
            SortingNetwork::build(self.network, self.n)?;
            if self.objective == Objective::Resgro {
                self.resgro_spec()?;
            }
            if self.objective == Objective::Newton && !(self.damping >= 0.0 && self.damping.is_finite()) {
                return Err(Error::InvalidParameter(format!("damping must be >= 0, got {}", self.damping)));
            }
        }
        if self.task == Task::TrainTopk {
            self.topk_loss()?;
        }
        Ok(())
    }

    fn resgro_spec(&self) -> Result<ResgroSpec> {
        ResgroSpec::new(self.resgro_k, self.resgro_m, self.resgro_sigma, self.resgro_noise)
    }

    fn topk_loss(&self) -> Result<TopKLoss> {
        let mut config = TopKConfig::new(
            self.topk_m.unwrap_or(TopKConfig::DEFAULT_M.min(self.topk_classes)),
            self.sigmoid_spec()?,
        );
        config.network = self.network;
        config.mixture = self.topk_mixture;
        config.temperature = self.topk_temperature;
        TopKLoss::new(config, TopKDistribution::new(self.topk_dist.clone())?, self.topk_classes)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidParameter(format!("config line {}: expected key=value", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

impl CommonArgs {
    /// Config file first, then `--set` entries, then dedicated flags.
    pub fn resolve(&self, task: Task) -> Result<RunConfig> {
        let mut cfg = RunConfig::new(task);
        if let Some(path) = &self.config {
            for (k, v) in parse_config(&fs::read_to_string(path)?)? {
                cfg.set(&k, &v)?;
            }
        }
        for entry in &self.set {
            let (k, v) = entry
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("--set expects KEY=VALUE, got {entry:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = &self.sigmoid {
            cfg.sigmoid = v.parse()?;
        }
        if let Some(v) = self.beta {
            cfg.beta = Some(v);
        }
        if let Some(v) = &self.network {
            cfg.network = v.parse()?;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = &self.mnist_dir {
            cfg.mnist_dir = Some(v.clone());
        }
        if let Some(v) = &self.dump_p {
            cfg.dump_p = Some(v.clone());
        }
        match (self.resgro, self.newton) {
            (true, true) => {
                return Err(Error::InvalidParameter("--resgro and --newton are exclusive".into()))
            }
            (true, false) => cfg.objective = Objective::Resgro,
            (false, true) => cfg.objective = Objective::Newton,
            (false, false) => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write) -> Result<i32>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return Ok(code);
        }
    };
    let config = match &cli.command {
        Command::TrainRank(a) => a.resolve(Task::TrainRank)?,
        Command::TrainTopk(a) => a.resolve(Task::TrainTopk)?,
        Command::Props(a) => a.resolve(Task::Props)?,
        Command::Gradcheck(a) => a.resolve(Task::Gradcheck)?,
        Command::BenchLayers { common, dump } => {
            let explicit = common.n.is_some() || common.network.is_some();
            let cfg = common.resolve(Task::BenchLayers)?;
            return bench_layers(&cfg, explicit, *dump, out);
        }
    };
    run(&config, out)
}

/// Runs a resolved configuration.
pub fn run(config: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    match config.task {
        Task::TrainRank => train_rank(config, out).map(|_| 0),
        Task::TrainTopk => train_topk(config, out).map(|_| 0),
        Task::Props => run_props(config, out),
        Task::Gradcheck => run_gradcheck(config, out),
        Task::BenchLayers => bench_layers(config, true, false, out),
    }
}

fn bench_layers(config: &RunConfig, explicit: bool, dump: bool, out: &mut dyn Write) -> Result<i32> {
    writeln!(out, "network,n,layers,comparators")?;
    let rows: Vec<(NetworkKind, usize)> = if explicit {
        vec![(config.network, config.n)]
    } else {
        [NetworkKind::OddEven, NetworkKind::Bitonic]
            .into_iter()
            .flat_map(|k| (1..=10).map(move |p| (k, 1usize << p)))
            .collect()
    };
    for (kind, n) in rows {
        let net = SortingNetwork::build(kind, n)?;
        writeln!(out, "{},{},{},{}", kind, n, net.num_layers(), net.num_comparators())?;
        if dump {
            write!(out, "{}", net.dump_layers())?;
        }
    }
    Ok(0)
}

fn run_props(config: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let results = props::run_all(&PropsOptions {
        seed: config.seed,
        scale: config.props_scale,
    });
    let mut failed = 0;
    for r in &results {
        writeln!(
            out,
            "{} {} ({}; {:.2}s)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail,
            r.seconds
        )?;
        failed += usize::from(!r.passed);
    }
    writeln!(out, "{} of {} suites passed", results.len() - failed, results.len())?;
    Ok(i32::from(failed > 0))
}

fn run_gradcheck(config: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let spec = config.sigmoid_spec()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cases = config.gradcheck_cases;
    let reports = [
        gradcheck::check_diffsort(&mut rng, config.network, config.n, &spec, cases)?,
        gradcheck::check_topk(&mut rng, config.n.max(2), &spec, cases)?,
        gradcheck::check_model(&mut rng, &[4, 8, 1], cases)?,
    ];
    writeln!(out, "module,cases,skipped,max_rel_err")?;
    let mut ok = true;
    for r in &reports {
        writeln!(out, "{},{},{},{:e}", r.module, r.cases, r.skipped, r.max_rel_err)?;
        ok &= r.max_rel_err < GRADCHECK_TOLERANCE && r.cases >= cases;
    }
    Ok(i32::from(!ok))
}

/// Where ranking tuples come from.
enum RankSource {
    Synthetic { d: usize },
    Mnist { train: (IdxFile, IdxFile), test: (IdxFile, IdxFile) },
}

impl RankSource {
    fn from_config(config: &RunConfig) -> Result<Self> {
        let Some(dir) = &config.mnist_dir else {
            return Ok(RankSource::Synthetic { d: config.d });
        };
        let pair = |prefix: &str| -> Result<(IdxFile, IdxFile)> {
            Ok((
                load_idx(&dir.join(format!("{prefix}-images-idx3-ubyte")))?,
                load_idx(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?,
            ))
        };
        let train = pair("train")?;
        let test = if dir.join("t10k-images-idx3-ubyte").exists() {
            pair("t10k")?
        } else {
            train.clone()
        };
        Ok(RankSource::Mnist { train, test })
    }

    fn dim(&self) -> usize {
        match self {
            RankSource::Synthetic { d } => *d,
            RankSource::Mnist { .. } => crate::data::DIGIT_SIDE * crate::data::FOUR_DIGIT_WIDTH,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, n: usize, tuples: usize, held_out: bool) -> Result<RankingBatch> {
        match self {
            RankSource::Synthetic { d } => synth_ranking(rng, *d, n, tuples),
            RankSource::Mnist { train, test } => {
                let (images, labels) = if held_out { test } else { train };
                let mut batch = RankingBatch {
                    n,
                    d: self.dim(),
                    inputs: Vec::with_capacity(tuples),
                    truth: Vec::with_capacity(tuples),
                };
                for _ in 0..tuples {
                    let set = make_four_digit(rng, images, labels, n)?;
                    let values: Vec<f64> = set.values.iter().map(|v| *v as f64).collect();
                    batch.truth.push(GroundTruthPermutation::from_scores(&values));
                    batch.inputs.push(set.images.concat());
                }
                Ok(batch)
            }
        }
    }
}

/// Ranking loss through the relaxed network as a [`SecondOrderLoss`];
/// curvature by central differences of the analytic gradient.
struct RankingObjective<'a> {
    net: &'a SortingNetwork,
    spec: &'a SigmoidSpec,
    truth: &'a [GroundTruthPermutation],
}

impl SecondOrderLoss for RankingObjective<'_> {
    fn gradient(&self, sample: usize, y: &[f64]) -> Result<Vec<f64>> {
        diffsort::backward(self.net, self.spec, y, &self.truth[sample])
    }

    fn hessian(&self, sample: usize, y: &[f64]) -> Result<CurvatureMatrix> {
        let n = y.len();
        let h = 1e-4;
        let mut m = crate::matrix::Matrix::zeros(n, n);
        let mut probe = y.to_vec();
        for j in 0..n {
            probe[j] = y[j] + h;
            let up = self.gradient(sample, &probe)?;
            probe[j] = y[j] - h;
            let down = self.gradient(sample, &probe)?;
            probe[j] = y[j];
            for i in 0..n {
                m[(i, j)] = (up[i] - down[i]) / (2.0 * h);
            }
        }
        let sym = m.clone();
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = 0.5 * (sym[(i, j)] + sym[(j, i)]);
            }
        }
        Ok(CurvatureMatrix::Dense(m))
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRow {
    pub step: usize,
    pub loss: f64,
    pub em: f64,
    pub ew: f64,
    pub em5: Option<f64>,
    pub wall_time: f64,
}

/// Result of a ranking run.
#[derive(Debug, Clone)]
pub struct RankReport {
    pub rows: Vec<EvalRow>,
    pub model: Mlp,
}

impl RankReport {
    pub fn initial(&self) -> &EvalRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &EvalRow {
        self.rows.last().expect("at least the initial evaluation")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| x.to_string())
}

struct Outputs {
    csv: Box<dyn Write>,
    dir: Option<PathBuf>,
}

impl Outputs {
    fn open(config: &RunConfig) -> Result<Self> {
        match &config.out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Ok(Outputs {
                    csv: Box::new(std::io::BufWriter::new(fs::File::create(dir.join("metrics.csv"))?)),
                    dir: Some(dir.clone()),
                })
            }
            None => Ok(Outputs {
                csv: Box::new(std::io::sink()),
                dir: None,
            }),
        }
    }

    /// Writes a line to the CSV file, or to `out` without an output directory.
    fn line(&mut self, out: &mut dyn Write, text: &str) -> Result<()> {
        if self.dir.is_some() {
            writeln!(self.csv, "{text}")?;
        } else {
            writeln!(out, "{text}")?;
        }
        Ok(())
    }

    fn finish(mut self, out: &mut dyn Write, summary: &serde_json::Value) -> Result<()> {
        self.csv.flush()?;
        let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))?;
        match &self.dir {
            Some(dir) => fs::write(dir.join("summary.json"), text + "\n")?,
            None => writeln!(out, "{text}")?,
        }
        Ok(())
    }
}

fn flatten_inputs(batch: &RankingBatch) -> Vec<f64> {
    batch.inputs.concat()
}

fn evaluate_rank(
    model: &Mlp,
    eval: &RankingBatch,
    eval_x: &[f64],
    net: &SortingNetwork,
    spec: &SigmoidSpec,
    objective: Objective,
) -> Result<(f64, diffsort::RankingMetrics)> {
    let n = eval.n;
    let y = model.predict(eval_x)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Ok((f64::NAN, diffsort::RankingMetrics { em: 0.0, ew: 0.0, em5: None }));
    }
    let scores: Vec<Vec<f64>> = y.chunks_exact(n).map(<[f64]>::to_vec).collect();
    let mut loss = 0.0;
    for (s, t) in scores.iter().zip(&eval.truth) {
        loss += match objective {
            Objective::Resgro if n >= 2 => -kendall_tau(s, t)?,
            _ => {
                let p = diffsort::relaxed_sort(net, spec, s, true)?.perm.expect("materialised");
                diffsort::ranking_ce_loss(&p, t)?
            }
        };
    }
    let metrics = diffsort::ranking_metrics(&scores, &eval.truth, n >= 5)?;
    Ok((loss / eval.len() as f64, metrics))
}

/// Trains the ranking scorer and returns every evaluation row.
pub fn train_rank(config: &RunConfig, out: &mut dyn Write) -> Result<RankReport> {
    config.validate()?;
    let start = Instant::now();
    let spec = config.sigmoid_spec()?;
    let net = SortingNetwork::build(config.network, config.n)?;
    let source = RankSource::from_config(config)?;
    let n = config.n;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eval = source.sample(&mut ChaCha8Rng::seed_from_u64(config.seed ^ EVAL_SALT), n, config.eval_tuples, true)?;
    let eval_x = flatten_inputs(&eval);
    let mut dims = vec![source.dim()];
    dims.extend(&config.hidden);
    dims.push(1);
    let mut model = Mlp::init(&dims, config.seed)?;
    let mut opt = OptimizerState::new(config.optimizer, config.lr)?;
    let resgro = (config.objective == Objective::Resgro)
        .then(|| config.resgro_spec())
        .transpose()?;
    let newton = NewtonLossSpec::new(config.curvature, LossKind::Custom).with_damping(config.damping);

    let mut outputs = Outputs::open(config)?;
    outputs.line(out, "step,loss,em,ew,em5,wall_time")?;
    let mut rows = Vec::new();
    let mut log = |step: usize, model: &Mlp, outputs: &mut Outputs, out: &mut dyn Write| -> Result<()> {
        let (loss, m) = evaluate_rank(model, &eval, &eval_x, &net, &spec, config.objective)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let wall_time = if config.record_time { start.elapsed().as_secs_f64() } else { 0.0 };
        let row = EvalRow {
            step,
            loss,
            em: m.em,
            ew: m.ew,
            em5: m.em5,
            wall_time,
        };
        outputs.line(
            out,
            &format!("{},{},{},{},{},{:.3}", step, loss, m.em, m.ew, fmt_opt(m.em5), wall_time),
        )?;
        rows.push(row);
        Ok(())
    };
    log(0, &model, &mut outputs, out)?;

    let b = config.batch as f64;
    for step in 1..=config.steps {
        let batch = source.sample(&mut rng, n, config.batch, false)?;
        let (y, cache) = model.forward(&flatten_inputs(&batch))?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        let ys: Vec<Vec<f64>> = y.chunks_exact(n).map(<[f64]>::to_vec).collect();
        let mut out_grad = Vec::with_capacity(y.len());
        let mut loss = 0.0;
        match config.objective {
            Objective::RankingCe => {
                for (s, t) in ys.iter().zip(&batch.truth) {
                    let (l, g) = diffsort::loss_and_grad(&net, &spec, s, t)?;
                    loss += l;
                    out_grad.extend(g.into_iter().map(|v| v / b));
                }
            }
            Objective::Resgro => {
                let rs = resgro.as_ref().expect("validated");
                for (s, t) in ys.iter().zip(&batch.truth) {
                    let tau = |z: &[f64]| -kendall_tau(z, t).unwrap_or(0.0);
                    loss += tau(s);
                    let z = resgro_target(s, tau, rs, &mut rng)?;
                    out_grad.extend(s.iter().zip(&z).map(|(a, zi)| (a - zi) / b));
                }
            }
            Objective::Newton => {
                let objective = RankingObjective {
                    net: &net,
                    spec: &spec,
                    truth: &batch.truth,
                };
                for (s, t) in ys.iter().zip(&batch.truth) {
                    let p = diffsort::relaxed_sort(&net, &spec, s, true)?.perm.expect("materialised");
                    loss += diffsort::ranking_ce_loss(&p, t)?;
                }
                for g in newton_loss_grad_with(&newton, &ys, &objective)? {
                    out_grad.extend(g.into_iter().map(|v| v / b));
                }
            }
        }
        loss /= b;
        if !loss.is_finite() || out_grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        let grads = model.backward(&cache, &out_grad)?;
        opt.step(model.params_mut(), &grads.params)?;
        if step % config.eval_every == 0 || step == config.steps {
            log(step, &model, &mut outputs, out)?;
        }
    }

    if let Some(path) = &config.dump_p {
        let s = model.predict(&eval.inputs[0])?;
        let p = diffsort::relaxed_sort(&net, &spec, &s, true)?.perm.expect("materialised");
        fs::write(path, p.to_csv())?;
    }
    let report = RankReport { rows, model };
    let summary = json!({
        "task": config.task,
        "config": config,
        "beta": config.beta(),
        "untrained": report.initial(),
        "final": report.last(),
        "seconds": start.elapsed().as_secs_f64(),
    });
    outputs.finish(out, &summary)?;
    if let Some(dir) = &config.out {
        report.model.save(&dir.join("model.bin"))?;
    }
    Ok(report)
}

/// One row of the top-k training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TopKRow {
    pub step: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub wall_time: f64,
}

/// Trains a classifier under the top-k loss on the synthetic task.
pub fn train_topk(config: &RunConfig, out: &mut dyn Write) -> Result<Vec<TopKRow>> {
    config.validate()?;
    let start = Instant::now();
    let loss_fn = config.topk_loss()?;
    let classes = config.topk_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eval = synth_classification(
        &mut ChaCha8Rng::seed_from_u64(config.seed ^ EVAL_SALT),
        config.d,
        classes,
        config.eval_tuples,
    )?;
    let mut dims = vec![config.d];
    dims.extend(&config.hidden);
    dims.push(classes);
    let mut model = Mlp::init(&dims, config.seed)?;
    let mut opt = OptimizerState::new(config.optimizer, config.lr)?;

    let mut outputs = Outputs::open(config)?;
    outputs.line(out, "step,loss,top1,top5,wall_time")?;
    let mut rows = Vec::new();
    let mut log = |step: usize, model: &Mlp, outputs: &mut Outputs, out: &mut dyn Write| -> Result<()> {
        let y = model.predict(&eval.inputs)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        let (mut loss, mut top1, mut top5) = (0.0, 0.0, 0.0);
        for (s, &label) in y.chunks_exact(classes).zip(&eval.labels) {
            loss += loss_fn.loss(s, label)?;
            let better = s.iter().filter(|v| **v > s[label]).count();
            top1 += f64::from(u8::from(better < 1));
            top5 += f64::from(u8::from(better < 5));
        }
        let m = eval.labels.len() as f64;
        let loss = loss / m;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let wall_time = if config.record_time { start.elapsed().as_secs_f64() } else { 0.0 };
        let row = TopKRow {
            step,
            loss,
            top1: top1 / m,
            top5: top5 / m,
            wall_time,
        };
        outputs.line(
            out,
            &format!("{},{},{},{},{:.3}", step, row.loss, row.top1, row.top5, wall_time),
        )?;
        rows.push(row);
        Ok(())
    };
    log(0, &model, &mut outputs, out)?;

    let b = config.batch as f64;
    for step in 1..=config.steps {
        let batch = synth_classification(&mut rng, config.d, classes, config.batch)?;
        let (y, cache) = model.forward(&batch.inputs)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        let mut out_grad = Vec::with_capacity(y.len());
        let mut loss = 0.0;
        for (s, &label) in y.chunks_exact(classes).zip(&batch.labels) {
            let o = loss_fn.loss_and_grad(s, label)?;
            loss += o.loss;
            out_grad.extend(o.grad.into_iter().map(|g| g / b));
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss: loss / b });
        }
        let grads = model.backward(&cache, &out_grad)?;
        opt.step(model.params_mut(), &grads.params)?;
        if step % config.eval_every == 0 || step == config.steps {
            log(step, &model, &mut outputs, out)?;
        }
    }
    let summary = json!({
        "task": config.task,
        "config": config,
        "beta": config.beta(),
        "untrained": rows[0],
        "final": rows.last(),
        "seconds": start.elapsed().as_secs_f64(),
    });
    outputs.finish(out, &summary)?;
    Ok(rows)
}
