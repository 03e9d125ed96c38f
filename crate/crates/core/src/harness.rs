//! Experiment configuration, seeded training runs, parallel sweeps with
//! AUC-based selection, and CSV/SVG output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{forward_values, mstde, rmsve, MetricSeries};
use crate::error::{Error, Result};
use crate::exact::{solve_forward, ValueTable};
use crate::features::{FeatureKind, FeatureMap};
use crate::learners::{Algorithm, FirstStep, Learner, LearnerConfig, TargetSelection};
use crate::mdp::{
    build_chain, build_two_state, visitation_distribution, EpisodeStream, MdpDescription, Policy,
    TabularMdp, DEFAULT_MAX_STEPS,
};
use crate::net::{MultiHeadNet, NetShape, Parameterization};
use crate::reports::CsvOut;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Chain,
    TwoState,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvironmentConfig {
    pub preset: Preset,
    pub n_nonterminal: usize,
    pub reward_amplitude: f64,
    pub gamma: f64,
    /// Required for the `custom` preset. Non-terminal states must be
    /// numbered before terminal ones.
    pub mdp: Option<MdpDescription>,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Chain,
            n_nonterminal: 9,
            reward_amplitude: 5.0,
            gamma: 0.99,
            mdp: None,
        }
    }
}

impl EnvironmentConfig {
    pub fn build(&self) -> Result<TabularMdp> {
        let mdp = match self.preset {
            Preset::Chain => build_chain(self.n_nonterminal, self.reward_amplitude, self.gamma)?,
            Preset::TwoState => build_two_state(),
            Preset::Custom => {
                let desc = self
                    .mdp
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("custom preset needs an `mdp`".into()))?;
                TabularMdp::from_description(desc)?
            }
        };
        let k = mdp.n_non_terminal();
        if (0..k).any(|s| mdp.is_terminal(s)) {
            return Err(Error::InvalidMdp(
                "non-terminal states must come first".into(),
            ));
        }
        Ok(mdp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// `None` gives linear heads on the raw features.
    pub hidden: Option<usize>,
    pub bias: bool,
    pub init_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: Some(9),
            bias: true,
            init_scale: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub parameterization: Option<Parameterization>,
    #[serde(default)]
    pub targets: Option<TargetSelection>,
    #[serde(default)]
    pub first_step: FirstStep,
    #[serde(default)]
    pub label: Option<String>,
}

impl AlgorithmSpec {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            parameterization: None,
            targets: None,
            first_step: FirstStep::default(),
            label: None,
        }
    }

    pub fn bitd(p: Parameterization) -> Self {
        Self {
            parameterization: Some(p),
            ..Self::new(Algorithm::BiTd)
        }
    }

    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match self.algorithm {
            Algorithm::BiTd => format!(
                "BiTD-{}",
                self.parameterization
                    .unwrap_or(Parameterization::Fr)
                    .as_str()
            ),
            a => a.as_str().to_string(),
        }
    }

    pub fn learner_config(&self, alpha: f64, lambda: f64, gamma: f64) -> LearnerConfig {
        let mut cfg = LearnerConfig::new(self.algorithm, alpha, lambda, gamma);
        cfg.parameterization = self.parameterization.unwrap_or(Parameterization::Fr);
        cfg.targets = self.targets.unwrap_or_default();
        cfg.first_step = self.first_step;
        cfg
    }

    /// TD(0) ignores λ, so sweeping it would only repeat identical runs.
    fn uses_lambda(&self) -> bool {
        self.algorithm != Algorithm::Td0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub algorithms: Vec<AlgorithmSpec>,
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            algorithms: vec![
                AlgorithmSpec::new(Algorithm::TdLambda),
                AlgorithmSpec::bitd(Parameterization::Fr),
                AlgorithmSpec::bitd(Parameterization::BiR),
                AlgorithmSpec::bitd(Parameterization::FBi),
            ],
            alphas: vec![0.3, 0.1, 0.03, 0.01, 0.003],
            lambdas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 0.95],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    /// Defaults to triangular anchors on even chain states, or one-hot for
    /// the other presets.
    pub features: Option<FeatureKind>,
    pub network: NetworkConfig,
    pub grid: GridConfig,
    pub steps: usize,
    pub eval_interval: usize,
    pub seeds: usize,
    pub master_seed: u64,
    pub max_episode_steps: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            environment: EnvironmentConfig::default(),
            features: None,
            network: NetworkConfig::default(),
            grid: GridConfig::default(),
            steps: 20_000,
            eval_interval: 100,
            seeds: 20,
            master_seed: 0,
            max_episode_steps: DEFAULT_MAX_STEPS,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.algorithms.is_empty() || g.alphas.is_empty() || g.lambdas.is_empty() {
            return Err(Error::InvalidArgument(
                "grid lists must be non-empty".into(),
            ));
        }
        if self.steps == 0
            || self.seeds == 0
            || self.eval_interval == 0
            || self.max_episode_steps == 0
        {
            return Err(Error::InvalidArgument(
                "steps, seeds, eval_interval and max_episode_steps must be positive".into(),
            ));
        }
        for spec in &g.algorithms {
            for &alpha in &g.alphas {
                for &lambda in &g.lambdas {
                    spec.learner_config(alpha, lambda, self.environment.gamma)
                        .validate()?;
                }
            }
        }
        Ok(())
    }
}

/// splitmix64 finaliser.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for run `index` under `master`. Depends on nothing else, so every
/// grid cell sees the same seeds and adding cells changes no stream.
pub fn run_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

/// Independent sub-stream of a run seed (1: network init, 2: environment).
pub fn substream(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0xA076_1D64_78BD_642F)))
}

/// Everything about an experiment that does not change between runs.
#[derive(Debug, Clone)]
pub struct ExperimentContext {
    pub config: ExperimentConfig,
    pub mdp: TabularMdp,
    pub policy: Policy,
    pub features: FeatureMap,
    pub visit: Vec<f64>,
    pub exact: ValueTable,
}

impl ExperimentContext {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mdp = config.environment.build()?;
        let policy = Policy::uniform(&mdp);
        let k = mdp.n_non_terminal();
        let features = match (&config.features, config.environment.preset) {
            (Some(kind), _) => FeatureMap::new(kind.clone(), k)?,
            (None, Preset::Chain) => FeatureMap::chain_default(k)?,
            (None, _) => FeatureMap::one_hot(k)?,
        };
        let visit = visitation_distribution(&mdp, &policy, 1e-14)?;
        let exact = solve_forward(&mdp, &policy)?;
        Ok(Self {
            config,
            mdp,
            policy,
            features,
            visit,
            exact,
        })
    }

    pub fn shape(&self) -> NetShape {
        let n = &self.config.network;
        NetShape {
            input: self.features.dim(),
            hidden: n.hidden,
            bias: n.bias,
        }
    }

    fn evaluate(&self, net: &MultiHeadNet) -> Result<(f64, f64)> {
        let v = forward_values(net, &self.features, &self.mdp)?;
        Ok((
            mstde(&v, &self.mdp, &self.policy, &self.visit)?,
            rmsve(&v, &self.exact, &self.visit)?,
        ))
    }

    pub fn initial_net(
        &self,
        parameterization: Parameterization,
        seed_index: u64,
    ) -> Result<MultiHeadNet> {
        let seed = run_seed(self.config.master_seed, seed_index);
        let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, 1));
        MultiHeadNet::random(
            self.shape(),
            parameterization,
            self.config.network.init_scale,
            &mut rng,
        )
    }

    /// Trains for `steps` environment steps, calling `on_eval` with the
    /// step count and network at step 0 and every `eval_interval` steps.
    /// Stops early when `on_eval` returns `false`.
    pub fn train(
        &self,
        cfg: LearnerConfig,
        seed_index: u64,
        steps: usize,
        eval_interval: usize,
        mut on_eval: impl FnMut(usize, &MultiHeadNet) -> Result<bool>,
    ) -> Result<MultiHeadNet> {
        let net = self.initial_net(cfg.parameterization, seed_index)?;
        let mut learner = Learner::new(cfg, net, self.features.clone())?;
        let seed = run_seed(self.config.master_seed, seed_index);
        let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, 2));
        let mut env = EpisodeStream::new(&self.mdp, &self.policy);
        let mut episode_len = 0;
        if !on_eval(0, &learner.net)? {
            return Ok(learner.net);
        }
        for step in 1..=steps {
            let (tr, _) = env.step(&mut rng);
            let next = (!self.mdp.is_terminal(tr.next_state)).then_some(tr.next_state);
            learner.observe(tr.state, tr.reward, next)?;
            episode_len += 1;
            if next.is_none() {
                episode_len = 0;
            } else if episode_len >= self.config.max_episode_steps {
                env.restart();
                learner.end_episode();
                episode_len = 0;
            }
            if step % eval_interval == 0 && !on_eval(step, &learner.net)? {
                break;
            }
        }
        Ok(learner.net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunCoords {
    pub label: String,
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub coords: RunCoords,
    pub series: MetricSeries,
    pub auc: f64,
    pub diverged: bool,
    pub wall_clock: Duration,
}

/// One seeded training run, evaluated every `eval_interval` steps. A run
/// whose network or metrics stop being finite is marked diverged, its
/// remaining evaluation points are set to infinity, and its AUC is infinite.
pub fn run_single(
    ctx: &ExperimentContext,
    spec: &AlgorithmSpec,
    alpha: f64,
    lambda: f64,
    seed_index: u64,
) -> Result<RunRecord> {
    let started = Instant::now();
    let cfg = spec.learner_config(alpha, lambda, ctx.mdp.gamma());
    let steps = ctx.config.steps;
    let interval = ctx.config.eval_interval;
    let mut series = MetricSeries::default();
    let mut diverged = false;
    ctx.train(cfg, seed_index, steps, interval, |step, net| {
        let (m, r) = if net.is_finite() {
            ctx.evaluate(net)?
        } else {
            (f64::INFINITY, f64::INFINITY)
        };
        if !(m.is_finite() && r.is_finite()) {
            diverged = true;
            let mut s = step;
            while s <= steps {
                series.push(s, f64::INFINITY, f64::INFINITY);
                s += interval;
            }
            return Ok(false);
        }
        series.push(step, m, r);
        Ok(true)
    })?;
    let auc = if diverged {
        f64::INFINITY
    } else {
        series.auc()
    };
    Ok(RunRecord {
        coords: RunCoords {
            label: spec.label(),
            alpha,
            lambda,
            seed: seed_index,
        },
        series,
        auc,
        diverged,
        wall_clock: started.elapsed(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub label: String,
    pub alpha: f64,
    pub lambda: f64,
    pub runs: usize,
    pub diverged: usize,
    pub failed: usize,
    pub steps: Vec<usize>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub mean_auc: f64,
    pub stderr_auc: f64,
    /// Lowest mean AUC among cells with the same algorithm and λ.
    pub best_alpha_for_lambda: bool,
    /// Lowest mean AUC among all cells of the algorithm.
    pub best_for_algorithm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunFailure {
    pub coords: RunCoords,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    pub cells: Vec<CellSummary>,
    pub failures: Vec<RunFailure>,
}

impl SweepResult {
    pub fn cell(&self, label: &str, alpha: f64, lambda: f64) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.label == label && c.alpha == alpha && c.lambda == lambda)
    }

    /// For each λ, the cell of `label` with the lowest mean AUC.
    pub fn best_per_lambda(&self, label: &str) -> Vec<&CellSummary> {
        self.cells
            .iter()
            .filter(|c| c.label == label && c.best_alpha_for_lambda)
            .collect()
    }

    pub fn best(&self, label: &str) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.label == label && c.best_for_algorithm)
    }
}

struct Cell<'a> {
    spec: &'a AlgorithmSpec,
    alpha: f64,
    lambda: f64,
}

fn cells(config: &ExperimentConfig) -> Vec<Cell<'_>> {
    let g = &config.grid;
    let mut out = Vec::new();
    for spec in &g.algorithms {
        let lambdas: &[f64] = if spec.uses_lambda() {
            &g.lambdas
        } else {
            &[0.0]
        };
        for &alpha in &g.alphas {
            for &lambda in lambdas {
                out.push(Cell {
                    spec,
                    alpha,
                    lambda,
                });
            }
        }
    }
    out
}

/// Runs every grid cell for every seed in parallel. Results are ordered by
/// cell and seed regardless of scheduling; a failing run is recorded and
/// the rest of the sweep continues.
pub fn run_sweep(ctx: &ExperimentContext) -> Result<SweepResult> {
    let grid = cells(&ctx.config);
    let seeds = ctx.config.seeds as u64;
    let jobs: Vec<(usize, u64)> = (0..grid.len())
        .flat_map(|c| (0..seeds).map(move |s| (c, s)))
        .collect();
    let outcomes: Vec<std::result::Result<RunRecord, RunFailure>> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let cell = &grid[c];
            run_single(ctx, cell.spec, cell.alpha, cell.lambda, s).map_err(|e| RunFailure {
                coords: RunCoords {
                    label: cell.spec.label(),
                    alpha: cell.alpha,
                    lambda: cell.lambda,
                    seed: s,
                },
                error: e.to_string(),
            })
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut per_cell: Vec<Vec<usize>> = vec![Vec::new(); grid.len()];
    let mut failed: Vec<usize> = vec![0; grid.len()];
    for (outcome, &(c, _)) in outcomes.into_iter().zip(&jobs) {
        match outcome {
            Ok(r) => {
                per_cell[c].push(records.len());
                records.push(r);
            }
            Err(f) => {
                failed[c] += 1;
                failures.push(f);
            }
        }
    }

    let mut summaries: Vec<CellSummary> = grid
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            summarize(
                (cell.spec.label(), cell.alpha, cell.lambda),
                per_cell[c].iter().map(|&i| &records[i]).collect(),
                failed[c],
            )
        })
        .collect();
    mark_best(&mut summaries);
    Ok(SweepResult {
        records,
        cells: summaries,
        failures,
    })
}

/// Groups records by `(algorithm, α, λ)` in order of first appearance and
/// summarizes each group, marking the best cells.
pub fn summarize_records(records: &[RunRecord]) -> Vec<CellSummary> {
    let mut groups: Vec<((String, f64, f64), Vec<&RunRecord>)> = Vec::new();
    for r in records {
        let c = &r.coords;
        match groups
            .iter_mut()
            .find(|(k, _)| k.0 == c.label && k.1 == c.alpha && k.2 == c.lambda)
        {
            Some((_, runs)) => runs.push(r),
            None => groups.push(((c.label.clone(), c.alpha, c.lambda), vec![r])),
        }
    }
    let mut cells: Vec<CellSummary> = groups
        .into_iter()
        .map(|(key, runs)| summarize(key, runs, 0))
        .collect();
    mark_best(&mut cells);
    cells
}

fn summarize(
    (label, alpha, lambda): (String, f64, f64),
    runs: Vec<&RunRecord>,
    failed: usize,
) -> CellSummary {
    let n = runs.len();
    let steps = runs
        .first()
        .map(|r| r.series.steps.clone())
        .unwrap_or_default();
    let column = |k: usize| runs.iter().map(|r| r.series.mstde[k]).collect::<Vec<f64>>();
    let (mut mean, mut stderr) = (Vec::new(), Vec::new());
    for k in 0..steps.len() {
        let (m, s) = mean_stderr(&column(k));
        mean.push(m);
        stderr.push(s);
    }
    let aucs: Vec<f64> = runs.iter().map(|r| r.auc).collect();
    let (mean_auc, stderr_auc) = if n == 0 {
        (f64::INFINITY, f64::INFINITY)
    } else {
        mean_stderr(&aucs)
    };
    CellSummary {
        label,
        alpha,
        lambda,
        runs: n,
        diverged: runs.iter().filter(|r| r.diverged).count(),
        failed,
        steps,
        mean,
        stderr,
        mean_auc,
        stderr_auc,
        best_alpha_for_lambda: false,
        best_for_algorithm: false,
    }
}

/// Arithmetic mean and standard error (sample standard deviation over √n).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return (f64::INFINITY, f64::INFINITY);
    }
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn mark_best(cells: &mut [CellSummary]) {
    let argmin = |cells: &[CellSummary], pick: &dyn Fn(&CellSummary) -> bool| {
        cells
            .iter()
            .enumerate()
            .filter(|(_, c)| pick(c) && c.runs > 0)
            .min_by(|a, b| a.1.mean_auc.total_cmp(&b.1.mean_auc))
            .map(|(i, _)| i)
    };
    let keys: Vec<(String, f64)> = cells.iter().map(|c| (c.label.clone(), c.lambda)).collect();
    for (label, lambda) in &keys {
        if let Some(i) = argmin(cells, &|c| &c.label == label && c.lambda == *lambda) {
            cells[i].best_alpha_for_lambda = true;
        }
    }
    for (label, _) in &keys {
        if let Some(i) = argmin(cells, &|c| &c.label == label) {
            cells[i].best_for_algorithm = true;
        }
    }
}

pub const CURVES_HEADER: [&str; 7] = [
    "step",
    "algorithm",
    "alpha",
    "lambda",
    "seed",
    "mstde",
    "rmsve",
];
pub const SUMMARY_HEADER: [&str; 12] = [
    "algorithm",
    "alpha",
    "lambda",
    "runs",
    "diverged",
    "failed",
    "mean_auc",
    "stderr_auc",
    "final_mean_mstde",
    "final_stderr_mstde",
    "best_alpha_for_lambda",
    "best_for_algorithm",
];
pub const CELL_CURVES_HEADER: [&str; 6] = [
    "algorithm",
    "alpha",
    "lambda",
    "step",
    "mean_mstde",
    "stderr_mstde",
];

/// Writes `curves.csv`, `summary.csv`, `cell_curves.csv`, and optionally
/// `curves.svg` into `dir`, returning the paths written.
pub fn emit_outputs(
    records: &[RunRecord],
    cells: &[CellSummary],
    dir: &Path,
    svg: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();

    let mut w = CsvOut::create(&dir.join("curves.csv"))?;
    w.row(CURVES_HEADER)?;
    for r in records {
        let c = &r.coords;
        for k in 0..r.series.len() {
            w.row([
                r.series.steps[k].to_string(),
                c.label.clone(),
                c.alpha.to_string(),
                c.lambda.to_string(),
                c.seed.to_string(),
                r.series.mstde[k].to_string(),
                r.series.rmsve[k].to_string(),
            ])?;
        }
    }
    written.push(w.finish()?);

    let mut w = CsvOut::create(&dir.join("summary.csv"))?;
    w.row(SUMMARY_HEADER)?;
    for c in cells {
        let last = |v: &[f64]| v.last().map_or(String::new(), f64::to_string);
        w.row([
            c.label.clone(),
            c.alpha.to_string(),
            c.lambda.to_string(),
            c.runs.to_string(),
            c.diverged.to_string(),
            c.failed.to_string(),
            c.mean_auc.to_string(),
            c.stderr_auc.to_string(),
            last(&c.mean),
            last(&c.stderr),
            c.best_alpha_for_lambda.to_string(),
            c.best_for_algorithm.to_string(),
        ])?;
    }
    written.push(w.finish()?);

    let mut w = CsvOut::create(&dir.join("cell_curves.csv"))?;
    w.row(CELL_CURVES_HEADER)?;
    for c in cells {
        for k in 0..c.steps.len() {
            w.row([
                c.label.clone(),
                c.alpha.to_string(),
                c.lambda.to_string(),
                c.steps[k].to_string(),
                c.mean[k].to_string(),
                c.stderr[k].to_string(),
            ])?;
        }
    }
    written.push(w.finish()?);

    if svg {
        let path = dir.join("curves.svg");
        fs::write(&path, render_svg(cells)).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Mean MSTDE of each algorithm's best cell on a log scale.
pub fn render_svg(cells: &[CellSummary]) -> String {
    let (w, h, pad) = (720.0, 420.0, 50.0);
    let best: Vec<&CellSummary> = cells.iter().filter(|c| c.best_for_algorithm).collect();
    let finite = |v: &f64| v.is_finite() && *v > 0.0;
    let ys: Vec<f64> = best
        .iter()
        .flat_map(|c| c.mean.iter().copied().filter(finite))
        .collect();
    let max_step = best
        .iter()
        .filter_map(|c| c.steps.last())
        .copied()
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min).log10();
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10();
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        (-1.0, 1.0)
    };
    let sx = |s: usize| pad + (w - 2.0 * pad) * s as f64 / max_step;
    let sy = |v: f64| h - pad - (h - 2.0 * pad) * (v.log10() - lo) / (hi - lo);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">MSTDE (log)</text>"#,
        h / 2.0,
        h / 2.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
        pad - 4.0,
        pad + 4.0,
        10f64.powf(hi)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
        pad - 4.0,
        h - pad,
        10f64.powf(lo)
    );
    for (i, c) in best.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = c
            .steps
            .iter()
            .zip(&c.mean)
            .filter(|(_, v)| finite(v))
            .map(|(&s, &v)| format!("{:.1},{:.1}", sx(s), sy(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{} (α={}, λ={})</text>"#,
            w - pad - 200.0,
            pad + 16.0 * (i as f64 + 1.0),
            c.label,
            c.alpha,
            c.lambda
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            steps: 1_000,
            seeds: 3,
            grid: GridConfig {
                algorithms: vec![AlgorithmSpec::new(Algorithm::TdLambda)],
                alphas: vec![0.03],
                lambdas: vec![0.4],
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(run_seed(7, 3), run_seed(7, 3));
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| run_seed(0, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(substream(run_seed(0, 0), 1), substream(run_seed(0, 0), 2));
    }

    #[test]
    fn td_lambda_zero_matches_td0_series() {
        let ctx = ExperimentContext::new(small_config()).unwrap();
        let a = run_single(&ctx, &AlgorithmSpec::new(Algorithm::Td0), 0.03, 0.0, 1).unwrap();
        let b = run_single(&ctx, &AlgorithmSpec::new(Algorithm::TdLambda), 0.03, 0.0, 1).unwrap();
        assert_eq!(a.series, b.series);
    }

    #[test]
    fn zero_step_size_gives_flat_series() {
        let ctx = ExperimentContext::new(small_config()).unwrap();
        let r = run_single(
            &ctx,
            &AlgorithmSpec::bitd(Parameterization::Fr),
            0.0,
            0.4,
            0,
        )
        .unwrap();
        let initial = ctx
            .evaluate(&ctx.initial_net(Parameterization::Fr, 0).unwrap())
            .unwrap()
            .0;
        assert_eq!(r.series.len(), 11);
        assert!(r.series.mstde.iter().all(|&m| m == initial));
    }

    #[test]
    fn oversized_step_size_is_flagged_as_diverged() {
        let ctx = ExperimentContext::new(small_config()).unwrap();
        let r = run_single(&ctx, &AlgorithmSpec::new(Algorithm::TdLambda), 10.0, 0.9, 0).unwrap();
        assert!(r.diverged);
        assert_eq!(r.auc, f64::INFINITY);
        assert_eq!(r.series.len(), 11);
    }

    #[test]
    fn single_cell_summary_is_the_mean_of_its_runs() {
        let ctx = ExperimentContext::new(small_config()).unwrap();
        let sweep = run_sweep(&ctx).unwrap();
        assert_eq!(sweep.records.len(), 3);
        let cell = &sweep.cells[0];
        for k in 0..cell.steps.len() {
            let mean = sweep.records.iter().map(|r| r.series.mstde[k]).sum::<f64>() / 3.0;
            assert!((cell.mean[k] - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        }
        assert!(cell.best_for_algorithm && cell.best_alpha_for_lambda);
    }

    #[test]
    fn summarize_records_matches_sweep_summary() {
        let mut cfg = small_config();
        cfg.grid.lambdas = vec![0.0, 0.4];
        let ctx = ExperimentContext::new(cfg).unwrap();
        let sweep = run_sweep(&ctx).unwrap();
        assert_eq!(summarize_records(&sweep.records), sweep.cells);
    }

    #[test]
    fn parallel_and_serial_sweeps_agree() {
        let mut cfg = small_config();
        cfg.grid.alphas = vec![0.1, 0.01];
        cfg.seeds = 2;
        let ctx = ExperimentContext::new(cfg).unwrap();
        let parallel = run_sweep(&ctx).unwrap();
        let serial = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_sweep(&ctx).unwrap());
        assert_eq!(parallel.cells, serial.cells);
        for (a, b) in parallel.records.iter().zip(&serial.records) {
            assert_eq!((&a.coords, &a.series), (&b.coords, &b.series));
        }
    }

    #[test]
    fn td0_is_not_repeated_across_lambdas() {
        let mut cfg = small_config();
        cfg.grid.algorithms = vec![AlgorithmSpec::new(Algorithm::Td0)];
        cfg.grid.lambdas = vec![0.0, 0.4, 0.9];
        cfg.seeds = 1;
        let ctx = ExperimentContext::new(cfg).unwrap();
        assert_eq!(run_sweep(&ctx).unwrap().cells.len(), 1);
    }

    #[test]
    fn emit_headers_only_for_empty_input() {
        let dir = tempfile::tempdir().unwrap();
        emit_outputs(&[], &[], dir.path(), false).unwrap();
        let curves = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert_eq!(curves, format!("{}\n", CURVES_HEADER.join(",")));
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary, format!("{}\n", SUMMARY_HEADER.join(",")));
    }

    #[test]
    fn curves_have_one_row_per_evaluation_point() {
        let mut cfg = small_config();
        cfg.seeds = 2;
        let ctx = ExperimentContext::new(cfg).unwrap();
        let sweep = run_sweep(&ctx).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = emit_outputs(&sweep.records, &sweep.cells, dir.path(), true).unwrap();
        assert_eq!(written.len(), 4);
        let curves = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert_eq!(curves.lines().count(), 1 + 2 * 11);
        let svg = fs::read_to_string(dir.path().join("curves.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.grid.alphas, vec![0.3, 0.1, 0.03, 0.01, 0.003]);
        assert!(ExperimentConfig::from_json(r#"{"steps":0}"#).is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"grid":{"algorithms":[],"alphas":[0.1],"lambdas":[0.0]}}"#
        )
        .is_err());
        let custom = r#"{"environment":{"preset":"two_state"},
            "grid":{"algorithms":[{"algorithm":"BiTD","parameterization":"BiR"}],"alphas":[0.1],"lambdas":[0.5]}}"#;
        let ctx = ExperimentContext::new(ExperimentConfig::from_json(custom).unwrap()).unwrap();
        assert_eq!(ctx.features.dim(), 2);
        assert_eq!(ctx.config.grid.algorithms[0].label(), "BiTD-BiR");
    }

    #[test]
    fn mean_stderr_basics() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[1.0, f64::INFINITY]).0, f64::INFINITY);
    }
}
