use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use bivalue::diagnostics::{find_stale_demo, stale_learning_trace, StaleDemoConfig};
use bivalue::harness::{
    emit_outputs, run_single, run_sweep, summarize_records, AlgorithmSpec, ExperimentConfig,
    ExperimentContext, Preset,
};
use bivalue::learners::Algorithm;
use bivalue::mdp::Policy;
use bivalue::net::Parameterization;
use bivalue::reports::{
    dp_report, lemma_report, write_dp_report, write_lemma_report, write_stale_trace, LEMMA_HORIZON,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Forward, backward and bidirectional value functions on small MDPs.
#[derive(Parser)]
#[command(name = "bivalue", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seeds per grid cell.
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Environment steps per run.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    master_seed: Option<u64>,
    /// Also write curves.svg.
    #[arg(long, global = true)]
    svg: bool,
    /// Number of non-terminal chain states (selects the chain preset).
    #[arg(long, global = true)]
    chain_states: Option<usize>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Exact value tables and a contraction report.
    Dp {
        /// λ values; defaults to the config's λ grid.
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
    },
    /// A single seeded training run.
    Train {
        #[arg(long, value_enum)]
        algorithm: Option<AlgorithmArg>,
        #[arg(long, value_enum)]
        parameterization: Option<ParamArg>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Seed index under the master seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Every grid cell for every seed.
    Sweep,
    /// Search for an initialisation where the stale trace moves v(s0) the wrong way.
    StaleDemo {
        /// Number of seeds to search.
        #[arg(long, default_value_t = 10_000)]
        search: u64,
        /// Episodes in the written learning trace.
        #[arg(long, default_value_t = 50)]
        episodes: usize,
    },
    /// Exhaustive check of the past/future identity on every reachable (state, t).
    LemmaCheck {
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 5)]
        t_max: usize,
        #[arg(long, default_value_t = LEMMA_HORIZON)]
        horizon: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Td0,
    TdLambda,
    RefreshedTdLambda,
    BackwardMc,
    Bitd,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Td0 => Algorithm::Td0,
            AlgorithmArg::TdLambda => Algorithm::TdLambda,
            AlgorithmArg::RefreshedTdLambda => Algorithm::RefreshedTdLambda,
            AlgorithmArg::BackwardMc => Algorithm::BackwardMc,
            AlgorithmArg::Bitd => Algorithm::BiTd,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Fr,
    Bir,
    Fbi,
}

impl From<ParamArg> for Parameterization {
    fn from(p: ParamArg) -> Self {
        match p {
            ParamArg::Fr => Parameterization::Fr,
            ParamArg::Bir => Parameterization::BiR,
            ParamArg::Fbi => Parameterization::FBi,
        }
    }
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(n) = self.seeds {
            cfg.seeds = n;
        }
        if let Some(n) = self.steps {
            cfg.steps = n;
        }
        if let Some(s) = self.master_seed {
            cfg.master_seed = s;
        }
        if let Some(n) = self.chain_states {
            cfg.environment.preset = Preset::Chain;
            cfg.environment.n_nonterminal = n;
        }
        if let Some(g) = self.gamma {
            cfg.environment.gamma = g;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("results"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn report_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn dp(cfg: &ExperimentConfig, lambdas: Option<Vec<f64>>) -> Result<()> {
    let mdp = cfg.environment.build()?;
    let policy = Policy::uniform(&mdp);
    let lambdas = lambdas.unwrap_or_else(|| cfg.grid.lambdas.clone());
    let report = dp_report(&mdp, &policy, &lambdas)?;
    for c in &report.contraction {
        println!(
            "λ={:<5} {:<13} iterations={:<6} empirical={:.6} bound={:.6}",
            c.lambda,
            c.direction.as_str(),
            c.iterations,
            c.empirical_factor,
            c.theoretical_factor
        );
    }
    report_written(&write_dp_report(&report, &out_dir(cfg)?)?);
    Ok(())
}

fn train(
    mut cfg: ExperimentConfig,
    algorithm: Option<AlgorithmArg>,
    parameterization: Option<ParamArg>,
    alpha: Option<f64>,
    lambda: Option<f64>,
    seed: u64,
    svg: bool,
) -> Result<()> {
    let mut spec = match algorithm {
        Some(a) => AlgorithmSpec::new(a.into()),
        None => cfg.grid.algorithms[0].clone(),
    };
    if let Some(p) = parameterization {
        spec.parameterization = Some(p.into());
    }
    let alpha = alpha.unwrap_or(cfg.grid.alphas[0]);
    let lambda = lambda.unwrap_or(cfg.grid.lambdas[0]);
    cfg.grid.algorithms = vec![spec.clone()];
    cfg.grid.alphas = vec![alpha];
    cfg.grid.lambdas = vec![lambda];
    let ctx = ExperimentContext::new(cfg)?;
    let record = run_single(&ctx, &spec, alpha, lambda, seed)?;
    println!(
        "{} α={alpha} λ={lambda} seed={seed}: final MSTDE {:.6}, AUC {:.3}{}",
        record.coords.label,
        record.series.mstde.last().copied().unwrap_or(f64::NAN),
        record.auc,
        if record.diverged { " (diverged)" } else { "" }
    );
    let records = [record];
    let cells = summarize_records(&records);
    report_written(&emit_outputs(
        &records,
        &cells,
        &out_dir(&ctx.config)?,
        svg,
    )?);
    Ok(())
}

fn sweep(cfg: ExperimentConfig, svg: bool) -> Result<()> {
    let ctx = ExperimentContext::new(cfg)?;
    let result = run_sweep(&ctx)?;
    for f in &result.failures {
        eprintln!(
            "run failed: {} α={} λ={} seed={}: {}",
            f.coords.label, f.coords.alpha, f.coords.lambda, f.coords.seed, f.error
        );
    }
    for c in result.cells.iter().filter(|c| c.best_for_algorithm) {
        println!(
            "best {}: α={} λ={} mean AUC {:.3} ± {:.3} ({} runs, {} diverged)",
            c.label, c.alpha, c.lambda, c.mean_auc, c.stderr_auc, c.runs, c.diverged
        );
    }
    report_written(&emit_outputs(
        &result.records,
        &result.cells,
        &out_dir(&ctx.config)?,
        svg,
    )?);
    Ok(())
}

fn stale_demo(cfg: &ExperimentConfig, search: u64, episodes: usize) -> Result<()> {
    let demo = StaleDemoConfig::default();
    let e = find_stale_demo(&demo, 0..search)?;
    println!("exhibit at seed {}", e.seed);
    println!("initial weights: {:?}", e.initial.params);
    println!("δ0 = {:.6}, δ1 = {:.6}", e.delta0, e.delta1);
    println!(
        "stored trace · current gradient at s0 = {:.6} (cosine {:.6})",
        e.record.dot, e.record.cosine
    );
    println!(
        "v(s0): initial {:.6}, after t=0 {:.6}, stale t=1 {:.6} (change {:+.6}), refreshed t=1 {:.6} (change {:+.6})",
        e.v_s0[0], e.v_s0[1], e.v_s0[2], e.stale_change, e.v_s0[3], e.refreshed_change
    );
    let dir = out_dir(cfg)?;
    let json = dir.join("stale_exhibit.json");
    fs::write(&json, serde_json::to_string_pretty(&e)? + "\n")
        .with_context(|| format!("writing {}", json.display()))?;
    let trace = stale_learning_trace(&demo, e.seed, episodes)?;
    let csv = write_stale_trace(&trace, &dir.join("stale_trace.csv"))?;
    report_written(&[json, csv]);
    Ok(())
}

fn lemma_check(cfg: &ExperimentConfig, lambda: f64, t_max: usize, horizon: usize) -> Result<()> {
    let mdp = cfg.environment.build()?;
    let policy = Policy::uniform(&mdp);
    let rows = lemma_report(&mdp, &policy, lambda, t_max, horizon)?;
    for t in 0..=t_max {
        let gaps = rows.iter().filter(|r| r.t == t);
        let worst = gaps.clone().map(|r| r.gap).fold(0.0, f64::max);
        println!("t={t}: {} states, max gap {worst:.3e}", gaps.count());
    }
    let path = write_lemma_report(&rows, &out_dir(cfg)?.join("lemma1.csv"))?;
    report_written(&[path]);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let svg = cli.common.svg;
    let cfg = cli.common.config()?;
    match cli.command {
        Command::Dp { lambda } => dp(&cfg, lambda),
        Command::Train {
            algorithm,
            parameterization,
            alpha,
            lambda,
            seed,
        } => train(cfg, algorithm, parameterization, alpha, lambda, seed, svg),
        Command::Sweep => sweep(cfg, svg),
        Command::StaleDemo { search, episodes } => {
            if search == 0 {
                bail!("--search must be positive");
            }
            stale_demo(&cfg, search, episodes)
        }
        Command::LemmaCheck {
            lambda,
            t_max,
            horizon,
        } => lemma_check(&cfg, lambda, t_max, horizon),
    }
}

fn main() -> Result<()> {
    run(Cli::parse())
}
