//! CSV reports for the exact solutions, the past/future identity check and
//! the stale-trace demonstration.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use crate::diagnostics::StaleTraceRow;
use crate::error::{Error, Result};
use crate::exact::{
    iterate_fixpoint, lemma1_check, reachable_pairs, solve_backward, solve_bidirectional,
    solve_forward, BellmanOperator, Direction, Lemma1Report,
};
use crate::mdp::{backward_kernel, visitation_distribution, Policy, TabularMdp};

/// Row-at-a-time CSV writer that attaches the path to every error.
pub struct CsvOut {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl CsvOut {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| Error::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        let inner = csv::Writer::from_path(path).map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            inner,
        })
    }

    pub fn row<I, T>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.inner
            .write_record(fields)
            .map_err(|source| Error::Csv {
                path: self.path.clone(),
                source,
            })
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.inner.flush().map_err(|source| Error::Io {
            path: self.path.clone(),
            source,
        })?;
        Ok(self.path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpRow {
    pub lambda: f64,
    pub state: usize,
    pub v_forward: f64,
    pub v_backward: f64,
    pub v_bidirectional: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionRow {
    pub lambda: f64,
    pub direction: Direction,
    pub theoretical_factor: f64,
    pub empirical_factor: f64,
    pub iterations: usize,
    pub final_residual: f64,
    /// Max-norm distance between the iterated and directly solved tables.
    pub solve_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DpReport {
    pub values: Vec<DpRow>,
    pub contraction: Vec<ContractionRow>,
}

pub const FIXPOINT_TOL: f64 = 1e-12;
const FIXPOINT_MAX_ITERS: usize = 1_000_000;

/// Exact value tables for each λ plus a value-iteration run of each
/// operator from zero.
pub fn dp_report(mdp: &TabularMdp, policy: &Policy, lambdas: &[f64]) -> Result<DpReport> {
    let visit = visitation_distribution(mdp, policy, 1e-14)?;
    let kernel = backward_kernel(mdp, policy, &visit)?;
    let gamma = mdp.gamma();
    let fwd = solve_forward(mdp, policy)?;
    let mut report = DpReport::default();
    for &lambda in lambdas {
        let back = solve_backward(mdp, &kernel, lambda)?;
        let bi = solve_bidirectional(mdp, policy, &kernel, lambda)?;
        for state in mdp.non_terminal() {
            report.values.push(DpRow {
                lambda,
                state,
                v_forward: fwd.values[state],
                v_backward: back.values[state],
                v_bidirectional: bi.values[state],
            });
        }
        let ops = [
            (BellmanOperator::Forward { mdp, policy }, &fwd),
            (
                BellmanOperator::Backward {
                    kernel: &kernel,
                    lambda,
                    gamma,
                },
                &back,
            ),
            (
                BellmanOperator::Bidirectional {
                    mdp,
                    policy,
                    kernel: &kernel,
                    lambda,
                    gamma,
                },
                &bi,
            ),
        ];
        for (op, direct) in ops {
            let (table, fp) =
                iterate_fixpoint(&op, op.zero_table(), FIXPOINT_TOL, FIXPOINT_MAX_ITERS)?;
            report.contraction.push(ContractionRow {
                lambda,
                direction: op.direction(),
                theoretical_factor: fp.theoretical_factor,
                empirical_factor: fp.empirical_factor,
                iterations: fp.iterations,
                final_residual: fp.final_residual,
                solve_gap: table.max_abs_diff(direct),
            });
        }
    }
    Ok(report)
}

/// Writes `dp.csv` and `contraction.csv` into `dir`.
pub fn write_dp_report(report: &DpReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = CsvOut::create(&dir.join("dp.csv"))?;
    out.row([
        "lambda",
        "state",
        "v_forward",
        "v_backward",
        "v_bidirectional",
    ])?;
    for r in &report.values {
        out.row([
            r.lambda.to_string(),
            r.state.to_string(),
            r.v_forward.to_string(),
            r.v_backward.to_string(),
            r.v_bidirectional.to_string(),
        ])?;
    }
    let dp = out.finish()?;

    let mut out = CsvOut::create(&dir.join("contraction.csv"))?;
    out.row([
        "lambda",
        "operator",
        "theoretical_factor",
        "empirical_factor",
        "iterations",
        "final_residual",
        "solve_gap",
    ])?;
    for r in &report.contraction {
        out.row([
            r.lambda.to_string(),
            r.direction.as_str().to_string(),
            r.theoretical_factor.to_string(),
            r.empirical_factor.to_string(),
            r.iterations.to_string(),
            r.final_residual.to_string(),
            r.solve_gap.to_string(),
        ])?;
    }
    Ok(vec![dp, out.finish()?])
}

/// Enumeration horizon long enough for the chain benchmarks to absorb.
pub const LEMMA_HORIZON: usize = 4_000;

/// Checks every reachable `(state, t)` with `t <= t_max`.
pub fn lemma_report(
    mdp: &TabularMdp,
    policy: &Policy,
    lambda: f64,
    t_max: usize,
    horizon: usize,
) -> Result<Vec<Lemma1Report>> {
    reachable_pairs(mdp, policy, t_max)
        .into_iter()
        .map(|(state, t)| lemma1_check(mdp, policy, lambda, state, t, horizon))
        .collect()
}

pub fn write_lemma_report(rows: &[Lemma1Report], path: &Path) -> Result<PathBuf> {
    let mut out = CsvOut::create(path)?;
    out.row([
        "state",
        "t",
        "lhs",
        "rhs",
        "gap",
        "lhs_return_form",
        "paths",
    ])?;
    for r in rows {
        out.row([
            r.state.to_string(),
            r.t.to_string(),
            r.lhs.to_string(),
            r.rhs.to_string(),
            r.gap.to_string(),
            r.lhs_return_form.to_string(),
            r.paths.to_string(),
        ])?;
    }
    out.finish()
}

pub fn write_stale_trace(rows: &[StaleTraceRow], path: &Path) -> Result<PathBuf> {
    let mut out = CsvOut::create(path)?;
    out.row(["rule", "episode", "t", "delta", "v_s0", "v_s1"])?;
    for r in rows {
        out.row([
            r.rule.to_string(),
            r.episode.to_string(),
            r.t.to_string(),
            r.delta.to_string(),
            r.v_s0.to_string(),
            r.v_s1.to_string(),
        ])?;
    }
    out.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_chain, build_two_state};

    #[test]
    fn dp_report_iterates_to_the_direct_solutions() {
        let mdp = build_chain(9, 5.0, 0.99).unwrap();
        let policy = Policy::uniform(&mdp);
        let report = dp_report(&mdp, &policy, &[0.0, 0.4]).unwrap();
        assert_eq!(report.values.len(), 18);
        assert_eq!(report.contraction.len(), 6);
        for c in &report.contraction {
            assert!(c.solve_gap < 1e-8, "{c:?}");
            assert!(c.empirical_factor <= c.theoretical_factor + 1e-9, "{c:?}");
        }
    }

    #[test]
    fn dp_csv_layout() {
        let mdp = build_two_state();
        let policy = Policy::uniform(&mdp);
        let dir = tempfile::tempdir().unwrap();
        let paths =
            write_dp_report(&dp_report(&mdp, &policy, &[0.5]).unwrap(), dir.path()).unwrap();
        let dp = fs::read_to_string(&paths[0]).unwrap();
        let lines: Vec<&str> = dp.lines().collect();
        assert_eq!(
            lines[0],
            "lambda,state,v_forward,v_backward,v_bidirectional"
        );
        assert_eq!(lines.len(), 3);
        let contraction = fs::read_to_string(&paths[1]).unwrap();
        assert_eq!(contraction.lines().count(), 4);
    }

    #[test]
    fn lemma_report_covers_reachable_pairs() {
        let mdp = build_chain(5, 5.0, 0.9).unwrap();
        let policy = Policy::uniform(&mdp);
        let rows = lemma_report(&mdp, &policy, 0.5, 2, LEMMA_HORIZON).unwrap();
        assert_eq!(rows.len(), reachable_pairs(&mdp, &policy, 2).len());
        assert!(rows.iter().filter(|r| r.t == 0).all(|r| r.gap < 1e-8));
    }

    #[test]
    fn csv_out_reports_path_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = CsvOut::create(&blocker.join("out.csv")).err().unwrap();
        assert!(err.to_string().contains("file"), "{err}");
    }
}
