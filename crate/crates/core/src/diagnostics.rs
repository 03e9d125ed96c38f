//! Stale-gradient diagnostics and the evaluation metrics used by the
//! harness.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::ValueTable;
use crate::features::FeatureMap;
use crate::learners::{
    refreshed_td_lambda_step, td_lambda_step, Algorithm, LearnerConfig, LearnerState,
};
use crate::mdp::{Policy, TabularMdp};
use crate::net::{GradientVector, Head, MultiHeadNet, NetShape, NetSnapshot, Parameterization};

/// How one past state's trace contribution relates to its current gradient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StalenessRecord {
    pub t: usize,
    /// Position of the past state in the episode.
    pub i: usize,
    pub state: usize,
    /// `<∂v(S_i)/∂θ at θ_i, ∂v(S_i)/∂θ at θ_t>`.
    pub dot: f64,
    pub cosine: f64,
    pub obtuse: bool,
    /// First-order change of `v(S_i)` caused by the stored contribution,
    /// `δ_t (λγ)^{t-i} dot`.
    pub stale_effect: f64,
    /// The same with the refreshed contribution, `δ_t (λγ)^{t-i} |∂v(S_i)/∂θ at θ_t|²`.
    pub fresh_effect: f64,
}

impl StalenessRecord {
    /// Whether the stored contribution pushes `v(S_i)` against the refreshed one.
    pub fn opposes(&self) -> bool {
        self.stale_effect * self.fresh_effect < 0.0
    }
}

/// Compares each recorded gradient `recorded[i]` (taken at `θ_i` for state
/// `episode_states[i]`) with a fresh gradient at `current`.
pub fn staleness_probe(
    recorded: &[GradientVector],
    current: &MultiHeadNet,
    features: &FeatureMap,
    episode_states: &[usize],
    delta: f64,
    lambda: f64,
    gamma: f64,
) -> Result<Vec<StalenessRecord>> {
    if recorded.len() < episode_states.len() {
        return Err(Error::MissingGradient(recorded.len()));
    }
    let t = episode_states.len().saturating_sub(1);
    let lg = lambda * gamma;
    episode_states
        .iter()
        .enumerate()
        .map(|(i, &state)| {
            let fresh = current.gradient(features.encode(state)?, Head::Forward)?;
            let old = &recorded[i];
            if old.values.len() != fresh.values.len() {
                return Err(Error::DimensionMismatch {
                    expected: fresh.values.len(),
                    actual: old.values.len(),
                });
            }
            let dot = old.dot(&fresh);
            let norms = old.norm() * fresh.norm();
            let cosine = if norms > 0.0 {
                (dot / norms).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            let weight = delta * lg.powi((t - i) as i32);
            Ok(StalenessRecord {
                t,
                i,
                state,
                dot,
                cosine,
                obtuse: dot < 0.0,
                stale_effect: weight * dot,
                fresh_effect: weight * fresh.dot(&fresh),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaleDemoConfig {
    /// Hidden width; `None` gives a linear value function.
    pub hidden: Option<usize>,
    pub bias: bool,
    pub init_scale: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for StaleDemoConfig {
    fn default() -> Self {
        Self {
            hidden: Some(3),
            bias: false,
            init_scale: 2.0,
            alpha: 1.0,
            lambda: 0.95,
            gamma: 0.99,
        }
    }
}

/// An initialisation of the two-state network on which the stale trace
/// moves `v(s0)` the wrong way at `t = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaleExhibit {
    pub seed: u64,
    pub initial: NetSnapshot,
    pub delta0: f64,
    pub delta1: f64,
    /// `v(s0)` at θ_0, θ_1, and after the stale and refreshed second steps.
    pub v_s0: [f64; 4],
    pub v_s1: [f64; 4],
    pub stale_change: f64,
    pub refreshed_change: f64,
    pub record: StalenessRecord,
}

impl StaleExhibit {
    pub fn is_exhibit(&self) -> bool {
        self.delta0 < 0.0
            && self.delta1 > 0.0
            && self.record.obtuse
            && self.stale_change * self.delta1.signum() < 0.0
            && self.refreshed_change * self.delta1.signum() > 0.0
    }
}

const S0: usize = 0;
const S1: usize = 1;

pub fn stale_demo_net(config: &StaleDemoConfig, seed: u64) -> Result<MultiHeadNet> {
    let shape = NetShape {
        input: 2,
        hidden: config.hidden,
        bias: config.bias,
    };
    MultiHeadNet::random(
        shape,
        Parameterization::Fr,
        config.init_scale,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

/// Runs the first episode of the two-state MDP (`s0 -> s1 -> T`, zero
/// rewards) from the initialisation drawn with `seed`, and evaluates both
/// second-step rules from the same θ_1.
pub fn evaluate_stale_seed(config: &StaleDemoConfig, seed: u64) -> Result<StaleExhibit> {
    let features = FeatureMap::one_hot(2)?;
    let initial = stale_demo_net(config, seed)?;
    let cfg = LearnerConfig::new(
        Algorithm::TdLambda,
        config.alpha,
        config.lambda,
        config.gamma,
    );
    cfg.validate()?;
    let x0 = features.encode(S0)?;
    let x1 = features.encode(S1)?;
    let v = |net: &MultiHeadNet, x: &[f64]| net.value(x, Head::Forward);

    let mut net = initial.clone();
    let mut learner = LearnerState::new(net.n_params());
    let g0 = net.gradient(x0, Head::Forward)?;
    let delta0 = td_lambda_step(&mut net, &features, S0, 0.0, Some(S1), &mut learner, &cfg)?;
    learner.advance(S0, 0.0, config.lambda * config.gamma);
    let theta1 = net;

    let mut stale = theta1.clone();
    let delta1 = td_lambda_step(
        &mut stale,
        &features,
        S1,
        0.0,
        None,
        &mut learner.clone(),
        &cfg,
    )?;

    let mut refreshed = theta1.clone();
    let mut fresh_state = learner.clone();
    fresh_state.episode_states = vec![S0];
    refreshed_td_lambda_step(
        &mut refreshed,
        &features,
        S1,
        0.0,
        None,
        &mut fresh_state,
        &cfg,
    )?;

    let g1 = theta1.gradient(x1, Head::Forward)?;
    let records = staleness_probe(
        &[g0, g1],
        &theta1,
        &features,
        &[S0, S1],
        delta1,
        config.lambda,
        config.gamma,
    )?;
    let v_s0 = [
        v(&initial, x0)?,
        v(&theta1, x0)?,
        v(&stale, x0)?,
        v(&refreshed, x0)?,
    ];
    let v_s1 = [
        v(&initial, x1)?,
        v(&theta1, x1)?,
        v(&stale, x1)?,
        v(&refreshed, x1)?,
    ];
    Ok(StaleExhibit {
        seed,
        initial: initial.snapshot(),
        delta0,
        delta1,
        v_s0,
        v_s1,
        stale_change: v_s0[2] - v_s0[1],
        refreshed_change: v_s0[3] - v_s0[1],
        record: records[0].clone(),
    })
}

/// First seed in `seeds` whose initialisation exhibits the stale-trace
/// reversal at `t = 1`.
pub fn find_stale_demo(config: &StaleDemoConfig, seeds: Range<u64>) -> Result<StaleExhibit> {
    for seed in seeds.clone() {
        let candidate = evaluate_stale_seed(config, seed)?;
        if candidate.is_exhibit() {
            return Ok(candidate);
        }
    }
    Err(Error::NoExhibit {
        start: seeds.start,
        end: seeds.end,
    })
}

/// One row of a stale-versus-refreshed learning trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StaleTraceRow {
    pub rule: &'static str,
    pub episode: usize,
    pub t: usize,
    pub delta: f64,
    pub v_s0: f64,
    pub v_s1: f64,
}

/// Trains both trace rules from the exhibit's initialisation for
/// `episodes` episodes, recording values after every step.
pub fn stale_learning_trace(
    config: &StaleDemoConfig,
    seed: u64,
    episodes: usize,
) -> Result<Vec<StaleTraceRow>> {
    let features = FeatureMap::one_hot(2)?;
    let mut rows = Vec::new();
    for (rule, algorithm) in [
        ("stale", Algorithm::TdLambda),
        ("refreshed", Algorithm::RefreshedTdLambda),
    ] {
        let mut net = stale_demo_net(config, seed)?;
        let cfg = LearnerConfig::new(algorithm, config.alpha, config.lambda, config.gamma);
        let mut learner = LearnerState::new(net.n_params());
        for episode in 0..episodes {
            learner.reset();
            for (t, (s, next)) in [(S0, Some(S1)), (S1, None)].into_iter().enumerate() {
                let delta = match algorithm {
                    Algorithm::TdLambda => {
                        td_lambda_step(&mut net, &features, s, 0.0, next, &mut learner, &cfg)?
                    }
                    _ => refreshed_td_lambda_step(
                        &mut net,
                        &features,
                        s,
                        0.0,
                        next,
                        &mut learner,
                        &cfg,
                    )?,
                };
                learner.advance(s, 0.0, config.lambda * config.gamma);
                rows.push(StaleTraceRow {
                    rule,
                    episode,
                    t,
                    delta,
                    v_s0: net.value(features.encode(S0)?, Head::Forward)?,
                    v_s1: net.value(features.encode(S1)?, Head::Forward)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Forward-head values for every MDP state; terminal states get 0 and
/// non-terminal state `s` is encoded as feature row `s`.
pub fn forward_values(
    net: &MultiHeadNet,
    features: &FeatureMap,
    mdp: &TabularMdp,
) -> Result<Vec<f64>> {
    head_values(net, features, mdp, Head::Forward)
}

pub fn head_values(
    net: &MultiHeadNet,
    features: &FeatureMap,
    mdp: &TabularMdp,
    head: Head,
) -> Result<Vec<f64>> {
    (0..mdp.n_states())
        .map(|s| {
            if mdp.is_terminal(s) {
                Ok(0.0)
            } else {
                net.value(features.encode(s)?, head)
            }
        })
        .collect()
}

/// `Σ_s μ(s) (r(s) + γ Σ_{s'} P(s'|s) v(s') - v(s))²` over non-terminal states.
pub fn mstde(values: &[f64], mdp: &TabularMdp, policy: &Policy, visit: &[f64]) -> Result<f64> {
    let n = mdp.n_states();
    for len in [values.len(), visit.len()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    let pf = mdp.policy_transition(policy);
    let rf = mdp.policy_reward(policy);
    let gamma = mdp.gamma();
    Ok(mdp
        .non_terminal()
        .map(|s| {
            let boot: f64 = mdp.non_terminal().map(|j| pf[s * n + j] * values[j]).sum();
            let err = rf[s] + gamma * boot - values[s];
            visit[s] * err * err
        })
        .sum())
}

/// `sqrt(Σ_s μ(s) (v(s) - v_π(s))²)`.
pub fn rmsve(values: &[f64], exact: &ValueTable, visit: &[f64]) -> Result<f64> {
    let n = exact.len();
    for len in [values.len(), visit.len()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    Ok((0..n)
        .map(|s| visit[s] * (values[s] - exact.values[s]).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Learning curve sampled at increasing step indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricSeries {
    pub steps: Vec<usize>,
    pub mstde: Vec<f64>,
    pub rmsve: Vec<f64>,
}

impl MetricSeries {
    pub fn push(&mut self, step: usize, mstde: f64, rmsve: f64) {
        self.steps.push(step);
        self.mstde.push(mstde);
        self.rmsve.push(rmsve);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Trapezoidal area under the MSTDE curve against the step index;
    /// infinite if any point is not finite.
    pub fn auc(&self) -> f64 {
        trapezoid(&self.steps, &self.mstde)
    }
}

pub fn trapezoid(steps: &[usize], values: &[f64]) -> f64 {
    if values.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    steps
        .windows(2)
        .zip(values.windows(2))
        .map(|(s, v)| (s[1] - s[0]) as f64 * 0.5 * (v[0] + v[1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::solve_forward;
    use crate::mdp::{build_chain, build_two_state, visitation_distribution};
    use proptest::prelude::*;

    fn chain9() -> (TabularMdp, Policy, Vec<f64>) {
        let mdp = build_chain(9, 5.0, 0.99).unwrap();
        let pi = Policy::uniform(&mdp);
        let d = visitation_distribution(&mdp, &pi, 1e-15).unwrap();
        (mdp, pi, d)
    }

    #[test]
    fn mstde_vanishes_at_exact_values() {
        let (mdp, pi, d) = chain9();
        let v = solve_forward(&mdp, &pi).unwrap();
        assert!(mstde(&v.values, &mdp, &pi, &d).unwrap() < 1e-12);
    }

    #[test]
    fn mstde_of_zero_values() {
        let two = build_two_state();
        let pi = Policy::uniform(&two);
        let d = visitation_distribution(&two, &pi, 1e-14).unwrap();
        assert_eq!(mstde(&[0.0; 3], &two, &pi, &d).unwrap(), 0.0);
        let (mdp, pi, d) = chain9();
        assert!((mstde(&[0.0; 11], &mdp, &pi, &d).unwrap() - 22.954545454545457).abs() < 1e-9);
    }

    #[test]
    fn chain9_visitation_fixture() {
        let (_, _, d) = chain9();
        for s in 0..9 {
            let want = ((s + 1) * (9 - s)) as f64 / 165.0;
            assert!((d[s] - want).abs() < 1e-10, "state {s}");
        }
    }

    #[test]
    fn rmsve_properties() {
        let (mdp, pi, d) = chain9();
        let v = solve_forward(&mdp, &pi).unwrap();
        assert_eq!(rmsve(&v.values, &v, &d).unwrap(), 0.0);
        // Shift the non-terminal entries only; terminal mass is zero anyway.
        let shifted: Vec<f64> = v.values.iter().map(|x| x - 1.5).collect();
        assert!((rmsve(&shifted, &v, &d).unwrap() - 1.5).abs() < 1e-12);
        assert!(rmsve(&[0.0; 3], &v, &d).is_err());
    }

    #[test]
    fn linear_nets_are_never_obtuse() {
        let f = FeatureMap::one_hot(2).unwrap();
        let mut net = MultiHeadNet::random(
            NetShape::linear(2),
            Parameterization::Fr,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let g0 = net.gradient(f.encode(0).unwrap(), Head::Forward).unwrap();
        let g = net.gradient(f.encode(0).unwrap(), Head::Forward).unwrap();
        net.sgd_step(&g, -3.0).unwrap();
        let g1 = net.gradient(f.encode(1).unwrap(), Head::Forward).unwrap();
        let recs = staleness_probe(&[g0, g1], &net, &f, &[0, 1], 1.0, 0.95, 0.99).unwrap();
        for r in recs {
            assert!(!r.obtuse);
            assert!((r.dot - 1.0).abs() < 1e-15);
            assert!((r.cosine - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_net_dot_is_squared_norm() {
        let f = FeatureMap::one_hot(2).unwrap();
        let net = MultiHeadNet::random(
            NetShape::relu(2, 4),
            Parameterization::Fr,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let gs: Vec<GradientVector> = (0..2)
            .map(|s| net.gradient(f.encode(s).unwrap(), Head::Forward).unwrap())
            .collect();
        for r in staleness_probe(&gs, &net, &f, &[0, 1], -0.5, 0.95, 0.99).unwrap() {
            assert!((r.dot - gs[r.i].dot(&gs[r.i])).abs() < 1e-12);
            assert!(!r.obtuse);
            assert!(!r.opposes());
        }
    }

    #[test]
    fn probe_reports_missing_gradients() {
        let f = FeatureMap::one_hot(2).unwrap();
        let net = MultiHeadNet::zeros(NetShape::relu(2, 2), Parameterization::Fr).unwrap();
        assert!(matches!(
            staleness_probe(&[], &net, &f, &[0], 1.0, 0.9, 0.9),
            Err(Error::MissingGradient(0))
        ));
    }

    #[test]
    fn stale_demo_finds_a_reproducible_exhibit() {
        let cfg = StaleDemoConfig::default();
        let ex = find_stale_demo(&cfg, 0..10_000).unwrap();
        assert!(ex.is_exhibit());
        assert!(ex.delta1 > 0.0 && ex.stale_change < 0.0 && ex.refreshed_change > 0.0);
        assert!(ex.record.obtuse && ex.record.opposes());
        assert_eq!(evaluate_stale_seed(&cfg, ex.seed).unwrap(), ex);
    }

    #[test]
    fn linear_stale_demo_finds_nothing() {
        let cfg = StaleDemoConfig {
            hidden: None,
            ..StaleDemoConfig::default()
        };
        assert!(matches!(
            find_stale_demo(&cfg, 0..2_000),
            Err(Error::NoExhibit {
                start: 0,
                end: 2_000
            })
        ));
    }

    #[test]
    fn learning_trace_starts_from_the_exhibit() {
        let cfg = StaleDemoConfig::default();
        let ex = find_stale_demo(&cfg, 0..10_000).unwrap();
        let rows = stale_learning_trace(&cfg, ex.seed, 3).unwrap();
        assert_eq!(rows.len(), 2 * 3 * 2);
        assert_eq!(rows[1].v_s0, ex.v_s0[2]);
        assert_eq!(rows[7].v_s0, ex.v_s0[3]);
    }

    #[test]
    fn auc_of_constant_curve() {
        let mut m = MetricSeries::default();
        for k in 0..=10 {
            m.push(k * 100, 2.0, 0.0);
        }
        assert!((m.auc() - 2000.0).abs() < 1e-12);
        m.mstde[3] = f64::NAN;
        assert_eq!(m.auc(), f64::INFINITY);
    }

    proptest! {
        #[test]
        fn lower_curve_has_lower_auc(vals in prop::collection::vec(0.0f64..100.0, 2..50), gap in 0.001f64..10.0) {
            let steps: Vec<usize> = (0..vals.len()).map(|k| k * 100).collect();
            let lower: Vec<f64> = vals.iter().map(|v| v - gap).collect();
            prop_assert!(trapezoid(&steps, &lower) < trapezoid(&steps, &vals));
        }
    }
}
