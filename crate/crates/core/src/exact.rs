//! Exact dynamic programming for the forward, backward and bidirectional
//! value functions, Bellman-operator fixpoint iteration, and the
//! enumeration check of the past/future return identity.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{BackwardKernel, Policy, TabularMdp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
    Bidirectional,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
            Direction::Bidirectional => "bidirectional",
        }
    }
}

/// One value per MDP state; terminal entries are always 0.
///
/// `lambda` is carried for every direction but only affects backward and
/// bidirectional values.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub direction: Direction,
    pub values: Vec<f64>,
    pub lambda: f64,
    pub gamma: f64,
}

impl ValueTable {
    pub fn new(direction: Direction, values: Vec<f64>, lambda: f64, gamma: f64) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "value for state {i} is not finite"
            )));
        }
        check_lambda_gamma(lambda, gamma)?;
        Ok(Self {
            direction,
            values,
            lambda,
            gamma,
        })
    }

    pub fn zeros(direction: Direction, n_states: usize, lambda: f64, gamma: f64) -> Self {
        Self {
            direction,
            values: vec![0.0; n_states],
            lambda,
            gamma,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs_diff(&self, other: &ValueTable) -> f64 {
        max_abs_diff(&self.values, &other.values)
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn check_lambda_gamma(lambda: f64, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma {gamma} outside (0, 1)"
        )));
    }
    Ok(())
}

fn expect_direction(values: &ValueTable, want: Direction) -> Result<()> {
    if values.direction != want {
        return Err(Error::InvalidArgument(format!(
            "expected a {} value table, got {}",
            want.as_str(),
            values.direction.as_str()
        )));
    }
    Ok(())
}

fn expect_len(actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Worst-case max-norm contraction of the backward operator.
pub fn backward_factor(lambda: f64, gamma: f64) -> f64 {
    lambda * gamma
}

/// Worst-case max-norm contraction of the bidirectional operator.
pub fn bidirectional_factor(lambda: f64, gamma: f64) -> f64 {
    gamma * (1.0 + lambda) / (1.0 + lambda * gamma * gamma)
}

/// Solves `(I - γ P) v = r` over the non-terminal states.
pub fn solve_forward(mdp: &TabularMdp, policy: &Policy) -> Result<ValueTable> {
    let n = mdp.n_states();
    let gamma = mdp.gamma();
    let pf = mdp.policy_transition(policy);
    let rf = mdp.policy_reward(policy);
    let values = solve_over_non_terminal(
        mdp,
        |s, j| if s == j { 1.0 } else { 0.0 } - gamma * pf[s * n + j],
        |s| rf[s],
    )?;
    let residual = mdp
        .non_terminal()
        .map(|s| {
            (rf[s] + gamma * (0..n).map(|j| pf[s * n + j] * values[j]).sum::<f64>() - values[s])
                .abs()
        })
        .fold(0.0, f64::max);
    if residual >= 1e-10 {
        return Err(Error::NoConvergence {
            iterations: 1,
            residual,
        });
    }
    ValueTable::new(Direction::Forward, values, 0.0, gamma)
}

/// Direct solve of the backward Bellman equation `v = λγ r⃖ + λγ P⃖ v`.
pub fn solve_backward(
    mdp: &TabularMdp,
    kernel: &BackwardKernel,
    lambda: f64,
) -> Result<ValueTable> {
    let gamma = mdp.gamma();
    check_lambda_gamma(lambda, gamma)?;
    expect_len(kernel.n_states(), mdp.n_states())?;
    let lg = lambda * gamma;
    let values = solve_over_non_terminal(
        mdp,
        |s, j| if s == j { 1.0 } else { 0.0 } - lg * kernel.prob(s, j),
        |s| lg * kernel.r_back[s],
    )?;
    ValueTable::new(Direction::Backward, values, lambda, gamma)
}

/// Direct solve of the fixpoint of [`apply_bidirectional_operator`].
pub fn solve_bidirectional(
    mdp: &TabularMdp,
    policy: &Policy,
    kernel: &BackwardKernel,
    lambda: f64,
) -> Result<ValueTable> {
    let n = mdp.n_states();
    let gamma = mdp.gamma();
    check_lambda_gamma(lambda, gamma)?;
    expect_len(kernel.n_states(), n)?;
    let pf = mdp.policy_transition(policy);
    let rf = mdp.policy_reward(policy);
    let g2l = gamma * gamma * lambda;
    let values = solve_over_non_terminal(
        mdp,
        |s, j| if s == j { 1.0 + g2l } else { 0.0 } - gamma * pf[s * n + j] - lambda * gamma * kernel.prob(s, j),
        |s| rf[s] * (1.0 - g2l),
    )?;
    ValueTable::new(Direction::Bidirectional, values, lambda, gamma)
}

fn solve_over_non_terminal(
    mdp: &TabularMdp,
    coef: impl Fn(usize, usize) -> f64,
    rhs: impl Fn(usize) -> f64,
) -> Result<Vec<f64>> {
    let idx: Vec<usize> = mdp.non_terminal().collect();
    let m = idx.len();
    let a = DMatrix::from_fn(m, m, |i, j| coef(idx[i], idx[j]));
    let b = DVector::from_fn(m, |i, _| rhs(idx[i]));
    let x = a.lu().solve(&b).ok_or(Error::Singular)?;
    let mut values = vec![0.0; mdp.n_states()];
    for (i, &s) in idx.iter().enumerate() {
        values[s] = x[i];
    }
    Ok(values)
}

/// One sweep of `T⃖v(s) = λγ r⃖(s) + λγ Σ_{s'} P⃖(s'|s) v(s')`.
///
/// The dummy start predecessor contributes value 0 and reward 0.
pub fn apply_backward_operator(
    values: &ValueTable,
    kernel: &BackwardKernel,
    lambda: f64,
    gamma: f64,
) -> Result<ValueTable> {
    expect_direction(values, Direction::Backward)?;
    check_lambda_gamma(lambda, gamma)?;
    expect_len(values.len(), kernel.n_states())?;
    let lg = lambda * gamma;
    let out = (0..kernel.n_states())
        .map(|s| {
            if !kernel.in_domain(s) {
                return 0.0;
            }
            let boot: f64 = kernel
                .row(s)
                .iter()
                .zip(&values.values)
                .map(|(p, v)| p * v)
                .sum();
            lg * (kernel.r_back[s] + boot)
        })
        .collect();
    Ok(ValueTable {
        direction: Direction::Backward,
        values: out,
        lambda,
        gamma,
    })
}

/// One sweep of
/// `T↔v(s) = [r(s)(1 - γ²λ) + γ Σ P⃗(s''|s) v(s'') + λγ Σ P⃖(s'|s) v(s')] / (1 + γ²λ)`.
pub fn apply_bidirectional_operator(
    values: &ValueTable,
    mdp: &TabularMdp,
    policy: &Policy,
    kernel: &BackwardKernel,
    lambda: f64,
    gamma: f64,
) -> Result<ValueTable> {
    expect_direction(values, Direction::Bidirectional)?;
    check_lambda_gamma(lambda, gamma)?;
    let n = mdp.n_states();
    expect_len(values.len(), n)?;
    expect_len(kernel.n_states(), n)?;
    let pf = mdp.policy_transition(policy);
    let rf = mdp.policy_reward(policy);
    let g2l = gamma * gamma * lambda;
    let out = (0..n)
        .map(|s| {
            if mdp.is_terminal(s) {
                return 0.0;
            }
            let fwd: f64 = pf[s * n..(s + 1) * n]
                .iter()
                .zip(&values.values)
                .map(|(p, v)| p * v)
                .sum();
            let back: f64 = kernel
                .row(s)
                .iter()
                .zip(&values.values)
                .map(|(p, v)| p * v)
                .sum();
            (rf[s] * (1.0 - g2l) + gamma * fwd + lambda * gamma * back) / (1.0 + g2l)
        })
        .collect();
    Ok(ValueTable {
        direction: Direction::Bidirectional,
        values: out,
        lambda,
        gamma,
    })
}

/// One sweep of the forward operator `Tv = r + γ P⃗ v`, with `gamma` taken
/// from the MDP.
pub fn apply_forward_operator(
    values: &ValueTable,
    mdp: &TabularMdp,
    policy: &Policy,
) -> Result<ValueTable> {
    expect_direction(values, Direction::Forward)?;
    let n = mdp.n_states();
    expect_len(values.len(), n)?;
    let pf = mdp.policy_transition(policy);
    let rf = mdp.policy_reward(policy);
    let gamma = mdp.gamma();
    let out = (0..n)
        .map(|s| {
            if mdp.is_terminal(s) {
                return 0.0;
            }
            rf[s]
                + gamma
                    * pf[s * n..(s + 1) * n]
                        .iter()
                        .zip(&values.values)
                        .map(|(p, v)| p * v)
                        .sum::<f64>()
        })
        .collect();
    Ok(ValueTable {
        direction: Direction::Forward,
        values: out,
        lambda: values.lambda,
        gamma,
    })
}

#[derive(Debug, Clone, Copy)]
pub enum BellmanOperator<'a> {
    Forward {
        mdp: &'a TabularMdp,
        policy: &'a Policy,
    },
    Backward {
        kernel: &'a BackwardKernel,
        lambda: f64,
        gamma: f64,
    },
    Bidirectional {
        mdp: &'a TabularMdp,
        policy: &'a Policy,
        kernel: &'a BackwardKernel,
        lambda: f64,
        gamma: f64,
    },
}

impl BellmanOperator<'_> {
    pub fn apply(&self, values: &ValueTable) -> Result<ValueTable> {
        match *self {
            BellmanOperator::Forward { mdp, policy } => apply_forward_operator(values, mdp, policy),
            BellmanOperator::Backward {
                kernel,
                lambda,
                gamma,
            } => apply_backward_operator(values, kernel, lambda, gamma),
            BellmanOperator::Bidirectional {
                mdp,
                policy,
                kernel,
                lambda,
                gamma,
            } => apply_bidirectional_operator(values, mdp, policy, kernel, lambda, gamma),
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            BellmanOperator::Forward { .. } => Direction::Forward,
            BellmanOperator::Backward { .. } => Direction::Backward,
            BellmanOperator::Bidirectional { .. } => Direction::Bidirectional,
        }
    }

    pub fn theoretical_factor(&self) -> f64 {
        match *self {
            BellmanOperator::Forward { mdp, .. } => mdp.gamma(),
            BellmanOperator::Backward { lambda, gamma, .. } => backward_factor(lambda, gamma),
            BellmanOperator::Bidirectional { lambda, gamma, .. } => {
                bidirectional_factor(lambda, gamma)
            }
        }
    }

    /// A zero table of the right direction and size.
    pub fn zero_table(&self) -> ValueTable {
        match *self {
            BellmanOperator::Forward { mdp, .. } => {
                ValueTable::zeros(Direction::Forward, mdp.n_states(), 0.0, mdp.gamma())
            }
            BellmanOperator::Backward {
                kernel,
                lambda,
                gamma,
            } => ValueTable::zeros(Direction::Backward, kernel.n_states(), lambda, gamma),
            BellmanOperator::Bidirectional {
                mdp, lambda, gamma, ..
            } => ValueTable::zeros(Direction::Bidirectional, mdp.n_states(), lambda, gamma),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixpointReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub empirical_factor: f64,
    pub theoretical_factor: f64,
    /// Max-norm change of every sweep, in order.
    pub residuals: Vec<f64>,
}

const RATE_WINDOW: usize = 10;

/// Applies `operator` until the max-norm change drops below `tol`.
pub fn iterate_fixpoint(
    operator: &BellmanOperator<'_>,
    initial: ValueTable,
    tol: f64,
    max_iters: usize,
) -> Result<(ValueTable, FixpointReport)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let mut current = initial;
    let mut residuals = Vec::new();
    for _ in 0..max_iters {
        let next = operator.apply(&current)?;
        let residual = next.max_abs_diff(&current);
        residuals.push(residual);
        current = next;
        if residual < tol {
            let report = FixpointReport {
                iterations: residuals.len(),
                final_residual: residual,
                empirical_factor: empirical_factor(&residuals),
                theoretical_factor: operator.theoretical_factor(),
                residuals,
            };
            return Ok((current, report));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iters,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

/// Geometric mean of the last few successive residual ratios.
fn empirical_factor(residuals: &[f64]) -> f64 {
    let ratios: Vec<f64> = residuals
        .windows(2)
        .filter(|w| w[0] > 0.0 && w[1] > 0.0)
        .map(|w| w[1] / w[0])
        .collect();
    let window = &ratios[ratios.len().saturating_sub(RATE_WINDOW)..];
    if window.is_empty() {
        return 0.0;
    }
    (window.iter().map(|r| r.ln()).sum::<f64>() / window.len() as f64).exp()
}

/// `max_s |v_bi(s) - v_fwd(s) - v_back(s)|`.
pub fn bidirectional_consistency(
    v_fwd: &ValueTable,
    v_back: &ValueTable,
    v_bi: &ValueTable,
) -> Result<f64> {
    expect_direction(v_fwd, Direction::Forward)?;
    expect_direction(v_back, Direction::Backward)?;
    expect_direction(v_bi, Direction::Bidirectional)?;
    expect_len(v_back.len(), v_fwd.len())?;
    expect_len(v_bi.len(), v_fwd.len())?;
    Ok((0..v_fwd.len())
        .map(|s| (v_bi.values[s] - v_fwd.values[s] - v_back.values[s]).abs())
        .fold(0.0, f64::max))
}

pub const ENUMERATION_CAP: usize = 10_000_000;
const TAIL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma1Report {
    pub state: usize,
    pub t: usize,
    /// `E[Σ_{i≤t} (λγ)^{t-i} v(S_i) | S_t = s]`.
    pub lhs: f64,
    /// `E[G_t + G⃖_t - γ(λγ)^{t+1} G_0 | S_t = s] / (1 - γ²λ)`.
    pub rhs: f64,
    pub gap: f64,
    /// Left side with the sampled returns `G_i` in place of `v(S_i)`.
    pub lhs_return_form: f64,
    pub paths: usize,
}

/// Exhaustive check of the past/future identity at `(state, t)`.
///
/// Past paths `S_0..S_t` are enumerated explicitly; the expected future
/// return from `S_t` is obtained by propagating the state distribution for
/// `horizon` steps, which must leave less than 1e-10 unabsorbed mass.
pub fn lemma1_check(
    mdp: &TabularMdp,
    policy: &Policy,
    lambda: f64,
    state: usize,
    t: usize,
    horizon: usize,
) -> Result<Lemma1Report> {
    let gamma = mdp.gamma();
    check_lambda_gamma(lambda, gamma)?;
    if state >= mdp.n_states() {
        return Err(Error::StateOutOfRange {
            state,
            n: mdp.n_states(),
        });
    }
    if mdp.is_terminal(state) {
        return Err(Error::ZeroProbabilityEvent { state, t });
    }
    let v = solve_forward(mdp, policy)?;
    let future = expected_future_return(mdp, policy, state, horizon)?;
    let lg = lambda * gamma;

    let mut paths = Vec::new();
    enumerate_paths(mdp, policy, t, state, &mut paths)?;
    let z: f64 = paths.iter().map(|p| p.weight).sum();
    if z <= 0.0 {
        return Err(Error::ZeroProbabilityEvent { state, t });
    }

    let (mut lhs, mut rhs, mut lhs_ret) = (0.0, 0.0, 0.0);
    for path in &paths {
        let w = path.weight / z;
        // path.states has t + 1 entries, path.rewards has t.
        let lhs_p: f64 = (0..=t)
            .map(|i| lg.powi((t - i) as i32) * v.values[path.states[i]])
            .sum();
        let back: f64 = (1..=t)
            .map(|i| lg.powi(i as i32) * path.rewards[t - i])
            .sum();
        let g0 = (0..t)
            .map(|k| gamma.powi(k as i32) * path.rewards[k])
            .sum::<f64>()
            + gamma.powi(t as i32) * future;
        let rhs_p =
            (future + back - gamma * lg.powi(t as i32 + 1) * g0) / (1.0 - gamma * gamma * lambda);
        let ret_p: f64 = (0..=t)
            .map(|i| {
                let g_i = (i..t)
                    .map(|k| gamma.powi((k - i) as i32) * path.rewards[k])
                    .sum::<f64>()
                    + gamma.powi((t - i) as i32) * future;
                lg.powi((t - i) as i32) * g_i
            })
            .sum();
        lhs += w * lhs_p;
        rhs += w * rhs_p;
        lhs_ret += w * ret_p;
    }
    Ok(Lemma1Report {
        state,
        t,
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
        lhs_return_form: lhs_ret,
        paths: paths.len(),
    })
}

struct PastPath {
    weight: f64,
    states: Vec<usize>,
    rewards: Vec<f64>,
}

fn enumerate_paths(
    mdp: &TabularMdp,
    policy: &Policy,
    t: usize,
    target: usize,
    out: &mut Vec<PastPath>,
) -> Result<()> {
    fn extend(
        mdp: &TabularMdp,
        policy: &Policy,
        t: usize,
        target: usize,
        path: &mut PastPath,
        out: &mut Vec<PastPath>,
    ) -> Result<()> {
        let s = *path.states.last().expect("paths are non-empty");
        if path.states.len() == t + 1 {
            if s == target {
                if out.len() >= ENUMERATION_CAP {
                    return Err(Error::EnumerationCap {
                        cap: ENUMERATION_CAP,
                    });
                }
                out.push(PastPath {
                    weight: path.weight,
                    states: path.states.clone(),
                    rewards: path.rewards.clone(),
                });
            }
            return Ok(());
        }
        for a in 0..mdp.n_actions() {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for next in 0..mdp.n_states() {
                let p = mdp.prob(s, a, next);
                if p == 0.0 || mdp.is_terminal(next) {
                    continue;
                }
                let saved = path.weight;
                path.weight *= pa * p;
                path.states.push(next);
                path.rewards.push(mdp.reward(s, a));
                extend(mdp, policy, t, target, path, out)?;
                path.states.pop();
                path.rewards.pop();
                path.weight = saved;
            }
        }
        Ok(())
    }

    for s0 in mdp.non_terminal() {
        let w = mdp.start_dist()[s0];
        if w == 0.0 {
            continue;
        }
        let mut path = PastPath {
            weight: w,
            states: vec![s0],
            rewards: Vec::new(),
        };
        extend(mdp, policy, t, target, &mut path, out)?;
    }
    Ok(())
}

/// `E[G | S_0 = s]` by forward propagation of the state distribution.
fn expected_future_return(
    mdp: &TabularMdp,
    policy: &Policy,
    s: usize,
    horizon: usize,
) -> Result<f64> {
    let n = mdp.n_states();
    let pf = mdp.policy_transition(policy);
    let rf = mdp.policy_reward(policy);
    let gamma = mdp.gamma();
    let mut dist = vec![0.0; n];
    dist[s] = 1.0;
    let mut total = 0.0;
    let mut discount = 1.0;
    for _ in 0..horizon {
        total += discount * mdp.non_terminal().map(|x| dist[x] * rf[x]).sum::<f64>();
        let mut next = vec![0.0; n];
        for x in mdp.non_terminal() {
            if dist[x] == 0.0 {
                continue;
            }
            for (y, &p) in next.iter_mut().zip(&pf[x * n..(x + 1) * n]) {
                *y += dist[x] * p;
            }
        }
        dist = next;
        discount *= gamma;
    }
    let tail: f64 = mdp.non_terminal().map(|x| dist[x]).sum();
    if tail >= TAIL_TOL {
        return Err(Error::HorizonTooShort { horizon, tail });
    }
    Ok(total)
}

/// Non-terminal states with positive probability at time `t`, for every
/// `t` in `0..=t_max`.
pub fn reachable_pairs(mdp: &TabularMdp, policy: &Policy, t_max: usize) -> Vec<(usize, usize)> {
    let n = mdp.n_states();
    let pf = mdp.policy_transition(policy);
    let mut dist = mdp.start_dist().to_vec();
    let mut out = Vec::new();
    for t in 0..=t_max {
        out.extend(
            mdp.non_terminal()
                .filter(|&s| dist[s] > 0.0)
                .map(|s| (s, t)),
        );
        let mut next = vec![0.0; n];
        for x in mdp.non_terminal() {
            for (y, &p) in next.iter_mut().zip(&pf[x * n..(x + 1) * n]) {
                *y += dist[x] * p;
            }
        }
        dist = next;
    }
    out
}
