//! Finite MDPs, the two benchmark environments, episode sampling, and the
//! time-reversed (backward) kernel built from the on-policy visitation
//! distribution.
//!
//! States are dense indices `0..n_states`. Terminal states are absorbing:
//! they self-loop with reward 0 and are never sampled as start states.
//! Values of terminal states are 0 by convention everywhere in the crate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

/// Step cap used when sampling episodes without an explicit limit.
pub const DEFAULT_MAX_STEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Flattened `[s][a][s']`.
    transition: Vec<f64>,
    /// Flattened `[s][a]`.
    reward: Vec<f64>,
    start_dist: Vec<f64>,
    terminal: Vec<bool>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        start_dist: Vec<f64>,
        terminal: Vec<bool>,
        gamma: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp(
                "need at least one state and one action".into(),
            ));
        }
        check_len(transition.len(), n_states * n_actions * n_states)?;
        check_len(reward.len(), n_states * n_actions)?;
        check_len(start_dist.len(), n_states)?;
        check_len(terminal.len(), n_states)?;
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidMdp(format!("gamma {gamma} outside (0, 1)")));
        }
        let mdp = Self {
            n_states,
            n_actions,
            transition,
            reward,
            start_dist,
            terminal,
            gamma,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.next_distribution(s, a);
                if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(Error::InvalidMdp(format!(
                        "P(.|{s},{a}) has entries outside [0,1]"
                    )));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > ROW_TOL {
                    return Err(Error::InvalidMdp(format!("P(.|{s},{a}) sums to {total}")));
                }
                if !self.reward(s, a).is_finite() {
                    return Err(Error::InvalidMdp(format!("R({s},{a}) is not finite")));
                }
                if self.terminal[s] && (row[s] != 1.0 || self.reward(s, a) != 0.0) {
                    return Err(Error::InvalidMdp(format!(
                        "terminal state {s} must self-loop with reward 0"
                    )));
                }
            }
        }
        let total: f64 = self.start_dist.iter().sum();
        if (total - 1.0).abs() > ROW_TOL || self.start_dist.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidMdp(format!(
                "start distribution sums to {total}"
            )));
        }
        if let Some(s) = (0..self.n_states).find(|&s| self.terminal[s] && self.start_dist[s] > 0.0)
        {
            return Err(Error::InvalidMdp(format!(
                "terminal state {s} has start probability"
            )));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn start_dist(&self) -> &[f64] {
        &self.start_dist
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal_flags(&self) -> &[bool] {
        &self.terminal
    }

    pub fn non_terminal(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_states).filter(|&s| !self.terminal[s])
    }

    pub fn n_non_terminal(&self) -> usize {
        self.non_terminal().count()
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn next_distribution(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Same MDP with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidMdp(format!("gamma {gamma} outside (0, 1)")));
        }
        Ok(Self {
            gamma,
            ..self.clone()
        })
    }

    /// State-to-state kernel under `policy`, flattened `[s][s']`.
    pub fn policy_transition(&self, policy: &Policy) -> Vec<f64> {
        let n = self.n_states;
        let mut out = vec![0.0; n * n];
        for s in 0..n {
            for a in 0..self.n_actions {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                for (dst, &p) in out[s * n..(s + 1) * n]
                    .iter_mut()
                    .zip(self.next_distribution(s, a))
                {
                    *dst += pa * p;
                }
            }
        }
        out
    }

    /// Expected one-step reward under `policy`.
    pub fn policy_reward(&self, policy: &Policy) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| {
                (0..self.n_actions)
                    .map(|a| policy.prob(s, a) * self.reward(s, a))
                    .sum()
            })
            .collect()
    }

    pub fn from_description(desc: &MdpDescription) -> Result<Self> {
        let (n, na) = (desc.n_states, desc.n_actions);
        let mut terminal = vec![false; n];
        for &t in &desc.terminal {
            check_state(t, n)?;
            terminal[t] = true;
        }
        let mut transition = vec![0.0; n * na * n];
        for tr in &desc.transitions {
            check_state(tr.state, n)?;
            check_state(tr.next, n)?;
            if tr.action >= na {
                return Err(Error::InvalidMdp(format!(
                    "action {} out of range",
                    tr.action
                )));
            }
            transition[(tr.state * na + tr.action) * n + tr.next] += tr.prob;
        }
        // Terminal states without explicit transitions get the absorbing self-loop.
        for s in (0..n).filter(|&s| terminal[s]) {
            for a in 0..na {
                let row = &mut transition[(s * na + a) * n..(s * na + a + 1) * n];
                if row.iter().all(|&p| p == 0.0) {
                    row[s] = 1.0;
                }
            }
        }
        let mut reward = vec![0.0; n * na];
        for r in &desc.rewards {
            check_state(r.state, n)?;
            if r.action >= na {
                return Err(Error::InvalidMdp(format!(
                    "action {} out of range",
                    r.action
                )));
            }
            reward[r.state * na + r.action] = r.reward;
        }
        Self::new(
            n,
            na,
            transition,
            reward,
            desc.start.clone(),
            terminal,
            desc.gamma,
        )
    }

    pub fn to_description(&self) -> MdpDescription {
        let (n, na) = (self.n_states, self.n_actions);
        let mut transitions = Vec::new();
        let mut rewards = Vec::new();
        for s in 0..n {
            for a in 0..na {
                for next in 0..n {
                    let prob = self.prob(s, a, next);
                    if prob > 0.0 {
                        transitions.push(TransitionSpec {
                            state: s,
                            action: a,
                            next,
                            prob,
                        });
                    }
                }
                if self.reward(s, a) != 0.0 {
                    rewards.push(RewardSpec {
                        state: s,
                        action: a,
                        reward: self.reward(s, a),
                    });
                }
            }
        }
        MdpDescription {
            n_states: n,
            n_actions: na,
            transitions,
            rewards,
            start: self.start_dist.clone(),
            terminal: (0..n).filter(|&s| self.terminal[s]).collect(),
            gamma: self.gamma,
        }
    }
}

fn check_len(actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

fn check_state(state: usize, n: usize) -> Result<()> {
    if state >= n {
        return Err(Error::StateOutOfRange { state, n });
    }
    Ok(())
}

/// JSON description of a tabular MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpDescription {
    pub n_states: usize,
    pub n_actions: usize,
    pub transitions: Vec<TransitionSpec>,
    #[serde(default)]
    pub rewards: Vec<RewardSpec>,
    pub start: Vec<f64>,
    #[serde(default)]
    pub terminal: Vec<usize>,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSpec {
    pub state: usize,
    pub action: usize,
    pub next: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

/// Linear chain of `n_nonterminal` states `0..n` flanked by two absorbing
/// terminals (`n` on the left, `n + 1` on the right).
///
/// Moving into non-terminal state `i` pays `+amplitude` for even `i` and
/// `-amplitude` for odd `i`; moving into a terminal pays 0. Episodes start
/// uniformly over the non-terminal states.
pub fn build_chain(n_nonterminal: usize, reward_amplitude: f64, gamma: f64) -> Result<TabularMdp> {
    if n_nonterminal < 2 {
        return Err(Error::InvalidArgument(format!(
            "chain needs at least 2 non-terminal states, got {n_nonterminal}"
        )));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma {gamma} outside (0, 1)"
        )));
    }
    let n = n_nonterminal;
    let n_states = n + 2;
    let (left_end, right_end) = (n, n + 1);
    let mut transition = vec![0.0; n_states * 2 * n_states];
    let mut reward = vec![0.0; n_states * 2];
    for s in 0..n {
        for (a, dst) in [
            (LEFT, s.checked_sub(1).unwrap_or(left_end)),
            (RIGHT, if s + 1 < n { s + 1 } else { right_end }),
        ] {
            transition[(s * 2 + a) * n_states + dst] = 1.0;
            reward[s * 2 + a] = entry_reward(dst, n, reward_amplitude);
        }
    }
    for t in [left_end, right_end] {
        for a in [LEFT, RIGHT] {
            transition[(t * 2 + a) * n_states + t] = 1.0;
        }
    }
    let mut start = vec![0.0; n_states];
    start[..n].fill(1.0 / n as f64);
    let mut terminal = vec![false; n_states];
    terminal[left_end] = true;
    terminal[right_end] = true;
    TabularMdp::new(n_states, 2, transition, reward, start, terminal, gamma)
}

fn entry_reward(dst: usize, n: usize, amplitude: f64) -> f64 {
    if dst >= n {
        0.0
    } else if dst % 2 == 0 {
        amplitude
    } else {
        -amplitude
    }
}

/// Deterministic `s0 -> s1 -> terminal` with zero rewards and γ = 0.99.
/// State 2 is the terminal; there is a single action.
pub fn build_two_state() -> TabularMdp {
    let n = 3;
    let mut transition = vec![0.0; n * n];
    transition[1] = 1.0; // s0 -> s1
    transition[n + 2] = 1.0; // s1 -> T
    transition[2 * n + 2] = 1.0; // T absorbs
    TabularMdp::new(
        n,
        1,
        transition,
        vec![0.0; n],
        vec![1.0, 0.0, 0.0],
        vec![false, false, true],
        0.99,
    )
    .expect("two-state MDP is well formed")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_actions = rows.first().map_or(0, Vec::len);
        if n_actions == 0 {
            return Err(Error::InvalidPolicy("empty policy".into()));
        }
        let mut probs = Vec::with_capacity(rows.len() * n_actions);
        for (s, row) in rows.iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::InvalidPolicy(format!(
                    "row {s} has {} actions",
                    row.len()
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_TOL || row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {total}")));
            }
            probs.extend_from_slice(row);
        }
        Ok(Self { n_actions, probs })
    }

    pub fn uniform(mdp: &TabularMdp) -> Self {
        let na = mdp.n_actions();
        Self {
            n_actions: na,
            probs: vec![1.0 / na as f64; mdp.n_states() * na],
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn action_probs(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_actions != mdp.n_actions() || self.n_states() != mdp.n_states() {
            return Err(Error::InvalidPolicy(format!(
                "policy shape {}x{} does not match MDP {}x{}",
                self.n_states(),
                self.n_actions,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub terminated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Discounted return G_t for every step.
    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let mut g = 0.0;
        for (i, tr) in self.transitions.iter().enumerate().rev() {
            g = tr.reward + gamma * g;
            out[i] = g;
        }
        out
    }

    /// Backward return Σ_{i=1}^{t} (λγ)^i R_{t-i} for every step.
    pub fn backward_returns(&self, lambda: f64, gamma: f64) -> Vec<f64> {
        let lg = lambda * gamma;
        let mut out = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for (i, tr) in self.transitions.iter().enumerate() {
            if i > 0 {
                acc = lg * (acc + self.transitions[i - 1].reward);
            }
            let _ = tr;
            out.push(acc);
        }
        out
    }
}

/// Inverse-CDF draw from a discrete distribution.
pub(crate) fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Continuing interaction with an episodic MDP: after absorption the next
/// call to [`EpisodeStream::step`] starts a fresh episode from d0.
pub struct EpisodeStream<'a> {
    mdp: &'a TabularMdp,
    policy: &'a Policy,
    state: Option<usize>,
}

impl<'a> EpisodeStream<'a> {
    pub fn new(mdp: &'a TabularMdp, policy: &'a Policy) -> Self {
        Self {
            mdp,
            policy,
            state: None,
        }
    }

    /// Returns the transition and whether it starts a new episode.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (Transition, bool) {
        let (s, fresh) = match self.state {
            Some(s) => (s, false),
            None => (sample_index(self.mdp.start_dist(), rng.gen()), true),
        };
        let tr = sample_transition(self.mdp, self.policy, s, rng);
        self.state = (!self.mdp.is_terminal(tr.next_state)).then_some(tr.next_state);
        (tr, fresh)
    }

    /// Drops the current episode; the next step restarts from d0.
    pub fn restart(&mut self) {
        self.state = None;
    }
}

fn sample_transition<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &Policy,
    s: usize,
    rng: &mut R,
) -> Transition {
    let action = sample_index(policy.action_probs(s), rng.gen());
    let next_state = sample_index(mdp.next_distribution(s, action), rng.gen());
    Transition {
        state: s,
        action,
        reward: mdp.reward(s, action),
        next_state,
    }
}

/// Rolls out one episode from d0, truncating after `max_steps` transitions.
pub fn sample_episode<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &Policy,
    rng: &mut R,
    max_steps: usize,
) -> Trajectory {
    let mut s = sample_index(mdp.start_dist(), rng.gen());
    let mut traj = Trajectory::default();
    while traj.len() < max_steps {
        let tr = sample_transition(mdp, policy, s, rng);
        traj.transitions.push(tr);
        if mdp.is_terminal(tr.next_state) {
            traj.terminated = true;
            break;
        }
        s = tr.next_state;
    }
    traj
}

const POWER_ITERATION_CAP: usize = 1_000_000;

/// Stationary distribution of the restart-augmented chain (absorption jumps
/// back to d0), restricted to non-terminal states and renormalised.
///
/// The chain can be periodic (the two-state MDP cycles with period 3), so the
/// iteration runs on the lazy chain `(I + M) / 2`, which has the same
/// stationary distribution.
pub fn visitation_distribution(mdp: &TabularMdp, policy: &Policy, tol: f64) -> Result<Vec<f64>> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    policy.check_against(mdp)?;
    let n = mdp.n_states();
    let pf = mdp.policy_transition(policy);
    let d0 = mdp.start_dist();
    // Starting from d0 keeps unreachable states at exactly zero mass.
    let mut x = d0.to_vec();
    let mut next = vec![0.0; n];
    let mut change = f64::INFINITY;
    for _ in 0..POWER_ITERATION_CAP {
        next.iter_mut().zip(&x).for_each(|(y, &xi)| *y = 0.5 * xi);
        for s in 0..n {
            let mass = 0.5 * x[s];
            if mass == 0.0 {
                continue;
            }
            let row: &[f64] = if mdp.is_terminal(s) {
                d0
            } else {
                &pf[s * n..(s + 1) * n]
            };
            for (y, &p) in next.iter_mut().zip(row) {
                *y += mass * p;
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|y| *y /= total);
        change = 0.5 * x.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum::<f64>();
        std::mem::swap(&mut x, &mut next);
        if change < tol {
            for s in 0..n {
                if mdp.is_terminal(s) {
                    x[s] = 0.0;
                }
            }
            let total: f64 = x.iter().sum();
            if total <= 0.0 {
                return Err(Error::InvalidMdp("no mass on non-terminal states".into()));
            }
            x.iter_mut().for_each(|v| *v /= total);
            return Ok(x);
        }
    }
    Err(Error::PowerIterationCap {
        iterations: POWER_ITERATION_CAP,
        last_change: change,
    })
}

/// Time-reversed transition and reward functions.
///
/// `p_back[s][s']` is the probability that the predecessor of `s` was `s'`.
/// Episode starts are modelled as arriving from a dummy start state with
/// value 0 and reward 0; its mass per state is kept in `dummy`, so that
/// `Σ_{s'} p_back[s][s'] + dummy[s] = 1` for every state in the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardKernel {
    n_states: usize,
    p_back: Vec<f64>,
    pub dummy: Vec<f64>,
    pub r_back: Vec<f64>,
    pub visit_dist: Vec<f64>,
    /// Non-terminal states with zero visitation mass; their rows are empty.
    pub excluded: Vec<usize>,
}

impl BackwardKernel {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn prob(&self, s: usize, prev: usize) -> f64 {
        self.p_back[s * self.n_states + prev]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.p_back[s * self.n_states..(s + 1) * self.n_states]
    }

    /// Total predecessor mass including the dummy start.
    pub fn row_mass(&self, s: usize) -> f64 {
        self.row(s).iter().sum::<f64>() + self.dummy[s]
    }

    pub fn in_domain(&self, s: usize) -> bool {
        self.visit_dist[s] > 0.0
    }
}

/// Builds the backward kernel from a visitation distribution `visit`
/// (as returned by [`visitation_distribution`]).
pub fn backward_kernel(mdp: &TabularMdp, policy: &Policy, visit: &[f64]) -> Result<BackwardKernel> {
    policy.check_against(mdp)?;
    let n = mdp.n_states();
    check_len(visit.len(), n)?;
    let pf = mdp.policy_transition(policy);
    let d0 = mdp.start_dist();

    // Mass flowing into the dummy start per unit of visitation.
    let restart: f64 = mdp
        .non_terminal()
        .map(|s| {
            visit[s]
                * (0..n)
                    .filter(|&t| mdp.is_terminal(t))
                    .map(|t| pf[s * n + t])
                    .sum::<f64>()
        })
        .sum();

    let mut p_back = vec![0.0; n * n];
    let mut dummy = vec![0.0; n];
    let mut r_back = vec![0.0; n];
    let mut excluded = Vec::new();
    let mut zero_mass = Vec::new();
    for s in mdp.non_terminal() {
        let ds = visit[s];
        if ds <= 0.0 {
            let inflow: f64 = mdp
                .non_terminal()
                .map(|p| visit[p] * pf[p * n + s])
                .sum::<f64>()
                + restart * d0[s];
            if inflow > ROW_TOL {
                zero_mass.push(s);
            } else {
                excluded.push(s);
            }
            continue;
        }
        let mut r = 0.0;
        for prev in mdp.non_terminal() {
            p_back[s * n + prev] = visit[prev] * pf[prev * n + s] / ds;
            for a in 0..mdp.n_actions() {
                r +=
                    visit[prev] * policy.prob(prev, a) * mdp.prob(prev, a, s) * mdp.reward(prev, a);
            }
        }
        dummy[s] = restart * d0[s] / ds;
        r_back[s] = r / ds;
    }
    if !zero_mass.is_empty() {
        return Err(Error::ZeroVisitation(zero_mass));
    }
    Ok(BackwardKernel {
        n_states: n,
        p_back,
        dummy,
        r_back,
        visit_dist: visit.to_vec(),
        excluded,
    })
}
