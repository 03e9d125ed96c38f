//! Online update rules: TD(0), TD(λ) with stale and refreshed traces, the
//! online backward Monte-Carlo rule, and the joint bidirectional TD update
//! with its catalog of interchangeable targets.
//!
//! States are encoded through a [`FeatureMap`]; a `next_state` of `None`
//! means the transition entered a terminal state, whose value is 0 for every
//! head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::net::{Head, HeadValues, MultiHeadNet, Parameterization};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "TD0")]
    Td0,
    #[serde(rename = "TDLambda")]
    TdLambda,
    #[serde(rename = "RefreshedTDLambda")]
    RefreshedTdLambda,
    #[serde(rename = "BackwardMC")]
    BackwardMc,
    #[serde(rename = "BiTD")]
    BiTd,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Td0 => "TD0",
            Algorithm::TdLambda => "TDLambda",
            Algorithm::RefreshedTdLambda => "RefreshedTDLambda",
            Algorithm::BackwardMc => "BackwardMC",
            Algorithm::BiTd => "BiTD",
        }
    }
}

/// Regression targets, grouped by the head they train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// `v⃖(s) + R + γ v⃗(s')`
    PsiBackPlusTd,
    /// `v⃖(s) + v⃗(s)`
    PsiBackPlusFwd,
    /// `[R(1 - γ²λ) + γ v↔(s') + γλ v↔(s_prev)] / (1 + γ²λ)`
    PsiBellman,
    /// Online backward return `G⃖_t`.
    PhiBackwardReturn,
    /// `λγ R_prev + λγ v⃖(s_prev)`
    PhiBackwardTd,
    /// `v↔(s) - v⃗(s)`
    PhiBiMinusFwd,
    /// `R + γ v⃗(s')`
    ThetaTd,
    /// `v↔(s) - v⃖(s)`
    ThetaBiMinusBack,
    /// `v↔(s) - G⃖_t`
    ThetaBiMinusReturn,
}

impl TargetKind {
    pub const ALL: [TargetKind; 9] = [
        TargetKind::PsiBackPlusTd,
        TargetKind::PsiBackPlusFwd,
        TargetKind::PsiBellman,
        TargetKind::PhiBackwardReturn,
        TargetKind::PhiBackwardTd,
        TargetKind::PhiBiMinusFwd,
        TargetKind::ThetaTd,
        TargetKind::ThetaBiMinusBack,
        TargetKind::ThetaBiMinusReturn,
    ];

    pub fn head(self) -> Head {
        use TargetKind::*;
        match self {
            PsiBackPlusTd | PsiBackPlusFwd | PsiBellman => Head::Bidirectional,
            PhiBackwardReturn | PhiBackwardTd | PhiBiMinusFwd => Head::Backward,
            ThetaTd | ThetaBiMinusBack | ThetaBiMinusReturn => Head::Forward,
        }
    }

    /// Whether the target refers to the step before the current one.
    pub fn needs_predecessor(self) -> bool {
        matches!(
            self,
            TargetKind::PsiBellman | TargetKind::PhiBackwardReturn | TargetKind::PhiBackwardTd
        )
    }

    pub fn as_str(self) -> &'static str {
        use TargetKind::*;
        match self {
            PsiBackPlusTd => "psi_back_plus_td",
            PsiBackPlusFwd => "psi_back_plus_fwd",
            PsiBellman => "psi_bellman",
            PhiBackwardReturn => "phi_backward_return",
            PhiBackwardTd => "phi_backward_td",
            PhiBiMinusFwd => "phi_bi_minus_fwd",
            ThetaTd => "theta_td",
            ThetaBiMinusBack => "theta_bi_minus_back",
            ThetaBiMinusReturn => "theta_bi_minus_return",
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TargetKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownTarget(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSelection {
    pub theta: TargetKind,
    pub phi: TargetKind,
    pub psi: TargetKind,
}

impl Default for TargetSelection {
    fn default() -> Self {
        Self {
            theta: TargetKind::ThetaTd,
            phi: TargetKind::PhiBackwardReturn,
            psi: TargetKind::PsiBellman,
        }
    }
}

impl TargetSelection {
    fn validate(&self) -> Result<()> {
        for (kind, head) in [
            (self.theta, Head::Forward),
            (self.phi, Head::Backward),
            (self.psi, Head::Bidirectional),
        ] {
            if kind.head() != head {
                return Err(Error::InvalidArgument(format!(
                    "target `{kind}` does not train the {head:?} head"
                )));
            }
        }
        Ok(())
    }
}

/// Treatment of targets that look one step back when `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstStep {
    /// The episode is entered from a dummy start state with value 0 and
    /// reward 0, matching the backward kernel.
    #[default]
    DummyPredecessor,
    /// Such targets are not applied at `t = 0`.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_parameterization")]
    pub parameterization: Parameterization,
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    #[serde(default)]
    pub targets: TargetSelection,
    #[serde(default)]
    pub first_step: FirstStep,
}

fn default_parameterization() -> Parameterization {
    Parameterization::Fr
}

impl LearnerConfig {
    pub fn new(algorithm: Algorithm, alpha: f64, lambda: f64, gamma: f64) -> Self {
        Self {
            algorithm,
            parameterization: Parameterization::Fr,
            alpha,
            lambda,
            gamma,
            targets: TargetSelection::default(),
            first_step: FirstStep::default(),
        }
    }

    pub fn with_parameterization(mut self, p: Parameterization) -> Self {
        self.parameterization = p;
        self
    }

    pub fn with_targets(mut self, targets: TargetSelection) -> Self {
        self.targets = targets;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha {} must be finite and non-negative",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma {} outside (0, 1)",
                self.gamma
            )));
        }
        self.targets.validate()
    }

    fn lambda_gamma(&self) -> f64 {
        self.lambda * self.gamma
    }
}

/// The step before the current one, as seen by targets that look back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Predecessor {
    /// Not available; targets that need it are skipped.
    Unavailable,
    /// The dummy start state: value 0, reward 0.
    Start,
    Transition {
        state: usize,
        reward: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    pub trace: Vec<f64>,
    /// `G⃖_t` for the current step.
    pub backward_return: f64,
    /// `(S_{t-1}, R_{t-1})`.
    pub prev: Option<(usize, f64)>,
    pub t: usize,
    /// States visited so far this episode, including the current one once
    /// a refreshed-trace step has run.
    pub episode_states: Vec<usize>,
}

impl LearnerState {
    pub fn new(n_params: usize) -> Self {
        Self {
            trace: vec![0.0; n_params],
            backward_return: 0.0,
            prev: None,
            t: 0,
            episode_states: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.trace.iter_mut().for_each(|e| *e = 0.0);
        self.backward_return = 0.0;
        self.prev = None;
        self.t = 0;
        self.episode_states.clear();
    }

    /// Moves to `t + 1` after observing `(state, reward)` at `t`.
    pub fn advance(&mut self, state: usize, reward: f64, lambda_gamma: f64) {
        self.backward_return = lambda_gamma * (self.backward_return + reward);
        self.prev = Some((state, reward));
        self.t += 1;
    }

    pub fn predecessor(&self, first_step: FirstStep) -> Predecessor {
        match (self.prev, first_step) {
            (Some((state, reward)), _) => Predecessor::Transition { state, reward },
            (None, FirstStep::DummyPredecessor) => Predecessor::Start,
            (None, FirstStep::Skip) => Predecessor::Unavailable,
        }
    }
}

fn forward_value(net: &MultiHeadNet, features: &FeatureMap, state: Option<usize>) -> Result<f64> {
    match state {
        Some(s) => net.value(features.encode(s)?, Head::Forward),
        None => Ok(0.0),
    }
}

/// One TD(0) step on the forward head; returns δ.
pub fn td0_step(
    net: &mut MultiHeadNet,
    features: &FeatureMap,
    state: usize,
    reward: f64,
    next_state: Option<usize>,
    config: &LearnerConfig,
) -> Result<f64> {
    let x = features.encode(state)?;
    let delta = reward + config.gamma * forward_value(net, features, next_state)?
        - net.value(x, Head::Forward)?;
    let grad = net.gradient(x, Head::Forward)?;
    net.sgd_step(&grad, config.alpha * delta)?;
    Ok(delta)
}

/// One TD(λ) step with an accumulating trace whose terms keep the gradient
/// from the step at which they were added.
pub fn td_lambda_step(
    net: &mut MultiHeadNet,
    features: &FeatureMap,
    state: usize,
    reward: f64,
    next_state: Option<usize>,
    learner: &mut LearnerState,
    config: &LearnerConfig,
) -> Result<f64> {
    let x = features.encode(state)?;
    let lg = config.lambda_gamma();
    learner.trace.iter_mut().for_each(|e| *e *= lg);
    net.accumulate_gradient(x, Head::Forward, 1.0, &mut learner.trace)?;
    let delta = reward + config.gamma * forward_value(net, features, next_state)?
        - net.value(x, Head::Forward)?;
    net.apply_direction(Head::Forward, &learner.trace, config.alpha * delta)?;
    Ok(delta)
}

/// Trace recomputed from every state of the episode at the current weights.
pub fn refreshed_trace(
    net: &MultiHeadNet,
    features: &FeatureMap,
    episode_states: &[usize],
    lambda_gamma: f64,
) -> Result<Vec<f64>> {
    let mut trace = vec![0.0; net.n_params()];
    for &s in episode_states {
        trace.iter_mut().for_each(|e| *e *= lambda_gamma);
        net.accumulate_gradient(features.encode(s)?, Head::Forward, 1.0, &mut trace)?;
    }
    Ok(trace)
}

/// One TD(λ) step whose trace is rebuilt at the current weights; costs
/// O(t) gradient evaluations.
pub fn refreshed_td_lambda_step(
    net: &mut MultiHeadNet,
    features: &FeatureMap,
    state: usize,
    reward: f64,
    next_state: Option<usize>,
    learner: &mut LearnerState,
    config: &LearnerConfig,
) -> Result<f64> {
    let x = features.encode(state)?;
    learner.episode_states.push(state);
    let trace = refreshed_trace(
        net,
        features,
        &learner.episode_states,
        config.lambda_gamma(),
    )?;
    let delta = reward + config.gamma * forward_value(net, features, next_state)?
        - net.value(x, Head::Forward)?;
    net.apply_direction(Head::Forward, &trace, config.alpha * delta)?;
    learner.trace = trace;
    Ok(delta)
}

/// One online backward Monte-Carlo step on the backward head, regressing
/// `v⃖(S_t)` onto `G⃖_t`. Returns the target, or `None` when skipped at
/// `t = 0`.
pub fn backward_mc_step(
    net: &mut MultiHeadNet,
    features: &FeatureMap,
    state: usize,
    learner: &LearnerState,
    config: &LearnerConfig,
) -> Result<Option<f64>> {
    if learner.predecessor(config.first_step) == Predecessor::Unavailable {
        return Ok(None);
    }
    let x = features.encode(state)?;
    let target = learner.backward_return;
    let error = target - net.value(x, Head::Backward)?;
    let grad = net.gradient(x, Head::Backward)?;
    net.sgd_step(&grad, config.alpha * error)?;
    Ok(Some(target))
}

/// Head values around the current step, all from the same parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowValues {
    pub current: HeadValues,
    /// `None` when the next state is terminal.
    pub next: Option<HeadValues>,
    pub prev: PrevValues,
    pub reward: f64,
    pub backward_return: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrevValues {
    Unavailable,
    Available { values: HeadValues, reward: f64 },
}

impl WindowValues {
    pub fn evaluate(
        net: &MultiHeadNet,
        features: &FeatureMap,
        predecessor: Predecessor,
        state: usize,
        reward: f64,
        next_state: Option<usize>,
        backward_return: f64,
    ) -> Result<Self> {
        let current = net.forward_all(features.encode(state)?)?;
        let next = next_state
            .map(|s| net.forward_all(features.encode(s)?))
            .transpose()?;
        let prev = match predecessor {
            Predecessor::Unavailable => PrevValues::Unavailable,
            Predecessor::Start => PrevValues::Available {
                values: ZERO_VALUES,
                reward: 0.0,
            },
            Predecessor::Transition { state, reward } => PrevValues::Available {
                values: net.forward_all(features.encode(state)?)?,
                reward,
            },
        };
        Ok(Self {
            current,
            next,
            prev,
            reward,
            backward_return,
        })
    }
}

const ZERO_VALUES: HeadValues = HeadValues {
    forward: 0.0,
    backward: 0.0,
    bidirectional: 0.0,
};

/// Regression target of `kind` for the current step.
pub fn catalog_target(
    kind: TargetKind,
    window: &WindowValues,
    lambda: f64,
    gamma: f64,
) -> Result<f64> {
    use TargetKind::*;
    let next = window.next.unwrap_or(ZERO_VALUES);
    let cur = &window.current;
    let lg = lambda * gamma;
    let prev = || match window.prev {
        PrevValues::Available { values, reward } => Ok((values, reward)),
        PrevValues::Unavailable => Err(Error::MissingPredecessor(kind.as_str())),
    };
    Ok(match kind {
        PsiBackPlusTd => cur.backward + window.reward + gamma * next.forward,
        PsiBackPlusFwd => cur.backward + cur.forward,
        PsiBellman => {
            let (p, _) = prev()?;
            let g2l = gamma * gamma * lambda;
            (window.reward * (1.0 - g2l) + gamma * next.bidirectional + lg * p.bidirectional)
                / (1.0 + g2l)
        }
        PhiBackwardReturn => {
            prev()?;
            window.backward_return
        }
        PhiBackwardTd => {
            let (p, r) = prev()?;
            lg * r + lg * p.backward
        }
        PhiBiMinusFwd => cur.bidirectional - cur.forward,
        ThetaTd => window.reward + gamma * next.forward,
        ThetaBiMinusBack => cur.bidirectional - cur.backward,
        ThetaBiMinusReturn => cur.bidirectional - window.backward_return,
    })
}

/// Errors `target - v_head(S_t)` applied by one [`bitd_step`]; `None` for
/// heads skipped at this step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitdErrors {
    pub theta: Option<f64>,
    pub phi: Option<f64>,
    pub psi: Option<f64>,
}

/// Joint update of all three heads. Targets and gradients are all taken from
/// the parameters as they were before the step; the three updates are then
/// added together.
pub fn bitd_step(
    net: &mut MultiHeadNet,
    features: &FeatureMap,
    predecessor: Predecessor,
    state: usize,
    reward: f64,
    next_state: Option<usize>,
    backward_return: f64,
    config: &LearnerConfig,
) -> Result<BitdErrors> {
    let frozen = net.clone();
    let window = WindowValues::evaluate(
        &frozen,
        features,
        predecessor,
        state,
        reward,
        next_state,
        backward_return,
    )?;
    let x = features.encode(state)?;
    let available = !matches!(window.prev, PrevValues::Unavailable);
    let mut errors = [None; 3];
    let mut direction = vec![0.0; frozen.n_params()];
    let selected = [config.targets.theta, config.targets.phi, config.targets.psi];
    for (slot, kind) in selected.into_iter().enumerate() {
        if kind.needs_predecessor() && !available {
            continue;
        }
        let head = kind.head();
        let error =
            catalog_target(kind, &window, config.lambda, config.gamma)? - window.current.get(head);
        frozen.accumulate_gradient(x, head, config.alpha * error, &mut direction)?;
        errors[slot] = Some(error);
    }
    // Each head's gradient already vanishes outside its own subset.
    net.add_scaled(&direction, 1.0)?;
    Ok(BitdErrors {
        theta: errors[0],
        phi: errors[1],
        psi: errors[2],
    })
}

/// What one [`Learner::observe`] call did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Td { delta: f64 },
    BackwardMc { target: Option<f64> },
    Bitd(BitdErrors),
}

/// A configured algorithm, its network, and its per-episode state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub config: LearnerConfig,
    pub net: MultiHeadNet,
    pub state: LearnerState,
    features: FeatureMap,
}

impl Learner {
    pub fn new(config: LearnerConfig, net: MultiHeadNet, features: FeatureMap) -> Result<Self> {
        config.validate()?;
        if net.shape().input != features.dim() {
            return Err(Error::DimensionMismatch {
                expected: features.dim(),
                actual: net.shape().input,
            });
        }
        let state = LearnerState::new(net.n_params());
        Ok(Self {
            config,
            net,
            state,
            features,
        })
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    /// Processes transition `(state, reward, next_state)`; a `next_state` of
    /// `None` ends the episode.
    pub fn observe(
        &mut self,
        state: usize,
        reward: f64,
        next_state: Option<usize>,
    ) -> Result<StepOutcome> {
        let cfg = &self.config;
        let outcome = match cfg.algorithm {
            Algorithm::Td0 => StepOutcome::Td {
                delta: td0_step(
                    &mut self.net,
                    &self.features,
                    state,
                    reward,
                    next_state,
                    cfg,
                )?,
            },
            Algorithm::TdLambda => StepOutcome::Td {
                delta: td_lambda_step(
                    &mut self.net,
                    &self.features,
                    state,
                    reward,
                    next_state,
                    &mut self.state,
                    cfg,
                )?,
            },
            Algorithm::RefreshedTdLambda => StepOutcome::Td {
                delta: refreshed_td_lambda_step(
                    &mut self.net,
                    &self.features,
                    state,
                    reward,
                    next_state,
                    &mut self.state,
                    cfg,
                )?,
            },
            Algorithm::BackwardMc => StepOutcome::BackwardMc {
                target: backward_mc_step(&mut self.net, &self.features, state, &self.state, cfg)?,
            },
            Algorithm::BiTd => StepOutcome::Bitd(bitd_step(
                &mut self.net,
                &self.features,
                self.state.predecessor(cfg.first_step),
                state,
                reward,
                next_state,
                self.state.backward_return,
                cfg,
            )?),
        };
        if next_state.is_none() {
            self.state.reset();
        } else {
            self.state.advance(state, reward, cfg.lambda_gamma());
        }
        Ok(outcome)
    }

    /// Drops the current episode without an update, as after truncation.
    pub fn end_episode(&mut self) {
        self.state.reset();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{solve_backward, solve_bidirectional, solve_forward};
    use crate::mdp::{
        backward_kernel, build_chain, build_two_state, visitation_distribution, EpisodeStream,
        Policy, TabularMdp,
    };
    use crate::net::NetShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_one_hot(n: usize, p: Parameterization) -> (MultiHeadNet, FeatureMap) {
        (
            MultiHeadNet::zeros(NetShape::linear(n), p).unwrap(),
            FeatureMap::one_hot(n).unwrap(),
        )
    }

    fn relu_chain_net(seed: u64) -> (MultiHeadNet, FeatureMap) {
        let f = FeatureMap::chain_default(9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            MultiHeadNet::random(
                NetShape::relu(f.dim(), 9),
                Parameterization::Fr,
                0.5,
                &mut rng,
            )
            .unwrap(),
            f,
        )
    }

    fn next_of(mdp: &TabularMdp, s: usize) -> Option<usize> {
        (!mdp.is_terminal(s)).then_some(s)
    }

    /// Sampled `(state, reward, next)` stream with episode boundaries.
    fn stream(mdp: &TabularMdp, steps: usize, seed: u64) -> Vec<(usize, f64, Option<usize>)> {
        let pi = Policy::uniform(mdp);
        let mut env = EpisodeStream::new(mdp, &pi);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..steps)
            .map(|_| {
                let (tr, _) = env.step(&mut rng);
                (tr.state, tr.reward, next_of(mdp, tr.next_state))
            })
            .collect()
    }

    #[test]
    fn td0_on_zero_net_with_zero_reward_is_a_no_op() {
        let (mut net, f) = linear_one_hot(2, Parameterization::Fr);
        let before = net.clone();
        let cfg = LearnerConfig::new(Algorithm::Td0, 0.5, 0.0, 0.99);
        assert_eq!(td0_step(&mut net, &f, 0, 0.0, Some(1), &cfg).unwrap(), 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn tabular_td0_touches_only_the_visited_state() {
        let (mut net, f) = linear_one_hot(9, Parameterization::Fr);
        let cfg = LearnerConfig::new(Algorithm::Td0, 0.5, 0.0, 0.99);
        td0_step(&mut net, &f, 3, 5.0, Some(4), &cfg).unwrap();
        for s in 0..9 {
            let v = net.value(f.encode(s).unwrap(), Head::Forward).unwrap();
            assert_eq!(v, if s == 3 { 2.5 } else { 0.0 });
        }
    }

    #[test]
    fn td_lambda_at_zero_matches_td0_on_a_relu_net() {
        let mdp = build_chain(9, 5.0, 0.99).unwrap();
        let (net, f) = relu_chain_net(1);
        let cfg0 = LearnerConfig::new(Algorithm::Td0, 0.05, 0.0, 0.99);
        let cfgl = LearnerConfig::new(Algorithm::TdLambda, 0.05, 0.0, 0.99);
        let mut a = Learner::new(cfg0, net.clone(), f.clone()).unwrap();
        let mut b = Learner::new(cfgl, net, f).unwrap();
        for (s, r, n) in stream(&mdp, 2_000, 3) {
            assert_eq!(a.observe(s, r, n).unwrap(), b.observe(s, r, n).unwrap());
        }
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn refreshed_at_lambda_zero_matches_td0() {
        let mdp = build_chain(9, 5.0, 0.99).unwrap();
        let (net, f) = relu_chain_net(2);
        let mut a = Learner::new(
            LearnerConfig::new(Algorithm::Td0, 0.05, 0.0, 0.99),
            net.clone(),
            f.clone(),
        )
        .unwrap();
        let mut b = Learner::new(
            LearnerConfig::new(Algorithm::RefreshedTdLambda, 0.05, 0.0, 0.99),
            net,
            f,
        )
        .unwrap();
        for (s, r, n) in stream(&mdp, 2_000, 4) {
            a.observe(s, r, n).unwrap();
            b.observe(s, r, n).unwrap();
        }
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn linear_trace_is_discounted_feature_sum() {
        let mdp = build_chain(9, 5.0, 0.99).unwrap();
        let (net, f) = linear_one_hot(9, Parameterization::Fr);
        let cfg = LearnerConfig::new(Algorithm::TdLambda, 0.1, 0.8, 0.99);
        let mut learner = Learner::new(cfg, net, f).unwrap();
        let lg: f64 = 0.8 * 0.99;
        let mut visited: Vec<usize> = Vec::new();
        for (s, r, n) in stream(&mdp, 500, 5) {
            visited.push(s);
            let mut expected = [0.0; 9];
            for (i, &v) in visited.iter().enumerate() {
                expected[v] += lg.powi((visited.len() - 1 - i) as i32);
            }
            learner.observe(s, r, n).unwrap();
            if n.is_none() {
                visited.clear();
                continue;
            }
            // Trace over the forward head's weights.
            for k in 0..9 {
                assert!((learner.state.trace[k] - expected[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_stale_and_refreshed_traces_agree() {
        let mdp = build_chain(9, 5.0, 0.99).unwrap();
        let (net, f) = linear_one_hot(9, Parameterization::Fr);
        let mut a = Learner::new(
            LearnerConfig::new(Algorithm::TdLambda, 0.05, 0.9, 0.99),
            net.clone(),
            f.clone(),
        )
        .unwrap();
        let mut b = Learner::new(
            LearnerConfig::new(Algorithm::RefreshedTdLambda, 0.05, 0.9, 0.99),
            net,
            f,
        )
        .unwrap();
        for (s, r, n) in stream(&mdp, 3_000, 6) {
            a.observe(s, r, n).unwrap();
            b.observe(s, r, n).unwrap();
            for (x, y) in a.net.params().iter().zip(b.net.params()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn episode_boundaries_reset_state() {
        let (net, f) = linear_one_hot(2, Parameterization::Fr);
        let mut learner = Learner::new(
            LearnerConfig::new(Algorithm::TdLambda, 0.1, 0.9, 0.99),
            net,
            f,
        )
        .unwrap();
        learner.observe(0, 1.0, Some(1)).unwrap();
        assert_eq!(learner.state.t, 1);
        assert_eq!(learner.state.prev, Some((0, 1.0)));
        assert!((learner.state.backward_return - 0.9 * 0.99).abs() < 1e-15);
        learner.observe(1, 0.0, None).unwrap();
        assert_eq!(learner.state, LearnerState::new(learner.net.n_params()));
    }

    #[test]
    fn backward_return_unrolls() {
        let (l, g, r0, r1) = (0.7, 0.9, 2.0, -3.0);
        let lg = l * g;
        let mut st = LearnerState::new(1);
        st.advance(0, r0, lg);
        assert!((st.backward_return - lg * r0).abs() < 1e-15);
        st.advance(1, r1, lg);
        assert!((st.backward_return - (lg * r1 + lg * lg * r0)).abs() < 1e-15);
    }

    #[test]
    fn backward_mc_with_zero_rewards_drives_values_to_zero() {
        let mdp = build_chain(9, 0.0, 0.99).unwrap();
        let (mut net, f) = linear_one_hot(9, Parameterization::Fr);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        net = MultiHeadNet::random(net.shape(), Parameterization::Fr, 1.0, &mut rng).unwrap();
        let mut learner = Learner::new(
            LearnerConfig::new(Algorithm::BackwardMc, 0.1, 0.9, 0.99),
            net,
            f,
        )
        .unwrap();
        for (s, r, n) in stream(&mdp, 20_000, 7) {
            if let StepOutcome::BackwardMc { target: Some(t) } = learner.observe(s, r, n).unwrap() {
                assert_eq!(t, 0.0);
            }
        }
        for s in 0..9 {
            assert!(
                learner
                    .net
                    .value(learner.features().encode(s).unwrap(), Head::Backward)
                    .unwrap()
                    .abs()
                    < 1e-6
            );
        }
    }

    #[test]
    fn backward_mc_skip_mode_waits_for_second_step() {
        let (mut net, f) = linear_one_hot(2, Parameterization::Fr);
        let mut cfg = LearnerConfig::new(Algorithm::BackwardMc, 0.1, 0.9, 0.99);
        cfg.first_step = FirstStep::Skip;
        let st = LearnerState::new(net.n_params());
        assert_eq!(backward_mc_step(&mut net, &f, 0, &st, &cfg).unwrap(), None);
        cfg.first_step = FirstStep::DummyPredecessor;
        assert_eq!(
            backward_mc_step(&mut net, &f, 0, &st, &cfg).unwrap(),
            Some(0.0)
        );
    }

    fn window(
        current: HeadValues,
        next: Option<HeadValues>,
        prev: PrevValues,
        reward: f64,
        g: f64,
    ) -> WindowValues {
        WindowValues {
            current,
            next,
            prev,
            reward,
            backward_return: g,
        }
    }

    fn hv(forward: f64, backward: f64, bidirectional: f64) -> HeadValues {
        HeadValues {
            forward,
            backward,
            bidirectional,
        }
    }

    #[test]
    fn target_catalog_formulas() {
        let (l, g) = (0.5, 0.9);
        let w = window(
            hv(1.0, 2.0, 3.0),
            Some(hv(4.0, 5.0, 6.0)),
            PrevValues::Available {
                values: hv(7.0, 8.0, 9.0),
                reward: 10.0,
            },
            0.5,
            1.5,
        );
        let t = |k| catalog_target(k, &w, l, g).unwrap();
        let g2l = g * g * l;
        assert_eq!(t(TargetKind::PsiBackPlusTd), 2.0 + 0.5 + g * 4.0);
        assert_eq!(t(TargetKind::PsiBackPlusFwd), 3.0);
        assert!(
            (t(TargetKind::PsiBellman) - (0.5 * (1.0 - g2l) + g * 6.0 + g * l * 9.0) / (1.0 + g2l))
                .abs()
                < 1e-15
        );
        assert_eq!(t(TargetKind::PhiBackwardReturn), 1.5);
        assert!((t(TargetKind::PhiBackwardTd) - l * g * (10.0 + 8.0)).abs() < 1e-15);
        assert_eq!(t(TargetKind::PhiBiMinusFwd), 2.0);
        assert_eq!(t(TargetKind::ThetaTd), 0.5 + g * 4.0);
        assert_eq!(t(TargetKind::ThetaBiMinusBack), 1.0);
        assert_eq!(t(TargetKind::ThetaBiMinusReturn), 1.5);
    }

    #[test]
    fn terminal_next_bootstraps_zero() {
        let w = window(
            hv(1.0, 2.0, 3.0),
            None,
            PrevValues::Available {
                values: hv(0.0, 0.0, 0.0),
                reward: 0.0,
            },
            4.0,
            0.0,
        );
        assert_eq!(
            catalog_target(TargetKind::ThetaTd, &w, 0.5, 0.9).unwrap(),
            4.0
        );
    }

    #[test]
    fn missing_predecessor_is_reported() {
        let w = window(hv(1.0, 2.0, 3.0), None, PrevValues::Unavailable, 0.0, 0.0);
        for k in TargetKind::ALL {
            let r = catalog_target(k, &w, 0.5, 0.9);
            assert_eq!(r.is_err(), k.needs_predecessor(), "{k}");
        }
    }

    #[test]
    fn theta_bi_minus_back_recovers_forward_under_fr() {
        let (net, f) = relu_chain_net(8);
        for s in 0..9 {
            let w =
                WindowValues::evaluate(&net, &f, Predecessor::Start, s, 0.0, None, 0.0).unwrap();
            let t = catalog_target(TargetKind::ThetaBiMinusBack, &w, 0.4, 0.99).unwrap();
            assert!((t - w.current.forward).abs() <= 1e-14 * (1.0 + w.current.forward.abs()));
        }
    }

    #[test]
    fn backward_return_target_at_step_one() {
        let (l, g, r) = (0.6, 0.9, 3.0);
        let mut st = LearnerState::new(1);
        st.advance(0, r, l * g);
        let w = window(
            hv(0.0, 0.0, 0.0),
            None,
            PrevValues::Available {
                values: ZERO_VALUES,
                reward: r,
            },
            0.0,
            st.backward_return,
        );
        assert!(
            (catalog_target(TargetKind::PhiBackwardReturn, &w, l, g).unwrap() - l * g * r).abs()
                < 1e-15
        );
    }

    #[test]
    fn psi_targets_differ_by_forward_td_error() {
        let s = build_chain(9, 5.0, 0.99).unwrap();
        let pi = Policy::uniform(&s);
        let d = visitation_distribution(&s, &pi, 1e-14).unwrap();
        let k = backward_kernel(&s, &pi, &d).unwrap();
        let vf = solve_forward(&s, &pi).unwrap();
        let vb = solve_backward(&s, &k, 0.4).unwrap();
        let mut params = vec![0.0; 2 * 9 + 2];
        params[..9].copy_from_slice(&vf.values[..9]);
        params[10..19].copy_from_slice(&vb.values[..9]);
        let net =
            MultiHeadNet::from_params(NetShape::linear(9), Parameterization::Fr, params).unwrap();
        let f = FeatureMap::one_hot(9).unwrap();
        for st in 0..9 {
            for a in 0..2 {
                let next = (0..11).find(|&n| s.prob(st, a, n) == 1.0).unwrap();
                let r = s.reward(st, a);
                let w = WindowValues::evaluate(
                    &net,
                    &f,
                    Predecessor::Start,
                    st,
                    r,
                    next_of(&s, next),
                    0.0,
                )
                .unwrap();
                let ta = catalog_target(TargetKind::PsiBackPlusTd, &w, 0.4, 0.99).unwrap();
                let tb = catalog_target(TargetKind::PsiBackPlusFwd, &w, 0.4, 0.99).unwrap();
                let td = r + 0.99 * w.next.map_or(0.0, |n| n.forward) - w.current.forward;
                assert!(((ta - tb).abs() - td.abs()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn target_kind_parsing() {
        for k in TargetKind::ALL {
            assert_eq!(k.as_str().parse::<TargetKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert!(matches!(
            "psi_magic".parse::<TargetKind>(),
            Err(Error::UnknownTarget(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(LearnerConfig::new(Algorithm::Td0, -0.1, 0.0, 0.9)
            .validate()
            .is_err());
        assert!(LearnerConfig::new(Algorithm::Td0, 0.1, 1.5, 0.9)
            .validate()
            .is_err());
        assert!(LearnerConfig::new(Algorithm::Td0, 0.1, 0.5, 1.0)
            .validate()
            .is_err());
        let swapped = TargetSelection {
            theta: TargetKind::PsiBellman,
            ..TargetSelection::default()
        };
        assert!(LearnerConfig::new(Algorithm::BiTd, 0.1, 0.5, 0.9)
            .with_targets(swapped)
            .validate()
            .is_err());
        let json = r#"{"algorithm":"BiTD","parameterization":"FBi","alpha":0.1,"lambda":0.4,"gamma":0.99,
            "targets":{"theta":"theta_td","phi":"phi_backward_td","psi":"psi_bellman"}}"#;
        let cfg: LearnerConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.parameterization, Parameterization::FBi);
        assert_eq!(cfg.first_step, FirstStep::DummyPredecessor);
        cfg.validate().unwrap();
    }

    #[test]
    fn bitd_zero_everything_is_a_no_op() {
        let f = FeatureMap::one_hot(2).unwrap();
        for p in Parameterization::ALL {
            let net = MultiHeadNet::zeros(NetShape::relu(2, 3), p).unwrap();
            let mut learner = Learner::new(
                LearnerConfig::new(Algorithm::BiTd, 0.5, 0.95, 0.99).with_parameterization(p),
                net.clone(),
                f.clone(),
            )
            .unwrap();
            for (s, r, n) in stream(&build_two_state(), 10, 1) {
                match learner.observe(s, r, n).unwrap() {
                    StepOutcome::Bitd(e) => {
                        for v in [e.theta, e.phi, e.psi].into_iter().flatten() {
                            assert_eq!(v, 0.0);
                        }
                    }
                    other => panic!("unexpected {other:?}"),
                }
            }
            assert_eq!(learner.net, net);
        }
    }

    #[test]
    fn bitd_uses_a_frozen_snapshot() {
        let (net, f) = relu_chain_net(9);
        for p in Parameterization::ALL {
            let net = MultiHeadNet::from_params(net.shape(), p, net.params().to_vec()).unwrap();
            let cfg = LearnerConfig::new(Algorithm::BiTd, 0.1, 0.4, 0.99).with_parameterization(p);
            let pred = Predecessor::Transition {
                state: 3,
                reward: 5.0,
            };
            let mut stepped = net.clone();
            let errs = bitd_step(&mut stepped, &f, pred, 4, -5.0, Some(5), 1.7, &cfg).unwrap();

            // Same update assembled head by head from the untouched net, in
            // reverse order.
            let w = WindowValues::evaluate(&net, &f, pred, 4, -5.0, Some(5), 1.7).unwrap();
            let x = f.encode(4).unwrap();
            let mut manual = net.clone();
            for kind in [cfg.targets.psi, cfg.targets.phi, cfg.targets.theta] {
                let err = catalog_target(kind, &w, 0.4, 0.99).unwrap() - w.current.get(kind.head());
                let g = net.gradient(x, kind.head()).unwrap();
                manual.sgd_step(&g, 0.1 * err).unwrap();
            }
            for (a, b) in stepped.params().iter().zip(manual.params()) {
                assert!((a - b).abs() < 1e-12, "{p:?}");
            }
            assert!(errs.theta.is_some() && errs.phi.is_some() && errs.psi.is_some());
        }
    }

    #[test]
    fn bitd_skip_mode_only_trains_theta_at_first_step() {
        let (net, f) = relu_chain_net(10);
        let mut cfg = LearnerConfig::new(Algorithm::BiTd, 0.1, 0.4, 0.99);
        cfg.first_step = FirstStep::Skip;
        let mut n = net.clone();
        let e = bitd_step(
            &mut n,
            &f,
            Predecessor::Unavailable,
            4,
            1.0,
            Some(5),
            0.0,
            &cfg,
        )
        .unwrap();
        assert!(e.theta.is_some() && e.phi.is_none() && e.psi.is_none());
    }

    #[test]
    fn bitd_at_lambda_zero_drives_backward_head_to_zero() {
        let mdp = build_chain(9, 5.0, 0.99).unwrap();
        let (net, f) = linear_one_hot(9, Parameterization::Fr);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MultiHeadNet::random(net.shape(), Parameterization::Fr, 1.0, &mut rng).unwrap();
        let mut learner =
            Learner::new(LearnerConfig::new(Algorithm::BiTd, 0.01, 0.0, 0.99), net, f).unwrap();
        for (s, r, n) in stream(&mdp, 200_000, 11) {
            learner.observe(s, r, n).unwrap();
        }
        for s in 0..9 {
            let v = learner
                .net
                .value(learner.features().encode(s).unwrap(), Head::Backward)
                .unwrap();
            assert!(v.abs() < 0.02);
        }
    }

    /// Expected `target - v(S_t)` per state, under the stationary
    /// predecessor/successor distribution of the chain.
    fn expected_errors(kind: TargetKind, net: &MultiHeadNet, lambda: f64) -> Vec<f64> {
        let mdp = build_chain(9, 5.0, 0.99).unwrap();
        let pi = Policy::uniform(&mdp);
        let d = visitation_distribution(&mdp, &pi, 1e-15).unwrap();
        let k = backward_kernel(&mdp, &pi, &d).unwrap();
        let f = FeatureMap::one_hot(9).unwrap();
        let mut out = vec![0.0; 9];
        for s in 0..9 {
            let mut preds = vec![(k.dummy[s], Predecessor::Start)];
            for sp in 0..9 {
                for a in 0..2 {
                    let w = d[sp] * pi.prob(sp, a) * mdp.prob(sp, a, s) / d[s];
                    if w > 0.0 {
                        preds.push((
                            w,
                            Predecessor::Transition {
                                state: sp,
                                reward: mdp.reward(sp, a),
                            },
                        ));
                    }
                }
            }
            for (wp, pred) in preds {
                for a in 0..2 {
                    for nx in 0..11 {
                        let p = pi.prob(s, a) * mdp.prob(s, a, nx);
                        if p == 0.0 {
                            continue;
                        }
                        let win = WindowValues::evaluate(
                            net,
                            &f,
                            pred,
                            s,
                            mdp.reward(s, a),
                            next_of(&mdp, nx),
                            0.0,
                        )
                        .unwrap();
                        let err = catalog_target(kind, &win, lambda, 0.99).unwrap()
                            - win.current.get(kind.head());
                        out[s] += wp * p * err;
                    }
                }
            }
        }
        out
    }

    fn exact_tables(lambda: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mdp = build_chain(9, 5.0, 0.99).unwrap();
        let pi = Policy::uniform(&mdp);
        let d = visitation_distribution(&mdp, &pi, 1e-15).unwrap();
        let k = backward_kernel(&mdp, &pi, &d).unwrap();
        (
            solve_forward(&mdp, &pi).unwrap().values[..9].to_vec(),
            solve_backward(&mdp, &k, lambda).unwrap().values[..9].to_vec(),
            solve_bidirectional(&mdp, &pi, &k, lambda).unwrap().values[..9].to_vec(),
        )
    }

    fn linear_net(p: Parameterization, a: &[f64], b: &[f64]) -> MultiHeadNet {
        let mut params = vec![0.0; 20];
        params[..9].copy_from_slice(a);
        params[10..19].copy_from_slice(b);
        MultiHeadNet::from_params(NetShape::linear(9), p, params).unwrap()
    }

    #[test]
    fn exact_tables_are_stationary_for_bellman_targets() {
        for lambda in [0.0, 0.4, 0.95] {
            let (vf, vb, vbi) = exact_tables(lambda);
            let fr = linear_net(Parameterization::Fr, &vf, &vb);
            let bir = linear_net(Parameterization::BiR, &vbi, &vb);
            for (kind, net) in [
                (TargetKind::ThetaTd, &fr),
                (TargetKind::PhiBackwardTd, &fr),
                (TargetKind::PsiBellman, &bir),
            ] {
                for (s, e) in expected_errors(kind, net, lambda).into_iter().enumerate() {
                    assert!(e.abs() < 1e-6, "{kind} λ={lambda} state {s}: {e}");
                }
            }
        }
    }

    /// The backward return is an unbiased sample of v⃖ at stationarity.
    #[test]
    fn sampled_backward_returns_average_to_backward_values() {
        let mdp = build_chain(9, 5.0, 0.99).unwrap();
        let lambda = 0.6;
        let (_, vb, _) = exact_tables(lambda);
        let mut st = LearnerState::new(0);
        let mut sums = [0.0; 9];
        let mut counts = [0usize; 9];
        for (s, r, n) in stream(&mdp, 1_000_000, 12) {
            sums[s] += st.backward_return;
            counts[s] += 1;
            if n.is_none() {
                st.reset();
            } else {
                st.advance(s, r, lambda * 0.99);
            }
        }
        for s in 0..9 {
            assert!(
                (sums[s] / counts[s] as f64 - vb[s]).abs() < 0.05,
                "state {s}"
            );
        }
    }
}
