//! First-order oracles and the zero-respecting query protocol.
//!
//! A protocol run is a sequence of queries at full bilevel points. Each
//! query returns both objective values and all four gradient blocks in one
//! [`OracleReply`]; one reply counts as one oracle call. A zero-respecting
//! algorithm may only propose points supported on coordinates that some
//! earlier reply (or its own earlier iterates) already touched, and
//! [`SupportState`] is the referee: it absorbs every reply, records when
//! each coordinate first became available and through which oracle, and
//! rejects proposals that leave the granted span.
//!
//! The randomized oracle hides exactly one coordinate at a time. Its
//! *frontier* is the smallest flattened lower-level index beyond block 0
//! that has never been active. Interior frontier coordinates have their
//! lower-level partial replaced by `xi / p` times the true value with
//! `xi ~ Bernoulli(p)`, so a query reveals them with probability `p` and
//! otherwise reports an exact zero; block-boundary frontiers instead move
//! the perturbation to the upper-level partial that gates the same block.
//! Upper-objective gradients are never perturbed. Replies are exact erased
//! or exact revealed values, never noisy in between, which keeps the
//! variance at `v^2 (1-p)/p` for a hidden value `v` and the bias at zero.

use crate::instance::{eval_f, eval_g, grad_f, grad_g, BilevelPoint, DerivedInstanceParams};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which oracle (or protocol step) first touched a coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    FOracle,
    GOracle,
    /// The coordinate entered through a proposed iterate while enforcement
    /// was off (non-zero-respecting algorithms only).
    AlgorithmSpan,
}

/// Variable group of an activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Var {
    X,
    Y,
}

/// First activation record of one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationEvent {
    /// 1-based query count at which the coordinate first appeared.
    pub query: usize,
    pub variable: Var,
    /// 0-based flat index within its variable group.
    pub index: usize,
    pub trigger: Trigger,
}

/// One oracle call's worth of information.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReply {
    pub f_val: f64,
    pub g_val: f64,
    /// Upper-objective gradients; `gf_x` is identically zero for these
    /// instances but kept so replies carry the full first-order data.
    pub gf_x: Vec<f64>,
    pub gf_y: Vec<f64>,
    pub gg_x: Vec<f64>,
    pub gg_y: Vec<f64>,
}

/// Span referee: which coordinates oracle replies have made available.
#[derive(Debug, Clone)]
pub struct SupportState {
    x_active: Vec<bool>,
    y_active: Vec<bool>,
    events: Vec<ActivationEvent>,
    queries: usize,
    enforce: bool,
}

impl SupportState {
    /// Fresh state with nothing active. With `enforce` set, span violations
    /// are hard errors; without it they are recorded as
    /// [`Trigger::AlgorithmSpan`] activations.
    pub fn new(params: &DerivedInstanceParams, enforce: bool) -> Self {
        Self {
            x_active: vec![false; params.dim_x()],
            y_active: vec![false; params.dim_y()],
            events: Vec::new(),
            queries: 0,
            enforce,
        }
    }

    pub fn is_enforcing(&self) -> bool {
        self.enforce
    }

    pub fn query_count(&self) -> usize {
        self.queries
    }

    pub fn events(&self) -> &[ActivationEvent] {
        &self.events
    }

    pub fn x_active(&self, j: usize) -> bool {
        self.x_active[j]
    }

    pub fn y_active(&self, j: usize) -> bool {
        self.y_active[j]
    }

    pub fn active_x_count(&self) -> usize {
        self.x_active.iter().filter(|b| **b).count()
    }

    pub fn active_y_count(&self) -> usize {
        self.y_active.iter().filter(|b| **b).count()
    }

    /// Smallest 1-based flattened lower-level index beyond block 0 that has
    /// never been active; `None` once the whole chain range is exhausted.
    pub fn frontier(&self, params: &DerivedInstanceParams) -> Option<usize> {
        let n = params.n;
        (n..params.dim_y())
            .find(|&j| !self.y_active[j])
            .map(|j| j + 1)
    }

    /// Check a proposed point against the current active sets.
    fn first_violation(&self, pt: &BilevelPoint) -> Option<(Var, usize)> {
        for (j, v) in pt.x.iter().enumerate() {
            if *v != 0.0 && !self.x_active[j] {
                return Some((Var::X, j));
            }
        }
        for (j, v) in pt.y.iter().enumerate() {
            if *v != 0.0 && !self.y_active[j] {
                return Some((Var::Y, j));
            }
        }
        None
    }

    fn activate(&mut self, variable: Var, index: usize, trigger: Trigger) {
        let flag = match variable {
            Var::X => &mut self.x_active[index],
            Var::Y => &mut self.y_active[index],
        };
        if !*flag {
            *flag = true;
            self.events.push(ActivationEvent {
                query: self.queries,
                variable,
                index,
                trigger,
            });
        }
    }
}

/// Exact first-order oracle: both objective values and all gradients at
/// `pt`.
pub fn deterministic_query(
    params: &DerivedInstanceParams,
    pt: &BilevelPoint,
) -> Result<OracleReply> {
    pt.check_dims(params)?;
    let (gf_x, gf_y) = grad_f(params, pt)?;
    let (gg_x, gg_y) = grad_g(params, pt)?;
    Ok(OracleReply {
        f_val: eval_f(params, pt)?,
        g_val: eval_g(params, pt)?,
        gf_x,
        gf_y,
        gg_x,
        gg_y,
    })
}

/// Which reply entry the randomized oracle perturbs for a given frontier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PerturbTarget {
    /// Lower-level partial at this 0-based flat index.
    YCoord(usize),
    /// Upper-level linear partial at this 0-based index.
    XCoord(usize),
}

fn perturb_target(params: &DerivedInstanceParams, frontier_1b: usize) -> PerturbTarget {
    let n = params.n;
    if (frontier_1b - 1).is_multiple_of(n) {
        // Block boundary: the matching upper-level coordinate is gated.
        PerturbTarget::XCoord((frontier_1b - 1) / n - 1)
    } else {
        PerturbTarget::YCoord(frontier_1b - 1)
    }
}

/// Randomized first-order oracle.
///
/// Computes the exact reply, then rescales the single frontier partial of
/// the lower-level gradient by `xi / p`, `xi ~ Bernoulli(p)`. Queries whose
/// support exceeds the granted span are protocol violations: the pricing of
/// the perturbation assumes iterates never run ahead of the frontier.
pub fn stochastic_query(
    params: &DerivedInstanceParams,
    pt: &BilevelPoint,
    support: &SupportState,
    rng: &mut ChaCha8Rng,
) -> Result<OracleReply> {
    pt.check_dims(params)?;
    let p = params.p.ok_or_else(|| {
        Error::ProtocolViolation("stochastic_query needs a stochastic instance".into())
    })?;
    if support.is_enforcing() {
        if let Some((var, index)) = support.first_violation(pt) {
            return Err(Error::ProtocolViolation(format!(
                "queried point touches inactive {:?}[{index}]",
                var
            )));
        }
    }
    let mut reply = deterministic_query(params, pt)?;
    if p >= 1.0 {
        return Ok(reply);
    }
    if let Some(frontier) = support.frontier(params) {
        let xi = rng.gen_bool(p);
        let factor = if xi { 1.0 / p } else { 0.0 };
        match perturb_target(params, frontier) {
            PerturbTarget::YCoord(j) => reply.gg_y[j] *= factor,
            PerturbTarget::XCoord(j) => reply.gg_x[j] *= factor,
        }
    }
    Ok(reply)
}

/// Absorb a reply into the support state and validate the next proposal.
///
/// Every coordinate carrying a nonzero gradient entry in the reply becomes
/// active (attributed to the owning oracle). The proposed next iterate is
/// then checked against the grown span: with enforcement on, leaving it is
/// a [`Error::ZeroRespectingViolation`]; with enforcement off, the stray
/// coordinates are recorded as [`Trigger::AlgorithmSpan`] activations.
pub fn span_update(
    support: &mut SupportState,
    params: &DerivedInstanceParams,
    reply: &OracleReply,
    proposed: &BilevelPoint,
) -> Result<()> {
    proposed.check_dims(params)?;
    if reply.gf_x.len() != params.dim_x()
        || reply.gg_x.len() != params.dim_x()
        || reply.gf_y.len() != params.dim_y()
        || reply.gg_y.len() != params.dim_y()
    {
        return Err(Error::DimensionMismatch {
            what: "oracle reply gradients",
            expected: params.dim_x() + params.dim_y(),
            got: reply.gf_x.len() + reply.gf_y.len(),
        });
    }
    support.queries += 1;
    for j in 0..params.dim_y() {
        if reply.gg_y[j] != 0.0 {
            support.activate(Var::Y, j, Trigger::GOracle);
        }
        if reply.gf_y[j] != 0.0 {
            support.activate(Var::Y, j, Trigger::FOracle);
        }
    }
    for j in 0..params.dim_x() {
        if reply.gg_x[j] != 0.0 {
            support.activate(Var::X, j, Trigger::GOracle);
        }
        if reply.gf_x[j] != 0.0 {
            support.activate(Var::X, j, Trigger::FOracle);
        }
    }
    if let Some((variable, index)) = support.first_violation(proposed) {
        if support.enforce {
            return Err(Error::ZeroRespectingViolation {
                variable: match variable {
                    Var::X => "x",
                    Var::Y => "y",
                },
                index,
                query: support.queries,
            });
        }
        // Non-zero-respecting run: log every stray coordinate.
        for (j, v) in proposed.x.iter().enumerate() {
            if *v != 0.0 && !support.x_active[j] {
                support.activate(Var::X, j, Trigger::AlgorithmSpan);
            }
        }
        for (j, v) in proposed.y.iter().enumerate() {
            if *v != 0.0 && !support.y_active[j] {
                support.activate(Var::Y, j, Trigger::AlgorithmSpan);
            }
        }
    }
    Ok(())
}

/// Unbiased sample variance of the stacked stochastic lower-level gradient
/// at `pt` under the current support state, over `samples` draws.
///
/// Only the frontier coordinate ever varies between draws, so the stacked
/// variance reduces to the scalar variance of that entry; the exact reply
/// is computed once and the Bernoulli stream drives the rest.
pub fn variance_estimate(
    params: &DerivedInstanceParams,
    pt: &BilevelPoint,
    support: &SupportState,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if samples < 2 {
        return Err(Error::InvalidParams(
            "variance estimate needs at least 2 samples".into(),
        ));
    }
    let p = params.p.ok_or_else(|| {
        Error::ProtocolViolation("variance_estimate needs a stochastic instance".into())
    })?;
    if support.is_enforcing() {
        if let Some((var, index)) = support.first_violation(pt) {
            return Err(Error::ProtocolViolation(format!(
                "sampled point touches inactive {:?}[{index}]",
                var
            )));
        }
    }
    if p >= 1.0 {
        return Ok(0.0);
    }
    let frontier = match support.frontier(params) {
        Some(fr) => fr,
        None => return Ok(0.0),
    };
    let exact = deterministic_query(params, pt)?;
    let v = match perturb_target(params, frontier) {
        PerturbTarget::YCoord(j) => exact.gg_y[j],
        PerturbTarget::XCoord(j) => exact.gg_x[j],
    };
    if v == 0.0 {
        return Ok(0.0);
    }
    // X_k = (xi_k / p) v; unbiased sample variance over the draws.
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let x = if rng.gen_bool(p) { v / p } else { 0.0 };
        sum += x;
        sum_sq += x * x;
    }
    let s = samples as f64;
    Ok((sum_sq - sum * sum / s) / (s - 1.0))
}
