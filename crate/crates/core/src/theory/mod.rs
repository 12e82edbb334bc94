//! Exact computation of coverage coefficients, the suboptimality bound and
//! the parameter calculator at desk scale.
//!
//! Trajectory ratios `d^pi(tau) / d^ref(tau)` only depend on the policy
//! factors (transitions cancel), so their maximum over trajectories is a
//! max-product dynamic program and never needs enumeration.

pub mod verify;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{exact_value, exact_visitation, ActionTable, Mdp, StateId, StateTable, Step, Trajectory};
use crate::policy::{max_state_kl, policy_kl_to_ref, TabularPolicy, SUPPORT_EPS};
use crate::reward::mle_error;
use crate::rng::SeedStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrabilityReport {
    /// `max_tau d^{pi*}(tau) / d^SFT(tau)`.
    pub c_tr: f64,
    /// `max_{h,s,a} d^{pi*}_h(s,a) / d^SFT_h(s,a)`.
    pub c_st: f64,
    /// `sum_h E_{s ~ d^{pi*}_h} KL(pi*(s) || pi_SFT(s))`.
    pub c_kl: f64,
    pub trajectory_witness: Trajectory,
    pub state_action_witness: (StateId, usize),
}

/// Largest `d^pi(tau) / d^ref(tau)` over trajectories `pi` can generate,
/// with a maximizing trajectory. Ties go to the lowest action and next state.
pub fn max_trajectory_ratio(mdp: &Mdp, pi: &TabularPolicy, pi_ref: &TabularPolicy) -> Result<(f64, Trajectory)> {
    let layout = mdp.layout();
    pi.check_layout(layout)?;
    pi_ref.check_layout(layout)?;
    let mut best = StateTable::zeros(layout);
    let mut choice = vec![Vec::new(); mdp.horizon()];
    for h in (0..mdp.horizon()).rev() {
        choice[h] = vec![(0usize, 0usize); mdp.states_at(h)];
        for s in 0..mdp.states_at(h) {
            let sid = StateId::new(h, s);
            let mut top = f64::NEG_INFINITY;
            for (a, &p) in pi.row(sid).iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                let q = pi_ref.prob(sid, a);
                let log_ratio = if q <= SUPPORT_EPS { f64::INFINITY } else { (p / q).ln() };
                let (tail, next) = match mdp.next_distribution(sid, a) {
                    None => (0.0, 0),
                    Some(row) => row
                        .iter()
                        .enumerate()
                        .filter(|(_, &t)| t > 0.0)
                        .map(|(sp, _)| (best.step(h + 1)[sp], sp))
                        .fold((f64::NEG_INFINITY, 0), |m, c| if c.0 > m.0 { c } else { m }),
                };
                if log_ratio + tail > top {
                    top = log_ratio + tail;
                    choice[h][s] = (a, next);
                }
            }
            best.set(sid, top);
        }
    }
    let mut steps = Vec::with_capacity(mdp.horizon());
    let mut s = 0;
    for (h, row) in choice.iter().enumerate() {
        let (a, next) = row[s];
        steps.push(Step::new(StateId::new(h, s), a));
        s = next;
    }
    let witness = Trajectory::new(0, steps);
    let log_max = best.get(mdp.initial_state());
    if log_max == f64::INFINITY {
        let bad = witness
            .steps()
            .iter()
            .find(|st| pi_ref.prob(st.state, st.action) <= SUPPORT_EPS)
            .copied()
            .expect("an infinite ratio needs a step outside the reference support");
        return Err(Error::CoverageViolation(format!(
            "trajectory {:?} has zero reference probability at {} (action {})",
            witness.steps(),
            bad.state,
            bad.action
        )));
    }
    Ok((log_max.exp(), witness))
}

/// Exact `C_TR`, `C_ST` and `C_KL` of `pi_star` against `pi_sft`.
pub fn concentrability(mdp: &Mdp, pi_star: &TabularPolicy, pi_sft: &TabularPolicy) -> Result<ConcentrabilityReport> {
    let (c_tr, trajectory_witness) = max_trajectory_ratio(mdp, pi_star, pi_sft)?;
    let star = exact_visitation(mdp, pi_star);
    let sft = exact_visitation(mdp, pi_sft);
    let mut c_st = f64::NEG_INFINITY;
    let mut state_action_witness = (mdp.initial_state(), 0);
    for s in mdp.layout().states() {
        for a in 0..mdp.num_actions() {
            let num = star.state_action(s, a);
            if num == 0.0 {
                continue;
            }
            let den = sft.state_action(s, a);
            if den == 0.0 {
                return Err(Error::CoverageViolation(format!(
                    "pi* visits {s} action {a} with mass {num}, the reference never does"
                )));
            }
            if num / den > c_st {
                c_st = num / den;
                state_action_witness = (s, a);
            }
        }
    }
    let c_kl = policy_kl_to_ref(mdp, pi_star, pi_sft)?;
    Ok(ConcentrabilityReport {
        c_tr,
        c_st,
        c_kl,
        trajectory_witness,
        state_action_witness,
    })
}

/// Multipliers on the order terms. All default to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrderConstants {
    pub mle: f64,
    pub eval: f64,
    pub pairs: f64,
    pub online: f64,
}

impl Default for OrderConstants {
    fn default() -> Self {
        Self { mle: 1.0, eval: 1.0, pairs: 1.0, online: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CSftProvenance {
    UserSupplied,
    /// Maximum over a finite candidate set, so a lower bound on the true value.
    SampledLowerBound,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CSftValue {
    pub value: f64,
    pub provenance: CSftProvenance,
}

/// Everything the suboptimality bound depends on. Counts are reals so limits
/// can be probed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub horizon: f64,
    pub r_max: f64,
    pub kappa: f64,
    /// Preference pairs `M`.
    pub pairs: f64,
    /// Total online samples `N`.
    pub online: f64,
    pub iterations: f64,
    /// Echoed only; defaults to `sqrt(1 / (T r_max^2))`.
    #[serde(default)]
    pub eta: Option<f64>,
    pub lambda: f64,
    pub delta: f64,
    pub reward_class_size: f64,
    pub q_class_size: f64,
    pub c_tr: f64,
    pub c_st: f64,
    #[serde(default)]
    pub c_sft: Option<CSftValue>,
    #[serde(default)]
    pub constants: OrderConstants,
    #[serde(default)]
    pub relaxed: Option<RelaxedCoefficients>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub eps_mle: f64,
    pub eps_eval: f64,
    pub eta: f64,
    /// `T r_max / lambda`, the per-state KL radius the iterates stay in.
    pub kl_radius: f64,
    /// `(sqrt C_TR + sqrt C_SFT) eps_mle`.
    pub reward_term: f64,
    /// `2 H sqrt(C_ST) eps_eval`.
    pub eval_term: f64,
    /// `2 H^{3/2} r_max ln C_ST / sqrt T`.
    pub optimization_term: f64,
    /// `lambda H ln C_ST`.
    pub regularization_term: f64,
    pub total: f64,
    pub c_sft: CSftValue,
    pub relaxed: Option<RelaxedCoefficients>,
}

fn need(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(what.to_string()))
    }
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        need(self.horizon >= 1.0, "horizon must be at least 1")?;
        need(self.r_max > 0.0, "r_max must be positive")?;
        need(self.kappa > 0.0, "kappa must be positive")?;
        need(self.pairs >= 1.0 && self.online >= 1.0, "M and N must be at least 1")?;
        need(self.iterations >= 1.0, "T must be at least 1")?;
        need(self.lambda >= 0.0, "lambda must be nonnegative")?;
        need(self.delta > 0.0 && self.delta < 1.0, "delta must lie in (0, 1)")?;
        need(
            self.reward_class_size >= 1.0 && self.q_class_size >= 1.0,
            "class sizes must be at least 1",
        )?;
        need(self.c_tr >= 1.0 && self.c_st >= 1.0, "C_TR and C_ST must be at least 1")?;
        if let Some(c) = self.c_sft {
            need(c.value >= 1.0, "C_SFT must be at least 1")?;
        }
        Ok(())
    }

    /// `c sqrt(kappa^2 / M ln(|R| / delta))`.
    pub fn eps_mle(&self) -> f64 {
        self.constants.mle * (self.kappa.powi(2) / self.pairs * (self.reward_class_size / self.delta).ln()).sqrt()
    }

    /// `c sqrt(r_max^2 / N ln(T |F| / delta))`.
    pub fn eps_eval(&self) -> f64 {
        self.constants.eval
            * (self.r_max.powi(2) / self.online * (self.iterations * self.q_class_size / self.delta).ln()).sqrt()
    }

    /// Smallest `N` at which the bound is nonincreasing in `T` at the
    /// current `T`. Below it, the `ln T` growth of the evaluation error
    /// outweighs the `1 / sqrt T` optimization term. Infinite when
    /// `C_ST = 1`.
    pub fn t_monotone_threshold(&self) -> f64 {
        let ln_c = self.c_st.ln();
        let log_term = (self.iterations * self.q_class_size / self.delta).ln();
        self.constants.eval.powi(2) * self.c_st * self.iterations / (self.horizon * ln_c * ln_c * log_term)
    }
}

/// The suboptimality bound with its per-term breakdown.
pub fn theorem1_bound(inputs: &BoundInputs) -> Result<BoundReport> {
    inputs.validate()?;
    let c_sft = inputs.c_sft.ok_or(Error::MissingInput("C_SFT"))?;
    let h = inputs.horizon;
    let ln_c = inputs.c_st.ln();
    let eps_mle = inputs.eps_mle();
    let eps_eval = inputs.eps_eval();
    let reward_term = (inputs.c_tr.sqrt() + c_sft.value.sqrt()) * eps_mle;
    let eval_term = 2.0 * h * inputs.c_st.sqrt() * eps_eval;
    let optimization_term = 2.0 * h.powf(1.5) * inputs.r_max * ln_c / inputs.iterations.sqrt();
    let regularization_term = inputs.lambda * h * ln_c;
    Ok(BoundReport {
        eps_mle,
        eps_eval,
        eta: inputs
            .eta
            .unwrap_or_else(|| (1.0 / (inputs.iterations * inputs.r_max.powi(2))).sqrt()),
        kl_radius: inputs.iterations * inputs.r_max / inputs.lambda,
        reward_term,
        eval_term,
        optimization_term,
        regularization_term,
        total: reward_term + eval_term + optimization_term + regularization_term,
        c_sft,
        relaxed: inputs.relaxed.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryInputs {
    pub horizon: f64,
    pub r_max: f64,
    pub c_st: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub reward_class_size: f64,
    pub q_class_size: f64,
    pub kappa: f64,
    pub c_tr: f64,
    /// `C_SFT` at the corollary's KL radius; without it the required `M`
    /// is not reported.
    #[serde(default)]
    pub c_sft: Option<f64>,
    #[serde(default)]
    pub constants: OrderConstants,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollarySettings {
    pub iterations: u64,
    /// `36 H^3 r_max^2 ln^2 C_ST / eps^2` before rounding up.
    pub iterations_exact: f64,
    pub eta: f64,
    pub lambda: f64,
    /// `108 H^4 r_max^3 ln^3 C_ST / eps^3 = T r_max / lambda` (unrounded `T`).
    pub kl_radius: f64,
    pub required_pairs: Option<f64>,
    pub required_online: f64,
}

/// Rounds up, except that values within `1e-9` (relative) of an integer
/// round to it, so formula rounding never adds an iteration.
fn tolerant_ceil(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

pub fn corollary1_settings(inputs: &CorollaryInputs) -> Result<CorollarySettings> {
    need(inputs.horizon >= 1.0, "horizon must be at least 1")?;
    need(inputs.r_max > 0.0, "r_max must be positive")?;
    need(inputs.epsilon > 0.0, "epsilon must be positive")?;
    need(inputs.delta > 0.0 && inputs.delta < 1.0, "delta must lie in (0, 1)")?;
    need(
        inputs.reward_class_size >= 1.0 && inputs.q_class_size >= 1.0,
        "class sizes must be at least 1",
    )?;
    if inputs.c_st <= 1.0 {
        return Err(Error::InvalidConfig(format!(
            "C_ST = {} gives ln C_ST <= 0, so lambda is undefined; set lambda manually",
            inputs.c_st
        )));
    }
    let (h, r, eps) = (inputs.horizon, inputs.r_max, inputs.epsilon);
    let ln_c = inputs.c_st.ln();
    let iterations_exact = 36.0 * h.powi(3) * r * r * ln_c * ln_c / (eps * eps);
    let t = tolerant_ceil(iterations_exact);
    let kl_radius = 108.0 * h.powi(4) * r.powi(3) * ln_c.powi(3) / eps.powi(3);
    let required_pairs = inputs.c_sft.map(|c_sft| {
        inputs.constants.pairs * (inputs.c_tr + c_sft) * inputs.kappa.powi(2) / (eps * eps)
            * (inputs.reward_class_size / inputs.delta).ln()
    });
    let required_online = inputs.constants.online * h * h * r * r * inputs.c_st / (eps * eps)
        * (t * inputs.q_class_size / inputs.delta).ln();
    Ok(CorollarySettings {
        iterations: t as u64,
        iterations_exact,
        eta: (1.0 / (t * r * r)).sqrt(),
        lambda: eps / (3.0 * h * ln_c),
        kl_radius,
        required_pairs,
        required_online,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceDifference {
    /// `V^pi - V^pi'`.
    pub lhs: f64,
    /// `sum_h E_{s ~ d^pi_h} [<pi(s), Q^pi'(s, .)> - V^pi'(s)]`.
    pub rhs: f64,
    pub gap: f64,
}

pub fn perf_diff_check(mdp: &Mdp, pi: &TabularPolicy, pi_prime: &TabularPolicy, reward: &ActionTable) -> PerformanceDifference {
    let prime = exact_value(mdp, pi_prime, reward);
    let lhs = exact_value(mdp, pi, reward).value() - prime.value();
    let d = exact_visitation(mdp, pi);
    let mut rhs = 0.0;
    for s in mdp.layout().states() {
        let ds = d.state(s);
        if ds == 0.0 {
            continue;
        }
        let adv: f64 = pi
            .row(s)
            .iter()
            .zip(prime.q.row(s))
            .map(|(p, q)| p * q)
            .sum::<f64>()
            - prime.v.get(s);
        rhs += ds * adv;
    }
    PerformanceDifference { lhs, rhs, gap: lhs - rhs }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxedCoefficients {
    pub c_r: f64,
    pub c_eval: f64,
    /// Supremum over the supplied KL-ball candidates only.
    pub c_s_lower_bound: Option<f64>,
}

pub struct RelaxedInputs<'a> {
    pub pi_star: &'a TabularPolicy,
    pub pi_sft: &'a TabularPolicy,
    pub r_star: &'a ActionTable,
    pub reward_class: &'a [ActionTable],
    pub q_class: &'a [ActionTable],
    /// Iterates `pi^t` the evaluation coefficient ranges over.
    pub iterates: &'a [TabularPolicy],
    pub r_hat: &'a ActionTable,
    /// Policies inside the KL ball; empty skips `C_s`.
    pub ball: &'a [TabularPolicy],
}

/// `max(0, num) / sqrt(den_sq)` with `0 / 0 = 0`. A numerator at rounding
/// level over a vanishing denominator counts as 0.
fn guarded_ratio(num: f64, den_sq: f64) -> f64 {
    if num <= 0.0 {
        0.0
    } else if den_sq <= 1e-24 {
        if num <= 1e-9 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den_sq.sqrt()
    }
}

/// Class-dependent coverage coefficients, exact over the finite classes.
pub fn relaxed_coefficients(mdp: &Mdp, inputs: &RelaxedInputs, cap: usize) -> Result<RelaxedCoefficients> {
    if inputs.reward_class.is_empty() {
        return Err(Error::Empty("reward class"));
    }
    if inputs.q_class.is_empty() {
        return Err(Error::Empty("Q class"));
    }
    if inputs.iterates.is_empty() {
        return Err(Error::Empty("iterate list"));
    }
    let value = |pi: &TabularPolicy, r: &ActionTable| exact_value(mdp, pi, r).value();
    let star_value = value(inputs.pi_star, inputs.r_star);
    let sft_value = value(inputs.pi_sft, inputs.r_star);

    let mut c_r = 0.0_f64;
    let mut c_s: Option<f64> = (!inputs.ball.is_empty()).then_some(0.0);
    for r in inputs.reward_class {
        let den_sq = mle_error(mdp, r, inputs.r_star, inputs.pi_sft, cap)?;
        let sft_gap = sft_value - value(inputs.pi_sft, r);
        c_r = c_r.max(guarded_ratio(star_value - value(inputs.pi_star, r) - sft_gap, den_sq));
        if let Some(c) = c_s.as_mut() {
            for pi in inputs.ball {
                let num = value(pi, inputs.r_star) - value(pi, r) - sft_gap;
                *c = c.max(guarded_ratio(num, den_sq));
            }
        }
    }

    let d_star = exact_visitation(mdp, inputs.pi_star);
    let d_sft = exact_visitation(mdp, inputs.pi_sft);
    let mut c_eval = 0.0_f64;
    for pi_t in inputs.iterates {
        let q = exact_value(mdp, pi_t, inputs.r_hat).q;
        for f in inputs.q_class {
            for h in 0..mdp.horizon() {
                let mut on_t = 0.0;
                let mut on_star = 0.0;
                let mut den_sq = 0.0;
                for s in (0..mdp.states_at(h)).map(|i| StateId::new(h, i)) {
                    for a in 0..mdp.num_actions() {
                        let diff = f.get(s, a) - q.get(s, a);
                        on_t += d_star.state(s) * pi_t.prob(s, a) * diff;
                        on_star += d_star.state(s) * inputs.pi_star.prob(s, a) * diff;
                        den_sq += d_sft.state(s) * 0.5 * (inputs.pi_sft.prob(s, a) + pi_t.prob(s, a)) * diff * diff;
                    }
                }
                c_eval = c_eval.max(guarded_ratio(on_t.abs(), den_sq)).max(guarded_ratio(on_star.abs(), den_sq));
            }
        }
    }
    Ok(RelaxedCoefficients {
        c_r,
        c_eval,
        c_s_lower_bound: c_s,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum CSftWitness {
    Reference,
    Iterate(usize),
    Probe(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CSftEstimate {
    pub value: f64,
    pub kl_radius: f64,
    pub witness: CSftWitness,
    pub probes: usize,
    /// Iterates skipped because they lie outside the ball.
    pub skipped_iterates: usize,
}

impl CSftEstimate {
    pub fn as_bound_input(&self) -> CSftValue {
        CSftValue {
            value: self.value,
            provenance: CSftProvenance::SampledLowerBound,
        }
    }
}

/// Pulls `pi` toward `pi_ref` along the segment between them until every
/// per-state KL is at most `radius`.
pub fn project_into_kl_ball(pi: &TabularPolicy, pi_ref: &TabularPolicy, radius: f64) -> Result<TabularPolicy> {
    if max_state_kl(pi, pi_ref)? <= radius {
        return Ok(pi.clone());
    }
    if radius == 0.0 {
        return Ok(pi_ref.clone());
    }
    // Per-state KL is convex along the segment and 0 at the reference, so
    // the feasible weights form an interval [0, w*].
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if max_state_kl(&pi_ref.blend(pi, mid), pi_ref)? <= radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(pi_ref.blend(pi, lo))
}

/// Lower bound on `C_SFT(radius)`: the largest trajectory ratio among the
/// in-ball iterates and `probes` random policies projected into the ball.
/// Probe 0 puts all mass on each state's least likely reference action;
/// the rest draw random rows on the reference support.
pub fn c_sft_lower_bound(
    mdp: &Mdp,
    pi_sft: &TabularPolicy,
    kl_radius: f64,
    iterates: &[TabularPolicy],
    probes: usize,
    stream: &SeedStream,
) -> Result<CSftEstimate> {
    if !(kl_radius >= 0.0) {
        return Err(Error::InvalidConfig(format!("KL radius {kl_radius} must be nonnegative")));
    }
    let mut best = (1.0, CSftWitness::Reference);
    let mut skipped = 0;
    for (i, pi) in iterates.iter().enumerate() {
        if max_state_kl(pi, pi_sft)? > kl_radius {
            skipped += 1;
            continue;
        }
        let (ratio, _) = max_trajectory_ratio(mdp, pi, pi_sft)?;
        if ratio > best.0 {
            best = (ratio, CSftWitness::Iterate(i));
        }
    }
    let probe_ratios: Vec<f64> = (0..probes)
        .into_par_iter()
        .map(|i| {
            let raw = if i == 0 {
                TabularPolicy::deterministic(mdp.layout(), |s| {
                    let row = pi_sft.row(s);
                    (0..row.len())
                        .filter(|&a| row[a] > SUPPORT_EPS)
                        .fold(None, |m: Option<usize>, a| match m {
                            Some(b) if row[b] <= row[a] => Some(b),
                            _ => Some(a),
                        })
                        .unwrap_or(0)
                })
            } else {
                let zero_prob = [0.0, 0.5, 0.9][i % 3];
                TabularPolicy::random_on_support(pi_sft, &mut stream.index(i as u64).rng(), zero_prob)
            };
            let pi = project_into_kl_ball(&raw, pi_sft, kl_radius)?;
            Ok(max_trajectory_ratio(mdp, &pi, pi_sft)?.0)
        })
        .collect::<Result<_>>()?;
    for (i, ratio) in probe_ratios.into_iter().enumerate() {
        if ratio > best.0 {
            best = (ratio, CSftWitness::Probe(i));
        }
    }
    Ok(CSftEstimate {
        value: best.0,
        kl_radius,
        witness: best.1,
        probes,
        skipped_iterates: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::families::{chain, random, reference_policy};
    use crate::mdp::{enumerate_trajectories, trajectory_probability};
    use rand::seq::SliceRandom;
    use rand::Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn brute_force_c_tr(mdp: &Mdp, star: &TabularPolicy, sft: &TabularPolicy) -> f64 {
        enumerate_trajectories(mdp, star)
            .unwrap()
            .iter()
            .map(|(t, p)| p / trajectory_probability(mdp, sft, t))
            .fold(0.0, f64::max)
    }

    #[test]
    fn chain2_coefficients() {
        let mdp = chain(2, 0.0);
        let star = TabularPolicy::deterministic(mdp.layout(), |_| 0);
        let sft = TabularPolicy::uniform(mdp.layout());
        let rep = concentrability(&mdp, &star, &sft).unwrap();
        assert!((rep.c_tr - 4.0).abs() < 1e-12);
        assert!((rep.c_st - 4.0).abs() < 1e-12);
        assert!((rep.c_kl - 2.0 * LN2).abs() < 1e-12);
        assert_eq!(rep.state_action_witness, (StateId::new(1, 0), 0));
        assert_eq!(rep.trajectory_witness.steps(), &[Step::new(StateId::new(0, 0), 0), Step::new(StateId::new(1, 0), 0)]);
        // Four trajectories under the reference, each with probability 1/4.
        let all = enumerate_trajectories(&mdp, &sft).unwrap();
        assert_eq!(all.len(), 4);
        assert!(all.iter().all(|(_, p)| (*p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identical_policies_have_unit_coverage() {
        let mdp = random(3, 3, 2, 0.2, 4);
        let pi = TabularPolicy::random(mdp.layout(), &mut SeedStream::new(1).rng(), 0.0);
        let rep = concentrability(&mdp, &pi, &pi).unwrap();
        assert!((rep.c_tr - 1.0).abs() < 1e-12);
        assert_eq!(rep.c_st, 1.0);
        assert_eq!(rep.c_kl, 0.0);
    }

    #[test]
    fn dp_ratio_matches_enumeration() {
        for seed in 0..30 {
            let mdp = random(4, 3, 3, 0.3, seed);
            let mut rng = SeedStream::new(seed).child("t").rng();
            let sft = TabularPolicy::random(mdp.layout(), &mut rng, 0.0);
            let star = TabularPolicy::random(mdp.layout(), &mut rng, 0.5);
            let (ratio, witness) = max_trajectory_ratio(&mdp, &star, &sft).unwrap();
            let brute = brute_force_c_tr(&mdp, &star, &sft);
            assert!((ratio - brute).abs() <= 1e-10 * brute, "{ratio} vs {brute}");
            let w = trajectory_probability(&mdp, &star, &witness) / trajectory_probability(&mdp, &sft, &witness);
            assert!((w - ratio).abs() <= 1e-10 * ratio);
        }
    }

    #[test]
    fn coverage_violation_has_witness() {
        let mdp = chain(2, 0.0);
        let star = TabularPolicy::deterministic(mdp.layout(), |_| 1);
        let sft = TabularPolicy::deterministic(mdp.layout(), |_| 0);
        match concentrability(&mdp, &star, &sft) {
            Err(Error::CoverageViolation(msg)) => assert!(msg.contains("h=1"), "{msg}"),
            other => panic!("expected a coverage violation, got {other:?}"),
        }
        // Unreachable unsupported rows do not matter.
        let mut t = ActionTable::filled(mdp.layout(), 0.5);
        t.row_mut(StateId::new(1, 1)).copy_from_slice(&[1.0, 0.0]);
        let sft = TabularPolicy::new(t).unwrap();
        let star = TabularPolicy::deterministic(mdp.layout(), |_| 0);
        assert!(concentrability(&mdp, &star, &sft).is_ok());
    }

    fn permuted(mdp: &Mdp, seed: u64) -> (Mdp, Vec<Vec<usize>>, Vec<usize>) {
        let mut rng = SeedStream::new(seed).child("perm").rng();
        let states: Vec<Vec<usize>> = (0..mdp.horizon())
            .map(|h| {
                let mut p: Vec<usize> = (0..mdp.states_at(h)).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        let mut actions: Vec<usize> = (0..mdp.num_actions()).collect();
        actions.shuffle(&mut rng);
        let doc = mdp.to_document();
        let mut out = doc.clone();
        for h in 0..mdp.horizon() {
            for s in 0..mdp.states_at(h) {
                for a in 0..mdp.num_actions() {
                    out.reward[h][states[h][s]][actions[a]] = doc.reward[h][s][a];
                    if h + 1 < mdp.horizon() {
                        for sp in 0..mdp.states_at(h + 1) {
                            out.transitions[h][states[h][s]][actions[a]][states[h + 1][sp]] = doc.transitions[h][s][a][sp];
                        }
                    }
                }
            }
        }
        (Mdp::validate(out).unwrap(), states, actions)
    }

    fn permute_policy(pi: &TabularPolicy, states: &[Vec<usize>], actions: &[usize]) -> TabularPolicy {
        let mut t = pi.table().clone();
        for (s, row) in pi.table().iter_rows() {
            for (a, &p) in row.iter().enumerate() {
                t.set(StateId::new(s.step, states[s.step][s.index]), actions[a], p);
            }
        }
        TabularPolicy::new(t).unwrap()
    }

    #[test]
    fn relabeling_invariance() {
        for seed in 0..20 {
            let mdp = random(3, 4, 3, 0.3, seed);
            let mut rng = SeedStream::new(seed).child("pol").rng();
            let sft = TabularPolicy::random(mdp.layout(), &mut rng, 0.0);
            let star = TabularPolicy::random(mdp.layout(), &mut rng, 0.6);
            let (pm, states, actions) = permuted(&mdp, seed);
            let a = concentrability(&mdp, &star, &sft).unwrap();
            let b = concentrability(&pm, &permute_policy(&star, &states, &actions), &permute_policy(&sft, &states, &actions)).unwrap();
            assert!((a.c_tr - b.c_tr).abs() <= 1e-12 * a.c_tr);
            assert!((a.c_st - b.c_st).abs() <= 1e-12 * a.c_st);
            assert!((a.c_kl - b.c_kl).abs() <= 1e-12);
        }
    }

    #[test]
    fn proposition_one_inequalities() {
        for seed in 0..100 {
            let mdp = random(3, 3, 2, 0.2, 1000 + seed);
            let mut rng = SeedStream::new(seed).child("prop").rng();
            let sft = TabularPolicy::random(mdp.layout(), &mut rng, 0.0);
            let star = TabularPolicy::random(mdp.layout(), &mut rng, 0.5);
            let rep = concentrability(&mdp, &star, &sft).unwrap();
            assert!(rep.c_st <= rep.c_tr * (1.0 + 1e-12), "{} > {}", rep.c_st, rep.c_tr);
            assert!(rep.c_kl <= mdp.horizon() as f64 * rep.c_st.ln() + 1e-12);
            assert!(rep.c_st >= 1.0 - 1e-12 && rep.c_tr >= 1.0 - 1e-12);
        }
    }

    fn random_table(mdp: &Mdp, rng: &mut impl Rng, scale: f64) -> ActionTable {
        ActionTable::from_fn(mdp.layout(), |_, _| rng.gen::<f64>() * scale)
    }

    #[test]
    fn relaxed_coefficients_respect_their_bounds() {
        for seed in 0..50 {
            let mdp = random(3, 3, 2, 0.2, 2000 + seed);
            let mut rng = SeedStream::new(seed).child("relaxed").rng();
            let sft = TabularPolicy::random(mdp.layout(), &mut rng, 0.0);
            let star = TabularPolicy::random(mdp.layout(), &mut rng, 0.5);
            let r_star = mdp.true_reward().clone();
            let h = mdp.horizon() as f64;
            let reward_class: Vec<_> = (0..5).map(|_| random_table(&mdp, &mut rng, 1.0 / h)).collect();
            let q_class: Vec<_> = (0..5).map(|_| random_table(&mdp, &mut rng, 1.0)).collect();
            let iterates: Vec<_> = (0..3).map(|_| TabularPolicy::random(mdp.layout(), &mut rng, 0.0)).collect();
            let r_hat = random_table(&mdp, &mut rng, 1.0 / h);
            let inputs = RelaxedInputs {
                pi_star: &star,
                pi_sft: &sft,
                r_star: &r_star,
                reward_class: &reward_class,
                q_class: &q_class,
                iterates: &iterates,
                r_hat: &r_hat,
                ball: &iterates,
            };
            let rel = relaxed_coefficients(&mdp, &inputs, 1_000_000).unwrap();
            let rep = concentrability(&mdp, &star, &sft).unwrap();
            assert!(rel.c_r <= rep.c_tr.sqrt() + 1e-12, "{} vs {}", rel.c_r, rep.c_tr);
            assert!(rel.c_eval >= 0.0);
            assert!(rel.c_eval <= (2.0 * rep.c_st).sqrt() + 1e-12, "{} vs {}", rel.c_eval, rep.c_st);
            assert!(rel.c_s_lower_bound.unwrap() >= 0.0);
        }
    }

    #[test]
    fn reward_class_of_truth_gives_zero() {
        let mdp = chain(3, 0.1);
        let sft = reference_policy(&mdp, 0.3);
        let star = TabularPolicy::deterministic(mdp.layout(), |_| 0);
        let r = mdp.true_reward().clone();
        let inputs = RelaxedInputs {
            pi_star: &star,
            pi_sft: &sft,
            r_star: &r,
            reward_class: std::slice::from_ref(&r),
            q_class: &[ActionTable::zeros(mdp.layout())],
            iterates: std::slice::from_ref(&sft),
            r_hat: &r,
            ball: &[],
        };
        let rel = relaxed_coefficients(&mdp, &inputs, 1000).unwrap();
        assert_eq!(rel.c_r, 0.0);
        assert_eq!(rel.c_s_lower_bound, None);
        assert!(rel.c_eval > 0.0);
    }

    fn base_inputs() -> BoundInputs {
        BoundInputs {
            horizon: 4.0,
            r_max: 1.0,
            kappa: 4.0,
            pairs: 1e4,
            online: 1e4,
            iterations: 4.0,
            eta: None,
            lambda: 0.1,
            delta: 0.05,
            reward_class_size: 100.0,
            q_class_size: 100.0,
            c_tr: 16.0,
            c_st: 4.0,
            c_sft: Some(CSftValue { value: 20.0, provenance: CSftProvenance::UserSupplied }),
            constants: OrderConstants::default(),
            relaxed: None,
        }
    }

    #[test]
    fn bound_terms_and_echo() {
        let inputs = base_inputs();
        let rep = theorem1_bound(&inputs).unwrap();
        assert_eq!(rep.eta, 0.5);
        let eps_mle = (16.0 / 1e4 * (100.0f64 / 0.05).ln()).sqrt();
        let eps_eval = (1.0 / 1e4 * (400.0f64 / 0.05).ln()).sqrt();
        let ln4 = 4.0f64.ln();
        let expected = (4.0 + 20.0f64.sqrt()) * eps_mle + 8.0 * 2.0 * eps_eval + 2.0 * 8.0 * ln4 / 2.0 + 0.1 * 4.0 * ln4;
        assert!((rep.total - expected).abs() < 1e-12);
        assert_eq!(rep.kl_radius, 40.0);
        assert!((rep.reward_term + rep.eval_term + rep.optimization_term + rep.regularization_term - rep.total).abs() < 1e-15);

        let doubled = theorem1_bound(&BoundInputs { iterations: 8.0, ..inputs.clone() }).unwrap();
        assert!((doubled.optimization_term - rep.optimization_term / 2f64.sqrt()).abs() < 1e-15);

        let missing = BoundInputs { c_sft: None, ..inputs };
        assert!(matches!(theorem1_bound(&missing), Err(Error::MissingInput(_))));
    }

    #[test]
    fn bound_vanishes_in_the_limit() {
        let mut last = f64::INFINITY;
        for k in 1..=12 {
            let n = 10f64.powi(2 * k);
            let inputs = BoundInputs {
                pairs: n,
                online: n,
                iterations: 10f64.powi(k),
                lambda: 10f64.powi(-k),
                ..base_inputs()
            };
            let total = theorem1_bound(&inputs).unwrap().total;
            assert!(total < last);
            last = total;
        }
        assert!(last < 1e-4, "{last}");
    }

    #[test]
    fn bound_is_monotone_in_samples() {
        let base = base_inputs();
        let b0 = theorem1_bound(&base).unwrap().total;
        for factor in [1.5, 2.0, 10.0] {
            let m = theorem1_bound(&BoundInputs { pairs: base.pairs * factor, ..base.clone() }).unwrap().total;
            let n = theorem1_bound(&BoundInputs { online: base.online * factor, ..base.clone() }).unwrap().total;
            assert!(m <= b0 && n <= b0);
        }
    }

    #[test]
    fn t_monotonicity_holds_only_above_threshold() {
        // Inside the region: N comfortably above the threshold at the larger T.
        let base = base_inputs();
        for t in [2.0, 4.0, 16.0, 64.0] {
            let lo = BoundInputs { iterations: t, ..base.clone() };
            let hi = BoundInputs { iterations: t + 1.0, ..base.clone() };
            assert!(hi.online >= hi.t_monotone_threshold());
            assert!(theorem1_bound(&hi).unwrap().total <= theorem1_bound(&lo).unwrap().total);
        }
        // Outside it (tiny N, C_ST close to 1) the ln T growth wins.
        let outside = BoundInputs { online: 1.0, c_st: 1.01, iterations: 100.0, ..base };
        assert!(outside.online < outside.t_monotone_threshold());
        let more = BoundInputs { iterations: 101.0, ..outside.clone() };
        assert!(theorem1_bound(&more).unwrap().total > theorem1_bound(&outside).unwrap().total);
    }

    fn corollary_inputs() -> CorollaryInputs {
        CorollaryInputs {
            horizon: 2.0,
            r_max: 1.0,
            c_st: std::f64::consts::E,
            epsilon: 1.0,
            delta: 0.05,
            reward_class_size: 10.0,
            q_class_size: 10.0,
            kappa: 1.0,
            c_tr: 4.0,
            c_sft: None,
            constants: OrderConstants::default(),
        }
    }

    #[test]
    fn corollary_calculator() {
        let s = corollary1_settings(&corollary_inputs()).unwrap();
        assert_eq!(s.iterations, 288);
        assert!((s.lambda - 1.0 / 6.0).abs() <= f64::EPSILON / 6.0);
        assert!((s.eta - (1.0f64 / 288.0).sqrt()).abs() < 1e-15);
        assert_eq!(s.required_pairs, None);
        assert!((s.kl_radius - 288.0 * 6.0).abs() < 1e-9);

        let half = corollary1_settings(&CorollaryInputs { epsilon: 0.5, ..corollary_inputs() }).unwrap();
        assert_eq!(half.iterations, 4 * s.iterations);

        let with_sft = corollary1_settings(&CorollaryInputs { c_sft: Some(6.0), ..corollary_inputs() }).unwrap();
        let expected = 10.0 * (10.0f64 / 0.05).ln();
        assert!((with_sft.required_pairs.unwrap() - expected).abs() < 1e-9);

        let degenerate = CorollaryInputs { c_st: 1.0, ..corollary_inputs() };
        assert!(matches!(corollary1_settings(&degenerate), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn tolerant_rounding() {
        assert_eq!(tolerant_ceil(288.0000000001), 288.0);
        assert_eq!(tolerant_ceil(287.9999999999), 288.0);
        assert_eq!(tolerant_ceil(288.01), 289.0);
    }

    #[test]
    fn performance_difference_identity() {
        let mdp = chain(2, 0.0);
        let pi = TabularPolicy::uniform(mdp.layout());
        let same = perf_diff_check(&mdp, &pi, &pi, mdp.true_reward());
        assert_eq!((same.lhs, same.rhs), (0.0, 0.0));
        let mut worst = 0.0_f64;
        for seed in 0..100 {
            let mdp = random(4, 3, 3, 0.2, 3000 + seed);
            let mut rng = SeedStream::new(seed).child("pd").rng();
            let a = TabularPolicy::random(mdp.layout(), &mut rng, 0.3);
            let b = TabularPolicy::random(mdp.layout(), &mut rng, 0.3);
            let r = random_table(&mdp, &mut rng, 1.0);
            worst = worst.max(perf_diff_check(&mdp, &a, &b, &r).gap.abs());
        }
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn projection_lands_on_the_ball() {
        let mdp = chain(3, 0.0);
        let sft = TabularPolicy::uniform(mdp.layout());
        let star = TabularPolicy::deterministic(mdp.layout(), |_| 0);
        let p = project_into_kl_ball(&star, &sft, 0.1).unwrap();
        let kl = max_state_kl(&p, &sft).unwrap();
        assert!(kl <= 0.1 && kl > 0.1 - 1e-9, "{kl}");
        assert_eq!(project_into_kl_ball(&sft, &sft, 0.0).unwrap(), sft);
    }

    #[test]
    fn c_sft_lower_bound_properties() {
        let mdp = chain(3, 0.0);
        let sft = reference_policy(&mdp, 0.4);
        let stream = SeedStream::new(9);
        let zero = c_sft_lower_bound(&mdp, &sft, 0.0, &[], 50, &stream).unwrap();
        assert!((zero.value - 1.0).abs() < 1e-9, "{zero:?}");
        let small = c_sft_lower_bound(&mdp, &sft, 0.05, &[], 50, &stream).unwrap();
        let large = c_sft_lower_bound(&mdp, &sft, 5.0, &[], 50, &stream).unwrap();
        assert!(small.value > 1.0 && large.value >= small.value);
        // The unconstrained supremum is the product of inverse smallest
        // reference probabilities along a path.
        let min_row: f64 = (1.0 - 0.4) * 0.5;
        assert!(large.value <= (1.0 / min_row).powi(3) * (1.0 + 1e-9));
        assert!((large.value - (1.0 / min_row).powi(3)).abs() < 1e-6, "{}", large.value);
        assert_eq!(large.witness, CSftWitness::Probe(0));
        // Determinism.
        assert_eq!(c_sft_lower_bound(&mdp, &sft, 0.05, &[], 50, &stream).unwrap(), small);
        // Iterates outside the ball are skipped.
        let far = TabularPolicy::deterministic(mdp.layout(), |_| 1);
        let est = c_sft_lower_bound(&mdp, &sft, 0.01, &[far.clone()], 0, &stream).unwrap();
        assert_eq!(est.skipped_iterates, 1);
        let est = c_sft_lower_bound(&mdp, &sft, 10.0, &[far], 0, &stream).unwrap();
        assert_eq!(est.witness, CSftWitness::Iterate(0));
    }
}
