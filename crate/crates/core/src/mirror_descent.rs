//! KL-regularized policy updates: the closed-form mirror-descent step and a
//! clipped-ratio surrogate ascent for the practical path.

use serde::{Deserialize, Serialize};

use crate::driver::AnnotatedTrajectory;
use crate::error::{Error, Result};
use crate::mdp::{ActionTable, Layout, StateId, StateTable};
use crate::policy::{kl_per_state, TabularPolicy, SUPPORT_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NpgParams {
    pub eta: f64,
    pub lambda: f64,
}

impl NpgParams {
    pub fn new(eta: f64, lambda: f64) -> Result<Self> {
        let p = Self { eta, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipParams {
    pub clip: f64,
    pub epochs: usize,
    pub step_size: f64,
    /// Per-step penalty on `ln(pi_t / pi_sft)` in the critic's returns.
    pub kl_penalty: f64,
}

impl Default for ClipParams {
    fn default() -> Self {
        Self {
            clip: 0.2,
            epochs: 4,
            step_size: 0.05,
            kl_penalty: 0.01,
        }
    }
}

impl ClipParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::InvalidConfig(format!("clip radius {} is outside (0, 1)", self.clip)));
        }
        if !(self.step_size >= 0.0 && self.kl_penalty >= 0.0) {
            return Err(Error::InvalidConfig("clip step size and penalty must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `<-Q, p> + lambda KL(p || sft) + KL(p || pi_t) / eta`.
pub fn md_objective(p: &[f64], q: &[f64], sft: &[f64], pi_t: &[f64], params: &NpgParams) -> Result<f64> {
    let linear: f64 = p.iter().zip(q).map(|(p, q)| -p * q).sum();
    let to_sft = kl_per_state(p, sft)?;
    Ok(linear + params.lambda * to_sft + kl_per_state(p, pi_t)? / params.eta)
}

/// Minimizer of [`md_objective`] for one state, computed in log space:
/// `p(a) ∝ sft^{a} pi_t^{1-a} exp(eta Q / (eta lambda + 1))` with
/// `a = eta lambda / (eta lambda + 1)`. Actions outside either support get 0.
pub fn closed_form_row(q: &[f64], sft: &[f64], pi_t: &[f64], params: &NpgParams) -> Option<Vec<f64>> {
    let denom = params.eta * params.lambda + 1.0;
    let alpha = params.eta * params.lambda / denom;
    let logits: Vec<f64> = q
        .iter()
        .zip(sft.iter().zip(pi_t))
        .map(|(&qa, (&s, &t))| {
            if s <= SUPPORT_EPS || t <= SUPPORT_EPS {
                f64::NEG_INFINITY
            } else {
                alpha * s.ln() + (1.0 - alpha) * t.ln() + params.eta * qa / denom
            }
        })
        .collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return None;
    }
    let weights: Vec<f64> = logits.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - top).exp() }).collect();
    let z: f64 = weights.iter().sum();
    Some(weights.into_iter().map(|w| w / z).collect())
}

pub fn npg_update(
    pi_t: &TabularPolicy,
    q_hat: &ActionTable,
    pi_sft: &TabularPolicy,
    params: &NpgParams,
) -> Result<TabularPolicy> {
    params.validate()?;
    let layout = pi_t.layout();
    q_hat.check_layout(&layout)?;
    pi_sft.check_layout(&layout)?;
    if let Some((s, a)) = pi_t.support_violation(pi_sft) {
        return Err(Error::SupportViolation {
            location: s.to_string(),
            action: a,
            mass: pi_t.prob(s, a),
        });
    }
    let mut next = ActionTable::zeros(&layout);
    for s in layout.states() {
        let q = q_hat.row(s);
        if let Some(a) = q.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!("Q at {s}, action {a} is {}", q[a])));
        }
        let row = closed_form_row(q, pi_sft.row(s), pi_t.row(s), params).ok_or(Error::Underflow(s))?;
        next.row_mut(s).copy_from_slice(&row);
    }
    TabularPolicy::new(next)
}

/// Spread of the stationarity condition over the support of `p`:
/// `g_a = -Q_a + lambda (ln p_a - ln sft_a + 1) + (ln p_a - ln pi_t_a + 1) / eta`
/// is constant there at the optimum.
pub fn kkt_residual(p: &[f64], q: &[f64], sft: &[f64], pi_t: &[f64], params: &NpgParams) -> f64 {
    let g: Vec<f64> = (0..p.len())
        .filter(|&a| p[a] > 0.0)
        .map(|a| {
            let lp = p[a].ln();
            -q[a] + params.lambda * (lp - sft[a].ln() + 1.0) + (lp - pi_t[a].ln() + 1.0) / params.eta
        })
        .collect();
    let hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
    if g.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// `r_max (t - 1) / lambda`, the largest per-state KL to the reference an
/// iterate `t` (1-based) of the closed-form update can have.
pub fn kl_drift_bound(t: usize, r_max: f64, lambda: f64) -> f64 {
    if t <= 1 {
        0.0
    } else {
        r_max * (t - 1) as f64 / lambda
    }
}

/// Both sides of the three-point identity for the negative entropy `g`:
/// `<grad g(p1) - grad g(p2), p3 - p1>` and
/// `KL(p3 || p2) - KL(p3 || p1) - KL(p1 || p2)`.
pub fn three_point_sides(p1: &[f64], p2: &[f64], p3: &[f64]) -> Result<(f64, f64)> {
    let lhs = (0..p1.len())
        .map(|a| (p1[a].ln() - p2[a].ln()) * (p3[a] - p1[a]))
        .sum();
    let rhs = kl_per_state(p3, p2)? - kl_per_state(p3, p1)? - kl_per_state(p1, p2)?;
    Ok((lhs, rhs))
}

/// Every-visit Monte-Carlo critic of the penalized reward
/// `r_hat - kl_penalty * ln(pi_t / pi_sft)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenalizedCritic {
    pub q: ActionTable,
    pub v: StateTable,
    pub visits: ActionTable,
}

impl PenalizedCritic {
    pub fn fit(layout: &Layout, batch: &[AnnotatedTrajectory], kl_penalty: f64) -> Self {
        let mut q_sum = ActionTable::zeros(layout);
        let mut visits = ActionTable::zeros(layout);
        for t in batch {
            let mut ret = 0.0;
            for (i, st) in t.trajectory.steps().iter().enumerate().rev() {
                ret += t.rewards[i] - kl_penalty * t.log_ratios[i];
                q_sum.row_mut(st.state)[st.action] += ret;
                visits.row_mut(st.state)[st.action] += 1.0;
            }
        }
        let mut v = StateTable::zeros(layout);
        let q = ActionTable::from_fn(layout, |s, a| {
            let n = visits.get(s, a);
            if n == 0.0 {
                0.0
            } else {
                q_sum.get(s, a) / n
            }
        });
        for s in layout.states() {
            let n: f64 = visits.row(s).iter().sum();
            if n > 0.0 {
                v.set(s, q_sum.row(s).iter().sum::<f64>() / n);
            }
        }
        Self { q, v, visits }
    }

    pub fn advantage(&self, s: StateId, a: usize) -> f64 {
        self.q.get(s, a) - self.v.get(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoOutcome {
    pub policy: TabularPolicy,
    /// All advantages were equal, so the policy was returned unchanged.
    pub degenerate: bool,
    /// Surrogate before the first epoch and after each epoch.
    pub surrogate: Vec<f64>,
}

/// Batch of distinct `(s, a)` with their visit weight and advantage.
struct Surrogate<'a> {
    pi_t: &'a TabularPolicy,
    terms: Vec<(StateId, usize, f64, f64)>,
    clip: f64,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - top).exp() }).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

impl Surrogate<'_> {
    fn ratio(&self, probs: &ActionTable, s: StateId, a: usize) -> f64 {
        probs.get(s, a) / self.pi_t.prob(s, a)
    }

    fn value(&self, probs: &ActionTable) -> f64 {
        self.terms
            .iter()
            .map(|&(s, a, w, adv)| {
                let r = self.ratio(probs, s, a);
                w * (r * adv).min(r.clamp(1.0 - self.clip, 1.0 + self.clip) * adv)
            })
            .sum()
    }

    fn gradient(&self, probs: &ActionTable) -> ActionTable {
        let mut g = ActionTable::zeros(&probs.layout());
        for &(s, a, w, adv) in &self.terms {
            let r = self.ratio(probs, s, a);
            let active = if adv >= 0.0 { r < 1.0 + self.clip } else { r > 1.0 - self.clip };
            if !active {
                continue;
            }
            let row = probs.row(s).to_vec();
            let gs = g.row_mut(s);
            for (b, pb) in row.iter().enumerate() {
                let indicator = if b == a { 1.0 } else { 0.0 };
                gs[b] += w * adv * r * (indicator - pb);
            }
        }
        g
    }
}

fn tabulate(logits: &ActionTable) -> ActionTable {
    let mut out = logits.clone();
    for (s, row) in logits.iter_rows() {
        out.row_mut(s).copy_from_slice(&softmax(row));
    }
    out
}

/// Full-batch ascent on the clipped surrogate over tabular softmax logits
/// started at `ln pi_t`. Each epoch halves its step until the surrogate does
/// not decrease, and keeps the old logits if no step qualifies.
pub fn ppo_clip_update(
    pi_t: &TabularPolicy,
    batch: &[AnnotatedTrajectory],
    critic: &PenalizedCritic,
    params: &ClipParams,
) -> Result<PpoOutcome> {
    params.validate()?;
    if batch.is_empty() {
        return Err(Error::Empty("online batch"));
    }
    let layout = pi_t.layout();
    let mut weights = ActionTable::zeros(&layout);
    let mut total = 0.0;
    for t in batch {
        for st in t.trajectory.steps() {
            weights.row_mut(st.state)[st.action] += 1.0;
            total += 1.0;
        }
    }
    let mut terms = Vec::new();
    for (s, row) in weights.iter_rows() {
        for (a, &n) in row.iter().enumerate() {
            if n > 0.0 {
                terms.push((s, a, n / total, critic.advantage(s, a)));
            }
        }
    }
    let hi = terms.iter().map(|t| t.3).fold(f64::NEG_INFINITY, f64::max);
    let lo = terms.iter().map(|t| t.3).fold(f64::INFINITY, f64::min);
    let degenerate = hi - lo <= 1e-12;
    if degenerate || params.epochs == 0 {
        return Ok(PpoOutcome {
            policy: pi_t.clone(),
            degenerate,
            surrogate: Vec::new(),
        });
    }
    let surrogate = Surrogate {
        pi_t,
        terms,
        clip: params.clip,
    };
    let mut logits = pi_t.table().map(|p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY });
    let mut probs = pi_t.table().clone();
    let mut current = surrogate.value(&probs);
    let mut history = vec![current];
    for _ in 0..params.epochs {
        let g = surrogate.gradient(&probs);
        let mut step = params.step_size;
        for _ in 0..40 {
            let mut cand = logits.clone();
            for (s, row) in g.iter_rows() {
                for (l, gi) in cand.row_mut(s).iter_mut().zip(row) {
                    if l.is_finite() {
                        *l += step * gi;
                    }
                }
            }
            let cand_probs = tabulate(&cand);
            let v = surrogate.value(&cand_probs);
            if v >= current {
                logits = cand;
                probs = cand_probs;
                current = v;
                break;
            }
            step *= 0.5;
        }
        history.push(current);
    }
    Ok(PpoOutcome {
        policy: TabularPolicy::new(probs)?,
        degenerate: false,
        surrogate: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::families::chain;
    use crate::mdp::{Step, Trajectory};
    use crate::rng::SeedStream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_simplex<R: Rng>(rng: &mut R, n: usize, zeros: bool) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n)
            .map(|_| if zeros && rng.gen_bool(0.25) { 0.0 } else { -rng.gen::<f64>().max(1e-12).ln() })
            .collect();
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1.0;
        }
        let z: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= z);
        v
    }

    #[test]
    fn objective_examples() {
        let pt = [0.3, 0.7];
        let q = [1.0, 2.0];
        let p = NpgParams::new(0.5, 0.0).unwrap();
        let v = md_objective(&pt, &q, &[0.5, 0.5], &pt, &p).unwrap();
        assert!((v + (0.3 + 1.4)).abs() < 1e-15);
        let u = [0.5, 0.5];
        assert_eq!(md_objective(&u, &[0.0, 0.0], &u, &u, &NpgParams::new(1.0, 1.0).unwrap()).unwrap(), 0.0);
        assert!(md_objective(&[0.5, 0.5], &q, &[1.0, 0.0], &u, &p).is_err());
    }

    #[test]
    fn closed_form_examples() {
        let u = [0.5, 0.5];
        let row = closed_form_row(&[1.0, 0.0], &u, &u, &NpgParams::new(1.0, 0.0).unwrap()).unwrap();
        let e = std::f64::consts::E;
        assert!((row[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((row[0] - 0.731059).abs() < 1e-6);

        let sft = [0.2, 0.3, 0.5];
        let row = closed_form_row(&[0.4, 0.4, 0.4], &sft, &sft, &NpgParams::new(0.7, 2.0).unwrap()).unwrap();
        for (a, b) in row.iter().zip(sft) {
            assert!((a - b).abs() < 1e-15);
        }

        let pt = [0.6, 0.3, 0.1];
        let params = NpgParams::new(0.7, 2.0).unwrap();
        let row = closed_form_row(&[3.0, 3.0, 3.0], &sft, &pt, &params).unwrap();
        let alpha = 1.4 / 2.4;
        let w: Vec<f64> = (0..3).map(|a| sft[a].powf(alpha) * pt[a].powf(1.0 - alpha)).collect();
        let z: f64 = w.iter().sum();
        for a in 0..3 {
            assert!((row[a] - w[a] / z).abs() < 1e-14);
        }

        let row = closed_form_row(&[1.0, 0.0, 5.0], &sft, &pt, &NpgParams::new(1.0, 1e8).unwrap()).unwrap();
        let tv: f64 = row.iter().zip(sft).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv <= 1e-6);
    }

    #[test]
    fn support_is_exact_and_underflow_reported() {
        let mdp = chain(2, 0.0);
        let layout = mdp.layout();
        let sft = TabularPolicy::deterministic(layout, |_| 0);
        let q = ActionTable::from_fn(layout, |_, a| if a == 1 { 1e6 } else { 0.0 });
        let next = npg_update(&sft, &q, &sft, &NpgParams::new(10.0, 0.0).unwrap()).unwrap();
        for s in layout.states() {
            assert_eq!(next.prob(s, 1), 0.0);
            assert_eq!(next.prob(s, 0), 1.0);
        }
        let uniform = TabularPolicy::uniform(layout);
        assert!(matches!(npg_update(&uniform, &q, &sft, &NpgParams::new(1.0, 0.0).unwrap()), Err(Error::SupportViolation { .. })));
        assert!(closed_form_row(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &NpgParams::new(1.0, 0.0).unwrap()).is_none());
    }

    #[test]
    fn closed_form_beats_random_probes() {
        let mut rng = SeedStream::new(11).rng();
        for _ in 0..200 {
            let n = rng.gen_range(2..6);
            let sft = random_simplex(&mut rng, n, true);
            let pt: Vec<f64> = {
                let raw = random_simplex(&mut rng, n, false);
                let masked: Vec<f64> = raw.iter().zip(&sft).map(|(p, s)| if *s > 0.0 { *p } else { 0.0 }).collect();
                let z: f64 = masked.iter().sum();
                masked.iter().map(|x| x / z).collect()
            };
            let q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let params = NpgParams::new(rng.gen_range(0.05..5.0), rng.gen_range(0.0..3.0)).unwrap();
            let p = closed_form_row(&q, &sft, &pt, &params).unwrap();
            let best = md_objective(&p, &q, &sft, &pt, &params).unwrap();
            assert!(kkt_residual(&p, &q, &sft, &pt, &params) <= 1e-8);
            for _ in 0..200 {
                let raw = random_simplex(&mut rng, n, true);
                let probe: Vec<f64> = raw.iter().zip(&pt).map(|(x, t)| if *t > 0.0 { *x } else { 0.0 }).collect();
                let z: f64 = probe.iter().sum();
                if z == 0.0 {
                    continue;
                }
                let probe: Vec<f64> = probe.iter().map(|x| x / z).collect();
                assert!(best <= md_objective(&probe, &q, &sft, &pt, &params).unwrap() + 1e-9);
            }
        }
    }

    #[test]
    fn drift_bound_holds_along_a_run() {
        let mdp = chain(3, 0.0);
        let layout = mdp.layout();
        let sft = TabularPolicy::uniform(layout);
        let q = ActionTable::from_fn(layout, |s, a| if a == 0 { 1.0 } else { (s.index as f64) * 0.3 });
        let params = NpgParams::new(0.8, 0.2).unwrap();
        let mut pi = sft.clone();
        for t in 1..=60 {
            let kl = crate::policy::max_state_kl(&pi, &sft).unwrap();
            assert!(kl <= kl_drift_bound(t, mdp.r_max(), params.lambda) + 1e-9);
            pi = npg_update(&pi, &q, &sft, &params).unwrap();
        }
    }

    fn chain2_step(first: usize) -> AnnotatedTrajectory {
        AnnotatedTrajectory {
            trajectory: Trajectory::new(0, vec![Step::new(StateId::new(0, 0), first), Step::new(StateId::new(1, first), 0)]),
            rewards: vec![0.0, if first == 0 { 1.0 } else { 0.0 }],
            log_ratios: vec![0.0, 0.0],
            reset: false,
        }
    }

    #[test]
    fn ppo_trivial_cases() {
        let mdp = chain(2, 0.0);
        let pi = TabularPolicy::uniform(mdp.layout());
        let batch = vec![chain2_step(0), chain2_step(1)];
        let critic = PenalizedCritic::fit(mdp.layout(), &batch, 0.0);
        let zero_epochs = ClipParams { epochs: 0, ..ClipParams::default() };
        assert_eq!(ppo_clip_update(&pi, &batch, &critic, &zero_epochs).unwrap().policy, pi);

        let flat = vec![chain2_step(1), chain2_step(1)];
        let critic = PenalizedCritic::fit(mdp.layout(), &flat, 0.0);
        let out = ppo_clip_update(&pi, &flat, &critic, &ClipParams::default()).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.policy, pi);
        assert!(ppo_clip_update(&pi, &[], &critic, &ClipParams::default()).is_err());
    }

    #[test]
    fn ppo_moves_toward_positive_advantage() {
        let mdp = chain(2, 0.0);
        let pi = TabularPolicy::uniform(mdp.layout());
        let batch = vec![chain2_step(0), chain2_step(1)];
        let critic = PenalizedCritic::fit(mdp.layout(), &batch, 0.0);
        let s1 = StateId::new(0, 0);
        assert!(critic.advantage(s1, 0) > 0.0 && critic.advantage(s1, 1) < 0.0);
        let params = ClipParams { step_size: 1.0, ..ClipParams::default() };
        let out = ppo_clip_update(&pi, &batch, &critic, &params).unwrap();
        assert!(out.policy.prob(s1, 0) > 0.5);
        assert!(out.surrogate.windows(2).all(|w| w[1] >= w[0]));

        // Finite-difference check of the surrogate gradient sign at s1.
        let sur = Surrogate {
            pi_t: &pi,
            terms: vec![(s1, 0, 0.25, critic.advantage(s1, 0)), (s1, 1, 0.25, critic.advantage(s1, 1))],
            clip: 0.2,
        };
        let g = sur.gradient(pi.table());
        let h = 1e-6;
        let mut bumped = pi.table().map(f64::ln);
        bumped.row_mut(s1)[0] += h;
        let fd = (sur.value(&tabulate(&bumped)) - sur.value(pi.table())) / h;
        assert!((fd - g.get(s1, 0)).abs() < 1e-5);
        assert!(g.get(s1, 0) > 0.0);
    }

    #[test]
    fn penalized_critic_returns() {
        let mdp = chain(2, 0.0);
        let mut t = chain2_step(0);
        t.log_ratios = vec![0.5, -1.0];
        let critic = PenalizedCritic::fit(mdp.layout(), &[t], 0.1);
        assert!((critic.q.get(StateId::new(1, 0), 0) - 1.1).abs() < 1e-15);
        assert!((critic.q.get(StateId::new(0, 0), 0) - 1.05).abs() < 1e-15);
        assert!((critic.v.get(StateId::new(0, 0)) - 1.05).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn three_point_identity(seed in any::<u64>(), n in 2usize..6) {
            let mut rng = SeedStream::new(seed).rng();
            let p1 = random_simplex(&mut rng, n, false);
            let p2 = random_simplex(&mut rng, n, false);
            let p3 = random_simplex(&mut rng, n, false);
            let (lhs, rhs) = three_point_sides(&p1, &p2, &p3).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10, "{} vs {}", lhs, rhs);
        }

        #[test]
        fn update_keeps_support_and_normalization(seed in any::<u64>()) {
            let mdp = crate::mdp::families::random(3, 3, 3, 0.2, seed % 7);
            let layout = mdp.layout();
            let mut rng = SeedStream::new(seed).rng();
            let sft_table = ActionTable::from_fn(layout, |_, a| if a == 2 { 0.0 } else { rng.gen_range(0.1..1.0) });
            let mut normalized = sft_table.clone();
            for (s, row) in sft_table.iter_rows() {
                let z: f64 = row.iter().sum();
                normalized.row_mut(s).iter_mut().for_each(|x| *x /= z);
            }
            let sft = TabularPolicy::new(normalized).unwrap();
            let q = ActionTable::from_fn(layout, |_, _| rng.gen_range(0.0..3.0));
            let next = npg_update(&sft, &q, &sft, &NpgParams::new(rng.gen_range(0.1..4.0), rng.gen_range(0.0..2.0)).unwrap()).unwrap();
            for s in layout.states() {
                prop_assert_eq!(next.prob(s, 2), 0.0);
                prop_assert!((next.row(s).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
