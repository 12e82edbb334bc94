//! Randomized property suite over the theory oracle and the closed-form
//! update. `drpo-lab verify` runs [`run_suite`] and fails if any property does.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    concentrability, corollary1_settings, perf_diff_check, relaxed_coefficients, theorem1_bound, BoundInputs,
    CSftProvenance, CSftValue, CorollaryInputs, OrderConstants, RelaxedInputs,
};
use crate::error::Result;
use crate::mdp::families::random;
use crate::mdp::{exact_visitation, ActionTable, Mdp};
use crate::mirror_descent::{closed_form_row, kkt_residual, kl_drift_bound, md_objective, npg_update, three_point_sides, NpgParams};
use crate::policy::{max_state_kl, TabularPolicy};
use crate::rng::{SeedStream, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyOutcome {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub detail: String,
}

impl PropertyOutcome {
    fn new(name: &str, passed: bool, cases: usize, detail: String) -> Self {
        Self { name: name.to_string(), passed, cases, detail }
    }

    fn from_result(name: &str, cases: usize, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, cases, detail),
            Err(e) => Self::new(name, false, cases, format!("error: {e}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Random instances per property.
    pub instances: usize,
    pub cap: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { seed: 0, instances: 100, cap: 100_000 }
    }
}

pub fn run_suite(opts: &SuiteOptions) -> Vec<PropertyOutcome> {
    let root = SeedStream::new(opts.seed).child("verify");
    let n = opts.instances;
    vec![
        closed_form_optimality(n, 200, &root.child("closed_form")),
        performance_difference(n, &root.child("perf_diff")),
        kl_drift_and_support(n.div_ceil(10).max(1), 32, &root.child("drift")),
        coverage_inequalities(n, opts.cap, &root.child("coverage")),
        three_point_identity(n, &root.child("three_point")),
        bound_monotonicity(),
        corollary_calculator(),
    ]
}

fn random_row(rng: &mut StreamRng, n: usize, allowed: &[bool], zero_prob: f64) -> Vec<f64> {
    let open: Vec<usize> = (0..n).filter(|&a| allowed[a]).collect();
    let keep = open[rng.gen_range(0..open.len())];
    let mut row: Vec<f64> = (0..n)
        .map(|a| {
            if !allowed[a] || (a != keep && rng.gen::<f64>() < zero_prob) {
                0.0
            } else {
                -(1.0 - rng.gen::<f64>()).ln()
            }
        })
        .collect();
    if row[keep] == 0.0 {
        row[keep] = 1.0;
    }
    let z: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= z);
    row
}

fn log_uniform(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// The closed-form row beats random simplex probes on the mirror-descent
/// objective and satisfies the stationarity condition.
pub fn closed_form_optimality(instances: usize, probes: usize, stream: &SeedStream) -> PropertyOutcome {
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_kkt = 0.0_f64;
    let mut run = || -> Result<(bool, String)> {
        for i in 0..instances {
            let mut rng = stream.index(i as u64).rng();
            let n = rng.gen_range(2..=6);
            let sft = random_row(&mut rng, n, &vec![true; n], 0.3);
            let sft_support: Vec<bool> = sft.iter().map(|&p| p > 0.0).collect();
            let pi_t = random_row(&mut rng, n, &sft_support, 0.3);
            let both: Vec<bool> = pi_t.iter().map(|&p| p > 0.0).collect();
            let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let params = NpgParams::new(log_uniform(&mut rng, 0.05, 20.0), log_uniform(&mut rng, 0.01, 10.0))?;
            let p = closed_form_row(&q, &sft, &pi_t, &params).expect("nonempty support");
            let best = md_objective(&p, &q, &sft, &pi_t, &params)?;
            worst_kkt = worst_kkt.max(kkt_residual(&p, &q, &sft, &pi_t, &params));
            for _ in 0..probes {
                let probe = random_row(&mut rng, n, &both, 0.3);
                worst_gap = worst_gap.max(best - md_objective(&probe, &q, &sft, &pi_t, &params)?);
            }
        }
        Ok((
            worst_gap <= 1e-9 && worst_kkt <= 1e-8,
            format!("max objective excess over probes {worst_gap:.3e}, max KKT residual {worst_kkt:.3e}"),
        ))
    };
    let r = run();
    PropertyOutcome::from_result("closed_form_optimality", instances, r)
}

fn random_instance(stream: &SeedStream, i: usize) -> (Mdp, StreamRng) {
    let mut rng = stream.index(i as u64).rng();
    let h = rng.gen_range(2..=4);
    let s = rng.gen_range(2..=3);
    let a = rng.gen_range(2..=3);
    let mdp = random(h, s, a, 0.3, rng.gen());
    (mdp, rng)
}

fn random_table(mdp: &Mdp, rng: &mut StreamRng, scale: f64) -> ActionTable {
    ActionTable::from_fn(mdp.layout(), |_, _| rng.gen::<f64>() * scale)
}

pub fn performance_difference(instances: usize, stream: &SeedStream) -> PropertyOutcome {
    let mut worst = 0.0_f64;
    for i in 0..instances {
        let (mdp, mut rng) = random_instance(stream, i);
        let a = TabularPolicy::random(mdp.layout(), &mut rng, 0.3);
        let b = TabularPolicy::random(mdp.layout(), &mut rng, 0.3);
        let r = random_table(&mdp, &mut rng, 1.0);
        worst = worst.max(perf_diff_check(&mdp, &a, &b, &r).gap.abs());
    }
    PropertyOutcome::new(
        "performance_difference",
        worst <= 1e-9,
        instances,
        format!("max |gap| {worst:.3e}"),
    )
}

/// Iterating the closed-form update with arbitrary critics in `[0, r_max]`
/// keeps every per-state KL within `r_max (t - 1) / lambda` and never leaves
/// the reference support.
pub fn kl_drift_and_support(runs: usize, iterations: usize, stream: &SeedStream) -> PropertyOutcome {
    let mut worst_slack = f64::NEG_INFINITY;
    let mut support_ok = true;
    let mut run = || -> Result<(bool, String)> {
        for i in 0..runs {
            let (mdp, mut rng) = random_instance(stream, i);
            let sft = TabularPolicy::random(mdp.layout(), &mut rng, 0.3);
            let r_max = mdp.r_max().max(1e-3);
            let lambda = [0.05, 0.2, 1.0][i % 3];
            let params = NpgParams::new((1.0 / (iterations as f64 * r_max * r_max)).sqrt(), lambda)?;
            let mut pi = sft.clone();
            for t in 1..=iterations {
                let kl = max_state_kl(&pi, &sft)?;
                worst_slack = worst_slack.max(kl - kl_drift_bound(t, r_max, lambda));
                support_ok &= pi.support_violation(&sft).is_none()
                    && pi.table().iter_rows().all(|(s, row)| {
                        row.iter().zip(sft.row(s)).all(|(&p, &q)| q > 0.0 || p == 0.0)
                    });
                let q_hat = random_table(&mdp, &mut rng, r_max);
                pi = npg_update(&pi, &q_hat, &sft, &params)?;
            }
        }
        Ok((
            worst_slack <= 1e-9 && support_ok,
            format!("max KL minus drift bound {worst_slack:.3e}, support kept: {support_ok}"),
        ))
    };
    let r = run();
    PropertyOutcome::from_result("kl_drift_and_support", runs, r)
}

/// `C_ST <= C_TR`, `C_KL <= H ln C_ST`, and the class-dependent
/// coefficients stay below `sqrt C_TR` and `sqrt(2 C_ST)`.
pub fn coverage_inequalities(instances: usize, cap: usize, stream: &SeedStream) -> PropertyOutcome {
    let mut failures = Vec::new();
    let mut run = || -> Result<(bool, String)> {
        for i in 0..instances {
            let (mdp, mut rng) = random_instance(stream, i);
            let sft = TabularPolicy::random(mdp.layout(), &mut rng, 0.0);
            let star = TabularPolicy::random(mdp.layout(), &mut rng, 0.5);
            let rep = concentrability(&mdp, &star, &sft)?;
            let h = mdp.horizon() as f64;
            let reward_class: Vec<_> = (0..3).map(|_| random_table(&mdp, &mut rng, 1.0 / h)).collect();
            let q_class: Vec<_> = (0..3).map(|_| random_table(&mdp, &mut rng, 1.0)).collect();
            let iterates = vec![sft.clone(), TabularPolicy::random(mdp.layout(), &mut rng, 0.0)];
            let r_hat = random_table(&mdp, &mut rng, 1.0 / h);
            let rel = relaxed_coefficients(
                &mdp,
                &RelaxedInputs {
                    pi_star: &star,
                    pi_sft: &sft,
                    r_star: mdp.true_reward(),
                    reward_class: &reward_class,
                    q_class: &q_class,
                    iterates: &iterates,
                    r_hat: &r_hat,
                    ball: &[],
                },
                cap,
            )?;
            let checks = [
                ("C_ST <= C_TR", rep.c_st <= rep.c_tr * (1.0 + 1e-12)),
                ("C_KL <= H ln C_ST", rep.c_kl <= h * rep.c_st.ln() + 1e-12),
                ("C_r <= sqrt C_TR", rel.c_r <= rep.c_tr.sqrt() + 1e-12),
                ("C_eval <= sqrt(2 C_ST)", rel.c_eval <= (2.0 * rep.c_st).sqrt() + 1e-12),
            ];
            failures.extend(checks.iter().filter(|c| !c.1).map(|c| format!("instance {i}: {}", c.0)));
            // The state-action ratios must also be visible in the visitation.
            let d = exact_visitation(&mdp, &star);
            let (s, a) = rep.state_action_witness;
            if d.state_action(s, a) <= 0.0 {
                failures.push(format!("instance {i}: witness has no mass"));
            }
        }
        Ok((failures.is_empty(), if failures.is_empty() { "all hold".into() } else { failures.join("; ") }))
    };
    let r = run();
    PropertyOutcome::from_result("coverage_inequalities", instances, r)
}

pub fn three_point_identity(instances: usize, stream: &SeedStream) -> PropertyOutcome {
    let mut worst = 0.0_f64;
    let mut run = || -> Result<(bool, String)> {
        for i in 0..instances {
            let mut rng = stream.index(i as u64).rng();
            let n = rng.gen_range(2..=6);
            let all = vec![true; n];
            let p1 = random_row(&mut rng, n, &all, 0.0);
            let p2 = random_row(&mut rng, n, &all, 0.0);
            let p3 = random_row(&mut rng, n, &all, 0.0);
            let (lhs, rhs) = three_point_sides(&p1, &p2, &p3)?;
            worst = worst.max((lhs - rhs).abs());
        }
        Ok((worst <= 1e-12, format!("max |lhs - rhs| {worst:.3e}")))
    };
    let r = run();
    PropertyOutcome::from_result("three_point_identity", instances, r)
}

/// The bound never increases with more preference pairs or online samples,
/// and never increases in `T` while `N` is above the monotonicity threshold.
pub fn bound_monotonicity() -> PropertyOutcome {
    let base = BoundInputs {
        horizon: 4.0,
        r_max: 1.0,
        kappa: 4.0,
        pairs: 1e3,
        online: 1e3,
        iterations: 8.0,
        eta: None,
        lambda: 0.1,
        delta: 0.05,
        reward_class_size: 1e3,
        q_class_size: 1e3,
        c_tr: 16.0,
        c_st: 4.0,
        c_sft: Some(CSftValue { value: 16.0, provenance: CSftProvenance::UserSupplied }),
        constants: OrderConstants::default(),
        relaxed: None,
    };
    let run = || -> Result<(bool, String)> {
        let mut cases = 0;
        let mut bad = Vec::new();
        for k in 0..20 {
            let f = 1.5f64.powi(k);
            let probe = BoundInputs { pairs: base.pairs * f, online: base.online * f, ..base.clone() };
            let b = theorem1_bound(&probe)?.total;
            let more_m = theorem1_bound(&BoundInputs { pairs: probe.pairs * 1.01, ..probe.clone() })?.total;
            let more_n = theorem1_bound(&BoundInputs { online: probe.online * 1.01, ..probe.clone() })?.total;
            let more_t = BoundInputs { iterations: probe.iterations + 1.0, ..probe.clone() };
            cases += 3;
            if more_m > b || more_n > b {
                bad.push(format!("M/N probe {k}"));
            }
            if probe.online >= more_t.t_monotone_threshold() && theorem1_bound(&more_t)?.total > b {
                bad.push(format!("T probe {k}"));
            }
        }
        Ok((bad.is_empty(), format!("{cases} probes, violations: [{}]", bad.join(", "))))
    };
    let r = run();
    PropertyOutcome::from_result("bound_monotonicity", 60, r)
}

pub fn corollary_calculator() -> PropertyOutcome {
    let inputs = CorollaryInputs {
        horizon: 2.0,
        r_max: 1.0,
        c_st: std::f64::consts::E,
        epsilon: 1.0,
        delta: 0.05,
        reward_class_size: 1.0,
        q_class_size: 1.0,
        kappa: 1.0,
        c_tr: 1.0,
        c_sft: None,
        constants: OrderConstants::default(),
    };
    let r = corollary1_settings(&inputs).map(|s| {
        (
            s.iterations == 288 && (s.lambda - 1.0 / 6.0).abs() <= 1e-15,
            format!("T = {}, lambda = {}", s.iterations, s.lambda),
        )
    });
    PropertyOutcome::from_result("corollary_calculator", 1, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let outcomes = run_suite(&SuiteOptions { seed: 3, instances: 30, cap: 100_000 });
        assert_eq!(outcomes.len(), 7);
        for o in &outcomes {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }

    #[test]
    fn suite_is_deterministic() {
        let opts = SuiteOptions { seed: 11, instances: 5, cap: 10_000 };
        assert_eq!(run_suite(&opts), run_suite(&opts));
    }

    #[test]
    fn errors_become_failures() {
        let o = PropertyOutcome::from_result("x", 1, Err(crate::Error::Empty("thing")));
        assert!(!o.passed && o.detail.contains("empty thing"));
    }
}
