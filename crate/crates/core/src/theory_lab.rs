//! Closed-form optimum of the exploration-regularized single-state objective
//!
//! ```text
//! F(pi) = Σ_a pi_a * (q_a - beta * (lam_a * log pi_a - log p_ref_a))
//! ```
//!
//! Stationarity of the Lagrangian gives
//! `log pi_a = (q_a + beta * log p_ref_a + eta - beta * lam_a) / (beta * lam_a)`,
//! with the multiplier `eta` fixed by normalization. Because `lam` varies per
//! action, `eta` has no closed form and is found by bisection on the
//! normalization equation, whose left-hand side is strictly increasing in `eta`.
//!
//! The module also carries the checks run by the `theory` sweep: a mirror
//! ascent oracle, the exploratory-advantage identity, the DPO advantage
//! identity at `lam = 1`, and the sign law for `d log pi / d lam`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng;
use crate::toy_policy::{argmax, log_sum_exp};

pub const MAX_ACTIONS: usize = 64;
const ETA_TOL: f64 = 1e-12;
const MAX_DOUBLINGS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleStateProblem {
    q: Vec<f64>,
    p_ref: Vec<f64>,
    beta: f64,
    lam: Vec<f64>,
}

impl SingleStateProblem {
    pub fn new(q: Vec<f64>, p_ref: Vec<f64>, beta: f64, lam: Vec<f64>) -> Result<Self> {
        let n = q.len();
        if !(2..=MAX_ACTIONS).contains(&n) {
            return Err(LabError::invalid(format!(
                "{n} actions, need 2..={MAX_ACTIONS}"
            )));
        }
        if p_ref.len() != n || lam.len() != n {
            return Err(LabError::invalid("q, p_ref and lam must have equal length"));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(LabError::invalid("q must be finite"));
        }
        if p_ref.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(LabError::invalid("p_ref must be strictly positive"));
        }
        let total: f64 = p_ref.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(LabError::invalid(format!("p_ref sums to {total}")));
        }
        if lam.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(LabError::invalid("lam entries must be positive"));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(LabError::invalid("beta must be positive"));
        }
        Ok(Self {
            q,
            p_ref,
            beta,
            lam,
        })
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn p_ref(&self) -> &[f64] {
        &self.p_ref
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn lam(&self) -> &[f64] {
        &self.lam
    }

    pub fn actions(&self) -> usize {
        self.q.len()
    }

    pub fn with_q(&self, q: Vec<f64>) -> Result<Self> {
        Self::new(q, self.p_ref.clone(), self.beta, self.lam.clone())
    }

    pub fn with_lam(&self, lam: Vec<f64>) -> Result<Self> {
        Self::new(self.q.clone(), self.p_ref.clone(), self.beta, lam)
    }

    /// The objective `F(pi)`.
    pub fn objective(&self, pi: &[f64]) -> f64 {
        pi.iter()
            .zip(&self.q)
            .zip(&self.p_ref)
            .zip(&self.lam)
            .map(|(((&p, &q), &r), &l)| {
                if p == 0.0 {
                    0.0
                } else {
                    p * (q - self.beta * (l * p.ln() - r.ln()))
                }
            })
            .sum()
    }

    /// `log pi_a` implied by the stationarity condition at multiplier `eta`.
    fn log_policy(&self, eta: f64) -> Vec<f64> {
        let b = self.beta;
        self.q
            .iter()
            .zip(&self.p_ref)
            .zip(&self.lam)
            .map(|((&q, &r), &l)| r.ln() / l + (q + eta - b * l) / (b * l))
            .collect()
    }

    /// `log pi_a(eta)` renormalized over actions. The bisection leaves `eta`
    /// off by up to its tolerance; dividing by the mass cancels that error to
    /// first order, which matters when one action holds almost all the mass.
    /// The largest entry is formed as `-ln_1p(rest)` so it keeps full relative
    /// precision even when the other actions hold almost no mass.
    fn normalized_log_policy(&self, eta: f64) -> Vec<f64> {
        let lp = self.log_policy(eta);
        let m = argmax(&lp);
        let rest: f64 = lp
            .iter()
            .enumerate()
            .filter(|&(b, _)| b != m)
            .map(|(_, &v)| (v - lp[m]).exp())
            .sum();
        let z = lp[m] + rest.ln_1p();
        lp.iter()
            .enumerate()
            .map(|(b, &v)| if b == m { -rest.ln_1p() } else { v - z })
            .collect()
    }

    /// `log Σ_a pi_a(eta)`; zero at the solution.
    fn log_mass(&self, eta: f64) -> f64 {
        log_sum_exp(&self.log_policy(eta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSolution {
    pub pi_star: Vec<f64>,
    pub eta: f64,
    pub v_star: f64,
    pub a_e: Vec<f64>,
}

/// The normalization multiplier, searched from the bracket `[-1, 1]`.
pub fn solve_eta(problem: &SingleStateProblem) -> Result<f64> {
    solve_eta_from(problem, (-1.0, 1.0))
}

/// Bisection for `eta` starting from `initial`, expanded by doubling until it
/// brackets the root.
pub fn solve_eta_from(problem: &SingleStateProblem, initial: (f64, f64)) -> Result<f64> {
    let (mut lo, mut hi) = (initial.0.min(initial.1), initial.0.max(initial.1));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(LabError::invalid("bracket must be finite"));
    }
    if hi - lo < 1.0 {
        let mid = 0.5 * (lo + hi);
        lo = mid - 0.5;
        hi = mid + 0.5;
    }
    let mut doublings = 0;
    while problem.log_mass(lo) > 0.0 {
        let w = hi - lo;
        hi = lo;
        lo -= 2.0 * w;
        doublings += 1;
        if doublings > MAX_DOUBLINGS || !lo.is_finite() {
            return Err(LabError::numeric("eta bracket", "lower end never reached"));
        }
    }
    while problem.log_mass(hi) < 0.0 {
        let w = hi - lo;
        lo = hi;
        hi += 2.0 * w;
        doublings += 1;
        if doublings > MAX_DOUBLINGS || !hi.is_finite() {
            return Err(LabError::numeric("eta bracket", "upper end never reached"));
        }
    }
    while hi - lo > ETA_TOL {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if problem.log_mass(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn optimal_policy(problem: &SingleStateProblem) -> Result<ExplorationSolution> {
    let eta = solve_eta(problem)?;
    Ok(solution_at(problem, eta))
}

fn solution_at(problem: &SingleStateProblem, eta: f64) -> ExplorationSolution {
    let pi_star: Vec<f64> = problem
        .normalized_log_policy(eta)
        .into_iter()
        .map(f64::exp)
        .collect();
    let mean_lam: f64 = pi_star.iter().zip(&problem.lam).map(|(p, l)| p * l).sum();
    let v_star = problem.beta * mean_lam - eta;
    let mut s = ExplorationSolution {
        pi_star,
        eta,
        v_star,
        a_e: Vec::new(),
    };
    s.a_e = generalized_advantage(problem, &s);
    s
}

/// Exploration cost `beta * (lam_a - E_pi*[lam])` of every action, summed as
/// `beta * Σ_b pi*_b (lam_a - lam_b)` so equal factors give exactly 0.
pub fn exploration_cost(problem: &SingleStateProblem, solution: &ExplorationSolution) -> Vec<f64> {
    problem
        .lam
        .iter()
        .map(|&la| {
            let spread: f64 = solution
                .pi_star
                .iter()
                .zip(&problem.lam)
                .map(|(p, &lb)| p * (la - lb))
                .sum();
            problem.beta * spread
        })
        .collect()
}

/// `A_e(a) = q_a - V* - beta * (lam_a - E_pi*[lam])`.
pub fn generalized_advantage(
    problem: &SingleStateProblem,
    solution: &ExplorationSolution,
) -> Vec<f64> {
    problem
        .q
        .iter()
        .zip(exploration_cost(problem, solution))
        .map(|(&q, cost)| q - solution.v_star - cost)
        .collect()
}

/// Largest `|beta * log(pi*^lam / p_ref) - A_e|` over actions.
pub fn advantage_identity_residual(
    problem: &SingleStateProblem,
    solution: &ExplorationSolution,
) -> f64 {
    let a_e = generalized_advantage(problem, solution);
    solution
        .pi_star
        .iter()
        .zip(&problem.p_ref)
        .zip(&problem.lam)
        .zip(&a_e)
        .map(|(((&p, &r), &l), &a)| (problem.beta * (l * p.ln() - r.ln()) - a).abs())
        .fold(0.0, f64::max)
}

/// Largest `|beta * log(pi*/p_ref) - (q - V*)|` for a problem with unit factors.
pub fn verify_dpo_advantage(problem: &SingleStateProblem) -> Result<f64> {
    if problem.lam.iter().any(|&l| l != 1.0) {
        return Err(LabError::invalid(
            "the DPO advantage identity needs lam = 1",
        ));
    }
    let s = optimal_policy(problem)?;
    Ok(s.pi_star
        .iter()
        .zip(&problem.p_ref)
        .zip(&problem.q)
        .map(|((&p, &r), &q)| (problem.beta * (p / r).ln() - (q - s.v_star)).abs())
        .fold(0.0, f64::max))
}

/// Budget of the mirror-ascent oracle.
#[derive(Debug, Clone, Copy)]
pub struct BruteForceBudget {
    pub restarts: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for BruteForceBudget {
    fn default() -> Self {
        Self {
            restarts: 50,
            iterations: 10_000,
            seed: 0,
        }
    }
}

/// Maximizes `F` over the simplex by entropic mirror ascent from random
/// interior starts. Uses neither the multiplier nor the closed form.
pub fn brute_force_optimum(problem: &SingleStateProblem, budget: BruteForceBudget) -> Vec<f64> {
    let n = problem.actions();
    let b = problem.beta;
    let lam_max = problem.lam.iter().copied().fold(0.0, f64::max);
    // F has curvature beta * lam_a / pi_a along each coordinate in the mirror
    // geometry, so steps up to 1 / (beta * lam_max) contract.
    let base_step = 1.0 / (b * lam_max);
    let mut r = rng::stream(&[rng::tag::EVAL, budget.seed, n as u64]);
    let mut best = vec![1.0 / n as f64; n];
    let mut best_val = problem.objective(&best);
    for _ in 0..budget.restarts.max(1) {
        let mut logp: Vec<f64> = (0..n).map(|_| -(r.random::<f64>() + 1e-3).ln()).collect();
        normalize_log(&mut logp);
        for it in 0..budget.iterations {
            let step = base_step / (1.0 + it as f64 / budget.iterations as f64);
            let mut moved = 0.0f64;
            let mut next: Vec<f64> = logp
                .iter()
                .zip(&problem.q)
                .zip(&problem.p_ref)
                .zip(&problem.lam)
                .map(|(((&lp, &q), &pr), &l)| {
                    let grad = q - b * l * (lp + 1.0) + b * pr.ln();
                    lp + step * grad
                })
                .collect();
            normalize_log(&mut next);
            for (a, c) in next.iter().zip(&logp) {
                moved = moved.max((a - c).abs());
            }
            logp = next;
            if moved < 1e-15 {
                break;
            }
        }
        let pi: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
        let val = problem.objective(&pi);
        if val > best_val {
            best_val = val;
            best = pi;
        }
    }
    best
}

fn normalize_log(logp: &mut [f64]) {
    let z = log_sum_exp(logp);
    logp.iter_mut().for_each(|v| *v -= z);
}

/// Outcome of perturbing one action's factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignReport {
    /// Central difference of `log pi*(action)` in `lam_action`, re-solving `eta`.
    pub empirical: f64,
    /// `-log p_ref / lam^2 - (q + eta) / (beta * lam^2)` at the unperturbed problem.
    pub predicted: f64,
    pub dead_zone: bool,
    pub agree: bool,
}

pub const SIGN_DEAD_ZONE: f64 = 1e-6;

pub fn derivative_sign_probe(
    problem: &SingleStateProblem,
    action: usize,
    delta: f64,
) -> Result<SignReport> {
    if action >= problem.actions() {
        return Err(LabError::invalid(format!("action {action} out of range")));
    }
    let l = problem.lam[action];
    if !(delta > 0.0 && delta < l) {
        return Err(LabError::invalid(format!(
            "delta {delta} must lie in (0, lam)"
        )));
    }
    let eta = solve_eta(problem)?;
    let bump = |d: f64| -> Result<f64> {
        let mut lam = problem.lam.clone();
        lam[action] += d;
        let p = problem.with_lam(lam)?;
        Ok(p.normalized_log_policy(solve_eta(&p)?)[action])
    };
    let empirical = (bump(delta)? - bump(-delta)?) / (2.0 * delta);
    let predicted =
        -problem.p_ref[action].ln() / (l * l) - (problem.q[action] + eta) / (problem.beta * l * l);
    let dead_zone = predicted.abs() <= SIGN_DEAD_ZONE;
    Ok(SignReport {
        empirical,
        predicted,
        dead_zone,
        agree: dead_zone || empirical.signum() == predicted.signum(),
    })
}

/// Draws a problem with `actions` actions, `lam` in `lam_range` and the given `beta`.
pub fn random_problem(
    seed: u64,
    actions: usize,
    beta: f64,
    lam_range: (f64, f64),
) -> Result<SingleStateProblem> {
    let mut r = rng::stream(&[rng::tag::EVAL, 0x7e0, seed, actions as u64]);
    let q = (0..actions).map(|_| r.random_range(-2.0..2.0)).collect();
    let raw: Vec<f64> = (0..actions).map(|_| r.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut p_ref: Vec<f64> = raw.iter().map(|v| v / total).collect();
    // pin the sum to 1 within rounding
    let drift: f64 = 1.0 - p_ref.iter().sum::<f64>();
    p_ref[0] += drift;
    let lam = (0..actions)
        .map(|_| {
            if lam_range.0 == lam_range.1 {
                lam_range.0
            } else {
                r.random_range(lam_range.0..lam_range.1)
            }
        })
        .collect();
    SingleStateProblem::new(q, p_ref, beta, lam)
}

/// One row of the verification sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub check: String,
    pub instances: usize,
    pub worst: f64,
    pub mean: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl SweepRow {
    fn from_values(check: &str, values: &[f64], threshold: f64) -> Self {
        let worst = values.iter().copied().fold(0.0, f64::max);
        let mean = if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        Self {
            check: check.to_string(),
            instances: values.len(),
            worst,
            mean,
            threshold,
            passed: values.iter().all(|v| *v <= threshold),
        }
    }
}

/// Runs every closed-form check on seeded problem families.
pub fn verification_sweep(seed: u64) -> Result<Vec<SweepRow>> {
    let mut objective_gap = Vec::new();
    let mut policy_gap = Vec::new();
    let mut identity = Vec::new();
    let mut value_gap = Vec::new();
    let mut normalization = Vec::new();
    for i in 0..200u64 {
        let actions = 2 + (i % 5) as usize;
        let beta = if i % 2 == 0 { 0.1 } else { 1.0 };
        let p = random_problem(seed.wrapping_mul(1000) + i, actions, beta, (0.5, 2.0))?;
        let s = optimal_policy(&p)?;
        let bf = brute_force_optimum(
            &p,
            BruteForceBudget {
                seed: i,
                ..Default::default()
            },
        );
        objective_gap.push((p.objective(&s.pi_star) - p.objective(&bf)).abs());
        policy_gap.push(
            s.pi_star
                .iter()
                .zip(&bf)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
        identity.push(advantage_identity_residual(&p, &s));
        value_gap.push((p.objective(&s.pi_star) - s.v_star).abs());
        normalization.push((s.pi_star.iter().sum::<f64>() - 1.0).abs());
    }
    let mut dpo = Vec::new();
    for i in 0..200u64 {
        let p = random_problem(
            seed.wrapping_mul(1000) + 500 + i,
            2 + (i % 5) as usize,
            0.5,
            (1.0, 1.0),
        )?;
        dpo.push(verify_dpo_advantage(&p)?);
    }
    let mut disagreements = Vec::new();
    for i in 0..200u64 {
        let p = random_problem(
            seed.wrapping_mul(1000) + 900 + i,
            2 + (i % 5) as usize,
            0.3,
            (0.5, 2.0),
        )?;
        for a in 0..p.actions() {
            let r = derivative_sign_probe(&p, a, 1e-4)?;
            disagreements.push(if r.agree { 0.0 } else { 1.0 });
        }
    }
    Ok(vec![
        SweepRow::from_values("objective_gap_vs_brute_force", &objective_gap, 1e-8),
        SweepRow::from_values("policy_gap_vs_brute_force", &policy_gap, 1e-5),
        SweepRow::from_values("exploratory_advantage_identity", &identity, 1e-9),
        SweepRow::from_values("value_equals_objective", &value_gap, 1e-9),
        SweepRow::from_values("policy_normalization", &normalization, 1e-10),
        SweepRow::from_values("dpo_advantage_identity", &dpo, 1e-9),
        SweepRow::from_values("derivative_sign_disagreement", &disagreements, 0.0),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn unit_factors_match_partition_function_form() {
        for seed in 0..20 {
            let p = random_problem(
                seed,
                2 + (seed % 5) as usize,
                0.1 + seed as f64 * 0.1,
                (1.0, 1.0),
            )
            .unwrap();
            let z: f64 = p
                .q()
                .iter()
                .zip(p.p_ref())
                .map(|(q, r)| r * (q / p.beta()).exp())
                .sum();
            let eta = solve_eta(&p).unwrap();
            assert!(close(eta, p.beta() * (1.0 - z.ln()), 1e-10), "{eta}");
        }
    }

    #[test]
    fn uniform_zero_value_problem() {
        let p = SingleStateProblem::new(vec![0.0; 4], vec![0.25; 4], 1.0, vec![1.0; 4]).unwrap();
        let s = optimal_policy(&p).unwrap();
        assert!(close(s.eta, 1.0, 1e-11));
        assert!(s.pi_star.iter().all(|&v| close(v, 0.25, 1e-12)));
    }

    #[test]
    fn constant_shift_of_q_shifts_eta() {
        let p = random_problem(3, 5, 0.4, (0.5, 2.0)).unwrap();
        let c = 1.75;
        let shifted = p.with_q(p.q().iter().map(|v| v + c).collect()).unwrap();
        let a = solve_eta(&p).unwrap();
        let b = solve_eta(&shifted).unwrap();
        assert!(close(b, a - c, 1e-11));
    }

    #[test]
    fn two_action_closed_form() {
        let p =
            SingleStateProblem::new(vec![1.0, 0.0], vec![0.5, 0.5], 1.0, vec![1.0, 1.0]).unwrap();
        let s = optimal_policy(&p).unwrap();
        let e = std::f64::consts::E;
        assert!(close(s.pi_star[0], e / (1.0 + e), 1e-12));
        assert!(close(s.pi_star[0], 0.731059, 1e-6));
        assert!(close(s.pi_star[1], 0.268941, 1e-6));
        let bf = brute_force_optimum(&p, BruteForceBudget::default());
        assert!(close(bf[0], 0.731059, 1e-6) && close(bf[1], 0.268941, 1e-6));
    }

    #[test]
    fn constant_q_recovers_reference_or_tempered_reference() {
        let base = random_problem(4, 4, 0.7, (1.0, 1.0)).unwrap();
        let p = base.with_q(vec![0.3; 4]).unwrap();
        let s = optimal_policy(&p).unwrap();
        for (a, b) in s.pi_star.iter().zip(p.p_ref()) {
            assert!(close(*a, *b, 1e-12));
        }
        let bf = brute_force_optimum(&p, BruteForceBudget::default());
        for (a, b) in bf.iter().zip(p.p_ref()) {
            assert!(close(*a, *b, 1e-6));
        }
        let c = 1.8;
        let t = p.with_lam(vec![c; 4]).unwrap();
        let s = optimal_policy(&t).unwrap();
        let w: Vec<f64> = p.p_ref().iter().map(|r| r.powf(1.0 / c)).collect();
        let z: f64 = w.iter().sum();
        for (a, b) in s.pi_star.iter().zip(&w) {
            assert!(close(*a, b / z, 1e-11));
        }
    }

    #[test]
    fn closed_form_dominates_random_simplex_points() {
        let p = random_problem(5, 6, 0.3, (0.5, 2.0)).unwrap();
        let s = optimal_policy(&p).unwrap();
        let best = p.objective(&s.pi_star);
        let mut r = rng::stream(&[42]);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..6).map(|_| -(r.random::<f64>()).ln()).collect();
            let z: f64 = raw.iter().sum();
            let pt: Vec<f64> = raw.iter().map(|v| v / z).collect();
            assert!(p.objective(&pt) <= best);
        }
    }

    #[test]
    fn constant_lambda_advantage_is_plain_advantage() {
        let p = random_problem(6, 5, 0.2, (1.3, 1.3)).unwrap();
        let s = optimal_policy(&p).unwrap();
        let a = generalized_advantage(&p, &s);
        for (ae, q) in a.iter().zip(p.q()) {
            assert!(close(*ae, q - s.v_star, 1e-12));
        }
        assert!(exploration_cost(&p, &s).iter().all(|&c| c == 0.0));
        let centered: f64 = s
            .pi_star
            .iter()
            .zip(p.lam())
            .map(|(pi, l)| pi * (l - 1.3))
            .sum();
        assert!(centered.abs() < 1e-14);
    }

    #[test]
    fn value_is_objective_at_optimum() {
        for seed in 0..50 {
            let p = random_problem(seed, 2 + (seed % 5) as usize, 0.1, (0.5, 2.0)).unwrap();
            let s = optimal_policy(&p).unwrap();
            assert!(close(p.objective(&s.pi_star), s.v_star, 1e-9));
            assert!(advantage_identity_residual(&p, &s) <= 1e-9);
            assert!((s.pi_star.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn dpo_identity_and_beta_rescaling() {
        let p = random_problem(7, 4, 0.5, (1.0, 1.0)).unwrap();
        assert!(verify_dpo_advantage(&p).unwrap() <= 1e-9);
        let flat = p.with_q(vec![0.4; 4]).unwrap();
        assert!(verify_dpo_advantage(&flat).unwrap() <= 1e-12);
        let doubled = SingleStateProblem::new(
            p.q().iter().map(|v| 2.0 * v).collect(),
            p.p_ref().to_vec(),
            1.0,
            vec![1.0; 4],
        )
        .unwrap();
        let a = optimal_policy(&p).unwrap();
        let b = optimal_policy(&doubled).unwrap();
        for (x, y) in a.pi_star.iter().zip(&b.pi_star) {
            assert!(close(*x, *y, 1e-11));
        }
        assert!(verify_dpo_advantage(&doubled).unwrap() <= 1e-9);
        assert!(verify_dpo_advantage(&random_problem(7, 4, 0.5, (0.5, 2.0)).unwrap()).is_err());
    }

    #[test]
    fn large_uniform_factor_flattens_policy() {
        let p = random_problem(8, 4, 1.0, (1e3, 1e3)).unwrap();
        let p = p
            .with_q(p.q().iter().map(|v| v.abs() / 2.0).collect())
            .unwrap();
        let s = optimal_policy(&p).unwrap();
        let tv: f64 = 0.5 * s.pi_star.iter().map(|v| (v - 0.25).abs()).sum::<f64>();
        assert!(tv <= 1e-3, "{tv}");
    }

    #[test]
    fn eta_is_bracket_independent() {
        let p = random_problem(9, 6, 0.1, (0.5, 2.0)).unwrap();
        let a = solve_eta_from(&p, (-1.0, 1.0)).unwrap();
        let b = solve_eta_from(&p, (-500.0, -300.0)).unwrap();
        let c = solve_eta_from(&p, (40.0, 41.0)).unwrap();
        assert!(close(a, b, 1e-12) && close(a, c, 1e-12));
    }

    #[test]
    fn forgotten_correct_token_gains_from_larger_factor() {
        // action 0: low prior, high value
        let p = SingleStateProblem::new(
            vec![1.0, 0.2, 0.0],
            vec![0.01, 0.69, 0.30],
            0.5,
            vec![1.0, 1.0, 1.0],
        )
        .unwrap();
        let eta = solve_eta(&p).unwrap();
        assert!(p.p_ref()[0] < (-(p.q()[0] + eta) / p.beta()).exp());
        let r = derivative_sign_probe(&p, 0, 1e-4).unwrap();
        assert!(!r.dead_zone && r.agree && r.empirical > 0.0 && r.predicted > 0.0);

        // action 1: high prior, and its value pushes the prior above the threshold
        assert!(p.p_ref()[1] > (-(p.q()[1] + eta) / p.beta()).exp());
        let r = derivative_sign_probe(&p, 1, 1e-4).unwrap();
        assert!(!r.dead_zone && r.agree && r.empirical < 0.0 && r.predicted < 0.0);
    }

    #[test]
    fn tuned_boundary_is_dead_zone() {
        // pick q_0 so that log p_ref_0 = -(q_0 + eta) / beta exactly; eta moves with
        // q_0, so iterate the fixed point a few times
        let mut p = SingleStateProblem::new(
            vec![0.0, 0.5, -0.3],
            vec![0.2, 0.5, 0.3],
            0.4,
            vec![1.2, 0.8, 1.0],
        )
        .unwrap();
        for _ in 0..200 {
            let eta = solve_eta(&p).unwrap();
            let target = -p.beta() * p.p_ref()[0].ln() - eta;
            let mut q = p.q().to_vec();
            q[0] = 0.5 * (q[0] + target);
            p = p.with_q(q).unwrap();
        }
        let r = derivative_sign_probe(&p, 0, 1e-4).unwrap();
        assert!(r.dead_zone, "{r:?}");
        assert!(r.agree);
    }

    #[test]
    fn three_step_chain_backs_up_values() {
        // deterministic chain: the action chosen at step t leads to the same next
        // state; Q_t(a) = r_t(a) + V*_{t+1}
        let rewards = [
            vec![0.3, -0.2, 0.8],
            vec![1.0, 0.0, 0.1],
            vec![-0.5, 0.6, 0.2],
        ];
        let p_ref = vec![0.5, 0.3, 0.2];
        let lam = vec![1.4, 0.7, 1.0];
        let beta = 0.25;
        let mut next_v = 0.0;
        let mut values = Vec::new();
        for r in rewards.iter().rev() {
            let q: Vec<f64> = r.iter().map(|v| v + next_v).collect();
            let p = SingleStateProblem::new(q, p_ref.clone(), beta, lam.clone()).unwrap();
            let s = optimal_policy(&p).unwrap();
            assert!(advantage_identity_residual(&p, &s) <= 1e-9);
            let bf = brute_force_optimum(
                &p,
                BruteForceBudget {
                    restarts: 5,
                    ..Default::default()
                },
            );
            assert!((p.objective(&bf) - s.v_star).abs() <= 1e-8);
            next_v = s.v_star;
            values.push(next_v);
        }
        // adding the same constant to every later reward shifts the root value by it
        let mut shifted_v = 0.0;
        for (t, r) in rewards.iter().enumerate().rev() {
            let bump = if t == 2 { 1.0 } else { 0.0 };
            let q: Vec<f64> = r.iter().map(|v| v + bump + shifted_v).collect();
            let p = SingleStateProblem::new(q, p_ref.clone(), beta, lam.clone()).unwrap();
            shifted_v = optimal_policy(&p).unwrap().v_star;
        }
        assert!(close(shifted_v, values[2] + 1.0, 1e-10));
    }

    #[test]
    fn invalid_problems() {
        assert!(SingleStateProblem::new(vec![0.0], vec![1.0], 1.0, vec![1.0]).is_err());
        assert!(SingleStateProblem::new(vec![0.0; 2], vec![0.6, 0.6], 1.0, vec![1.0; 2]).is_err());
        assert!(SingleStateProblem::new(vec![0.0; 2], vec![0.5, 0.5], 0.0, vec![1.0; 2]).is_err());
        assert!(
            SingleStateProblem::new(vec![0.0; 2], vec![0.5, 0.5], 1.0, vec![1.0, 0.0]).is_err()
        );
        assert!(SingleStateProblem::new(vec![0.0; 2], vec![1.0, 0.0], 1.0, vec![1.0; 2]).is_err());
    }
}
