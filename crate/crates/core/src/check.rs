//! Self-check suite: the solver against brute-force oracles on small seeded
//! instances. Used by `uot check`.

use serde::Serialize;

use crate::divergences::{gradients, ot_eps, DivergenceConfig, GradRequest, Target};
use crate::entropies::{Entropy, ExtendedReal};
use crate::error::Result;
use crate::lambert::{lambert_w, lambert_w_log};
use crate::measures::{cost_matrix, CostSpec, DiscreteMeasure};
use crate::oracle::{dirac_pair_value, duality_gap, fd_measure_gradient, primal_cost};
use crate::sinkhorn::{implicit_plan, solve, SolveOptions, SolveStatus};
use crate::synthetic::{random_measure, rng};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or count of failures for exact checks).
    pub value: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn result(name: &str, value: f64, threshold: f64) -> CheckResult {
    CheckResult { name: name.into(), passed: value <= threshold, value, threshold }
}

/// `|x - want| / max(|want|, scale)`.
pub fn rel_err(x: f64, want: f64, scale: f64) -> f64 {
    (x - want).abs() / want.abs().max(scale)
}

/// Sup-norm relative error of `x` against `want`.
pub fn rel_err_vec(x: &[f64], want: &[f64]) -> f64 {
    let num = x.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let den = want.iter().map(|b| b.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn dirac(x: f64, w: f64) -> DiscreteMeasure {
    DiscreteMeasure::new(vec![w], vec![vec![x]]).expect("valid dirac")
}

fn finite(v: ExtendedReal) -> f64 {
    v.to_f64()
}

/// Largest relative deviation of the KL solver from the closed form for two
/// unit Diracs at cost `c`.
fn dirac_pair_solver(tol: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for c in [0.0f64, 0.5, 1.0, 3.0] {
        for rho in [0.1, 1.0, 10.0] {
            for eps in [0.01, 0.1, 1.0] {
                let k: f64 = 2.0 * rho + eps;
                let want = k * (1.0 - (-c / k).exp());
                let cfg = DivergenceConfig::new(Entropy::kl(rho)?, eps).with_tol(tol);
                let v = finite(ot_eps(&dirac(0.0, 1.0), &dirac(c.sqrt(), 1.0), &cfg)?.value);
                worst = worst.max(rel_err(v, want, k));
            }
        }
    }
    Ok(worst)
}

fn dirac_pair_oracle() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (rho, c, eps) in [(1.0, 3.0, 1.0), (0.1, 0.5, 0.01), (10.0, 1.0, 0.1)] {
        let k: f64 = 2.0 * rho + eps;
        let want = k * (1.0 - (-c / k).exp());
        let v = finite(dirac_pair_value(&Entropy::kl(rho)?, 1.0, 1.0, c, eps)?);
        worst = worst.max(rel_err(v, want, k));
    }
    // TV with c > 2 rho: both marginals sit below their atoms, so the optimal
    // mass is t = m1 m2 e^{-(c - 2 rho) / eps}.
    for (rho, m1, m2, c, eps) in
        [(0.5f64, 1.0, 2.0, 3.0f64, 0.1f64), (1.0, 0.5, 0.5, 5.0, 0.01), (0.4, 1.0, 1.0, 1.0, 0.5)]
    {
        let want = (m1 + m2) * rho + eps * m1 * m2 * (1.0 - (-(c - 2.0 * rho) / eps).exp());
        let v = finite(dirac_pair_value(&Entropy::tv(rho)?, m1, m2, c, eps)?);
        worst = worst.max(rel_err(v, want, 1.0));
    }
    Ok(worst)
}

/// Worst relative duality gap and worst weak-duality violation over random KL
/// and Berg instances.
fn duality(seed: u64) -> Result<(f64, f64)> {
    let mut r = rng(seed);
    let (mut gap, mut weak): (f64, f64) = (0.0, 0.0);
    for k in 0..6 {
        let entropy = if k % 2 == 0 { Entropy::kl(0.5)? } else { Entropy::berg(1.0)? };
        let a = random_measure(&mut r, 20, 2, 1.0, 0.0, 1.0)?;
        let b = random_measure(&mut r, 20, 2, 1.5, 0.0, 1.0)?;
        let c = cost_matrix(&a, &b, &CostSpec::default())?;
        let out = solve(&a, &b, &c, &entropy, 0.1, &SolveOptions::default().with_tol(1e-12))?;
        let rep = duality_gap(&a, &b, &c, out.feasible_potentials()?)?;
        gap = gap.max(rep.gap.abs() / (1.0 + rep.dual.abs()));
        let plan = implicit_plan(out.feasible_potentials()?, &a, &b, &c)?;
        let primal = primal_cost(&plan, &a, &b, &c, &entropy, 0.1)?.to_f64();
        weak = weak.max(rep.dual - primal);
    }
    Ok((gap, weak))
}

fn balanced_marginals(seed: u64) -> Result<f64> {
    let mut r = rng(seed.wrapping_add(1));
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let a = random_measure(&mut r, 30, 2, 1.0, 0.0, 1.0)?;
        let b = random_measure(&mut r, 30, 2, 1.0, 0.0, 1.0)?;
        let c = cost_matrix(&a, &b, &CostSpec::default())?;
        let out = solve(&a, &b, &c, &Entropy::Balanced, 0.1, &SolveOptions::default().with_tol(1e-10))?;
        let (ra, rb) = duality_gap(&a, &b, &c, out.feasible_potentials()?)?.marginal_residuals;
        worst = worst.max(ra).max(rb);
    }
    Ok(worst)
}

/// Worst relative error of weight and position gradients against central
/// differences, for `OT_eps` and `S_eps`.
fn gradients_fd(seed: u64) -> Result<f64> {
    let mut r = rng(seed.wrapping_add(2));
    let mut worst: f64 = 0.0;
    for entropy in [Entropy::kl(1.0)?, Entropy::berg(2.0)?] {
        let a = random_measure(&mut r, 6, 2, 1.0, 0.0, 1.0)?;
        let b = random_measure(&mut r, 7, 2, 1.3, 0.0, 1.0)?;
        let cfg = DivergenceConfig::new(entropy, 0.5).with_tol(1e-13);
        for target in [Target::Ot, Target::S] {
            let req = GradRequest { weights: true, positions: true, subgradient: false };
            let (g, _) = gradients(&a, &b, &cfg, target, req)?;
            let value = |m: &DiscreteMeasure| -> Result<ExtendedReal> {
                Ok(match target {
                    Target::Ot => ot_eps(m, &b, &cfg)?.value,
                    Target::S => crate::divergences::sinkhorn_divergence(m, &b, &cfg)?.value,
                })
            };
            let (dw, dx) = fd_measure_gradient(value, &a, 1e-5)?;
            worst = worst.max(rel_err_vec(g.d_weights_a.as_deref().unwrap_or_default(), &dw));
            let flat = |v: &[Vec<f64>]| v.concat();
            worst = worst.max(rel_err_vec(&flat(g.d_points_a.as_deref().unwrap_or_default()), &flat(&dx)));
        }
    }
    Ok(worst)
}

fn null_measure() -> Result<f64> {
    let beta = DiscreteMeasure::new(vec![0.5, 1.25], vec![vec![0.0], vec![1.0]])?;
    let null = DiscreteMeasure::null(1);
    let mut failures = 0.0;
    for (entropy, want) in [(Entropy::kl(0.7)?, 1.75 * 0.7), (Entropy::tv(0.3)?, 1.75 * 0.3)] {
        let v = ot_eps(&null, &beta, &DivergenceConfig::new(entropy, 0.1))?.value;
        if v != ExtendedReal::Finite(want) {
            failures += 1.0;
        }
    }
    let v = ot_eps(&null, &beta, &DivergenceConfig::new(Entropy::berg(1.0)?, 0.1))?.value;
    if v.is_finite() {
        failures += 1.0;
    }
    Ok(failures)
}

fn range_gate() -> Result<f64> {
    let (lo, hi) = (0.5, 1.5);
    let entropy = Entropy::range(lo, hi)?;
    let mut failures = 0.0;
    for ma in [0.2, 0.5, 1.0, 2.0] {
        for mb in [0.1, 0.4, 1.0, 3.0, 5.0] {
            let a = dirac(0.0, ma);
            let b = dirac(0.5, mb);
            let c = cost_matrix(&a, &b, &CostSpec::default())?;
            let out = solve(&a, &b, &c, &entropy, 0.1, &SolveOptions::default())?;
            let disjoint = hi * ma < lo * mb || hi * mb < lo * ma;
            if disjoint != (out.report.status == SolveStatus::Infeasible) {
                failures += 1.0;
            }
        }
    }
    Ok(failures)
}

fn lambert_residual() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 0..=96 {
        let z = 10f64.powf(-12.0 + 0.25 * k as f64);
        let w = lambert_w(z)?;
        worst = worst.max((w * w.exp() - z).abs() / (1.0 + z) / 1e-12);
    }
    for k in 0..=73 {
        let lz = -30.0 + 10.0 * k as f64;
        let w = lambert_w_log(lz);
        worst = worst.max((w + w.ln() - lz).abs() / 1e-9);
    }
    Ok(worst)
}

/// Runs every check; `seed` drives the random instances.
pub fn run_checks(seed: u64) -> Result<CheckReport> {
    let (gap, weak) = duality(seed)?;
    let checks = vec![
        result("dirac_pair_solver", dirac_pair_solver(1e-13)?, 1e-9),
        result("dirac_pair_oracle", dirac_pair_oracle()?, 1e-10),
        result("duality_gap", gap, 1e-6),
        result("weak_duality", weak, 1e-9),
        result("balanced_marginals", balanced_marginals(seed)?, 1e-6),
        result("gradients_fd", gradients_fd(seed)?, 1e-5),
        result("null_measure", null_measure()?, 0.0),
        result("range_feasibility", range_gate()?, 0.0),
        result("lambert_residual", lambert_residual()?, 1.0),
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(CheckReport { seed, passed, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let rep = run_checks(0).unwrap();
        for c in &rep.checks {
            assert!(c.passed, "{} = {:e} > {:e}", c.name, c.value, c.threshold);
        }
        assert!(rep.passed);
    }

    #[test]
    fn relative_errors() {
        assert_eq!(rel_err(1.0, 0.0, 2.0), 0.5);
        assert_eq!(rel_err_vec(&[1.0, 2.0], &[1.0, 4.0]), 0.5);
        assert_eq!(rel_err_vec(&[1e-3], &[0.0]), 1e-3);
    }
}
