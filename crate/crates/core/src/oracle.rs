//! Brute-force reference computations used to check the solver: the primal
//! objective evaluated directly, a one-dimensional search for Dirac pairs,
//! central finite differences and the duality gap.

use serde::Serialize;

use crate::entropies::{Entropy, ExtendedReal};
use crate::error::{Result, UotError};
use crate::measures::{CostMatrix, DiscreteMeasure};
use crate::sinkhorn::{implicit_plan, DualPotentials, TransportPlan};

/// `sum_i w_i phi(p_i / w_i)`, the divergence of a marginal `p` from `w`.
fn phi_divergence(entropy: &Entropy, marginal: &[f64], w: &[f64]) -> ExtendedReal {
    marginal.iter().zip(w).fold(ExtendedReal::ZERO, |acc, (p, wi)| acc + *wi * entropy.phi(p / wi))
}

/// `KL(pi | alpha x beta)` with the `- m(pi) + m(alpha) m(beta)` terms.
fn entropic_term(plan: &TransportPlan, alpha: &DiscreteMeasure, beta: &DiscreteMeasure) -> f64 {
    let mut acc = 0.0;
    for (i, ai) in alpha.weights().iter().enumerate() {
        for (j, bj) in beta.weights().iter().enumerate() {
            let p = plan.get(i, j);
            let ab = ai * bj;
            let plogp = if p > 0.0 { p * (p / ab).ln() } else { 0.0 };
            acc += plogp - p + ab;
        }
    }
    acc
}

fn transport_term(plan: &TransportPlan, cost: &CostMatrix) -> f64 {
    plan.weights().iter().zip(cost.as_slice()).map(|(p, c)| p * c).sum()
}

fn check_shapes(
    plan: &TransportPlan,
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    cost: &CostMatrix,
) -> Result<()> {
    if plan.rows() != alpha.len() || cost.rows() != alpha.len() {
        return Err(UotError::DimensionMismatch { expected: alpha.len(), found: plan.rows() });
    }
    if plan.cols() != beta.len() || cost.cols() != beta.len() {
        return Err(UotError::DimensionMismatch { expected: beta.len(), found: plan.cols() });
    }
    Ok(())
}

/// Primal objective `<C, pi> + D(pi_1 | alpha) + D(pi_2 | beta) + eps KL(pi | alpha x beta)`
/// for a plan supported on the product of the two supports.
pub fn primal_cost(
    plan: &TransportPlan,
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    cost: &CostMatrix,
    entropy: &Entropy,
    eps: f64,
) -> Result<ExtendedReal> {
    check_shapes(plan, alpha, beta, cost)?;
    let d1 = phi_divergence(entropy, &plan.row_sums(), alpha.weights());
    let d2 = phi_divergence(entropy, &plan.col_sums(), beta.weights());
    let rest = transport_term(plan, cost) + eps * entropic_term(plan, alpha, beta);
    Ok(ExtendedReal::Finite(rest) + d1 + d2)
}

/// Minimum over `t >= 0` of the primal objective restricted to plans
/// `t delta_(x, y)` between `m1 delta_x` and `m2 delta_y` at cost `c`.
/// Golden-section search; `+inf` when no `t` is admissible.
pub fn dirac_pair_value(entropy: &Entropy, m1: f64, m2: f64, c: f64, eps: f64) -> Result<ExtendedReal> {
    if !(m1 > 0.0 && m2 > 0.0 && eps > 0.0 && c >= 0.0) {
        return Err(UotError::Domain("dirac_pair_value needs positive masses and eps, c >= 0".into()));
    }
    let objective = |t: f64| -> ExtendedReal {
        let ent = if t > 0.0 { t * (t / (m1 * m2)).ln() - t + m1 * m2 } else { m1 * m2 };
        ExtendedReal::Finite(c * t + eps * ent) + m1 * entropy.phi(t / m1) + m2 * entropy.phi(t / m2)
    };
    let (lo, hi) = match *entropy {
        Entropy::Balanced => {
            if (m1 - m2).abs() > 1e-12 * m1.max(m2) {
                return Ok(ExtendedReal::PosInf);
            }
            // phi only vanishes at exactly 1; evaluate the single admissible plan.
            let t = m1;
            let ent = t * (t / (m1 * m2)).ln() - t + m1 * m2;
            return Ok(ExtendedReal::Finite(c * t + eps * ent));
        }
        Entropy::Range { a, b } => {
            let (lo, hi) = (a * m1.max(m2), b * m1.min(m2));
            if lo > hi {
                return Ok(ExtendedReal::PosInf);
            }
            (lo, hi)
        }
        _ => (0.0, 10.0 * m1.max(m2) * std::f64::consts::E),
    };
    let t = golden_section(|t| objective(t).to_f64(), lo, hi, 1e-12);
    // The search never probes the end points; compare against them.
    let best =
        [lo, t, hi].into_iter().map(objective).fold(ExtendedReal::PosInf, |acc, v| if v < acc { v } else { acc });
    Ok(best)
}

/// Minimizer of a unimodal `f` on `[lo, hi]` to within `tol`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
        if x1 == x2 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Central differences `(v(x + h e_k) - v(x - h e_k)) / 2h` for every `k`.
pub fn fd_gradient(value: impl Fn(&[f64]) -> Result<ExtendedReal>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(UotError::InvalidOption(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let up = value(&probe)?;
        probe[k] = x[k] - h;
        let down = value(&probe)?;
        probe[k] = x[k];
        match (up, down) {
            (ExtendedReal::Finite(u), ExtendedReal::Finite(d)) => out.push((u - d) / (2.0 * h)),
            _ => return Err(UotError::FdDomain(format!("value is +inf near component {k}"))),
        }
    }
    Ok(out)
}

/// Finite-difference gradients of a functional of a measure, with respect
/// to each weight and each coordinate.
pub fn fd_measure_gradient(
    value: impl Fn(&DiscreteMeasure) -> Result<ExtendedReal>,
    m: &DiscreteMeasure,
    h: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if m.weights().iter().any(|w| *w <= h) {
        return Err(UotError::FdDomain("a weight probe would leave the positive orthant".into()));
    }
    let dw = fd_gradient(|w| value(&m.with_weights(w.to_vec())?), m.weights(), h)?;
    let flat = fd_gradient(|x| value(&m.with_coords(x.to_vec())?), m.coords(), h)?;
    let dx = flat.chunks(m.dim().max(1)).map(|c| c.to_vec()).collect();
    Ok((dw, dx))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapReport {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    /// Largest relative deviation `|pi_1 / alpha - 1|`, then the same for beta.
    pub marginal_residuals: (f64, f64),
}

fn relative_residual(marginal: &[f64], w: &[f64]) -> f64 {
    marginal.iter().zip(w).map(|(p, wi)| (p / wi - 1.0).abs()).fold(0.0, f64::max)
}

/// Hard-constraint entropies penalize marginals by an indicator, which
/// floating-point plans only meet up to rounding. Ratios within `slack`
/// of the admissible set are snapped onto it.
fn snap_ratio(entropy: &Entropy, p: f64, slack: f64) -> f64 {
    match *entropy {
        Entropy::Balanced if (p - 1.0).abs() <= slack => 1.0,
        Entropy::Range { a, b } => {
            if p < a && p >= a - slack {
                a
            } else if p > b && p <= b + slack {
                b
            } else {
                p
            }
        }
        _ => p,
    }
}

/// Primal value of the implicit plan against the dual objective (in its
/// general form, without closed-form shortcuts) at `pots`.
pub fn duality_gap(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    cost: &CostMatrix,
    pots: &DualPotentials,
) -> Result<GapReport> {
    let (entropy, eps) = (pots.entropy, pots.eps);
    let plan = implicit_plan(pots, alpha, beta, cost)?;
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    let marginal_residuals = (relative_residual(&rows, alpha.weights()), relative_residual(&cols, beta.weights()));

    let slack = 1e-6;
    let div = |marg: &[f64], w: &[f64]| -> ExtendedReal {
        marg.iter()
            .zip(w)
            .fold(ExtendedReal::ZERO, |acc, (p, wi)| acc + *wi * entropy.phi(snap_ratio(&entropy, p / wi, slack)))
    };
    let primal = (ExtendedReal::Finite(transport_term(&plan, cost) + eps * entropic_term(&plan, alpha, beta))
        + div(&rows, alpha.weights())
        + div(&cols, beta.weights()))
    .to_f64();

    let mut dual = 0.0;
    for (w, f) in alpha.weights().iter().zip(&pots.f) {
        dual -= w * entropy.phi_conj(-f).to_f64();
    }
    for (w, g) in beta.weights().iter().zip(&pots.g) {
        dual -= w * entropy.phi_conj(-g).to_f64();
    }
    let (ma, mb) = (alpha.total_mass(), beta.total_mass());
    dual -= eps * (plan.total_mass() - ma * mb);
    Ok(GapReport { primal, dual, gap: primal - dual, marginal_residuals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{cost_matrix, CostSpec};
    use crate::sinkhorn::{solve, SolveOptions};

    #[test]
    fn primal_of_product_plan_by_hand() {
        // 2 x 2, KL(rho = 1), eps = 0.5, pi = alpha x beta.
        let a = DiscreteMeasure::new(vec![0.5, 1.0], vec![vec![0.0], vec![1.0]]).unwrap();
        let b = DiscreteMeasure::new(vec![2.0, 0.25], vec![vec![0.0], vec![2.0]]).unwrap();
        let c = cost_matrix(&a, &b, &CostSpec::default()).unwrap();
        let plan = TransportPlan::product(&a, &b);
        let e = Entropy::kl(1.0).unwrap();
        let v = primal_cost(&plan, &a, &b, &c, &e, 0.5).unwrap().finite().unwrap();
        // <C, a x b> = 0.5*0.25*4 + 1.0*2.0*1 + 1.0*0.25*1 = 2.75
        // pi_1 = m(b) a = 2.25 a: sum a_i phi(2.25) = 1.5 phi(2.25)
        // pi_2 = m(a) b = 1.5 b: sum b_j phi(1.5) = 2.25 phi(1.5); KL term 0
        let phi = |p: f64| p * p.ln() - p + 1.0;
        let want = 2.75 + 1.5 * phi(2.25) + 2.25 * phi(1.5);
        assert!((v - want).abs() < 1e-14);
    }

    #[test]
    fn primal_of_zero_plan() {
        let a = DiscreteMeasure::new(vec![0.5, 1.0], vec![vec![0.0], vec![1.0]]).unwrap();
        let b = DiscreteMeasure::new(vec![2.0], vec![vec![3.0]]).unwrap();
        let c = cost_matrix(&a, &b, &CostSpec::default()).unwrap();
        let plan = TransportPlan::from_weights(2, 1, vec![0.0, 0.0]).unwrap();
        let tv = Entropy::tv(0.7).unwrap();
        let v = primal_cost(&plan, &a, &b, &c, &tv, 0.3).unwrap().finite().unwrap();
        assert!((v - (3.5 * 0.7 + 0.3 * 1.5 * 2.0)).abs() < 1e-14);
        assert_eq!(primal_cost(&plan, &a, &b, &c, &Entropy::Balanced, 0.3).unwrap(), ExtendedReal::PosInf);
    }

    #[test]
    fn dirac_pair_examples() {
        let kl = Entropy::kl(1.0).unwrap();
        let v = dirac_pair_value(&kl, 1.0, 1.0, 0.0, 1.0).unwrap().finite().unwrap();
        assert!(v.abs() < 1e-15);
        let v = dirac_pair_value(&kl, 1.0, 1.0, 3.0, 1.0).unwrap().finite().unwrap();
        assert!((v - 3.0 * (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!((v - 1.8964).abs() < 1e-4);
    }

    #[test]
    fn dirac_pair_tv_expensive_transport() {
        let (rho, eps, c, m1, m2) = (0.5, 0.2, 2.0, 1.3, 0.8);
        let tv = Entropy::tv(rho).unwrap();
        let t = m1 * m2 * (-(c - 2.0 * rho) / eps).exp();
        let want = rho * (m1 + m2) + eps * m1 * m2 - eps * t;
        let v = dirac_pair_value(&tv, m1, m2, c, eps).unwrap().finite().unwrap();
        assert!((v - want).abs() < 1e-10);
    }

    #[test]
    fn dirac_pair_range_and_balanced() {
        let rg = Entropy::range(0.5, 1.5).unwrap();
        assert_eq!(dirac_pair_value(&rg, 1.0, 4.0, 1.0, 1.0).unwrap(), ExtendedReal::PosInf);
        // c large: the plan mass sits at the lower end a max(m1, m2).
        let v = dirac_pair_value(&rg, 1.0, 1.0, 5.0, 0.1).unwrap().finite().unwrap();
        let t: f64 = 0.5;
        assert!((v - (5.0 * t + 0.1 * (t * t.ln() - t + 1.0))).abs() < 1e-12);
        let v = dirac_pair_value(&Entropy::Balanced, 1.0, 1.0, 2.0, 0.1).unwrap().finite().unwrap();
        assert!((v - 2.0).abs() < 1e-15);
    }

    #[test]
    fn fd_of_quadratic() {
        let w = [0.3, -1.2, 2.0];
        let g = fd_gradient(|x| Ok(ExtendedReal::Finite(x.iter().map(|v| v * v).sum())), &w, 1e-3).unwrap();
        for (gi, wi) in g.iter().zip(&w) {
            assert!((gi - 2.0 * wi).abs() < 1e-12);
        }
        let err = fd_gradient(|_| Ok(ExtendedReal::PosInf), &w, 1e-3);
        assert!(matches!(err, Err(UotError::FdDomain(_))));
    }

    #[test]
    fn dirac_pair_duality_gap() {
        let a = DiscreteMeasure::new(vec![1.0], vec![vec![0.0]]).unwrap();
        let b = DiscreteMeasure::new(vec![1.0], vec![vec![1.5]]).unwrap();
        let c = cost_matrix(&a, &b, &CostSpec::default()).unwrap();
        let e = Entropy::kl(0.8).unwrap();
        let out = solve(&a, &b, &c, &e, 0.4, &SolveOptions::default().with_tol(1e-14)).unwrap();
        let gap = duality_gap(&a, &b, &c, &out.potentials.unwrap()).unwrap();
        assert!(gap.gap.abs() <= 1e-10, "{gap:?}");
    }
}
