//! Transport costs, Sinkhorn divergences and their gradients.

use serde::Serialize;

use crate::entropies::{feasible, Entropy, ExtendedReal, Feasibility};
use crate::error::{Result, UotError};
use crate::measures::{cost_matrix, CostMatrix, CostSpec, DiscreteMeasure};
use crate::sinkhorn::{
    extrapolate_from, implicit_plan, lse, plan_log_mass, solve, solve_symmetric, DualPotentials, Init, SolveOptions,
    SolveReport, SolveStatus, TransportPlan,
};

/// Potentials from a previous evaluation, used as starting points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Warm {
    pub cross: Option<(Vec<f64>, Vec<f64>)>,
    pub alpha_self: Option<Vec<f64>>,
    pub beta_self: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceConfig {
    pub cost: CostSpec,
    pub entropy: Entropy,
    pub eps: f64,
    pub solve: SolveOptions,
    pub warm: Warm,
}

impl DivergenceConfig {
    pub fn new(entropy: Entropy, eps: f64) -> Self {
        Self { cost: CostSpec::default(), entropy, eps, solve: SolveOptions::default(), warm: Warm::default() }
    }

    pub fn with_cost(mut self, cost: CostSpec) -> Self {
        self.cost = cost;
        self
    }

    pub fn with_solve(mut self, solve: SolveOptions) -> Self {
        self.solve = solve;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.solve.tol = tol;
        self
    }
}

/// A divergence value together with the potentials it was computed from.
#[derive(Clone, Debug)]
pub struct DivergenceValue {
    pub value: ExtendedReal,
    /// Potentials of the `(alpha, beta)` problem, when it was solved.
    pub potentials: Option<DualPotentials>,
    /// Symmetric potentials of `alpha` and `beta`, when they were solved.
    pub alpha_self: Option<Vec<f64>>,
    pub beta_self: Option<Vec<f64>>,
    /// Report of the `(alpha, beta)` solve, or of the symmetric solve for `F_eps`.
    pub report: Option<SolveReport>,
    pub self_reports: Vec<SolveReport>,
    /// `m(pi) - <alpha, grad phi*(-f)>`; vanishes at the optimum for
    /// entropies with a differentiable conjugate.
    pub mass_residual: Option<f64>,
}

impl DivergenceValue {
    fn closed_form(value: ExtendedReal) -> Self {
        Self {
            value,
            potentials: None,
            alpha_self: None,
            beta_self: None,
            report: None,
            self_reports: Vec::new(),
            mass_residual: None,
        }
    }

    pub fn status(&self) -> Option<SolveStatus> {
        self.report.as_ref().map(|r| r.status)
    }

    pub fn is_infeasible(&self) -> bool {
        self.status() == Some(SolveStatus::Infeasible)
    }

    /// Every solve behind this value converged.
    pub fn converged(&self) -> bool {
        self.report.iter().chain(&self.self_reports).all(|r| r.status == SolveStatus::Converged)
    }
}

/// Which functional a gradient refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Target {
    Ot,
    S,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Gradients {
    pub d_weights_a: Option<Vec<f64>>,
    pub d_weights_b: Option<Vec<f64>>,
    pub d_points_a: Option<Vec<Vec<f64>>>,
    pub d_points_b: Option<Vec<Vec<f64>>>,
}

fn infinite_value(report: SolveReport) -> DivergenceValue {
    let mut v = DivergenceValue::closed_form(ExtendedReal::PosInf);
    v.report = Some(report);
    v
}

fn infeasible_report() -> SolveReport {
    SolveReport { status: SolveStatus::Infeasible, iterations: 0, final_update: f64::NAN, update_history: None }
}

/// `OT_eps` against a null measure: `m(other) phi(0)`.
fn null_ot(entropy: &Entropy, m_other: f64) -> ExtendedReal {
    if m_other == 0.0 {
        ExtendedReal::ZERO
    } else {
        m_other * entropy.phi_at_zero()
    }
}

fn finite_or_domain(v: ExtendedReal, what: &str) -> Result<f64> {
    v.finite().ok_or_else(|| UotError::Domain(format!("{what} left the domain of phi*")))
}

/// Per-atom KL strengths, if a field is configured.
fn rho_at(cfg: &DivergenceConfig, side_alpha: bool) -> Option<&[f64]> {
    cfg.solve.rho_field.as_ref().map(|r| if side_alpha { &r.alpha[..] } else { &r.beta[..] })
}

/// `sum_i w_i * (-phi*(-f_i))`, with per-atom KL strengths when given.
fn neg_conj_pairing(entropy: &Entropy, w: &[f64], f: &[f64], rho: Option<&[f64]>) -> Result<f64> {
    let mut acc = 0.0;
    for (i, (wi, fi)) in w.iter().zip(f).enumerate() {
        let e = match rho {
            Some(r) => Entropy::Kl { rho: r[i] },
            None => *entropy,
        };
        acc -= wi * finite_or_domain(e.phi_conj(-fi), "potential")?;
    }
    Ok(acc)
}

/// Dual objective at `(f, g)`. KL uses the linear-time form that folds the
/// plan mass into the two marginal terms.
fn dual_value(
    pots: &DualPotentials,
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    cost: &CostMatrix,
    cfg: &DivergenceConfig,
) -> Result<(f64, Option<f64>)> {
    let eps = pots.eps;
    let (ma, mb) = (alpha.total_mass(), beta.total_mass());
    let log_mass = plan_log_mass(pots, alpha, beta, cost);
    let plan_mass = log_mass.exp();
    let residual = alpha_mass_residual(&pots.entropy, alpha, &pots.f, rho_at(cfg, true), plan_mass);
    if let Entropy::Kl { rho } = pots.entropy {
        let side = |w: &[f64], f: &[f64], field: Option<&[f64]>| -> f64 {
            w.iter()
                .zip(f)
                .enumerate()
                .map(|(i, (wi, fi))| {
                    let r = field.map_or(rho, |r| r[i]);
                    wi * (r - (r + 0.5 * eps) * (-fi / r).exp())
                })
                .sum()
        };
        let v = side(alpha.weights(), &pots.f, rho_at(cfg, true))
            + side(beta.weights(), &pots.g, rho_at(cfg, false))
            + eps * ma * mb;
        return Ok((v, residual));
    }
    let v = neg_conj_pairing(&pots.entropy, alpha.weights(), &pots.f, None)?
        + neg_conj_pairing(&pots.entropy, beta.weights(), &pots.g, None)?
        - eps * (plan_mass - ma * mb);
    Ok((v, residual))
}

fn alpha_mass_residual(
    entropy: &Entropy,
    alpha: &DiscreteMeasure,
    f: &[f64],
    rho: Option<&[f64]>,
    plan_mass: f64,
) -> Option<f64> {
    let mut acc = 0.0;
    for (i, (w, fi)) in alpha.weights().iter().zip(f).enumerate() {
        let d = match rho {
            Some(r) => (-fi / r[i]).exp(),
            None => entropy.phi_conj_grad(-fi)?,
        };
        acc += w * d;
    }
    Some(plan_mass - acc)
}

/// `OT_eps(alpha, alpha)` from its symmetric potential.
fn symmetric_ot(alpha: &DiscreteMeasure, f: &[f64], cost: &CostMatrix, cfg: &DivergenceConfig) -> Result<f64> {
    let pots = DualPotentials { f: f.to_vec(), g: f.to_vec(), eps: cfg.eps, entropy: cfg.entropy };
    Ok(dual_value(&pots, alpha, alpha, cost, cfg)?.0)
}

struct CrossSolve {
    pots: DualPotentials,
    report: SolveReport,
    cost: CostMatrix,
}

fn cross_options(cfg: &DivergenceConfig) -> SolveOptions {
    let mut opts = cfg.solve.clone();
    if let Some((f, g)) = &cfg.warm.cross {
        opts.init = Init::Provided { f: f.clone(), g: g.clone() };
    }
    opts
}

fn self_options(cfg: &DivergenceConfig, warm: Option<&Vec<f64>>) -> SolveOptions {
    let mut opts = cfg.solve.clone();
    opts.rho_field = None;
    opts.init = match warm {
        Some(f) => Init::Provided { f: f.clone(), g: Vec::new() },
        None => match &cfg.solve.init {
            Init::Zero => Init::Zero,
            _ => Init::Asymptotic,
        },
    };
    opts
}

fn solve_cross(alpha: &DiscreteMeasure, beta: &DiscreteMeasure, cfg: &DivergenceConfig) -> Result<Option<CrossSolve>> {
    let cost = cost_matrix(alpha, beta, &cfg.cost)?;
    let out = solve(alpha, beta, &cost, &cfg.entropy, cfg.eps, &cross_options(cfg))?;
    Ok(out.potentials.map(|pots| CrossSolve { pots, report: out.report, cost }))
}

struct SelfSolve {
    f: Vec<f64>,
    report: SolveReport,
    cost: CostMatrix,
}

fn solve_self(m: &DiscreteMeasure, cfg: &DivergenceConfig, warm: Option<&Vec<f64>>) -> Result<SelfSolve> {
    let cost = cost_matrix(m, m, &cfg.cost)?;
    let warm = warm.filter(|w| w.len() == m.len());
    let (f, report) = solve_symmetric(m, &cost, &cfg.entropy, cfg.eps, &self_options(cfg, warm))?;
    Ok(SelfSolve { f, report, cost })
}

fn no_rho_field(cfg: &DivergenceConfig) -> Result<()> {
    if cfg.solve.rho_field.is_some() {
        Err(UotError::Unsupported("per-atom rho fields apply to OT_eps only".into()))
    } else {
        Ok(())
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps.is_finite() && eps > 0.0 {
        Ok(())
    } else {
        Err(UotError::InvalidOption(format!("eps must be positive, got {eps}")))
    }
}

/// Regularized unbalanced transport cost `OT_eps(alpha, beta)`.
pub fn ot_eps(alpha: &DiscreteMeasure, beta: &DiscreteMeasure, cfg: &DivergenceConfig) -> Result<DivergenceValue> {
    check_eps(cfg.eps)?;
    let (ma, mb) = (alpha.total_mass(), beta.total_mass());
    if feasible(&cfg.entropy, ma, mb) == Feasibility::Infeasible {
        return Ok(infinite_value(infeasible_report()));
    }
    if alpha.is_null() {
        return Ok(DivergenceValue::closed_form(null_ot(&cfg.entropy, mb)));
    }
    if beta.is_null() {
        return Ok(DivergenceValue::closed_form(null_ot(&cfg.entropy, ma)));
    }
    let Some(cs) = solve_cross(alpha, beta, cfg)? else {
        return Ok(infinite_value(infeasible_report()));
    };
    let (value, residual) = dual_value(&cs.pots, alpha, beta, &cs.cost, cfg)?;
    Ok(DivergenceValue {
        value: ExtendedReal::Finite(value),
        potentials: Some(cs.pots),
        alpha_self: None,
        beta_self: None,
        report: Some(cs.report),
        self_reports: Vec::new(),
        mass_residual: residual,
    })
}

/// Sinkhorn entropy `F_eps(alpha) = -OT_eps(alpha, alpha) / 2 + eps m(alpha)^2 / 2`.
pub fn sinkhorn_entropy(alpha: &DiscreteMeasure, cfg: &DivergenceConfig) -> Result<DivergenceValue> {
    check_eps(cfg.eps)?;
    no_rho_field(cfg)?;
    if alpha.is_null() {
        return Ok(DivergenceValue::closed_form(ExtendedReal::ZERO));
    }
    let ss = solve_self(alpha, cfg, cfg.warm.alpha_self.as_ref())?;
    let m = alpha.total_mass();
    let value = -0.5 * symmetric_ot(alpha, &ss.f, &ss.cost, cfg)? + 0.5 * cfg.eps * m * m;
    Ok(DivergenceValue {
        value: ExtendedReal::Finite(value),
        potentials: None,
        alpha_self: Some(ss.f),
        beta_self: None,
        report: Some(ss.report),
        self_reports: Vec::new(),
        mass_residual: None,
    })
}

/// Everything needed for `S_eps` and its gradients.
struct Debiased {
    cross: CrossSolve,
    a: SelfSolve,
    b: SelfSolve,
}

fn solve_debiased(alpha: &DiscreteMeasure, beta: &DiscreteMeasure, cfg: &DivergenceConfig) -> Result<Option<Debiased>> {
    let a = solve_self(alpha, cfg, cfg.warm.alpha_self.as_ref())?;
    if alpha == beta {
        // Reuse the symmetric potential so that S(alpha, alpha) is exactly 0.
        let b = SelfSolve { f: a.f.clone(), report: a.report.clone(), cost: a.cost.clone() };
        let cross = CrossSolve {
            pots: DualPotentials { f: a.f.clone(), g: a.f.clone(), eps: cfg.eps, entropy: cfg.entropy },
            report: a.report.clone(),
            cost: a.cost.clone(),
        };
        return Ok(Some(Debiased { cross, a, b }));
    }
    let b = solve_self(beta, cfg, cfg.warm.beta_self.as_ref())?;
    let Some(cross) = solve_cross(alpha, beta, cfg)? else { return Ok(None) };
    Ok(Some(Debiased { cross, a, b }))
}

/// Unbalanced Sinkhorn divergence
/// `S_eps = OT(a, b) - OT(a, a) / 2 - OT(b, b) / 2 + eps (m(a) - m(b))^2 / 2`.
pub fn sinkhorn_divergence(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    cfg: &DivergenceConfig,
) -> Result<DivergenceValue> {
    check_eps(cfg.eps)?;
    no_rho_field(cfg)?;
    let (ma, mb) = (alpha.total_mass(), beta.total_mass());
    if feasible(&cfg.entropy, ma, mb) == Feasibility::Infeasible {
        return Ok(infinite_value(infeasible_report()));
    }
    let mass_term = 0.5 * cfg.eps * (ma - mb) * (ma - mb);
    if alpha.is_null() || beta.is_null() {
        // One side null: OT(0, m) = m(m) phi(0), and the null self term vanishes.
        if alpha.is_null() && beta.is_null() {
            return Ok(DivergenceValue::closed_form(ExtendedReal::ZERO));
        }
        let (full, m_full, warm) = if alpha.is_null() {
            (beta, mb, cfg.warm.beta_self.as_ref())
        } else {
            (alpha, ma, cfg.warm.alpha_self.as_ref())
        };
        let cross = null_ot(&cfg.entropy, m_full);
        let ss = solve_self(full, cfg, warm)?;
        let half_self = 0.5 * symmetric_ot(full, &ss.f, &ss.cost, cfg)?;
        let mut out = DivergenceValue::closed_form(cross + ExtendedReal::Finite(mass_term - half_self));
        out.self_reports.push(ss.report);
        if alpha.is_null() {
            out.beta_self = Some(ss.f);
        } else {
            out.alpha_self = Some(ss.f);
        }
        return Ok(out);
    }
    let Some(d) = solve_debiased(alpha, beta, cfg)? else {
        return Ok(infinite_value(infeasible_report()));
    };
    let value = if alpha == beta {
        0.0
    } else if let Entropy::Kl { rho } = cfg.entropy {
        let c = rho + 0.5 * cfg.eps;
        let side = |w: &[f64], f_self: &[f64], f_cross: &[f64]| -> f64 {
            w.iter()
                .zip(f_self.iter().zip(f_cross))
                .map(|(wi, (fs, fc))| wi * c * ((-fs / rho).exp() - (-fc / rho).exp()))
                .sum()
        };
        side(alpha.weights(), &d.a.f, &d.cross.pots.f) + side(beta.weights(), &d.b.f, &d.cross.pots.g)
    } else {
        let (ot, _) = dual_value(&d.cross.pots, alpha, beta, &d.cross.cost, cfg)?;
        ot - 0.5 * symmetric_ot(alpha, &d.a.f, &d.a.cost, cfg)? - 0.5 * symmetric_ot(beta, &d.b.f, &d.b.cost, cfg)?
            + mass_term
    };
    let residual = {
        let plan_mass = plan_log_mass(&d.cross.pots, alpha, beta, &d.cross.cost).exp();
        alpha_mass_residual(&cfg.entropy, alpha, &d.cross.pots.f, rho_at(cfg, true), plan_mass)
    };
    Ok(DivergenceValue {
        value: ExtendedReal::Finite(value),
        potentials: Some(d.cross.pots),
        alpha_self: Some(d.a.f),
        beta_self: Some(d.b.f),
        report: Some(d.cross.report),
        self_reports: vec![d.a.report, d.b.report],
        mass_residual: residual,
    })
}

fn require_smooth(entropy: &Entropy, what: &str) -> Result<()> {
    if entropy.is_smooth() {
        Ok(())
    } else {
        Err(UotError::Unsupported(format!("{what} needs a differentiable phi*, got {entropy}")))
    }
}

fn require_non_null(alpha: &DiscreteMeasure, beta: &DiscreteMeasure, what: &str) -> Result<()> {
    if alpha.is_null() || beta.is_null() {
        Err(UotError::Domain(format!("{what} is not defined at the null measure")))
    } else {
        Ok(())
    }
}

/// `grad F_eps(alpha)` at potential value `f`: `phi*(-f) + eps grad phi*(-f)`.
fn entropy_gradient(entropy: &Entropy, eps: f64, f: f64) -> Result<f64> {
    let conj = finite_or_domain(entropy.phi_conj(-f), "symmetric potential")?;
    let d = entropy
        .phi_conj_grad(-f)
        .ok_or_else(|| UotError::Domain("phi* is not differentiable at the potential".into()))?;
    Ok(conj + eps * d)
}

/// Hausdorff divergence `H_eps = <alpha - beta, grad F(alpha) - grad F(beta)>`,
/// with the symmetric potentials extended to the other support.
pub fn hausdorff_divergence(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    cfg: &DivergenceConfig,
) -> Result<DivergenceValue> {
    check_eps(cfg.eps)?;
    no_rho_field(cfg)?;
    require_smooth(&cfg.entropy, "the Hausdorff divergence")?;
    require_non_null(alpha, beta, "the Hausdorff divergence")?;
    let a = solve_self(alpha, cfg, cfg.warm.alpha_self.as_ref())?;
    let b = solve_self(beta, cfg, cfg.warm.beta_self.as_ref())?;
    let (eps, e) = (cfg.eps, cfg.entropy);
    let apts: Vec<Vec<f64>> = alpha.points().map(|p| p.to_vec()).collect();
    let bpts: Vec<Vec<f64>> = beta.points().map(|p| p.to_vec()).collect();
    // f_alpha on beta's support and f_beta on alpha's support.
    let fa_on_b = extrapolate_from(eps, &e, alpha, &a.f, &cfg.cost, &bpts)?;
    let fb_on_a = extrapolate_from(eps, &e, beta, &b.f, &cfg.cost, &apts)?;
    let mut value = 0.0;
    for (w, (fa, fb)) in alpha.weights().iter().zip(a.f.iter().zip(&fb_on_a)) {
        value += w * (entropy_gradient(&e, eps, *fa)? - entropy_gradient(&e, eps, *fb)?);
    }
    for (w, (fa, fb)) in beta.weights().iter().zip(fa_on_b.iter().zip(&b.f)) {
        value -= w * (entropy_gradient(&e, eps, *fa)? - entropy_gradient(&e, eps, *fb)?);
    }
    let value = if alpha == beta { 0.0 } else { value };
    Ok(DivergenceValue {
        value: ExtendedReal::Finite(value),
        potentials: None,
        alpha_self: Some(a.f),
        beta_self: Some(b.f),
        report: None,
        self_reports: vec![a.report, b.report],
        mass_residual: None,
    })
}

/// How weight derivatives are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum WeightRule {
    /// Gradient; needs a differentiable `phi*`.
    Smooth,
    /// An element of the subdifferential, read off the implicit plan's
    /// marginals; also defined for TV and Range.
    Subgradient,
}

/// Derivative of `OT_eps(alpha, beta)` in the weights of the first argument,
/// evaluated at its potential `f`. `row_mass[i] = (pi 1)_i / alpha_i`.
fn ot_weight_grad(
    cfg: &DivergenceConfig,
    f: &[f64],
    rho: Option<&[f64]>,
    row_mass: Option<&[f64]>,
    m_other: f64,
) -> Result<Vec<f64>> {
    let eps = cfg.eps;
    f.iter()
        .enumerate()
        .map(|(i, fi)| {
            let e = match rho {
                Some(r) => Entropy::Kl { rho: r[i] },
                None => cfg.entropy,
            };
            if let (Entropy::Kl { rho }, None) = (e, row_mass) {
                return Ok((rho + eps * m_other) - (rho + eps) * (-fi / rho).exp());
            }
            let conj = finite_or_domain(e.phi_conj(-fi), "potential")?;
            let marginal = match row_mass {
                Some(rm) => rm[i],
                None => e
                    .phi_conj_grad(-fi)
                    .ok_or_else(|| UotError::Domain("phi* is not differentiable at the potential".into()))?,
            };
            Ok(-conj - eps * (marginal - m_other))
        })
        .collect()
}

fn relative_marginals(plan: &TransportPlan, alpha: &DiscreteMeasure, beta: &DiscreteMeasure) -> (Vec<f64>, Vec<f64>) {
    let rows = plan.row_sums().iter().zip(alpha.weights()).map(|(s, w)| s / w).collect();
    let cols = plan.col_sums().iter().zip(beta.weights()).map(|(s, w)| s / w).collect();
    (rows, cols)
}

/// Sum over `j` of `pi_ij grad_x C(x_i, y_j)`, one row per atom of `xs`.
/// The entry `skip_diag` excludes the `i == j` terms of a self plan, whose
/// cost is identically 0.
fn plan_position_grad(
    plan_weight: impl Fn(usize, usize) -> f64,
    xs: &DiscreteMeasure,
    ys: &DiscreteMeasure,
    cost: &CostSpec,
    skip_diag: bool,
) -> Result<Vec<Vec<f64>>> {
    let d = xs.dim();
    let mut out = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let mut g = vec![0.0; d];
        for j in 0..ys.len() {
            if skip_diag && i == j {
                continue;
            }
            cost.add_grad_x(xs.point(i), ys.point(j), plan_weight(i, j), &mut g)?;
        }
        out.push(g);
    }
    Ok(out)
}

/// What [`gradients`] should compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub weights: bool,
    pub positions: bool,
    /// Accept subgradients for non-smooth entropies (TV, Range).
    pub subgradient: bool,
}

/// Gradients of `OT_eps` or `S_eps` with respect to weights and/or positions,
/// together with the value they were computed at.
pub fn gradients(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    cfg: &DivergenceConfig,
    target: Target,
    req: GradRequest,
) -> Result<(Gradients, DivergenceValue)> {
    check_eps(cfg.eps)?;
    require_non_null(alpha, beta, "the gradient")?;
    let rule = if req.weights {
        match (cfg.entropy.is_smooth(), req.subgradient, cfg.entropy) {
            (true, _, _) => Some(WeightRule::Smooth),
            (false, true, Entropy::Tv { .. } | Entropy::Range { .. }) => Some(WeightRule::Subgradient),
            _ => return Err(UotError::Unsupported(format!("weight gradients are not available for {}", cfg.entropy))),
        }
    } else {
        None
    };
    let (ma, mb) = (alpha.total_mass(), beta.total_mass());
    if feasible(&cfg.entropy, ma, mb) == Feasibility::Infeasible {
        return Err(UotError::Infeasible("gradient of an infinite transport cost".into()));
    }

    let value = match target {
        Target::Ot => ot_eps(alpha, beta, cfg)?,
        Target::S => sinkhorn_divergence(alpha, beta, cfg)?,
    };
    let pots = value
        .potentials
        .clone()
        .ok_or_else(|| UotError::Infeasible("no potentials for the transport problem".into()))?;
    let c_ab = cost_matrix(alpha, beta, &cfg.cost)?;
    let need_plan = req.positions || rule == Some(WeightRule::Subgradient);
    let plan = need_plan.then(|| implicit_plan(&pots, alpha, beta, &c_ab)).transpose()?;

    // Symmetric plans and their relative marginals, for the S self terms.
    let self_part = |m: &DiscreteMeasure, f: &[f64]| -> Result<(TransportPlan, Vec<f64>)> {
        let c = cost_matrix(m, m, &cfg.cost)?;
        let p = DualPotentials { f: f.to_vec(), g: f.to_vec(), eps: cfg.eps, entropy: cfg.entropy };
        let plan = implicit_plan(&p, m, m, &c)?;
        let (rows, _) = relative_marginals(&plan, m, m);
        Ok((plan, rows))
    };
    let self_a = match (target, need_plan) {
        (Target::S, true) => Some(self_part(alpha, value.alpha_self.as_ref().expect("self potential"))?),
        _ => None,
    };
    let self_b = match (target, need_plan) {
        (Target::S, true) => Some(self_part(beta, value.beta_self.as_ref().expect("self potential"))?),
        _ => None,
    };

    let mut out = Gradients::default();
    if let Some(rule) = rule {
        let (rows, cols) = match (&plan, rule) {
            (Some(p), WeightRule::Subgradient) => {
                let (r, c) = relative_marginals(p, alpha, beta);
                (Some(r), Some(c))
            }
            _ => (None, None),
        };
        let mut da = ot_weight_grad(cfg, &pots.f, rho_at(cfg, true), rows.as_deref(), mb)?;
        let mut db = ot_weight_grad(cfg, &pots.g, rho_at(cfg, false), cols.as_deref(), ma)?;
        if target == Target::S {
            let self_cfg = DivergenceConfig { solve: self_options(cfg, None), ..cfg.clone() };
            let fa = value.alpha_self.as_ref().expect("self potential");
            let fb = value.beta_self.as_ref().expect("self potential");
            let rm_a = self_a.as_ref().map(|(_, r)| &r[..]).filter(|_| rule == WeightRule::Subgradient);
            let rm_b = self_b.as_ref().map(|(_, r)| &r[..]).filter(|_| rule == WeightRule::Subgradient);
            let sa = ot_weight_grad(&self_cfg, fa, None, rm_a, ma)?;
            let sb = ot_weight_grad(&self_cfg, fb, None, rm_b, mb)?;
            let dm = cfg.eps * (ma - mb);
            for (d, s) in da.iter_mut().zip(&sa) {
                *d += dm - s;
            }
            for (d, s) in db.iter_mut().zip(&sb) {
                *d -= dm + s;
            }
        }
        out.d_weights_a = Some(da);
        out.d_weights_b = Some(db);
    }

    if req.positions {
        let plan = plan.as_ref().expect("plan");
        let mut pa = plan_position_grad(|i, j| plan.get(i, j), alpha, beta, &cfg.cost, false)?;
        let mut pb = plan_position_grad(|j, i| plan.get(i, j), beta, alpha, &cfg.cost, false)?;
        if let (Some((sa, _)), Some((sb, _))) = (&self_a, &self_b) {
            let ga = plan_position_grad(|i, k| sa.get(i, k), alpha, alpha, &cfg.cost, true)?;
            let gb = plan_position_grad(|j, k| sb.get(j, k), beta, beta, &cfg.cost, true)?;
            for (p, s) in pa.iter_mut().zip(&ga) {
                p.iter_mut().zip(s).for_each(|(x, y)| *x -= y);
            }
            for (p, s) in pb.iter_mut().zip(&gb) {
                p.iter_mut().zip(s).for_each(|(x, y)| *x -= y);
            }
        }
        out.d_points_a = Some(pa);
        out.d_points_b = Some(pb);
    }
    Ok((out, value))
}

/// Weight gradients; `Unsupported` unless `phi*` is differentiable.
pub fn grad_weights(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    cfg: &DivergenceConfig,
    target: Target,
) -> Result<Gradients> {
    require_smooth(&cfg.entropy, "weight gradients")?;
    let req = GradRequest { weights: true, positions: false, subgradient: false };
    Ok(gradients(alpha, beta, cfg, target, req)?.0)
}

/// Weight subgradients, also defined for TV and Range: the gradient formula
/// with `grad phi*` replaced by the implicit plan's relative marginals.
pub fn subgradient_weights(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    cfg: &DivergenceConfig,
    target: Target,
) -> Result<Gradients> {
    let req = GradRequest { weights: true, positions: false, subgradient: true };
    Ok(gradients(alpha, beta, cfg, target, req)?.0)
}

/// Position gradients, via the envelope theorem through the cost.
pub fn grad_positions(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    cfg: &DivergenceConfig,
    target: Target,
) -> Result<Gradients> {
    let req = GradRequest { weights: false, positions: true, subgradient: false };
    Ok(gradients(alpha, beta, cfg, target, req)?.0)
}

/// `(eps / 2) |alpha e^{f_alpha / eps} - beta e^{f_beta / eps}|^2` in the
/// kernel norm of `k = exp(-C / eps)`, from the two symmetric potentials.
pub fn kernel_lower_bound(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    f_alpha: &[f64],
    f_beta: &[f64],
    cost: &CostSpec,
    eps: f64,
) -> Result<f64> {
    // mu = sum_k c_k delta_{z_k}, c_k = +-w_k e^{f_k / eps}; |mu|^2 = sum c_k c_l k(z_k, z_l).
    // Signed terms are accumulated as shifted exponentials to avoid overflow.
    let mut pts: Vec<&[f64]> = Vec::new();
    let mut logc = Vec::new();
    let mut sign = Vec::new();
    for (i, (w, f)) in alpha.weights().iter().zip(f_alpha).enumerate() {
        pts.push(alpha.point(i));
        logc.push(w.ln() + f / eps);
        sign.push(1.0);
    }
    for (j, (w, f)) in beta.weights().iter().zip(f_beta).enumerate() {
        pts.push(beta.point(j));
        logc.push(w.ln() + f / eps);
        sign.push(-1.0);
    }
    let mut terms = Vec::with_capacity(pts.len() * pts.len());
    for k in 0..pts.len() {
        for l in 0..pts.len() {
            terms.push((logc[k] + logc[l] - cost.eval(pts[k], pts[l]) / eps, sign[k] * sign[l]));
        }
    }
    let shift = lse(terms.iter().map(|t| t.0));
    if !shift.is_finite() {
        return Ok(0.0);
    }
    let sum: f64 = terms.iter().map(|(l, s)| s * (l - shift).exp()).sum();
    Ok(0.5 * eps * sum * shift.exp())
}
