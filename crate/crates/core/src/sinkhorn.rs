//! Log-domain Sinkhorn iterations for unbalanced entropic transport.
//!
//! Each half-update is a softmin over the other support followed by the
//! entropy's dampening map:
//!
//! ```text
//! g_j <- damp(-eps * LSE_i[log a_i + (f_i - C_ij) / eps])
//! f_i <- damp(-eps * LSE_j[log b_j + (g_j - C_ij) / eps])
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropies::{feasible, kl_damp, Entropy, Feasibility};
use crate::error::{Result, UotError};
use crate::measures::{cost_matrix_points, CostMatrix, CostSpec, DiscreteMeasure};

/// Rows x cols above which half-updates are spread over the rayon pool.
const PAR_THRESHOLD: usize = 8192;

/// `log sum_k exp(x_k)` in one pass with a running maximum.
pub fn lse<I: IntoIterator<Item = f64>>(terms: I) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let mut acc = 0.0;
    for x in terms {
        if x <= max {
            acc += (x - max).exp();
        } else if x.is_finite() {
            acc = acc * (max - x).exp() + 1.0;
            max = x;
        } else if x == f64::INFINITY {
            return f64::INFINITY;
        }
    }
    if acc == 0.0 {
        f64::NEG_INFINITY
    } else {
        max + acc.ln()
    }
}

/// `-eps log <m, exp(-h / eps)>`.
pub fn softmin(eps: f64, m: &DiscreteMeasure, h: &[f64]) -> Result<f64> {
    if m.is_null() {
        return Err(UotError::Domain("softmin over the null measure".into()));
    }
    if h.len() != m.len() {
        return Err(UotError::DimensionMismatch { expected: m.len(), found: h.len() });
    }
    Ok(-eps * lse(m.weights().iter().zip(h).map(|(w, v)| w.ln() - v / eps)))
}

/// `-eps * LSE_k[shift_k - c_k / eps]`, where `shift_k = log w_k + pot_k / eps`.
#[inline]
fn softmin_row(eps: f64, shift: &[f64], cost_row: &[f64], scratch: &mut Vec<f64>) -> f64 {
    let inv = 1.0 / eps;
    scratch.clear();
    scratch.extend(shift.iter().zip(cost_row).map(|(s, c)| s - c * inv));
    let max = scratch.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z));
    if !max.is_finite() {
        return -eps * max;
    }
    // Terms below max - 50 change the sum by less than n * 2e-22.
    let sum: f64 = scratch.iter().map(|&z| z - max).filter(|&d| d > -50.0).map(f64::exp).sum();
    -eps * (max + sum.ln())
}

/// Per-location dampening: the entropy's map, or a spatially varying KL
/// strength when `rho` is given.
#[derive(Clone, Copy)]
struct Damp<'a> {
    entropy: Entropy,
    rho: Option<&'a [f64]>,
}

impl Damp<'_> {
    #[inline]
    fn apply(&self, eps: f64, i: usize, p: f64) -> f64 {
        match self.rho {
            Some(r) => kl_damp(r[i], eps, p),
            None => self.entropy.damp(eps, p),
        }
    }
}

fn half_update_inner(
    eps: f64,
    damp: Damp<'_>,
    log_w_other: &[f64],
    pot_other: &[f64],
    cost_rows: &CostMatrix,
    out: &mut [f64],
) {
    let inv = 1.0 / eps;
    let shift: Vec<f64> = log_w_other.iter().zip(pot_other).map(|(lw, p)| lw + p * inv).collect();
    let row = |scratch: &mut Vec<f64>, (i, o): (usize, &mut f64)| {
        *o = damp.apply(eps, i, softmin_row(eps, &shift, cost_rows.row(i), scratch));
    };
    if cost_rows.rows() * cost_rows.cols() >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_iter_mut().enumerate().for_each_init(Vec::new, row);
    } else {
        let mut scratch = Vec::with_capacity(shift.len());
        out.iter_mut().enumerate().for_each(|item| row(&mut scratch, item));
    }
}

/// One Sinkhorn half-update: the potential on the support indexing the rows
/// of `cost_rows`, computed from `pot_other` on `m_other`.
pub fn half_update(
    eps: f64,
    entropy: &Entropy,
    m_other: &DiscreteMeasure,
    pot_other: &[f64],
    cost_rows: &CostMatrix,
) -> Result<Vec<f64>> {
    if m_other.is_null() {
        return Err(UotError::Domain("half-update against the null measure".into()));
    }
    if pot_other.len() != m_other.len() || cost_rows.cols() != m_other.len() {
        return Err(UotError::DimensionMismatch { expected: m_other.len(), found: pot_other.len() });
    }
    let mut out = vec![0.0; cost_rows.rows()];
    half_update_inner(
        eps,
        Damp { entropy: *entropy, rho: None },
        &m_other.log_weights(),
        pot_other,
        cost_rows,
        &mut out,
    );
    Ok(out)
}

/// Starting point of the iterations.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Init {
    /// Closed-form `eps -> inf` limits of the optimal potentials.
    #[default]
    Asymptotic,
    Zero,
    Provided {
        f: Vec<f64>,
        g: Vec<f64>,
    },
}

/// Per-atom KL strengths `rho(x_i)`, `rho(y_j)` for spatially varying
/// marginal penalties. Only valid together with a KL entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct KlRhoField {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub init: Init,
    pub record_history: bool,
    pub rho_field: Option<KlRhoField>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 10_000, init: Init::Asymptotic, record_history: false, rho_field: None }
    }
}

impl SolveOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn with_history(mut self) -> Self {
        self.record_history = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(UotError::InvalidOption(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(UotError::InvalidOption("max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

/// Sup-norm changes of `f` and `g` during one full sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepUpdate {
    pub f: f64,
    pub g: f64,
}

impl SweepUpdate {
    pub fn max(&self) -> f64 {
        self.f.max(self.g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub final_update: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update_history: Option<Vec<SweepUpdate>>,
}

impl SolveReport {
    fn infeasible() -> Self {
        Self { status: SolveStatus::Infeasible, iterations: 0, final_update: f64::NAN, update_history: None }
    }

    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

/// Dual potentials sampled on the two supports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPotentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub eps: f64,
    pub entropy: Entropy,
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    /// `None` when the problem is infeasible.
    pub potentials: Option<DualPotentials>,
    pub report: SolveReport,
}

impl SolveOutcome {
    /// The potentials, or an `Infeasible` error.
    pub fn feasible_potentials(&self) -> Result<&DualPotentials> {
        self.potentials.as_ref().ok_or_else(|| UotError::Infeasible("the marginal constraints cannot be met".into()))
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps.is_finite() && eps > 0.0 {
        Ok(())
    } else {
        Err(UotError::InvalidOption(format!("eps must be positive, got {eps}")))
    }
}

fn check_cost(cost: &CostMatrix, rows: usize, cols: usize) -> Result<()> {
    if cost.rows() != rows {
        return Err(UotError::DimensionMismatch { expected: rows, found: cost.rows() });
    }
    if cost.cols() != cols {
        return Err(UotError::DimensionMismatch { expected: cols, found: cost.cols() });
    }
    Ok(())
}

fn rho_field_for<'a>(
    entropy: &Entropy,
    field: Option<&'a KlRhoField>,
    n: usize,
    m: usize,
) -> Result<(Option<&'a [f64]>, Option<&'a [f64]>)> {
    let Some(field) = field else { return Ok((None, None)) };
    if !matches!(entropy, Entropy::Kl { .. }) {
        return Err(UotError::InvalidOption("a per-atom rho field needs the KL entropy".into()));
    }
    if field.alpha.len() != n || field.beta.len() != m {
        return Err(UotError::InvalidOption("rho field lengths do not match the measures".into()));
    }
    if field.alpha.iter().chain(&field.beta).any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(UotError::InvalidOption("rho field entries must be positive".into()));
    }
    Ok((Some(&field.alpha), Some(&field.beta)))
}

/// Solves the dual problem between `alpha` and `beta`; `cost` has one row
/// per atom of `alpha`.
pub fn solve(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    cost: &CostMatrix,
    entropy: &Entropy,
    eps: f64,
    opts: &SolveOptions,
) -> Result<SolveOutcome> {
    check_eps(eps)?;
    opts.validate()?;
    entropy.validate()?;
    if feasible(entropy, alpha.total_mass(), beta.total_mass()) == Feasibility::Infeasible {
        return Ok(SolveOutcome { potentials: None, report: SolveReport::infeasible() });
    }
    if alpha.is_null() || beta.is_null() {
        return Err(UotError::Domain("Sinkhorn iterations need two non-null measures".into()));
    }
    let (n, m) = (alpha.len(), beta.len());
    check_cost(cost, n, m)?;
    let (rho_a, rho_b) = rho_field_for(entropy, opts.rho_field.as_ref(), n, m)?;
    let cost_t = cost.transpose();

    let (mut f, mut g) = match &opts.init {
        Init::Asymptotic => {
            (entropy.init_potential(eps, alpha, beta, cost), entropy.init_potential(eps, beta, alpha, &cost_t))
        }
        Init::Zero => (vec![0.0; n], vec![0.0; m]),
        Init::Provided { f, g } => {
            if f.len() != n || g.len() != m {
                return Err(UotError::InvalidOption("provided potentials have the wrong length".into()));
            }
            (f.clone(), g.clone())
        }
    };

    let log_a = alpha.log_weights();
    let log_b = beta.log_weights();
    let damp_f = Damp { entropy: *entropy, rho: rho_a };
    let damp_g = Damp { entropy: *entropy, rho: rho_b };
    let mut f_next = vec![0.0; n];
    let mut g_next = vec![0.0; m];
    let mut history = opts.record_history.then(Vec::new);
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;
    let mut last = f64::INFINITY;

    for it in 1..=opts.max_iter {
        half_update_inner(eps, damp_g, &log_a, &f, &cost_t, &mut g_next);
        half_update_inner(eps, damp_f, &log_b, &g_next, cost, &mut f_next);
        let upd = SweepUpdate { f: sup_diff(&f_next, &f), g: sup_diff(&g_next, &g) };
        std::mem::swap(&mut f, &mut f_next);
        std::mem::swap(&mut g, &mut g_next);
        if !upd.f.is_finite() || !upd.g.is_finite() {
            return Err(UotError::Domain(format!("non-finite potentials after {it} iterations")));
        }
        if let Some(h) = history.as_mut() {
            h.push(upd);
        }
        iterations = it;
        last = upd.max();
        if last <= opts.tol {
            status = SolveStatus::Converged;
            break;
        }
    }

    Ok(SolveOutcome {
        potentials: Some(DualPotentials { f, g, eps, entropy: *entropy }),
        report: SolveReport { status, iterations, final_update: last, update_history: history },
    })
}

/// Symmetric problem `OT_eps(alpha, alpha)`: iterates the averaged map
/// `f <- (f + T(f)) / 2` until `|T(f) - f|_inf <= tol`. `cost` is the
/// `alpha`-to-`alpha` matrix. `init` may only be `Asymptotic`, `Zero` or a
/// `Provided` pair whose `f` is used.
pub fn solve_symmetric(
    alpha: &DiscreteMeasure,
    cost: &CostMatrix,
    entropy: &Entropy,
    eps: f64,
    opts: &SolveOptions,
) -> Result<(Vec<f64>, SolveReport)> {
    check_eps(eps)?;
    opts.validate()?;
    entropy.validate()?;
    if alpha.is_null() {
        return Err(UotError::Domain("symmetric solve on the null measure".into()));
    }
    let n = alpha.len();
    check_cost(cost, n, n)?;
    let (rho_a, _) = match opts.rho_field.as_ref() {
        Some(field) => rho_field_for(entropy, Some(field), n, field.beta.len())?,
        None => (None, None),
    };
    let mut f = match &opts.init {
        Init::Asymptotic => entropy.init_potential(eps, alpha, alpha, cost),
        Init::Zero => vec![0.0; n],
        Init::Provided { f, .. } => {
            if f.len() != n {
                return Err(UotError::InvalidOption("provided potential has the wrong length".into()));
            }
            f.clone()
        }
    };
    let log_a = alpha.log_weights();
    let damp = Damp { entropy: *entropy, rho: rho_a };
    let mut tf = vec![0.0; n];
    let mut history = opts.record_history.then(Vec::new);
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;
    let mut last = f64::INFINITY;
    for it in 1..=opts.max_iter {
        half_update_inner(eps, damp, &log_a, &f, cost, &mut tf);
        let res = sup_diff(&tf, &f);
        if !res.is_finite() {
            return Err(UotError::Domain(format!("non-finite symmetric potential after {it} iterations")));
        }
        if let Some(h) = history.as_mut() {
            h.push(SweepUpdate { f: res, g: res });
        }
        iterations = it;
        last = res;
        if res <= opts.tol {
            status = SolveStatus::Converged;
            break;
        }
        for (fi, ti) in f.iter_mut().zip(&tf) {
            *fi = 0.5 * (*fi + ti);
        }
    }
    Ok((f, SolveReport { status, iterations, final_update: last, update_history: history }))
}

/// Which potential of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// `f`, living on the first measure.
    A,
    /// `g`, living on the second measure.
    B,
}

/// Continuous extension of a potential through one Sinkhorn half-update:
/// the values at `points` of the potential paired with `pot_source` on
/// `m_source`.
pub fn extrapolate_from(
    eps: f64,
    entropy: &Entropy,
    m_source: &DiscreteMeasure,
    pot_source: &[f64],
    cost: &CostSpec,
    points: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let src: Vec<Vec<f64>> = m_source.points().map(|p| p.to_vec()).collect();
    let c = cost_matrix_points(points, &src, cost)?;
    half_update(eps, entropy, m_source, pot_source, &c)
}

/// Evaluates, at `points`, the potential living on the side opposite to
/// `source`: with `source = Side::B` this extends `f` using `(beta, g)`.
pub fn extrapolate(
    pots: &DualPotentials,
    source: Side,
    m_source: &DiscreteMeasure,
    cost: &CostSpec,
    points: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let pot = match source {
        Side::A => &pots.f,
        Side::B => &pots.g,
    };
    extrapolate_from(pots.eps, &pots.entropy, m_source, pot, cost, points)
}

/// The plan `pi_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)`, stored densely.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
}

impl TransportPlan {
    /// A plan from row-major nonnegative weights.
    pub fn from_weights(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(UotError::DimensionMismatch { expected: rows * cols, found: weights.len() });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(UotError::InvalidMeasure("plan weights must be finite and nonnegative".into()));
        }
        Ok(Self { rows, cols, weights })
    }

    /// The product plan `alpha x beta`.
    pub fn product(alpha: &DiscreteMeasure, beta: &DiscreteMeasure) -> Self {
        let weights = alpha.weights().iter().flat_map(|a| beta.weights().iter().map(move |b| a * b)).collect();
        Self { rows: alpha.len(), cols: beta.len(), weights }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.cols + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.weights.chunks(self.cols.max(1)).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.weights.chunks(self.cols.max(1)) {
            for (o, w) in out.iter_mut().zip(r) {
                *o += w;
            }
        }
        out
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// The plan as a measure on the product of the supports, atoms at the
    /// concatenated coordinates `(x_i, y_j)` in row-major order.
    pub fn to_product_measure(&self, alpha: &DiscreteMeasure, beta: &DiscreteMeasure) -> Result<DiscreteMeasure> {
        let mut points = Vec::with_capacity(self.weights.len());
        for i in 0..self.rows {
            for j in 0..self.cols {
                let mut p = alpha.point(i).to_vec();
                p.extend_from_slice(beta.point(j));
                points.push(p);
            }
        }
        DiscreteMeasure::new(self.weights.clone(), points)
    }
}

/// Log-weights of the implicit plan, row-major.
fn plan_log_weights(
    pots: &DualPotentials,
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    cost: &CostMatrix,
) -> Vec<f64> {
    let la = alpha.log_weights();
    let lb = beta.log_weights();
    let inv = 1.0 / pots.eps;
    let mut out = Vec::with_capacity(la.len() * lb.len());
    for (i, (lai, fi)) in la.iter().zip(&pots.f).enumerate() {
        for ((lbj, gj), c) in lb.iter().zip(&pots.g).zip(cost.row(i)) {
            out.push(lai + lbj + (fi + gj - c) * inv);
        }
    }
    out
}

pub fn implicit_plan(
    pots: &DualPotentials,
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    cost: &CostMatrix,
) -> Result<TransportPlan> {
    check_cost(cost, alpha.len(), beta.len())?;
    if pots.f.len() != alpha.len() || pots.g.len() != beta.len() {
        return Err(UotError::DimensionMismatch { expected: alpha.len(), found: pots.f.len() });
    }
    let weights = plan_log_weights(pots, alpha, beta, cost).into_iter().map(f64::exp).collect();
    Ok(TransportPlan { rows: alpha.len(), cols: beta.len(), weights })
}

/// `log m(pi)` for the implicit plan, by one stabilized reduction.
pub fn plan_log_mass(pots: &DualPotentials, alpha: &DiscreteMeasure, beta: &DiscreteMeasure, cost: &CostMatrix) -> f64 {
    lse(plan_log_weights(pots, alpha, beta, cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::cost_matrix;

    fn dirac(x: f64, w: f64) -> DiscreteMeasure {
        DiscreteMeasure::new(vec![w], vec![vec![x]]).unwrap()
    }

    #[test]
    fn lse_basics() {
        assert_eq!(lse([]), f64::NEG_INFINITY);
        assert!((lse([0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((lse([1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((lse([-1000.0, 0.0]) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn softmin_examples() {
        let m = dirac(0.0, 0.3);
        let v = softmin(0.5, &m, &[2.0]).unwrap();
        assert!((v - (2.0 - 0.5 * 0.3f64.ln())).abs() < 1e-14);
        let p = DiscreteMeasure::new(vec![0.25, 0.75], vec![vec![0.0], vec![1.0]]).unwrap();
        assert!((softmin(0.7, &p, &[4.2, 4.2]).unwrap() - 4.2).abs() < 1e-14);
        let h = DiscreteMeasure::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0]]).unwrap();
        let v = softmin(1e-3, &h, &[0.0, 1.0]).unwrap();
        assert!((v - 1e-3 * 2f64.ln()).abs() < 1e-15);
        assert!(softmin(1.0, &DiscreteMeasure::null(1), &[]).is_err());
    }

    #[test]
    fn half_update_examples() {
        let a = dirac(0.0, 1.0);
        let c0 = cost_matrix(&a, &a, &CostSpec::default()).unwrap();
        let f = half_update(1.0, &Entropy::Balanced, &a, &[0.0], &c0).unwrap();
        assert_eq!(f, vec![0.0]);
        let b = dirac(3f64.sqrt(), 1.0);
        let c = cost_matrix(&a, &b, &CostSpec::default()).unwrap();
        let (rho, eps) = (2.0, 0.5);
        let f = half_update(eps, &Entropy::kl(rho).unwrap(), &b, &[0.0], &c).unwrap();
        assert!((f[0] - rho * 3.0 / (rho + eps)).abs() < 1e-13);
    }

    #[test]
    fn dirac_pair_kl_closed_form() {
        let (rho, eps) = (1.0, 0.5);
        let a = dirac(0.0, 1.0);
        let b = dirac(2.0, 1.0);
        let c = cost_matrix(&a, &b, &CostSpec::default()).unwrap();
        let e = Entropy::kl(rho).unwrap();
        let out = solve(&a, &b, &c, &e, eps, &SolveOptions::default().with_tol(1e-13)).unwrap();
        let pots = out.potentials.unwrap();
        let want = rho * 4.0 / (2.0 * rho + eps);
        assert!(out.report.converged());
        assert!((pots.f[0] - want).abs() < 1e-12 && (pots.g[0] - want).abs() < 1e-12);
        // closed form is a fixed point of both half-updates
        let g = half_update(eps, &e, &a, &[want], &c.transpose()).unwrap();
        assert!((g[0] - want).abs() < 1e-12);
        let plan = implicit_plan(&pots, &a, &b, &c).unwrap();
        assert!((plan.total_mass() - (-4.0 / (2.0 * rho + eps)).exp()).abs() < 1e-12);
    }

    #[test]
    fn balanced_identical_diracs() {
        let a = dirac(1.0, 1.0);
        let c = cost_matrix(&a, &a, &CostSpec::default()).unwrap();
        let out = solve(&a, &a, &c, &Entropy::Balanced, 0.1, &SolveOptions::default()).unwrap();
        assert!(out.report.converged() && out.report.iterations <= 2);
        let pots = out.potentials.unwrap();
        assert_eq!((pots.f[0], pots.g[0]), (0.0, 0.0));
        let plan = implicit_plan(&pots, &a, &a, &c).unwrap().to_product_measure(&a, &a).unwrap();
        assert_eq!(plan.weights(), &[1.0]);
    }

    #[test]
    fn range_infeasible_status() {
        let a = dirac(0.0, 1.0);
        let b = dirac(1.0, 4.0);
        let c = cost_matrix(&a, &b, &CostSpec::default()).unwrap();
        let out = solve(&a, &b, &c, &Entropy::range(0.5, 1.5).unwrap(), 1.0, &SolveOptions::default()).unwrap();
        assert_eq!(out.report.status, SolveStatus::Infeasible);
        assert!(out.potentials.is_none());
    }

    #[test]
    fn symmetric_examples() {
        let a = dirac(0.3, 1.0);
        let c = cost_matrix(&a, &a, &CostSpec::default()).unwrap();
        let (f, rep) = solve_symmetric(&a, &c, &Entropy::kl(1.0).unwrap(), 0.1, &SolveOptions::default()).unwrap();
        assert!(rep.converged());
        assert_eq!(f, vec![0.0]);

        let two = DiscreteMeasure::new(vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]]).unwrap();
        let c = cost_matrix(&two, &two, &CostSpec::default()).unwrap();
        let (f, rep) = solve_symmetric(&two, &c, &Entropy::Balanced, 0.5, &SolveOptions::default()).unwrap();
        assert!(rep.converged());
        assert!((f[0] - f[1]).abs() <= 1e-10);

        let e = Entropy::kl(0.5).unwrap();
        let (f, _) = solve_symmetric(&two, &c, &e, 0.5, &SolveOptions::default().with_tol(1e-12)).unwrap();
        let opts = SolveOptions::default().with_init(Init::Provided { f: f.clone(), g: f.clone() });
        let out = solve(&two, &two, &c, &e, 0.5, &opts).unwrap();
        assert!(out.report.iterations == 1 && out.report.final_update <= 2e-12);
    }

    #[test]
    fn extrapolation_examples() {
        let a = DiscreteMeasure::new(vec![0.4, 0.6], vec![vec![0.0], vec![1.0]]).unwrap();
        let b = DiscreteMeasure::new(vec![0.5, 0.7], vec![vec![0.2], vec![2.0]]).unwrap();
        let cs = CostSpec::default();
        let c = cost_matrix(&a, &b, &cs).unwrap();
        let e = Entropy::kl(1.0).unwrap();
        let tol = 1e-11;
        let out = solve(&a, &b, &c, &e, 0.3, &SolveOptions::default().with_tol(tol)).unwrap();
        let pots = out.potentials.unwrap();
        let apts: Vec<Vec<f64>> = a.points().map(|p| p.to_vec()).collect();
        let f = extrapolate(&pots, Side::B, &b, &cs, &apts).unwrap();
        for (x, y) in f.iter().zip(&pots.f) {
            assert!((x - y).abs() <= 2.0 * tol);
        }
        let bpts: Vec<Vec<f64>> = b.points().map(|p| p.to_vec()).collect();
        let g = extrapolate(&pots, Side::A, &a, &cs, &bpts).unwrap();
        for (x, y) in g.iter().zip(&pots.g) {
            assert!((x - y).abs() <= 2.0 * tol);
        }

        let single = dirac(0.0, 1.0);
        let pts = vec![vec![1.5]];
        let pot = DualPotentials { f: vec![0.2], g: vec![], eps: 0.3, entropy: e };
        let v = extrapolate(&pot, Side::A, &single, &cs, &pts).unwrap();
        assert!((v[0] - e.damp(0.3, 2.25 - 0.2)).abs() < 1e-14);
    }

    #[test]
    fn balanced_extrapolation_is_lipschitz() {
        let a = DiscreteMeasure::new(vec![0.2, 0.5, 0.3], vec![vec![0.1], vec![0.5], vec![0.9]]).unwrap();
        let b = DiscreteMeasure::new(vec![0.6, 0.4], vec![vec![0.0], vec![1.0]]).unwrap();
        let cs = CostSpec::default();
        let c = cost_matrix(&a, &b, &cs).unwrap();
        let out = solve(&a, &b, &c, &Entropy::Balanced, 0.05, &SolveOptions::default()).unwrap();
        let pots = out.potentials.unwrap();
        let grid: Vec<Vec<f64>> = (0..=100).map(|k| vec![k as f64 / 100.0]).collect();
        let f = extrapolate(&pots, Side::B, &b, &cs, &grid).unwrap();
        // |x - y|^2 is 2-Lipschitz in x on [0, 1] against support in [0, 1]
        let lip = cs.lipschitz_bound(1.0);
        for w in f.windows(2) {
            assert!((w[1] - w[0]).abs() / 0.01 <= lip + 1e-6);
        }
    }

    #[test]
    fn kl_rho_field_constant_matches_scalar() {
        let a = DiscreteMeasure::new(vec![0.4, 0.6], vec![vec![0.0], vec![1.0]]).unwrap();
        let b = DiscreteMeasure::new(vec![0.5, 0.7], vec![vec![0.2], vec![2.0]]).unwrap();
        let c = cost_matrix(&a, &b, &CostSpec::default()).unwrap();
        let e = Entropy::kl(0.8).unwrap();
        let plain = solve(&a, &b, &c, &e, 0.3, &SolveOptions::default()).unwrap();
        let mut opts = SolveOptions::default();
        opts.rho_field = Some(KlRhoField { alpha: vec![0.8; 2], beta: vec![0.8; 2] });
        let field = solve(&a, &b, &c, &e, 0.3, &opts).unwrap();
        assert_eq!(plain.potentials.unwrap().f, field.potentials.unwrap().f);
        opts.rho_field = Some(KlRhoField { alpha: vec![0.1, 5.0], beta: vec![0.8; 2] });
        assert!(solve(&a, &b, &c, &e, 0.3, &opts).unwrap().report.converged());
        assert!(solve(&a, &b, &c, &Entropy::tv(1.0).unwrap(), 0.3, &opts).is_err());
    }

    #[test]
    fn potentials_json_schema() {
        let p = DualPotentials { f: vec![0.5], g: vec![-1.0, 2.0], eps: 0.1, entropy: Entropy::kl(1.0).unwrap() };
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["entropy"], "kl:rho=1");
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["entropy", "eps", "f", "g"]);
        let back: DualPotentials = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }
}
