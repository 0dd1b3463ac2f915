//! Particle gradient flow of `alpha -> S_eps(alpha, beta)`.
//!
//! The source is `alpha = sum_i r_i^2 delta_{x_i}`. Positions take explicit
//! gradient steps and the mass parameters take multiplicative (mirror)
//! steps, so `r_i` stays positive:
//!
//! ```text
//! x_i <- x_i - eta_x grad_{x_i} S
//! r_i <- r_i exp(-2 eta grad_{r_i} S),   grad_{r_i} S = 2 r_i grad_{alpha_i} S
//! ```

use crate::divergences::{gradients, DivergenceConfig, GradRequest, Target, Warm};
use crate::entropies::Entropy;
use crate::error::{Result, UotError};
use crate::measures::{CostSpec, DiscreteMeasure};
use crate::sinkhorn::SolveOptions;

/// Potentials carried from one step to the next.
#[derive(Clone, Debug, Default)]
struct FlowWarm {
    cross: Option<(Vec<f64>, Vec<f64>)>,
    alpha_self: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct FlowState {
    pub positions: Vec<Vec<f64>>,
    /// Square roots of the particle masses.
    pub r: Vec<f64>,
    pub step: usize,
    warm: FlowWarm,
}

/// Equality of the particles; cached potentials are ignored.
impl PartialEq for FlowState {
    fn eq(&self, other: &Self) -> bool {
        self.positions == other.positions && self.r == other.r && self.step == other.step
    }
}

impl FlowState {
    pub fn new(positions: Vec<Vec<f64>>, r: Vec<f64>) -> Result<Self> {
        if positions.len() != r.len() {
            return Err(UotError::DimensionMismatch { expected: positions.len(), found: r.len() });
        }
        if r.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(UotError::InvalidMeasure("mass parameters must be positive".into()));
        }
        Ok(Self { positions, r, step: 0, warm: FlowWarm::default() })
    }

    /// Particles at the atoms of `m`, with `r_i = sqrt(w_i)`.
    pub fn from_measure(m: &DiscreteMeasure) -> Self {
        Self {
            positions: m.points().map(|p| p.to_vec()).collect(),
            r: m.weights().iter().map(|w| w.sqrt()).collect(),
            step: 0,
            warm: FlowWarm::default(),
        }
    }

    pub fn masses(&self) -> Vec<f64> {
        self.r.iter().map(|r| r * r).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.r.iter().map(|r| r * r).sum()
    }

    pub fn measure(&self) -> Result<DiscreteMeasure> {
        DiscreteMeasure::new(self.masses(), self.positions.clone())
    }
}

/// Step size in the exponent of the mass update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MassRate {
    /// `exp(-2 eta_x grad_r S)`.
    #[default]
    Printed,
    /// `exp(-2 eta_r grad_r S)`.
    EtaR,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams {
    pub eta_x: f64,
    pub eta_r: f64,
    pub eps: f64,
    pub entropy: Entropy,
    pub steps: usize,
    pub mass_updates: bool,
    pub mass_rate: MassRate,
    pub solve: SolveOptions,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            eta_x: 60.0,
            eta_r: 0.3,
            eps: 1e-3,
            entropy: Entropy::Kl { rho: 0.1 },
            steps: 300,
            mass_updates: true,
            mass_rate: MassRate::Printed,
            solve: SolveOptions { tol: 1e-6, max_iter: 5_000, ..SolveOptions::default() },
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_x >= 0.0 && self.eta_r >= 0.0) {
            return Err(UotError::InvalidOption("learning rates must be nonnegative".into()));
        }
        if !(self.eps > 0.0) {
            return Err(UotError::InvalidOption("eps must be positive".into()));
        }
        self.entropy.validate()?;
        self.solve.validate()
    }

    /// Mass updates, unless the entropy pins the masses.
    pub fn moves_mass(&self) -> bool {
        self.mass_updates && self.entropy != Entropy::Balanced
    }

    fn mass_step(&self) -> f64 {
        match self.mass_rate {
            MassRate::Printed => self.eta_x,
            MassRate::EtaR => self.eta_r,
        }
    }
}

/// Flow towards a fixed target; caches the target's symmetric potential.
pub struct Flow<'a> {
    target: &'a DiscreteMeasure,
    cost: CostSpec,
    params: FlowParams,
    target_self: Option<Vec<f64>>,
}

impl<'a> Flow<'a> {
    pub fn new(target: &'a DiscreteMeasure, cost: CostSpec, params: FlowParams) -> Result<Self> {
        params.validate()?;
        if target.is_null() {
            return Err(UotError::Domain("flow towards the null measure".into()));
        }
        Ok(Self { target, cost, params, target_self: None })
    }

    pub fn params(&self) -> &FlowParams {
        &self.params
    }

    fn config(&self, state: &FlowState) -> DivergenceConfig {
        DivergenceConfig {
            cost: self.cost,
            entropy: self.params.entropy,
            eps: self.params.eps,
            solve: self.params.solve.clone(),
            warm: Warm {
                cross: state.warm.cross.clone(),
                alpha_self: state.warm.alpha_self.clone(),
                beta_self: self.target_self.clone(),
            },
        }
    }

    /// `S_eps(alpha_theta, beta)` and its gradients at `state`; stores the
    /// potentials in `state` for the next evaluation.
    fn evaluate(&mut self, state: &mut FlowState, weights: bool) -> Result<(f64, Option<Vec<f64>>, Vec<Vec<f64>>)> {
        let alpha = state.measure()?;
        if alpha.len() != state.r.len() {
            return Err(UotError::Domain("a particle mass underflowed to zero".into()));
        }
        let cfg = self.config(state);
        let req = GradRequest { weights, positions: true, subgradient: true };
        let (g, v) = gradients(&alpha, self.target, &cfg, Target::S, req)?;
        let s = v.value.finite().ok_or_else(|| UotError::Infeasible("S_eps is infinite along the flow".into()))?;
        state.warm.cross = v.potentials.map(|p| (p.f, p.g));
        state.warm.alpha_self = v.alpha_self;
        if v.beta_self.is_some() {
            self.target_self = v.beta_self;
        }
        Ok((s, g.d_weights_a, g.d_points_a.unwrap_or_default()))
    }

    /// Current value of the divergence.
    pub fn value(&mut self, state: &mut FlowState) -> Result<f64> {
        Ok(self.evaluate(state, false)?.0)
    }

    /// One synchronous update of every particle. Returns the new state and
    /// `S_eps` at the old one.
    pub fn step(&mut self, state: &FlowState) -> Result<(FlowState, f64)> {
        let mut cur = state.clone();
        let moves_mass = self.params.moves_mass();
        let (s, dw, dx) = self.evaluate(&mut cur, moves_mass)?;
        let mut next = cur.clone();
        let eta_x = self.params.eta_x;
        for (x, g) in next.positions.iter_mut().zip(&dx) {
            x.iter_mut().zip(g).for_each(|(xi, gi)| *xi -= eta_x * gi);
        }
        if let (true, Some(dw)) = (moves_mass, dw) {
            let eta = self.params.mass_step();
            for (r, d) in next.r.iter_mut().zip(&dw) {
                let grad_r = 2.0 * *r * d;
                *r *= (-2.0 * eta * grad_r).exp();
            }
        }
        next.step += 1;
        Ok((next, s))
    }
}

/// One flow step with no cached target potential.
pub fn flow_step(
    state: &FlowState,
    target: &DiscreteMeasure,
    cost: &CostSpec,
    params: &FlowParams,
) -> Result<FlowState> {
    Ok(Flow::new(target, *cost, params.clone())?.step(state)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub state: FlowState,
    pub s_eps: f64,
}

/// Runs `params.steps` steps, keeping the state every `snapshot_every`
/// steps (and always the first and last).
pub fn run_flow(
    init: &FlowState,
    target: &DiscreteMeasure,
    cost: &CostSpec,
    params: &FlowParams,
    snapshot_every: usize,
) -> Result<Vec<Snapshot>> {
    let every = snapshot_every.max(1);
    let mut flow = Flow::new(target, *cost, params.clone())?;
    let mut state = init.clone();
    let mut out = Vec::new();
    for t in 0..params.steps {
        let (next, s) = flow.step(&state)?;
        if t % every == 0 {
            out.push(Snapshot { state: state.clone(), s_eps: s });
        }
        state = next;
    }
    let s = flow.value(&mut state)?;
    out.push(Snapshot { state, s_eps: s });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params(entropy: Entropy) -> FlowParams {
        FlowParams {
            eps: 0.05,
            entropy,
            steps: 5,
            solve: SolveOptions { tol: 1e-11, max_iter: 20_000, ..SolveOptions::default() },
            ..FlowParams::default()
        }
    }

    #[test]
    fn state_at_target_does_not_move() {
        let t = DiscreteMeasure::new(vec![0.4, 0.6], vec![vec![0.1, 0.2], vec![0.7, 0.5]]).unwrap();
        let s0 = FlowState::from_measure(&t);
        let s1 = flow_step(&s0, &t, &CostSpec::default(), &small_params(Entropy::kl(0.1).unwrap())).unwrap();
        for (a, b) in s0.positions.iter().flatten().zip(s1.positions.iter().flatten()) {
            assert!((a - b).abs() <= 1e-8);
        }
        for (a, b) in s0.r.iter().zip(&s1.r) {
            assert!((a - b).abs() <= 1e-8);
        }
        assert_eq!(s1.step, 1);
    }

    #[test]
    fn single_particle_moves_towards_target() {
        let t = DiscreteMeasure::new(vec![1.0], vec![vec![0.8, 0.3]]).unwrap();
        let s0 = FlowState::new(vec![vec![0.2, 0.6]], vec![1.0]).unwrap();
        let mut p = small_params(Entropy::kl(0.1).unwrap());
        p.eta_x = 0.1;
        let s1 = flow_step(&s0, &t, &CostSpec::default(), &p).unwrap();
        assert!(s1.positions[0][0] > 0.2 && s1.positions[0][1] < 0.6);
    }

    #[test]
    fn mass_updates_off_keeps_r_bitwise() {
        let t = DiscreteMeasure::new(vec![0.5, 1.0], vec![vec![0.1, 0.2], vec![0.7, 0.5]]).unwrap();
        let s0 = FlowState::new(vec![vec![0.3, 0.3], vec![0.5, 0.9]], vec![0.9, 0.4]).unwrap();
        let mut p = small_params(Entropy::kl(0.1).unwrap());
        p.mass_updates = false;
        let s1 = flow_step(&s0, &t, &CostSpec::default(), &p).unwrap();
        assert_eq!(s0.r, s1.r);
    }

    #[test]
    fn zero_rates_keep_trajectory_constant() {
        let t = DiscreteMeasure::new(vec![0.5, 1.0], vec![vec![0.1, 0.2], vec![0.7, 0.5]]).unwrap();
        let s0 = FlowState::new(vec![vec![0.3, 0.3], vec![0.5, 0.9]], vec![0.9, 0.4]).unwrap();
        let mut p = small_params(Entropy::kl(0.1).unwrap());
        p.eta_x = 0.0;
        p.eta_r = 0.0;
        let snaps = run_flow(&s0, &t, &CostSpec::default(), &p, 1).unwrap();
        assert_eq!(snaps.len(), p.steps + 1);
        for s in &snaps {
            assert_eq!(s.state.positions, s0.positions);
            assert_eq!(s.state.r, s0.r);
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let t = DiscreteMeasure::new(vec![1.0], vec![vec![0.5, 0.5]]).unwrap();
        let s0 = FlowState::new(vec![vec![0.3, 0.3]], vec![1.0]).unwrap();
        let mut p = small_params(Entropy::kl(0.1).unwrap());
        p.steps = 0;
        let snaps = run_flow(&s0, &t, &CostSpec::default(), &p, 10).unwrap();
        assert_eq!(snaps.len(), 1);
        assert_eq!(snaps[0].state, s0);
    }

    #[test]
    fn balanced_flow_moves_positions_only() {
        let t = DiscreteMeasure::new(vec![0.5, 0.5], vec![vec![0.1, 0.2], vec![0.7, 0.5]]).unwrap();
        let s0 = FlowState::new(vec![vec![0.3, 0.3], vec![0.5, 0.9]], vec![0.5f64.sqrt(); 2]).unwrap();
        let p = small_params(Entropy::Balanced);
        let s1 = flow_step(&s0, &t, &CostSpec::default(), &p).unwrap();
        assert_eq!(s0.r, s1.r);
        assert_ne!(s0.positions, s1.positions);
    }

    #[test]
    fn tv_flow_updates_masses() {
        let t = DiscreteMeasure::new(vec![0.5, 0.5], vec![vec![0.1, 0.2], vec![0.7, 0.5]]).unwrap();
        let s0 = FlowState::new(vec![vec![0.3, 0.3], vec![0.5, 0.9]], vec![1.0, 1.0]).unwrap();
        let p = small_params(Entropy::tv(0.1).unwrap());
        let s1 = flow_step(&s0, &t, &CostSpec::default(), &p).unwrap();
        assert!(s1.r.iter().all(|r| *r > 0.0));
        assert!(s1.total_mass() < s0.total_mass());
    }
}
