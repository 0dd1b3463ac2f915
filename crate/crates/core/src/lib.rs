//! Unbalanced entropic optimal transport between discrete measures.

pub mod check;
pub mod divergences;
pub mod entropies;
pub mod error;
pub mod flows;
pub mod io;
pub mod lambert;
pub mod measures;
pub mod oracle;
pub mod sinkhorn;
pub mod synthetic;

pub use divergences::{
    grad_positions, grad_weights, gradients, hausdorff_divergence, kernel_lower_bound, ot_eps, sinkhorn_divergence,
    sinkhorn_entropy, subgradient_weights, DivergenceConfig, DivergenceValue, GradRequest, Gradients, Target, Warm,
};
pub use entropies::{feasible, Entropy, ExtendedReal, Feasibility};
pub use error::{Result, UotError};
pub use flows::{flow_step, run_flow, Flow, FlowParams, FlowState, MassRate, Snapshot};
pub use lambert::{lambert_w, lambert_w_log};
pub use measures::{cost_matrix, cost_matrix_points, CostKind, CostMatrix, CostSpec, DiscreteMeasure};
pub use oracle::{dirac_pair_value, duality_gap, fd_gradient, fd_measure_gradient, primal_cost, GapReport};
pub use sinkhorn::{
    extrapolate, extrapolate_from, half_update, implicit_plan, lse, softmin, solve, solve_symmetric, DualPotentials,
    Init, KlRhoField, Side, SolveOptions, SolveOutcome, SolveReport, SolveStatus, SweepUpdate, TransportPlan,
};
