//! Csiszár entropies `phi`, their Legendre conjugates `phi*`, and the
//! dampening maps `p -> -aprox^eps_{phi*}(-p)` applied between Sinkhorn
//! half-updates.
//!
//! The Moreau-type identity linking `aprox` to a KL Bregman proximal map is
//! not used anywhere; every dampening map below is in closed form or goes
//! through the Lambert W function.

use std::fmt;
use std::ops::{Add, Mul};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::lambert::lambert_w_log;
use crate::measures::{CostMatrix, DiscreteMeasure};

/// A real number or `+inf`; sums saturate at `+inf`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExtendedReal {
    Finite(f64),
    PosInf,
}

impl ExtendedReal {
    pub const ZERO: Self = Self::Finite(0.0);

    pub fn is_finite(self) -> bool {
        matches!(self, Self::Finite(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Self::Finite(v) => Some(v),
            Self::PosInf => None,
        }
    }

    /// `f64` view, `+inf` mapped to `f64::INFINITY`.
    pub fn to_f64(self) -> f64 {
        match self {
            Self::Finite(v) => v,
            Self::PosInf => f64::INFINITY,
        }
    }
}

impl From<f64> for ExtendedReal {
    fn from(v: f64) -> Self {
        if v == f64::INFINITY {
            Self::PosInf
        } else {
            Self::Finite(v)
        }
    }
}

impl Add for ExtendedReal {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        match (self, rhs) {
            (Self::Finite(a), Self::Finite(b)) => Self::Finite(a + b),
            _ => Self::PosInf,
        }
    }
}

/// Scaling by a nonnegative factor, with `0 * inf = 0`.
impl Mul<ExtendedReal> for f64 {
    type Output = ExtendedReal;
    fn mul(self, rhs: ExtendedReal) -> ExtendedReal {
        match rhs {
            ExtendedReal::Finite(v) => ExtendedReal::Finite(self * v),
            ExtendedReal::PosInf if self == 0.0 => ExtendedReal::ZERO,
            ExtendedReal::PosInf => ExtendedReal::PosInf,
        }
    }
}

impl PartialOrd for ExtendedReal {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.to_f64().partial_cmp(&other.to_f64())
    }
}

impl fmt::Display for ExtendedReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(v) => write!(f, "{v}"),
            Self::PosInf => write!(f, "inf"),
        }
    }
}

/// The entropy function `phi` defining the marginal penalty `D_phi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Entropy {
    /// Hard marginal constraints, `phi = indicator{1}`.
    Balanced,
    /// `rho (p log p - p + 1)`
    Kl { rho: f64 },
    /// `rho |p - 1|`
    Tv { rho: f64 },
    /// Indicator of `[a, b]`, `0 <= a <= 1 <= b`.
    Range { a: f64, b: f64 },
    /// `rho / (s (s - 1)) (p^s - s (p - 1) - 1)`, `s < 1`, `s != 0`.
    /// `s = 1/2` is the Hellinger entropy.
    Power { rho: f64, s: f64 },
    /// `rho (p - 1 - log p)`, the `s -> 0` limit of `Power`.
    Berg { rho: f64 },
}

/// Result of the mass feasibility test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feasibility {
    Feasible,
    Infeasible,
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.is_finite() && rho > 0.0 {
        Ok(())
    } else {
        Err(UotError::InvalidEntropy(format!("rho must be positive, got {rho}")))
    }
}

impl Entropy {
    pub fn kl(rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(Self::Kl { rho })
    }

    pub fn tv(rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(Self::Tv { rho })
    }

    pub fn range(a: f64, b: f64) -> Result<Self> {
        let e = Self::Range { a, b };
        e.validate()?;
        Ok(e)
    }

    pub fn power(rho: f64, s: f64) -> Result<Self> {
        let e = Self::Power { rho, s };
        e.validate()?;
        Ok(e)
    }

    pub fn hellinger(rho: f64) -> Result<Self> {
        Self::power(rho, 0.5)
    }

    pub fn berg(rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(Self::Berg { rho })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Balanced => Ok(()),
            Self::Kl { rho } | Self::Tv { rho } | Self::Berg { rho } => check_rho(rho),
            Self::Range { a, b } => {
                if a.is_finite() && b.is_finite() && (0.0..=1.0).contains(&a) && 1.0 <= b {
                    Ok(())
                } else {
                    Err(UotError::InvalidEntropy(format!("range needs 0 <= a <= 1 <= b, got a={a}, b={b}")))
                }
            }
            Self::Power { rho, s } => {
                check_rho(rho)?;
                if s.is_finite() && s < 1.0 && s != 0.0 {
                    Ok(())
                } else {
                    Err(UotError::InvalidEntropy(format!("power entropy needs s < 1 and s != 0, got {s}")))
                }
            }
        }
    }

    /// Strength parameter, if the entropy has one.
    pub fn rho(&self) -> Option<f64> {
        match *self {
            Self::Kl { rho } | Self::Tv { rho } | Self::Power { rho, .. } | Self::Berg { rho } => Some(rho),
            _ => None,
        }
    }

    /// Conjugate exponent `r = s / (s - 1)` of power entropies (`0` for Berg).
    pub fn dual_exponent(&self) -> Option<f64> {
        match *self {
            Self::Power { s, .. } => Some(s / (s - 1.0)),
            Self::Berg { .. } => Some(0.0),
            _ => None,
        }
    }

    /// Entropies with a strictly convex, differentiable conjugate: the
    /// setting in which `OT_eps` is differentiable in the weights.
    pub fn is_smooth(&self) -> bool {
        matches!(self, Self::Kl { .. } | Self::Power { .. } | Self::Berg { .. })
    }

    /// The entropy `factor * phi`.
    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            Self::Kl { rho } => Self::Kl { rho: rho * factor },
            Self::Tv { rho } => Self::Tv { rho: rho * factor },
            Self::Power { rho, s } => Self::Power { rho: rho * factor, s },
            Self::Berg { rho } => Self::Berg { rho: rho * factor },
            other => other,
        }
    }

    /// `phi(p)`, with `phi(p) = +inf` for `p < 0`.
    pub fn phi(&self, p: f64) -> ExtendedReal {
        use ExtendedReal::{Finite, PosInf};
        if p.is_nan() || p < 0.0 {
            return PosInf;
        }
        match *self {
            Self::Balanced => {
                if p == 1.0 {
                    Finite(0.0)
                } else {
                    PosInf
                }
            }
            Self::Kl { rho } => {
                let plogp = if p == 0.0 { 0.0 } else { p * p.ln() };
                Finite(rho * (plogp - p + 1.0))
            }
            Self::Tv { rho } => Finite(rho * (p - 1.0).abs()),
            Self::Range { a, b } => {
                if a <= p && p <= b {
                    Finite(0.0)
                } else {
                    PosInf
                }
            }
            Self::Power { rho, s } => {
                if p == 0.0 && s < 0.0 {
                    return PosInf;
                }
                Finite(rho / (s * (s - 1.0)) * (p.powf(s) - s * (p - 1.0) - 1.0))
            }
            Self::Berg { rho } => {
                if p == 0.0 {
                    PosInf
                } else {
                    Finite(rho * (p - 1.0 - p.ln()))
                }
            }
        }
    }

    /// Legendre conjugate `phi*(q) = sup_{p >= 0} p q - phi(p)`.
    pub fn phi_conj(&self, q: f64) -> ExtendedReal {
        use ExtendedReal::{Finite, PosInf};
        if q.is_nan() {
            return PosInf;
        }
        match *self {
            Self::Balanced => Finite(q),
            Self::Kl { rho } => Finite(rho * (q / rho).exp_m1()),
            Self::Tv { rho } => {
                if q <= rho {
                    Finite(q.max(-rho))
                } else {
                    PosInf
                }
            }
            Self::Range { a, b } => Finite((a * q).max(b * q)),
            Self::Power { rho, s } => {
                let r = s / (s - 1.0);
                let base = 1.0 + q / (rho * (r - 1.0));
                let ok = if r < 0.0 { base > 0.0 } else { base >= 0.0 };
                if !ok {
                    return PosInf;
                }
                Finite(rho * (r - 1.0) / r * (base.powf(r) - 1.0))
            }
            Self::Berg { rho } => {
                if q < rho {
                    Finite(-rho * (-q / rho).ln_1p())
                } else {
                    PosInf
                }
            }
        }
    }

    /// Derivative of `phi*` at `q`, where it exists.
    pub fn phi_conj_grad(&self, q: f64) -> Option<f64> {
        match *self {
            Self::Balanced => Some(1.0),
            Self::Kl { rho } => Some((q / rho).exp()),
            Self::Tv { rho } => {
                if q < -rho {
                    Some(0.0)
                } else if q > -rho && q < rho {
                    Some(1.0)
                } else {
                    None
                }
            }
            Self::Range { a, b } => {
                if q < 0.0 {
                    Some(a)
                } else if q > 0.0 {
                    Some(b)
                } else {
                    None
                }
            }
            Self::Power { rho, s } => {
                let r = s / (s - 1.0);
                let base = 1.0 + q / (rho * (r - 1.0));
                if base > 0.0 {
                    Some(base.powf(r - 1.0))
                } else {
                    None
                }
            }
            Self::Berg { rho } => {
                if q < rho {
                    Some(1.0 / (1.0 - q / rho))
                } else {
                    None
                }
            }
        }
    }

    /// `phi(0)`, the price of destroying a unit of mass.
    pub fn phi_at_zero(&self) -> ExtendedReal {
        self.phi(0.0)
    }

    /// The dampening map `p -> -aprox^eps_{phi*}(-p)`.
    pub fn damp(&self, eps: f64, p: f64) -> f64 {
        match *self {
            Self::Balanced => p,
            Self::Kl { rho } => kl_damp(rho, eps, p),
            Self::Tv { rho } => p.clamp(-rho, rho),
            Self::Range { a, b } => {
                // Knees at -eps log b <= 0 <= -eps log a; the upper one is
                // absent when a = 0.
                let lo = -eps * b.ln();
                if p < lo {
                    return p - lo;
                }
                if a > 0.0 {
                    let hi = -eps * a.ln();
                    if p > hi {
                        return p - hi;
                    }
                }
                0.0
            }
            Self::Power { rho, s } => power_damp(rho, s / (s - 1.0), eps, p),
            Self::Berg { rho } => power_damp(rho, 0.0, eps, p),
        }
    }

    /// Warm start "at eps = +inf" for the potential living on `self_m`'s
    /// support. `cost` has one row per atom of `self_m` and one column per
    /// atom of `other_m`.
    pub fn init_potential(
        &self,
        eps: f64,
        self_m: &DiscreteMeasure,
        other_m: &DiscreteMeasure,
        cost: &CostMatrix,
    ) -> Vec<f64> {
        let n = self_m.len();
        if other_m.is_null() {
            return vec![0.0; n];
        }
        let m_other = other_m.total_mass();
        let centered_convolution = || -> Vec<f64> {
            let conv: Vec<f64> =
                (0..n).map(|i| cost.row(i).iter().zip(other_m.weights()).map(|(c, w)| c * w).sum::<f64>()).collect();
            let mean: f64 = conv.iter().zip(self_m.weights()).map(|(c, w)| c * w).sum();
            conv.iter().map(|c| c - 0.5 * mean).collect()
        };
        let out: Vec<f64> = match *self {
            Self::Balanced => centered_convolution(),
            Self::Kl { rho } => vec![-rho * m_other.ln(); n],
            Self::Range { .. } => vec![0.0; n],
            Self::Tv { rho } => {
                let lm = m_other.ln();
                if lm.abs() > 1e-12 {
                    vec![-rho * lm.signum(); n]
                } else {
                    centered_convolution().into_iter().map(|p| self.damp(eps, p)).collect()
                }
            }
            Self::Power { .. } | Self::Berg { .. } => {
                let rho = self.rho().unwrap_or(1.0);
                let r = self.dual_exponent().unwrap_or(0.0);
                vec![rho * (1.0 - r) * (m_other.powf(1.0 / (r - 1.0)) - 1.0); n]
            }
        };
        if out.iter().all(|v| v.is_finite()) {
            out
        } else {
            vec![0.0; n]
        }
    }
}

/// `rho / (rho + eps) * p`; also the per-location map of a spatially
/// varying KL penalty.
pub fn kl_damp(rho: f64, eps: f64, p: f64) -> f64 {
    p * (rho / (rho + eps))
}

// Closed form through Lambert W, evaluated on log(Delta) so that Delta itself
// is never formed.
fn power_damp(rho: f64, r: f64, eps: f64, p: f64) -> f64 {
    let k = 1.0 - r;
    let log_delta = (rho / eps).ln() + (p + rho * k) / (eps * k);
    eps * k * lambert_w_log(log_delta) - rho * k
}

/// Whether `OT_eps` between measures of masses `mass_a`, `mass_b` is finite.
pub fn feasible(entropy: &Entropy, mass_a: f64, mass_b: f64) -> Feasibility {
    let null_a = mass_a == 0.0;
    let null_b = mass_b == 0.0;
    if null_a != null_b && !entropy.phi_at_zero().is_finite() {
        return Feasibility::Infeasible;
    }
    let ok = match *entropy {
        Entropy::Balanced => (mass_a - mass_b).abs() <= BALANCED_MASS_RTOL * mass_a.max(mass_b),
        Entropy::Range { a, b } => a * mass_a.max(mass_b) <= b * mass_a.min(mass_b),
        _ => true,
    };
    if ok {
        Feasibility::Feasible
    } else {
        Feasibility::Infeasible
    }
}

/// Relative slack when comparing the two masses of a balanced problem.
pub const BALANCED_MASS_RTOL: f64 = 1e-10;

impl fmt::Display for Entropy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Balanced => write!(f, "balanced"),
            Self::Kl { rho } => write!(f, "kl:rho={rho}"),
            Self::Tv { rho } => write!(f, "tv:rho={rho}"),
            Self::Range { a, b } => write!(f, "range:a={a},b={b}"),
            Self::Power { rho, s } => write!(f, "power:rho={rho},s={s}"),
            Self::Berg { rho } => write!(f, "berg:rho={rho}"),
        }
    }
}

impl FromStr for Entropy {
    type Err = UotError;

    /// Parses `balanced`, `kl:rho=1.0`, `tv:rho=0.5`, `range:a=0.7,b=1.3`,
    /// `power:rho=1,s=0.5` or `berg:rho=1`.
    fn from_str(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        let (name, params) = match spec.split_once(':') {
            Some((n, p)) => (n.trim(), p.trim()),
            None => (spec, ""),
        };
        let mut values: Vec<(String, f64)> = Vec::new();
        if !params.is_empty() {
            for kv in params.split(',') {
                let (k, v) =
                    kv.split_once('=').ok_or_else(|| UotError::Parse(format!("expected key=value, got `{kv}`")))?;
                let v: f64 = v.trim().parse().map_err(|_| UotError::Parse(format!("bad number in `{kv}`")))?;
                values.push((k.trim().to_ascii_lowercase(), v));
            }
        }
        let get = |key: &str| -> Result<f64> {
            values
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| UotError::Parse(format!("`{name}` needs parameter `{key}`")))
        };
        let expect = |keys: &[&str]| -> Result<()> {
            for (k, _) in &values {
                if !keys.contains(&k.as_str()) {
                    return Err(UotError::Parse(format!("unknown parameter `{k}` for `{name}`")));
                }
            }
            Ok(())
        };
        match name.to_ascii_lowercase().as_str() {
            "balanced" => {
                expect(&[])?;
                Ok(Self::Balanced)
            }
            "kl" => {
                expect(&["rho"])?;
                Self::kl(get("rho")?)
            }
            "tv" => {
                expect(&["rho"])?;
                Self::tv(get("rho")?)
            }
            "range" => {
                expect(&["a", "b"])?;
                Self::range(get("a")?, get("b")?)
            }
            "power" => {
                expect(&["rho", "s"])?;
                Self::power(get("rho")?, get("s")?)
            }
            "berg" => {
                expect(&["rho"])?;
                Self::berg(get("rho")?)
            }
            other => Err(UotError::Parse(format!("unknown entropy `{other}`"))),
        }
    }
}

impl From<Entropy> for String {
    fn from(e: Entropy) -> String {
        e.to_string()
    }
}

impl TryFrom<String> for Entropy {
    type Error = UotError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}
