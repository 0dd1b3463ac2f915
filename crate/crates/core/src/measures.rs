//! Discrete measures on `R^d` and ground costs between their supports.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};

/// A finite sum of weighted Diracs `sum_i w_i delta_{x_i}`.
///
/// Every stored weight is strictly positive: zero-weight atoms are dropped
/// on construction so that `log(w_i)` stays finite inside log-sum-exp
/// reductions. The empty measure is the null measure.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    weights: Vec<f64>,
    coords: Vec<f64>,
    dim: usize,
}

impl DiscreteMeasure {
    /// Builds a measure, stripping zero-weight atoms and keeping the order of
    /// the survivors.
    pub fn new(weights: Vec<f64>, points: Vec<Vec<f64>>) -> Result<Self> {
        if weights.len() != points.len() {
            return Err(UotError::InvalidMeasure(format!("{} weights but {} points", weights.len(), points.len())));
        }
        let dim = points.first().map_or(0, Vec::len);
        let mut kept_w = Vec::with_capacity(weights.len());
        let mut coords = Vec::with_capacity(weights.len() * dim);
        for (i, (w, p)) in weights.into_iter().zip(points).enumerate() {
            if p.len() != dim {
                return Err(UotError::InvalidMeasure(format!("point {i} has dimension {}, expected {dim}", p.len())));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(UotError::InvalidMeasure(format!(
                    "weight {i} is {w}; weights must be finite and nonnegative"
                )));
            }
            if p.iter().any(|c| !c.is_finite()) {
                return Err(UotError::InvalidMeasure(format!("point {i} has a non-finite coordinate")));
            }
            if w > 0.0 {
                kept_w.push(w);
                coords.extend_from_slice(&p);
            }
        }
        Ok(Self { weights: kept_w, coords, dim })
    }

    /// Same as [`DiscreteMeasure::new`] with coordinates given as one flat
    /// row-major buffer.
    pub fn from_flat(weights: Vec<f64>, dim: usize, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != weights.len() * dim {
            return Err(UotError::InvalidMeasure(format!(
                "{} coordinates cannot hold {} points of dimension {dim}",
                coords.len(),
                weights.len()
            )));
        }
        let points =
            if dim == 0 { vec![Vec::new(); weights.len()] } else { coords.chunks(dim).map(<[f64]>::to_vec).collect() };
        Self::new(weights, points)
    }

    /// The null measure in dimension `dim`.
    pub fn null(dim: usize) -> Self {
        Self { weights: Vec::new(), coords: Vec::new(), dim }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// True for the null measure.
    pub fn is_null(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    /// Coordinates as one row-major buffer.
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// `m(alpha) = sum_i w_i`.
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.ln()).collect()
    }

    /// Replaces the weights, keeping the support. Zero weights are stripped.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(UotError::InvalidMeasure(format!(
                "{} weights for a support of {} atoms",
                weights.len(),
                self.len()
            )));
        }
        Self::from_flat(weights, self.dim, self.coords.clone())
    }

    /// Replaces the support, keeping the weights.
    pub fn with_coords(&self, coords: Vec<f64>) -> Result<Self> {
        Self::from_flat(self.weights.clone(), self.dim, coords)
    }

    /// The same measure with every weight multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        self.with_weights(self.weights.iter().map(|w| w * factor).collect())
    }
}

/// Shape of the ground cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CostKind {
    /// `|x - y|^2`
    SqEuclidean,
    /// `|x - y|^p` with `p >= 1`
    EuclideanPow(f64),
}

/// A symmetric ground cost `C(x, y) = scale * kind(x, y)` with `C(x, x) = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub kind: CostKind,
    pub scale: f64,
}

impl Default for CostSpec {
    fn default() -> Self {
        Self { kind: CostKind::SqEuclidean, scale: 1.0 }
    }
}

impl CostSpec {
    pub fn sq_euclidean() -> Self {
        Self::default()
    }

    pub fn euclidean_pow(p: f64) -> Result<Self> {
        Self::new(CostKind::EuclideanPow(p), 1.0)
    }

    pub fn new(kind: CostKind, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(UotError::InvalidOption(format!("cost scale must be positive, got {scale}")));
        }
        if let CostKind::EuclideanPow(p) = kind {
            if !(p.is_finite() && p >= 1.0) {
                return Err(UotError::InvalidOption(format!("cost exponent must be >= 1, got {p}")));
            }
        }
        Ok(Self { kind, scale })
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        let base = match self.kind {
            CostKind::SqEuclidean => sq,
            CostKind::EuclideanPow(p) if p == 2.0 => sq,
            CostKind::EuclideanPow(p) if p == 1.0 => sq.sqrt(),
            CostKind::EuclideanPow(p) => sq.powf(0.5 * p),
        };
        self.scale * base
    }

    /// Gradient of `x -> C(x, y)`, accumulated as `out += weight * grad`.
    ///
    /// Fails for `EuclideanPow(1)` at `x == y`, where the cost has a kink.
    pub fn add_grad_x(&self, x: &[f64], y: &[f64], weight: f64, out: &mut [f64]) -> Result<()> {
        let factor = match self.kind {
            CostKind::SqEuclidean => 2.0,
            CostKind::EuclideanPow(p) => {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                if sq == 0.0 {
                    if p == 1.0 {
                        return Err(UotError::Domain("|x - y| is not differentiable at coincident points".into()));
                    }
                    0.0
                } else if p == 2.0 {
                    2.0
                } else {
                    p * sq.powf(0.5 * p - 1.0)
                }
            }
        };
        let c = weight * self.scale * factor;
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o += c * (a - b);
        }
        Ok(())
    }

    /// Largest slope of `x -> C(x, y)` over a set of diameter `diam`.
    pub fn lipschitz_bound(&self, diam: f64) -> f64 {
        match self.kind {
            CostKind::SqEuclidean => 2.0 * self.scale * diam,
            CostKind::EuclideanPow(p) => self.scale * p * diam.powf(p - 1.0),
        }
    }
}

/// Dense `N x M` matrix of `C(x_i, y_j)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(UotError::InvalidOption(format!("{} entries for a {rows}x{cols} cost matrix", data.len())));
        }
        if data.iter().any(|c| !c.is_finite()) {
            return Err(UotError::InvalidOption("cost entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }
}

/// Materializes `C(x_i, y_j)` for every pair of support points.
pub fn cost_matrix(xs: &DiscreteMeasure, ys: &DiscreteMeasure, cost: &CostSpec) -> Result<CostMatrix> {
    if !xs.is_null() && !ys.is_null() && xs.dim() != ys.dim() {
        return Err(UotError::DimensionMismatch { expected: xs.dim(), found: ys.dim() });
    }
    let mut data = Vec::with_capacity(xs.len() * ys.len());
    for x in xs.points() {
        for y in ys.points() {
            data.push(cost.eval(x, y));
        }
    }
    Ok(CostMatrix { rows: xs.len(), cols: ys.len(), data })
}

/// Cost matrix between raw point lists.
pub fn cost_matrix_points(xs: &[Vec<f64>], ys: &[Vec<f64>], cost: &CostSpec) -> Result<CostMatrix> {
    let mut data = Vec::with_capacity(xs.len() * ys.len());
    for x in xs {
        for y in ys {
            if x.len() != y.len() {
                return Err(UotError::DimensionMismatch { expected: x.len(), found: y.len() });
            }
            data.push(cost.eval(x, y));
        }
    }
    Ok(CostMatrix { rows: xs.len(), cols: ys.len(), data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_atoms_are_stripped_in_order() {
        let m = DiscreteMeasure::new(vec![1.0, 0.0, 2.0], vec![vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(m.weights(), &[1.0, 2.0]);
        assert_eq!(m.point(0), &[1.0]);
        assert_eq!(m.point(1), &[3.0]);
        assert_eq!(m.total_mass(), 3.0);
    }

    #[test]
    fn empty_is_null() {
        let m = DiscreteMeasure::new(vec![], vec![]).unwrap();
        assert!(m.is_null());
        assert_eq!(m.total_mass(), 0.0);
    }

    #[test]
    fn rejects_negative_weight_and_ragged_points() {
        assert!(matches!(DiscreteMeasure::new(vec![-1.0], vec![vec![0.0]]), Err(UotError::InvalidMeasure(_))));
        assert!(matches!(
            DiscreteMeasure::new(vec![1.0, 1.0], vec![vec![0.0], vec![0.0, 1.0]]),
            Err(UotError::InvalidMeasure(_))
        ));
        assert!(matches!(DiscreteMeasure::new(vec![1.0], vec![]), Err(UotError::InvalidMeasure(_))));
    }

    #[test]
    fn total_mass_sums_weights() {
        let m = DiscreteMeasure::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(m.total_mass(), 1.0);
        let m = DiscreteMeasure::new(vec![2.0, 3.0, 4.0], vec![vec![0.0]; 3]).unwrap();
        assert_eq!(m.total_mass(), 9.0);
    }

    #[test]
    fn cost_examples() {
        let sq = CostSpec::sq_euclidean();
        assert_eq!(sq.eval(&[0.0], &[2.0]), 4.0);
        assert_eq!(sq.eval(&[1.5, -2.0], &[1.5, -2.0]), 0.0);
        let l1 = CostSpec::euclidean_pow(1.0).unwrap();
        assert_eq!(l1.eval(&[0.0, 0.0], &[3.0, 4.0]), 5.0);
        let half = CostSpec::new(CostKind::SqEuclidean, 0.5).unwrap();
        assert_eq!(half.eval(&[0.0], &[2.0]), 2.0);
    }

    #[test]
    fn cost_matrix_diagonal_is_zero_and_transpose_is_symmetric() {
        let a = DiscreteMeasure::new(vec![1.0; 3], vec![vec![0.0, 0.1], vec![0.3, 0.7], vec![-1.0, 2.0]]).unwrap();
        let b = DiscreteMeasure::new(vec![1.0; 2], vec![vec![0.5, 0.5], vec![0.2, -0.4]]).unwrap();
        for cost in [CostSpec::sq_euclidean(), CostSpec::euclidean_pow(1.5).unwrap()] {
            let aa = cost_matrix(&a, &a, &cost).unwrap();
            for i in 0..3 {
                assert_eq!(aa.get(i, i), 0.0);
            }
            let ab = cost_matrix(&a, &b, &cost).unwrap();
            let ba = cost_matrix(&b, &a, &cost).unwrap();
            assert_eq!(ab.transpose(), ba);
        }
    }

    #[test]
    fn cost_matrix_dimension_mismatch() {
        let a = DiscreteMeasure::new(vec![1.0], vec![vec![0.0]]).unwrap();
        let b = DiscreteMeasure::new(vec![1.0], vec![vec![0.0, 1.0]]).unwrap();
        assert!(matches!(cost_matrix(&a, &b, &CostSpec::default()), Err(UotError::DimensionMismatch { .. })));
    }

    #[test]
    fn l1_gradient_fails_at_coincident_points() {
        let l1 = CostSpec::euclidean_pow(1.0).unwrap();
        let mut g = [0.0; 2];
        assert!(l1.add_grad_x(&[1.0, 1.0], &[1.0, 1.0], 1.0, &mut g).is_err());
        l1.add_grad_x(&[3.0, 4.0], &[0.0, 0.0], 1.0, &mut g).unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
