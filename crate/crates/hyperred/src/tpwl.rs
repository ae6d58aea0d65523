//! Trajectory piecewise-linear surrogate in reduced coordinates.
//!
//! The model stores linearizations (x_i, f_i, K_i) at samples picked along
//! the training trajectory and blends them with distance-based weights:
//!
//! ```text
//! d_i = ||x - x_i||          m = min_i d_i + eps
//! w_i = exp(-beta d_i / m) / sum_j exp(-beta d_j / m)
//! f(x) ≈ Σ w_i (f_i - K_i x_i) + (Σ w_i K_i) x
//! ```
//!
//! The weights are frozen per evaluation point, so `Σ w_i K_i` doubles as the
//! Newton tangent.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::reduction::ReducedDataset;

/// One stored linearization point.
#[derive(Debug, Clone)]
pub struct TpwlPoint {
    pub x_r: DVector<f64>,
    pub f_r: DVector<f64>,
    pub k_r: DMatrix<f64>,
    /// Cached `f_r - K_r x_r`.
    pub f_tilde: DVector<f64>,
}

/// Weighted piecewise-linear force model.
#[derive(Debug, Clone)]
pub struct TpwlModel {
    pub points: Vec<TpwlPoint>,
    /// Weight decay rate.
    pub beta: f64,
    /// Tie-breaking floor added to the minimal distance.
    pub epsilon: f64,
    /// Indices of the construction samples within the source dataset, for
    /// excluding them from interpolation-error reports.
    pub source_indices: Vec<usize>,
}

/// Default weight decay rate.
pub const DEFAULT_BETA: f64 = 25.0;

/// Indices of `ceil(fraction · m)` samples spread evenly over `0..m`,
/// endpoints included: `round(k (m-1) / (count-1))`.
pub fn select_indices(m: usize, fraction: f64) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::input("cannot select from an empty dataset"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::input(format!(
            "selection fraction {fraction} must lie in (0, 1]"
        )));
    }
    let count = ((fraction * m as f64).ceil() as usize).clamp(1, m);
    if count == 1 {
        return Ok(vec![0]);
    }
    let step = (m - 1) as f64 / (count - 1) as f64;
    Ok((0..count)
        .map(|k| (k as f64 * step).round() as usize)
        .collect())
}

/// Builds a model from equidistant samples of a trajectory-ordered dataset.
/// Every selected sample must carry its reduced tangent.
pub fn build(data: &ReducedDataset, fraction: f64, beta: f64) -> Result<TpwlModel> {
    if !(beta > 0.0) {
        return Err(Error::input(format!("beta {beta} must be positive")));
    }
    let indices = select_indices(data.len(), fraction)?;
    let mut points = Vec::with_capacity(indices.len());
    let mut norm_sum = 0.0;
    for &i in &indices {
        let k_r = data.k_r[i].as_ref().ok_or_else(|| {
            Error::input(format!("sample {i} has no reduced tangent; cannot linearize"))
        })?;
        let x_r = data.x_r[i].clone();
        let f_r = data.f_r[i].clone();
        let f_tilde = &f_r - k_r * &x_r;
        norm_sum += x_r.norm();
        points.push(TpwlPoint {
            x_r,
            f_r,
            k_r: k_r.clone(),
            f_tilde,
        });
    }
    // Floor keeps the weight exponent finite when the query hits a stored
    // point exactly; scaled by the data magnitude so it stays negligible.
    let epsilon = 1e-12 * (1.0 + norm_sum / points.len() as f64);
    Ok(TpwlModel {
        points,
        beta,
        epsilon,
        source_indices: indices,
    })
}

impl TpwlModel {
    pub fn r(&self) -> usize {
        self.points[0].x_r.len()
    }

    /// Normalized blending weights at a query state; sums to 1.
    pub fn weights(&self, x_r: &DVector<f64>) -> DVector<f64> {
        let n = self.points.len();
        let mut d = DVector::zeros(n);
        let mut d_min = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            d[i] = (x_r - &p.x_r).norm();
            d_min = d_min.min(d[i]);
        }
        let m = d_min + self.epsilon;
        let mut w = DVector::zeros(n);
        let mut total = 0.0;
        for i in 0..n {
            // The nearest point has d/m ≈ 1, so the largest weight is at
            // least exp(-beta) and the normalization never divides by zero.
            w[i] = (-self.beta * d[i] / m).exp();
            total += w[i];
        }
        w /= total;
        w
    }

    /// Blended force and frozen-weight tangent at a query state.
    pub fn force_and_tangent(&self, x_r: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let r = x_r.len();
        let w = self.weights(x_r);
        let mut f = DVector::zeros(r);
        let mut k = DMatrix::zeros(r, r);
        for (i, p) in self.points.iter().enumerate() {
            if w[i] == 0.0 {
                continue; // underflowed weight: exact zero contribution
            }
            f += &p.f_tilde * w[i];
            k += &p.k_r * w[i];
        }
        f += &k * x_r;
        (f, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refmodel::RegimeLabel;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Dataset sampled from a known nonlinear force field f(x) = x + x^3
    /// (componentwise), K = diag(1 + 3 x^2).
    fn cubic_dataset(m: usize, r: usize) -> ReducedDataset {
        let mut out = ReducedDataset {
            r,
            x_r: Vec::new(),
            e: Vec::new(),
            f_r: Vec::new(),
            k_r: Vec::new(),
            labels: Vec::new(),
        };
        for s in 0..m {
            let t = s as f64 / (m - 1) as f64;
            let x = DVector::from_fn(r, |i, _| t * (1.0 + i as f64));
            let f = x.map(|v| v + v * v * v);
            let k = DMatrix::from_fn(r, r, |i, j| {
                if i == j {
                    1.0 + 3.0 * x[i] * x[i]
                } else {
                    0.0
                }
            });
            out.x_r.push(x);
            out.e.push(0.0);
            out.f_r.push(f);
            out.k_r.push(Some(k));
            out.labels.push(RegimeLabel::Interpolation);
        }
        out
    }

    #[test]
    fn equidistant_selection_hits_every_second_sample() {
        // 101 samples at fraction 1/2: 51 points, indices 0, 2, ..., 100.
        let idx = select_indices(101, 0.5).unwrap();
        assert_eq!(idx.len(), 51);
        assert_eq!(idx[0], 0);
        assert_eq!(idx[50], 100);
        assert!(idx.iter().enumerate().all(|(k, &i)| i == 2 * k));
    }

    #[test]
    fn selection_covers_edge_fractions() {
        assert_eq!(select_indices(10, 1.0).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(select_indices(10, 0.05).unwrap(), vec![0]);
        assert!(select_indices(0, 0.5).is_err());
        assert!(select_indices(10, 0.0).is_err());
        assert!(select_indices(10, 1.5).is_err());
    }

    #[test]
    fn model_reproduces_stored_points() {
        let data = cubic_dataset(21, 3);
        let model = build(&data, 0.5, DEFAULT_BETA).unwrap();
        for (k, &src) in model.source_indices.iter().enumerate() {
            let (f, _) = model.force_and_tangent(&data.x_r[src]);
            let err = (&f - &data.f_r[src]).norm();
            assert!(
                err <= 1e-6 * (1.0 + data.f_r[src].norm()),
                "point {k}: error {err}"
            );
            // At a stored point the weights collapse onto that point.
            let w = model.weights(&data.x_r[src]);
            assert!((w[k] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_form_a_partition_of_unity() {
        let data = cubic_dataset(15, 2);
        let model = build(&data, 0.4, DEFAULT_BETA).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            let w = model.weights(&x);
            assert!(w.iter().all(|&v| v >= 0.0));
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_point_weight_collapse_under_strong_decay() {
        // Distances 0 and 1 with beta = 25: the far weight underflows to 0.
        let mut data = cubic_dataset(2, 1);
        data.x_r[0][0] = 0.0;
        data.x_r[1][0] = 1.0;
        let model = build(&data, 1.0, 25.0).unwrap();
        let w = model.weights(&DVector::from_vec(vec![0.0]));
        assert_eq!(w[0], 1.0);
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn missing_tangent_is_an_input_error() {
        let mut data = cubic_dataset(5, 2);
        data.k_r[2] = None;
        assert!(matches!(
            build(&data, 1.0, DEFAULT_BETA),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn single_point_model_is_globally_linear() {
        let data = cubic_dataset(9, 2);
        let model = build(&data, 0.05, DEFAULT_BETA).unwrap();
        assert_eq!(model.points.len(), 1);
        let k0 = model.points[0].k_r.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let (f, k) = model.force_and_tangent(&x);
            let expect = &model.points[0].f_tilde + &k0 * &x;
            assert!((f - expect).norm() < 1e-12);
            assert!((&k - &k0).amax() < 1e-12);
        }
    }
}
