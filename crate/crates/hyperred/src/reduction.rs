//! Proper orthogonal decomposition of snapshot data and Galerkin projection.

use nalgebra::{DMatrix, DVector};

use crate::dataset::SnapshotSet;
use crate::error::{Error, Result};
use crate::refmodel::RegimeLabel;

/// Orthonormal reduction basis `V` (n×r) with its energy bookkeeping.
#[derive(Debug, Clone)]
pub struct PodBasis {
    pub v: DMatrix<f64>,
    /// First `r` singular values, normalized so the full spectrum sums to 1.
    pub sigma_normalized: Vec<f64>,
    /// Fraction of snapshot energy captured by the retained vectors.
    pub cumulative_energy: f64,
    /// Set when `r` exceeds the numerical rank of the snapshot matrix; the
    /// trailing vectors are then arbitrary orthonormal completions.
    pub rank_warning: bool,
}

impl PodBasis {
    pub fn r(&self) -> usize {
        self.v.ncols()
    }

    pub fn n(&self) -> usize {
        self.v.nrows()
    }
}

/// Snapshots projected onto a basis: `x_r = Vᵀx`, `f_r = Vᵀf`, `K_r = VᵀKV`.
#[derive(Debug, Clone)]
pub struct ReducedDataset {
    pub r: usize,
    pub x_r: Vec<DVector<f64>>,
    pub e: Vec<f64>,
    pub f_r: Vec<DVector<f64>>,
    /// Absent where the source snapshot omitted the tangent.
    pub k_r: Vec<Option<DMatrix<f64>>>,
    pub labels: Vec<RegimeLabel>,
}

impl ReducedDataset {
    pub fn len(&self) -> usize {
        self.x_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_r.is_empty()
    }

    /// Copies the selected samples, preserving their order.
    pub fn subset(&self, indices: &[usize]) -> Result<ReducedDataset> {
        let mut out = ReducedDataset {
            r: self.r,
            x_r: Vec::with_capacity(indices.len()),
            e: Vec::with_capacity(indices.len()),
            f_r: Vec::with_capacity(indices.len()),
            k_r: Vec::with_capacity(indices.len()),
            labels: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            if i >= self.len() {
                return Err(Error::input(format!(
                    "subset index {i} out of range for {} samples",
                    self.len()
                )));
            }
            out.x_r.push(self.x_r[i].clone());
            out.e.push(self.e[i]);
            out.f_r.push(self.f_r[i].clone());
            out.k_r.push(self.k_r[i].clone());
            out.labels.push(self.labels[i]);
        }
        Ok(out)
    }

    /// Concatenates several reduced datasets of equal order.
    pub fn concat(parts: &[&ReducedDataset]) -> Result<ReducedDataset> {
        let r = parts
            .first()
            .ok_or_else(|| Error::input("nothing to concatenate"))?
            .r;
        let mut out = ReducedDataset {
            r,
            x_r: Vec::new(),
            e: Vec::new(),
            f_r: Vec::new(),
            k_r: Vec::new(),
            labels: Vec::new(),
        };
        for part in parts {
            if part.r != r {
                return Err(Error::input("reduced datasets disagree on the order r"));
            }
            out.x_r.extend(part.x_r.iter().cloned());
            out.e.extend(part.e.iter().copied());
            out.f_r.extend(part.f_r.iter().cloned());
            out.k_r.extend(part.k_r.iter().cloned());
            out.labels.extend(part.labels.iter().copied());
        }
        Ok(out)
    }
}

/// Normalized singular spectrum of a snapshot matrix (sums to 1), used to
/// pick the reduced order from an energy threshold.
pub fn normalized_spectrum(snapshots: &DMatrix<f64>) -> Result<Vec<f64>> {
    if snapshots.is_empty() {
        return Err(Error::input("empty snapshot matrix"));
    }
    let svd = snapshots.clone().svd(false, false);
    let mut sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let total: f64 = sigma.iter().sum();
    if total <= 0.0 {
        // All-zero snapshots: spread evenly so downstream ratios stay finite.
        let m = sigma.len();
        return Ok(vec![1.0 / m as f64; m]);
    }
    Ok(sigma.into_iter().map(|s| s / total).collect())
}

/// Smallest order whose cumulative normalized energy reaches `threshold`.
pub fn rank_for_energy(spectrum: &[f64], threshold: f64) -> usize {
    let mut acc = 0.0;
    for (i, s) in spectrum.iter().enumerate() {
        acc += s;
        if acc >= threshold {
            return i + 1;
        }
    }
    spectrum.len()
}

/// First `r` left singular vectors of the snapshot matrix, sign-fixed so the
/// largest-magnitude entry of each column is positive.
pub fn compute_basis(snapshots: &DMatrix<f64>, r: usize) -> Result<PodBasis> {
    let (n, m) = snapshots.shape();
    let kmax = n.min(m);
    if r == 0 || r > kmax {
        return Err(Error::input(format!(
            "order {r} out of range for a {n}×{m} snapshot matrix"
        )));
    }
    let svd = snapshots.clone().svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let mut v = DMatrix::zeros(n, r);
    for (col, &src) in order.iter().take(r).enumerate() {
        v.set_column(col, &u.column(src));
    }
    // Sign convention: make the largest-magnitude entry of each column
    // positive (first occurrence wins on ties) so bases are reproducible.
    for mut col in v.column_iter_mut() {
        let mut pivot = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
    }
    let sigma_sorted: Vec<f64> = order
        .iter()
        .map(|&i| svd.singular_values[i])
        .collect();
    let total: f64 = sigma_sorted.iter().sum();
    let sigma_normalized: Vec<f64> = if total > 0.0 {
        sigma_sorted.iter().take(r).map(|s| s / total).collect()
    } else {
        vec![1.0 / kmax as f64; r]
    };
    let cumulative_energy: f64 = sigma_normalized.iter().sum();
    // Numerical rank via the usual SVD cutoff.
    let cutoff = sigma_sorted.first().copied().unwrap_or(0.0) * n.max(m) as f64 * f64::EPSILON;
    let rank = sigma_sorted.iter().filter(|&&s| s > cutoff).count();
    Ok(PodBasis {
        v,
        sigma_normalized,
        cumulative_energy,
        rank_warning: r > rank,
    })
}

/// Galerkin-projects a snapshot set onto the basis.
pub fn project(basis: &PodBasis, set: &SnapshotSet) -> Result<ReducedDataset> {
    let n = basis.n();
    let vt = basis.v.transpose();
    let mut out = ReducedDataset {
        r: basis.r(),
        x_r: Vec::with_capacity(set.len()),
        e: Vec::with_capacity(set.len()),
        f_r: Vec::with_capacity(set.len()),
        k_r: Vec::with_capacity(set.len()),
        labels: Vec::with_capacity(set.len()),
    };
    for (i, st) in set.states.iter().enumerate() {
        if st.x.len() != n || st.f.len() != n {
            return Err(Error::input(format!(
                "snapshot {i} has {} dofs, basis has {n} rows",
                st.x.len()
            )));
        }
        out.x_r.push(&vt * &st.x);
        out.e.push(st.e);
        out.f_r.push(&vt * &st.f);
        out.k_r.push(match &st.k {
            Some(k) => {
                if k.shape() != (n, n) {
                    return Err(Error::input(format!(
                        "snapshot {i} tangent has shape {:?}, expected ({n}, {n})",
                        k.shape()
                    )));
                }
                Some(&vt * k * &basis.v)
            }
            None => None,
        });
        out.labels.push(set.label);
    }
    Ok(out)
}
