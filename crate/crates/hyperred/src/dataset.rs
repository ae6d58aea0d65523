//! Snapshot containers and deterministic train/validation splitting.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refmodel::{FullState, RegimeLabel};

/// One converged equilibrium state. The tangent is optional so archives can
/// omit it for steps where only energy/force data were sampled.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub x: DVector<f64>,
    pub e: f64,
    pub f: DVector<f64>,
    pub k: Option<DMatrix<f64>>,
}

impl From<FullState> for Snapshot {
    fn from(st: FullState) -> Self {
        Snapshot {
            x: st.x,
            e: st.e,
            f: st.f,
            k: Some(st.k),
        }
    }
}

/// How a snapshot set was produced; stored in archives and sidecars.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub geometry_fingerprint: String,
    pub tolerance: f64,
    pub max_iterations: usize,
}

/// An ordered sweep of converged states for one load case. Step 0 is the
/// rest state at zero load.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub name: String,
    pub label: RegimeLabel,
    /// n×p load-input map of the case that produced the data.
    pub input_matrix: DMatrix<f64>,
    /// Load parameters per step, aligned with `states`.
    pub load_values: Vec<DVector<f64>>,
    pub states: Vec<Snapshot>,
    pub provenance: Provenance,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Scalar load for reports: the single parameter when p = 1, else the
    /// Euclidean norm of the parameter vector.
    pub fn scalar_load(&self, step: usize) -> f64 {
        let u = &self.load_values[step];
        if u.len() == 1 {
            u[0]
        } else {
            u.norm()
        }
    }

    /// Copies the selected samples, preserving their order.
    pub fn subset(&self, indices: &[usize]) -> Result<SnapshotSet> {
        let mut states = Vec::with_capacity(indices.len());
        let mut load_values = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::input(format!(
                    "subset index {i} out of range for {} samples",
                    self.len()
                )));
            }
            states.push(self.states[i].clone());
            load_values.push(self.load_values[i].clone());
        }
        Ok(SnapshotSet {
            name: self.name.clone(),
            label: self.label,
            input_matrix: self.input_matrix.clone(),
            load_values,
            states,
            provenance: self.provenance.clone(),
        })
    }
}

/// Stacks the displacement snapshots of several sets into an n×m matrix,
/// one column per state, in the given order.
pub fn snapshot_matrix(sets: &[&SnapshotSet]) -> Result<DMatrix<f64>> {
    let mut n = None;
    let mut m = 0;
    for set in sets {
        for st in &set.states {
            match n {
                None => n = Some(st.x.len()),
                Some(nn) if nn != st.x.len() => {
                    return Err(Error::input(
                        "snapshot sets disagree on the number of dofs",
                    ))
                }
                _ => {}
            }
            m += 1;
        }
    }
    let n = n.ok_or_else(|| Error::input("no snapshots to stack"))?;
    let mut out = DMatrix::zeros(n, m);
    let mut col = 0;
    for set in sets {
        for st in &set.states {
            out.set_column(col, &st.x);
            col += 1;
        }
    }
    Ok(out)
}

/// Split controls. The split is a deterministic function of
/// `(seed, init_index)` so every optimizer initialization sees its own
/// shuffle while runs stay reproducible.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    /// Fraction of samples assigned to training; ties round toward training.
    pub train_fraction: f64,
}

impl SplitPlan {
    pub fn new(seed: u64) -> Self {
        SplitPlan {
            seed,
            train_fraction: 0.5,
        }
    }
}

/// Disjoint, exhaustive (train, validation) index sets for `m` samples,
/// each returned in ascending order. `|train| = ceil(fraction · m)`, so the
/// odd sample goes to training on an even split.
pub fn split_indices(
    m: usize,
    plan: &SplitPlan,
    init_index: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if m < 2 {
        return Err(Error::input(format!(
            "cannot split {m} samples into train and validation"
        )));
    }
    if !(plan.train_fraction > 0.0 && plan.train_fraction < 1.0) {
        return Err(Error::input(format!(
            "train fraction {} must lie strictly between 0 and 1",
            plan.train_fraction
        )));
    }
    let take = (plan.train_fraction * m as f64).ceil() as usize;
    let take = take.clamp(1, m - 1);
    let mut seed_bytes = [0u8; 32];
    seed_bytes[0..8].copy_from_slice(&plan.seed.to_le_bytes());
    seed_bytes[8..16].copy_from_slice(&(init_index as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(seed_bytes);
    let mut indices: Vec<usize> = (0..m).collect();
    indices.shuffle(&mut rng);
    let mut train: Vec<usize> = indices[..take].to_vec();
    let mut val: Vec<usize> = indices[take..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Splits a snapshot set into (train, validation) subsets.
pub fn split(
    set: &SnapshotSet,
    plan: &SplitPlan,
    init_index: usize,
) -> Result<(SnapshotSet, SnapshotSet)> {
    let (ti, vi) = split_indices(set.len(), plan, init_index)?;
    Ok((set.subset(&ti)?, set.subset(&vi)?))
}
