//! Full-order reference model: a geometrically nonlinear 2D truss.
//!
//! Each bar carries a Green quadratic strain measure, so internal energy,
//! internal force (its gradient), and the tangent stiffness (its Hessian) have
//! simple closed forms and stay consistent to machine precision:
//!
//! ```text
//! d  = deformed bar vector        eps = (d·d - L0^2) / (2 L0^2)
//! e  = 1/2 · EA · L0 · eps^2
//! g  = (EA / L0) · eps · d                      (force on the far node)
//! H  = (EA / L0) · (eps · I + d dᵀ / L0^2)      (block of the tangent)
//! ```
//!
//! Dirichlet constraints are eliminated up front: all public vectors and
//! matrices live in free-dof coordinates of size `n`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::archive::fnv1a64;
use crate::dataset::{Provenance, Snapshot, SnapshotSet};
use crate::error::{Error, Result};

/// Axial bar between two node indices with rigidity `EA`.
#[derive(Debug, Clone)]
pub struct Bar {
    pub node_a: usize,
    pub node_b: usize,
    pub axial_rigidity: f64,
}

/// Immutable truss with precomputed rest lengths and dof numbering.
#[derive(Debug, Clone)]
pub struct TrussModel {
    nodes: Vec<[f64; 2]>,
    bars: Vec<Bar>,
    rest_len: Vec<f64>,
    rest_len_sq: Vec<f64>,
    /// global dof (2*node + component) -> free index
    dof_map: Vec<Option<usize>>,
    /// free index -> global dof
    free_dofs: Vec<usize>,
}

/// Energy, internal force, and tangent stiffness at one displacement state.
#[derive(Debug, Clone)]
pub struct FullState {
    pub x: DVector<f64>,
    pub e: f64,
    pub f: DVector<f64>,
    pub k: DMatrix<f64>,
}

/// Which error regime a load case probes relative to the training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegimeLabel {
    Interpolation,
    ExtrapolationForward,
    ExtrapolationReverse,
}

impl RegimeLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            RegimeLabel::Interpolation => "interpolation",
            RegimeLabel::ExtrapolationForward => "extrapolation-forward",
            RegimeLabel::ExtrapolationReverse => "extrapolation-reverse",
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(RegimeLabel::Interpolation),
            1 => Ok(RegimeLabel::ExtrapolationForward),
            2 => Ok(RegimeLabel::ExtrapolationReverse),
            _ => Err(Error::input(format!("unknown regime tag {tag}"))),
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            RegimeLabel::Interpolation => 0,
            RegimeLabel::ExtrapolationForward => 1,
            RegimeLabel::ExtrapolationReverse => 2,
        }
    }
}

impl std::fmt::Display for RegimeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named load program: `f_ext = input_matrix · u` for each magnitude `u`.
#[derive(Debug, Clone)]
pub struct LoadCase {
    pub name: String,
    pub label: RegimeLabel,
    /// n×p map from load parameters to nodal forces.
    pub input_matrix: DMatrix<f64>,
    /// One p-vector per load step, walked in order with warm starts.
    pub magnitudes: Vec<DVector<f64>>,
}

/// Newton iteration controls for the continuation solvers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NewtonSettings {
    /// Residual tolerance, scaled by `1 + ||f_ext||` per step.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            tolerance: 1e-8,
            max_iterations: 50,
        }
    }
}

impl TrussModel {
    /// Builds a truss; `fixed` lists (node, component) Dirichlet constraints.
    pub fn new(nodes: Vec<[f64; 2]>, bars: Vec<Bar>, fixed: &[(usize, usize)]) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::input("a truss needs at least two nodes"));
        }
        if bars.is_empty() {
            return Err(Error::input("a truss needs at least one bar"));
        }
        let mut rest_len = Vec::with_capacity(bars.len());
        let mut rest_len_sq = Vec::with_capacity(bars.len());
        for (i, bar) in bars.iter().enumerate() {
            if bar.node_a >= nodes.len() || bar.node_b >= nodes.len() {
                return Err(Error::input(format!("bar {i} references a missing node")));
            }
            if bar.node_a == bar.node_b {
                return Err(Error::DegenerateGeometry(format!(
                    "bar {i} connects node {} to itself",
                    bar.node_a
                )));
            }
            if !(bar.axial_rigidity.is_finite() && bar.axial_rigidity > 0.0) {
                return Err(Error::input(format!(
                    "bar {i} has non-positive rigidity {}",
                    bar.axial_rigidity
                )));
            }
            let dx = nodes[bar.node_b][0] - nodes[bar.node_a][0];
            let dy = nodes[bar.node_b][1] - nodes[bar.node_a][1];
            let l_sq = dx * dx + dy * dy;
            if l_sq <= 0.0 {
                return Err(Error::DegenerateGeometry(format!(
                    "bar {i} has zero rest length"
                )));
            }
            rest_len.push(l_sq.sqrt());
            rest_len_sq.push(l_sq);
        }
        let mut dof_map = vec![None; 2 * nodes.len()];
        let mut fixed_flags = vec![false; 2 * nodes.len()];
        for &(node, comp) in fixed {
            if node >= nodes.len() || comp > 1 {
                return Err(Error::input(format!(
                    "constraint on missing dof (node {node}, component {comp})"
                )));
            }
            fixed_flags[2 * node + comp] = true;
        }
        let mut free_dofs = Vec::new();
        for (dof, flag) in fixed_flags.iter().enumerate() {
            if !flag {
                dof_map[dof] = Some(free_dofs.len());
                free_dofs.push(dof);
            }
        }
        if free_dofs.is_empty() {
            return Err(Error::input("every dof is constrained"));
        }
        Ok(TrussModel {
            nodes,
            bars,
            rest_len,
            rest_len_sq,
            dof_map,
            free_dofs,
        })
    }

    /// Cantilevered lattice beam: `columns` node columns × `rows` node rows,
    /// cross-braced bays, left column fully fixed. All bars share one `EA`.
    pub fn cantilever_lattice(
        columns: usize,
        rows: usize,
        bay_width: f64,
        story_height: f64,
        axial_rigidity: f64,
    ) -> Result<Self> {
        if columns < 2 || rows < 2 {
            return Err(Error::input("lattice needs at least 2 columns and 2 rows"));
        }
        let node = |c: usize, r: usize| c * rows + r;
        let mut nodes = Vec::with_capacity(columns * rows);
        for c in 0..columns {
            for r in 0..rows {
                nodes.push([c as f64 * bay_width, r as f64 * story_height]);
            }
        }
        let mut bars = Vec::new();
        let mut push = |a: usize, b: usize| {
            bars.push(Bar {
                node_a: a,
                node_b: b,
                axial_rigidity,
            })
        };
        for c in 0..columns {
            for r in 0..rows {
                if c + 1 < columns {
                    push(node(c, r), node(c + 1, r)); // chord
                }
                if r + 1 < rows {
                    push(node(c, r), node(c, r + 1)); // post
                }
                if c + 1 < columns && r + 1 < rows {
                    push(node(c, r), node(c + 1, r + 1)); // rising diagonal
                    push(node(c, r + 1), node(c + 1, r)); // falling diagonal
                }
            }
        }
        let fixed: Vec<(usize, usize)> = (0..rows).flat_map(|r| [(r, 0), (r, 1)]).collect();
        TrussModel::new(nodes, bars, &fixed)
    }

    /// Number of free dofs.
    pub fn n(&self) -> usize {
        self.free_dofs.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn bar_count(&self) -> usize {
        self.bars.len()
    }

    /// Free-dof index of (node, component), or None if constrained.
    pub fn free_index(&self, node: usize, component: usize) -> Option<usize> {
        self.dof_map.get(2 * node + component).copied().flatten()
    }

    /// n×1 input matrix applying a unit force on one free dof.
    pub fn point_load_matrix(&self, node: usize, component: usize) -> Result<DMatrix<f64>> {
        let idx = self.free_index(node, component).ok_or_else(|| {
            Error::input(format!(
                "dof (node {node}, component {component}) is constrained or missing"
            ))
        })?;
        let mut b = DMatrix::zeros(self.n(), 1);
        b[(idx, 0)] = 1.0;
        Ok(b)
    }

    /// Stable content hash of the geometry, for artifact provenance.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for nd in &self.nodes {
            bytes.extend_from_slice(&nd[0].to_le_bytes());
            bytes.extend_from_slice(&nd[1].to_le_bytes());
        }
        for bar in &self.bars {
            bytes.extend_from_slice(&(bar.node_a as u64).to_le_bytes());
            bytes.extend_from_slice(&(bar.node_b as u64).to_le_bytes());
            bytes.extend_from_slice(&bar.axial_rigidity.to_le_bytes());
        }
        for dof in &self.free_dofs {
            bytes.extend_from_slice(&(*dof as u64).to_le_bytes());
        }
        format!("{:016x}", fnv1a64(&bytes))
    }

    /// Energy, internal force, and tangent at displacement `x` (free dofs).
    pub fn evaluate(&self, x: &DVector<f64>) -> Result<FullState> {
        let n = self.n();
        if x.len() != n {
            return Err(Error::input(format!(
                "state has {} entries, model has {} free dofs",
                x.len(),
                n
            )));
        }
        let mut e = 0.0;
        let mut f = DVector::zeros(n);
        let mut k = DMatrix::zeros(n, n);
        for (bi, bar) in self.bars.iter().enumerate() {
            // Deformed bar vector; fixed dofs contribute zero displacement.
            let disp = |node: usize, comp: usize| -> f64 {
                match self.dof_map[2 * node + comp] {
                    Some(idx) => x[idx],
                    None => 0.0,
                }
            };
            let d = [
                self.nodes[bar.node_b][0] - self.nodes[bar.node_a][0]
                    + disp(bar.node_b, 0)
                    - disp(bar.node_a, 0),
                self.nodes[bar.node_b][1] - self.nodes[bar.node_a][1]
                    + disp(bar.node_b, 1)
                    - disp(bar.node_a, 1),
            ];
            let l0 = self.rest_len[bi];
            let l0_sq = self.rest_len_sq[bi];
            let eps = (d[0] * d[0] + d[1] * d[1] - l0_sq) / (2.0 * l0_sq);
            let ea_over_l0 = bar.axial_rigidity / l0;
            e += 0.5 * bar.axial_rigidity * l0 * eps * eps;
            // 2x2 block of the bar Hessian; force on node_b is `g`, on node_a is `-g`.
            // The off-diagonal entry is computed once so the block (and the
            // assembled tangent) is symmetric bitwise, not just to rounding.
            let g = [ea_over_l0 * eps * d[0], ea_over_l0 * eps * d[1]];
            let c = ea_over_l0 / l0_sq;
            let diag = ea_over_l0 * eps;
            let h_xy = c * (d[0] * d[1]);
            let h = [
                [c * (d[0] * d[0]) + diag, h_xy],
                [h_xy, c * (d[1] * d[1]) + diag],
            ];
            let idx = |node: usize, comp: usize| self.dof_map[2 * node + comp];
            for comp in 0..2 {
                if let Some(ib) = idx(bar.node_b, comp) {
                    f[ib] += g[comp];
                }
                if let Some(ia) = idx(bar.node_a, comp) {
                    f[ia] -= g[comp];
                }
            }
            for p in 0..2 {
                for q in 0..2 {
                    let (ia, ib) = (idx(bar.node_a, p), idx(bar.node_b, p));
                    let (ja, jb) = (idx(bar.node_a, q), idx(bar.node_b, q));
                    if let (Some(i), Some(j)) = (ib, jb) {
                        k[(i, j)] += h[p][q];
                    }
                    if let (Some(i), Some(j)) = (ia, ja) {
                        k[(i, j)] += h[p][q];
                    }
                    if let (Some(i), Some(j)) = (ib, ja) {
                        k[(i, j)] -= h[p][q];
                    }
                    if let (Some(i), Some(j)) = (ia, jb) {
                        k[(i, j)] -= h[p][q];
                    }
                }
            }
        }
        Ok(FullState {
            x: x.clone(),
            e,
            f,
            k,
        })
    }
}

/// Walks a load case with Newton continuation and records every converged
/// state, starting with the rest state at zero load. Full-order divergence is
/// an error: the reference data must be trustworthy.
pub fn solve_full(
    model: &TrussModel,
    case: &LoadCase,
    settings: &NewtonSettings,
) -> Result<SnapshotSet> {
    let n = model.n();
    if case.input_matrix.nrows() != n {
        return Err(Error::input(format!(
            "input matrix has {} rows, model has {} free dofs",
            case.input_matrix.nrows(),
            n
        )));
    }
    let p = case.input_matrix.ncols();
    let mut x = DVector::zeros(n);
    let mut states = Vec::with_capacity(case.magnitudes.len() + 1);
    let mut load_values = Vec::with_capacity(case.magnitudes.len() + 1);
    states.push(Snapshot::from(model.evaluate(&x)?));
    load_values.push(DVector::zeros(p));
    for (i, u) in case.magnitudes.iter().enumerate() {
        let step = i + 1;
        if u.len() != p {
            return Err(Error::input(format!(
                "magnitude {i} has {} entries, input matrix has {} columns",
                u.len(),
                p
            )));
        }
        let rhs = &case.input_matrix * u;
        let tol = settings.tolerance * (1.0 + rhs.norm());
        let mut it = 0;
        loop {
            let st = model.evaluate(&x)?;
            let res = &rhs - &st.f;
            let norm = res.norm();
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    step,
                    residual: norm,
                    iterations: it,
                });
            }
            if norm <= tol {
                states.push(Snapshot::from(st));
                load_values.push(u.clone());
                break;
            }
            if it == settings.max_iterations {
                return Err(Error::Divergence {
                    step,
                    residual: norm,
                    iterations: it,
                });
            }
            let delta = st.k.lu().solve(&res).ok_or(Error::Divergence {
                step,
                residual: norm,
                iterations: it,
            })?;
            x += delta;
            it += 1;
        }
    }
    Ok(SnapshotSet {
        name: case.name.clone(),
        label: case.label,
        input_matrix: case.input_matrix.clone(),
        load_values,
        states,
        provenance: Provenance {
            geometry_fingerprint: model.fingerprint(),
            tolerance: settings.tolerance,
            max_iterations: settings.max_iterations,
        },
    })
}
