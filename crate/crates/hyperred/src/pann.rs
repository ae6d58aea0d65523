//! Physics-augmented convex energy surrogate.
//!
//! The scalar network is input-convex by construction: hidden-to-hidden
//! weights pass through a softplus reparameterization (so they stay
//! nonnegative), the activation is the convex, nondecreasing squared
//! softplus, and a quadratic pass-through `xᵀÃᵀÃx` acting on the *raw*
//! (unstandardized) input injects a guaranteed-convex baseline that can be
//! seeded from the reduced rest tangent. Affine correction terms subtract the
//! value and gradient at the origin so the surrogate predicts zero energy and
//! zero force at rest:
//!
//! ```text
//! ê(x) = net(x) + xᵀÃᵀÃx - ∇net(0)·x - net(0)
//! f̂ = ∇ê        K̂ = ∇²ê   (symmetric positive semidefinite)
//! ```
//!
//! The forward pass propagates the value, input gradient, and input Hessian
//! in closed form, layer by layer, generically over [`Algebra`], so the same
//! code serves plain evaluation and tape recording for training.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Algebra, Reals};
use crate::error::{Error, Result};

/// Network shape: `hidden_layers` stacked blocks of `width` neurons feeding a
/// final linear combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IcnnArch {
    pub input_dim: usize,
    pub width: usize,
    pub hidden_layers: usize,
}

impl IcnnArch {
    pub fn parameter_count(&self) -> usize {
        parameter_count(self.input_dim, self.width, self.hidden_layers)
    }
}

/// Trainable parameter count of the architecture, counting raw weights, the
/// quadratic factor, and the two activation sharpness scalars.
pub fn parameter_count(input_dim: usize, width: usize, hidden_layers: usize) -> usize {
    let (r, h, l) = (input_dim, width, hidden_layers);
    assert!(l >= 1, "at least one hidden layer");
    // input block + (L-1) hidden blocks + linear output + quadratic + (alpha, beta)
    (r + 1) * h + (l - 1) * h * (h + r + 1) + (h + r) + (r * r) + 2
}

/// Flat parameter vector layout. Order: input block (W0, b0), each hidden
/// block (Wz raw, Wx, b), output weights (Wz_out raw, Wx_out), quadratic
/// factor Ã (row-major), then alpha and beta.
#[derive(Debug, Clone)]
pub(crate) struct ParamLayout {
    pub w0: std::ops::Range<usize>,
    pub b0: std::ops::Range<usize>,
    pub hidden: Vec<HiddenRanges>,
    pub wz_out: std::ops::Range<usize>,
    pub wx_out: std::ops::Range<usize>,
    pub a_tilde: std::ops::Range<usize>,
    pub alpha: usize,
    pub beta: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct HiddenRanges {
    pub wz: std::ops::Range<usize>,
    pub wx: std::ops::Range<usize>,
    pub b: std::ops::Range<usize>,
}

impl ParamLayout {
    pub fn new(arch: &IcnnArch) -> Self {
        let (r, h, l) = (arch.input_dim, arch.width, arch.hidden_layers);
        let mut at = 0usize;
        let mut take = |len: usize| {
            let range = at..at + len;
            at += len;
            range
        };
        let w0 = take(h * r);
        let b0 = take(h);
        let hidden = (1..l)
            .map(|_| HiddenRanges {
                wz: take(h * h),
                wx: take(h * r),
                b: take(h),
            })
            .collect();
        let wz_out = take(h);
        let wx_out = take(r);
        let a_tilde = take(r * r);
        let alpha = take(1).start;
        let beta = take(1).start;
        ParamLayout {
            w0,
            b0,
            hidden,
            wz_out,
            wx_out,
            a_tilde,
            alpha,
            beta,
            total: at,
        }
    }
}

/// Frozen input scaling, applied as a fixed affine layer ahead of the
/// network. The quadratic pass-through bypasses it.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl Standardizer {
    /// No-op scaling.
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: DVector::zeros(dim),
            std: DVector::from_element(dim, 1.0),
        }
    }

    /// Componentwise mean and population standard deviation of the samples.
    /// Degenerate (constant) components fall back to unit scale.
    pub fn fit(samples: &[DVector<f64>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::input("cannot fit a standardizer to zero samples"))?;
        let dim = first.len();
        let m = samples.len() as f64;
        let mut mean = DVector::zeros(dim);
        for s in samples {
            if s.len() != dim {
                return Err(Error::input("samples disagree on dimension"));
            }
            mean += s;
        }
        mean /= m;
        let mut var = DVector::zeros(dim);
        for s in samples {
            let d = s - &mean;
            var += d.component_mul(&d);
        }
        var /= m;
        let std = DVector::from_fn(dim, |i, _| {
            let sd = var[i].sqrt();
            if sd <= 1e-12 * (1.0 + mean[i].abs()) {
                1.0
            } else {
                sd
            }
        });
        Ok(Standardizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Numerically stable `ln(1 + exp(u))`, accurate into both tails.
fn ln1pexp_gen<A: Algebra>(alg: &mut A, u: A::S) -> A::S {
    if alg.val(u) > 0.0 {
        // u + ln(1 + exp(-u)); exp never overflows here.
        let nu = alg.neg(u);
        let e = alg.exp(nu);
        let l = alg.ln_1p(e);
        alg.add(u, l)
    } else {
        let e = alg.exp(u);
        alg.ln_1p(e)
    }
}

/// Numerically stable logistic function.
fn sigmoid_gen<A: Algebra>(alg: &mut A, u: A::S) -> A::S {
    let one = alg.lit(1.0);
    if alg.val(u) >= 0.0 {
        let nu = alg.neg(u);
        let e = alg.exp(nu);
        let den = alg.add(one, e);
        alg.div(one, den)
    } else {
        let e = alg.exp(u);
        let den = alg.add(one, e);
        alg.div(e, den)
    }
}

/// Softplus weight constraint `w̄ = ln(1 + exp(α² w)) / α²`; `sharp` is α².
fn softplus_gen<A: Algebra>(alg: &mut A, w: A::S, sharp: A::S) -> A::S {
    let u = alg.mul(sharp, w);
    let s = ln1pexp_gen(alg, u);
    alg.div(s, sharp)
}

/// Squared-softplus activation `φ(x) = ln(1+exp(β²x))² / (2β⁴)` with its
/// first two derivatives; `sharp` is β². Returns (φ, φ′, φ″); φ″ is only
/// built when `need_curv` is set.
fn sps_gen<A: Algebra>(
    alg: &mut A,
    x: A::S,
    sharp: A::S,
    need_curv: bool,
) -> (A::S, A::S, Option<A::S>) {
    let u = alg.mul(sharp, x);
    let s = ln1pexp_gen(alg, u);
    let sg = sigmoid_gen(alg, u);
    let s2 = alg.mul(s, s);
    let t2 = alg.mul(sharp, sharp);
    let two_t2 = alg.scale(t2, 2.0);
    let value = alg.div(s2, two_t2);
    let ssg = alg.mul(s, sg);
    let d1 = alg.div(ssg, sharp);
    let d2 = if need_curv {
        // φ″ = σ² + s σ (1 - σ) ≥ 0: convexity by construction.
        let one = alg.lit(1.0);
        let om = alg.sub(one, sg);
        let term = alg.mul(ssg, om);
        let sg2 = alg.mul(sg, sg);
        Some(alg.add(sg2, term))
    } else {
        None
    };
    (value, d1, d2)
}

/// Softplus with sharpness `α` (used as α² internally), plain scalar form.
pub fn softplus(x: f64, alpha: f64) -> f64 {
    assert!(alpha != 0.0, "softplus sharpness must be nonzero");
    let mut alg = Reals;
    let sharp = alpha * alpha;
    softplus_gen(&mut alg, x, sharp)
}

/// Squared softplus with sharpness `β` (used as β² internally): returns the
/// value and its first two derivatives.
pub fn softplus_squared(x: f64, beta: f64) -> (f64, f64, f64) {
    assert!(beta != 0.0, "activation sharpness must be nonzero");
    let mut alg = Reals;
    let sharp = beta * beta;
    let (v, d1, d2) = sps_gen(&mut alg, x, sharp, true);
    (v, d1, d2.unwrap())
}

// ---------------------------------------------------------------------------
// Generic forward pass
// ---------------------------------------------------------------------------

/// Index of the (a, b) entry, a ≤ b, in a packed upper triangle of order r.
pub(crate) fn pair_index(r: usize, a: usize, b: usize) -> usize {
    debug_assert!(a <= b && b < r);
    a * r - a * (a + 1) / 2 + b
}

/// All (a, b) with a ≤ b < r, in pack order.
pub(crate) fn upper_pairs(r: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(r * (r + 1) / 2);
    for a in 0..r {
        for b in a..r {
            out.push((a, b));
        }
    }
    out
}

/// Expands a packed upper triangle to a full (bitwise) symmetric matrix.
pub(crate) fn mirror_upper(r: usize, upper: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(r, r);
    for a in 0..r {
        for b in a..r {
            let v = upper[pair_index(r, a, b)];
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    m
}

/// Network parameters with the nonnegativity constraint already applied,
/// ready for repeated per-sample evaluation.
pub(crate) struct NetVars<S> {
    pub w0: Vec<S>,
    pub b0: Vec<S>,
    pub hidden: Vec<HiddenVars<S>>,
    pub wz_out: Vec<S>,
    pub wx_out: Vec<S>,
    /// Packed upper triangle of ÃᵀÃ.
    pub a_quad: Vec<S>,
    pub beta_eff: S,
}

pub(crate) struct HiddenVars<S> {
    pub wz: Vec<S>,
    pub wx: Vec<S>,
    pub b: Vec<S>,
}

/// Constant standardization terms embedded into the active algebra.
pub(crate) struct StdConsts<S> {
    pub mean: Vec<S>,
    pub inv_std: Vec<S>,
}

pub(crate) fn prepare_std<A: Algebra>(alg: &mut A, std: &Standardizer) -> StdConsts<A::S> {
    StdConsts {
        mean: std.mean.iter().map(|&v| alg.lit(v)).collect(),
        inv_std: std.std.iter().map(|&v| alg.lit(1.0 / v)).collect(),
    }
}

/// Applies the softplus weight constraint and precomputes ÃᵀÃ.
pub(crate) fn prepare_net<A: Algebra>(
    alg: &mut A,
    arch: &IcnnArch,
    theta: &[A::S],
) -> NetVars<A::S> {
    let layout = ParamLayout::new(arch);
    debug_assert_eq!(theta.len(), layout.total);
    let r = arch.input_dim;
    let alpha_raw = theta[layout.alpha];
    let beta_raw = theta[layout.beta];
    let alpha_eff = alg.mul(alpha_raw, alpha_raw);
    let beta_eff = alg.mul(beta_raw, beta_raw);
    let constrain = |alg: &mut A, raw: &[A::S]| -> Vec<A::S> {
        raw.iter()
            .map(|&w| softplus_gen(alg, w, alpha_eff))
            .collect()
    };
    let hidden = layout
        .hidden
        .iter()
        .map(|hr| HiddenVars {
            wz: constrain(alg, &theta[hr.wz.clone()]),
            wx: theta[hr.wx.clone()].to_vec(),
            b: theta[hr.b.clone()].to_vec(),
        })
        .collect();
    let wz_out = constrain(alg, &theta[layout.wz_out.clone()]);
    // ÃᵀÃ upper triangle: [a,b] = Σ_k Ã[k,a] Ã[k,b]; Ã is row-major.
    let a_raw = &theta[layout.a_tilde.clone()];
    let mut cols: Vec<Vec<A::S>> = Vec::with_capacity(r);
    for c in 0..r {
        cols.push((0..r).map(|k| a_raw[k * r + c]).collect());
    }
    let mut a_quad = Vec::with_capacity(r * (r + 1) / 2);
    for a in 0..r {
        for b in a..r {
            a_quad.push(alg.dot(&cols[a], &cols[b]));
        }
    }
    NetVars {
        w0: theta[layout.w0.clone()].to_vec(),
        b0: theta[layout.b0.clone()].to_vec(),
        hidden,
        wz_out,
        wx_out: theta[layout.wx_out.clone()].to_vec(),
        a_quad,
        beta_eff,
    }
}

/// Raw convex energy (network + quadratic, *no* affine corrections) with its
/// input gradient and packed input Hessian.
pub(crate) struct RawEval<S> {
    pub e: S,
    pub g: Option<Vec<S>>,
    pub h_upper: Option<Vec<S>>,
}

/// Forward pass at one input, propagating the requested derivative orders.
pub(crate) fn net_eval<A: Algebra>(
    alg: &mut A,
    arch: &IcnnArch,
    net: &NetVars<A::S>,
    stdc: &StdConsts<A::S>,
    x_raw: &[A::S],
    need_grad: bool,
    need_hess: bool,
) -> Result<RawEval<A::S>> {
    let r = arch.input_dim;
    let h = arch.width;
    debug_assert_eq!(x_raw.len(), r);
    let need_grad = need_grad || need_hess;
    let pairs = upper_pairs(r);
    let npairs = pairs.len();

    // Standardized input.
    let s: Vec<A::S> = (0..r)
        .map(|k| {
            let d = alg.sub(x_raw[k], stdc.mean[k]);
            alg.mul(d, stdc.inv_std[k])
        })
        .collect();

    // Input block. Derivatives are tracked w.r.t. the raw input, so the
    // pre-activation gradient row is W0[j,:] ∘ 1/σ.
    let mut z: Vec<A::S> = Vec::with_capacity(h);
    // jt[k][j] = ∂z_j/∂x_k, stored input-major for cheap column dots.
    let mut jt: Vec<Vec<A::S>> = vec![Vec::with_capacity(h); if need_grad { r } else { 0 }];
    let mut ht: Vec<Vec<A::S>> = vec![Vec::with_capacity(h); if need_hess { npairs } else { 0 }];
    let mut pg: Vec<A::S> = Vec::with_capacity(r);
    for j in 0..h {
        let row = &net.w0[j * r..(j + 1) * r];
        let d = alg.dot(row, &s);
        let p = alg.add(d, net.b0[j]);
        let (phi, d1, d2) = sps_gen(alg, p, net.beta_eff, need_hess);
        z.push(phi);
        if need_grad {
            pg.clear();
            for k in 0..r {
                pg.push(alg.mul(row[k], stdc.inv_std[k]));
            }
            for k in 0..r {
                let v = alg.mul(d1, pg[k]);
                jt[k].push(v);
            }
            if need_hess {
                let d2 = d2.expect("curvature requested");
                for (pi, &(a, b)) in pairs.iter().enumerate() {
                    let gg = alg.mul(pg[a], pg[b]);
                    let v = alg.mul(d2, gg);
                    ht[pi].push(v);
                }
            }
        }
    }
    check_finite(alg, &z, 1)?;

    // Hidden blocks.
    for (li, hv) in net.hidden.iter().enumerate() {
        let mut z_new = Vec::with_capacity(h);
        let mut jt_new: Vec<Vec<A::S>> = vec![Vec::with_capacity(h); if need_grad { r } else { 0 }];
        let mut ht_new: Vec<Vec<A::S>> =
            vec![Vec::with_capacity(h); if need_hess { npairs } else { 0 }];
        for j in 0..h {
            let wz_row = &hv.wz[j * h..(j + 1) * h];
            let wx_row = &hv.wx[j * r..(j + 1) * r];
            let dz = alg.dot(wz_row, &z);
            let dx = alg.dot(wx_row, &s);
            let lin = alg.add(dz, dx);
            let p = alg.add(lin, hv.b[j]);
            let (phi, d1, d2) = sps_gen(alg, p, net.beta_eff, need_hess);
            z_new.push(phi);
            if need_grad {
                pg.clear();
                for k in 0..r {
                    let carry = alg.dot(wz_row, &jt[k]);
                    let skip = alg.mul(wx_row[k], stdc.inv_std[k]);
                    pg.push(alg.add(carry, skip));
                }
                for k in 0..r {
                    let v = alg.mul(d1, pg[k]);
                    jt_new[k].push(v);
                }
                if need_hess {
                    let d2 = d2.expect("curvature requested");
                    for (pi, &(a, b)) in pairs.iter().enumerate() {
                        let carry = alg.dot(wz_row, &ht[pi]);
                        let gg = alg.mul(pg[a], pg[b]);
                        let bend = alg.mul(d2, gg);
                        let flow = alg.mul(d1, carry);
                        let v = alg.add(bend, flow);
                        ht_new[pi].push(v);
                    }
                }
            }
        }
        z = z_new;
        jt = jt_new;
        ht = ht_new;
        check_finite(alg, &z, li + 2)?;
    }

    // Linear output stage (no activation, no bias).
    let ez = alg.dot(&net.wz_out, &z);
    let ex = alg.dot(&net.wx_out, &s);
    let mut e = alg.add(ez, ex);

    // Quadratic pass-through on the raw input.
    let mut a_rows: Vec<Vec<A::S>> = Vec::with_capacity(r);
    for a in 0..r {
        a_rows.push(
            (0..r)
                .map(|b| net.a_quad[pair_index(r, a.min(b), a.max(b))])
                .collect(),
        );
    }
    let q: Vec<A::S> = (0..r).map(|a| alg.dot(&a_rows[a], x_raw)).collect();
    let eq = alg.dot(x_raw, &q);
    e = alg.add(e, eq);
    if !alg.val(e).is_finite() {
        return Err(Error::NonFinite("network output".into()));
    }

    let g = if need_grad {
        let mut g = Vec::with_capacity(r);
        for k in 0..r {
            let net_part = alg.dot(&net.wz_out, &jt[k]);
            let skip = alg.mul(net.wx_out[k], stdc.inv_std[k]);
            let lin = alg.add(net_part, skip);
            let quad = alg.scale(q[k], 2.0);
            g.push(alg.add(lin, quad));
        }
        Some(g)
    } else {
        None
    };
    let h_upper = if need_hess {
        let mut hu = Vec::with_capacity(npairs);
        for (pi, &(a, b)) in pairs.iter().enumerate() {
            let net_part = alg.dot(&net.wz_out, &ht[pi]);
            let quad = alg.scale(net.a_quad[pair_index(r, a, b)], 2.0);
            hu.push(alg.add(net_part, quad));
        }
        Some(hu)
    } else {
        None
    };
    Ok(RawEval { e, g, h_upper })
}

fn check_finite<A: Algebra>(alg: &A, z: &[A::S], layer: usize) -> Result<()> {
    for &v in z {
        if !alg.val(v).is_finite() {
            return Err(Error::NonFinite(format!("hidden layer {layer}")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Convex energy surrogate with frozen input scaling and affine corrections.
#[derive(Debug, Clone)]
pub struct PannModel {
    pub arch: IcnnArch,
    pub standardizer: Standardizer,
    /// Flat raw parameters in [`ParamLayout`] order.
    pub params: Vec<f64>,
    /// net(0) at the current parameters.
    pub energy_offset: f64,
    /// ∇net(0) at the current parameters.
    pub force_offset: DVector<f64>,
    /// Seed the initializer was drawn from, kept for provenance.
    pub init_seed: u64,
}

impl PannModel {
    /// Glorot-uniform initialization of all weight matrices (raw, before the
    /// nonnegativity constraint); biases start at zero, α = β = 1.
    pub fn glorot(arch: IcnnArch, standardizer: Standardizer, seed: u64) -> Result<Self> {
        if standardizer.dim() != arch.input_dim {
            return Err(Error::input(format!(
                "standardizer dimension {} does not match input dimension {}",
                standardizer.dim(),
                arch.input_dim
            )));
        }
        if arch.input_dim == 0 || arch.width == 0 || arch.hidden_layers == 0 {
            return Err(Error::input("architecture dimensions must be positive"));
        }
        let layout = ParamLayout::new(&arch);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, h) = (arch.input_dim, arch.width);
        let fill = |params: &mut [f64], range: std::ops::Range<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for slot in params[range].iter_mut() {
                *slot = rng.random_range(-bound..bound);
            }
        };
        fill(&mut params, layout.w0.clone(), r, h, &mut rng);
        for hr in &layout.hidden {
            fill(&mut params, hr.wz.clone(), h, h, &mut rng);
            fill(&mut params, hr.wx.clone(), r, h, &mut rng);
        }
        fill(&mut params, layout.wz_out.clone(), h, 1, &mut rng);
        fill(&mut params, layout.wx_out.clone(), r, 1, &mut rng);
        fill(&mut params, layout.a_tilde.clone(), r, r, &mut rng);
        params[layout.alpha] = 1.0;
        params[layout.beta] = 1.0;
        let mut model = PannModel {
            arch,
            standardizer,
            params,
            energy_offset: 0.0,
            force_offset: DVector::zeros(arch.input_dim),
            init_seed: seed,
        };
        model.recompute_offsets();
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Replaces the quadratic factor with the physically seeded one,
    /// `ÃᵀÃ = K_r0 / 2`, and refreshes the corrections.
    pub fn apply_physical_quadratic(&mut self, k_r0: &DMatrix<f64>) -> Result<()> {
        let a = physical_quadratic_factor(k_r0)?;
        let r = self.arch.input_dim;
        if a.nrows() != r {
            return Err(Error::input(format!(
                "quadratic factor is {}×{}, input dimension is {r}",
                a.nrows(),
                a.ncols()
            )));
        }
        let layout = ParamLayout::new(&self.arch);
        for i in 0..r {
            for j in 0..r {
                self.params[layout.a_tilde.start + i * r + j] = a[(i, j)];
            }
        }
        self.recompute_offsets();
        Ok(())
    }

    /// Re-evaluates net(0) and ∇net(0). Must be called after any parameter
    /// change; the constructors and the trainer do so automatically.
    pub fn recompute_offsets(&mut self) {
        let (e0, g0) = self
            .raw_origin()
            .expect("origin evaluation cannot overflow with finite parameters");
        self.energy_offset = e0;
        self.force_offset = g0;
    }

    fn raw_origin(&self) -> Result<(f64, DVector<f64>)> {
        let mut alg = Reals;
        let net = prepare_net(&mut alg, &self.arch, &self.params);
        let stdc = prepare_std(&mut alg, &self.standardizer);
        let zeros = vec![0.0; self.arch.input_dim];
        let raw = net_eval(&mut alg, &self.arch, &net, &stdc, &zeros, true, false)?;
        Ok((
            raw.e,
            DVector::from_vec(raw.g.expect("gradient requested")),
        ))
    }

    /// Corrected energy, force, and (optionally) tangent at a reduced state.
    pub fn evaluate(
        &self,
        x_r: &DVector<f64>,
        need_hess: bool,
    ) -> Result<(f64, DVector<f64>, Option<DMatrix<f64>>)> {
        let r = self.arch.input_dim;
        if x_r.len() != r {
            return Err(Error::input(format!(
                "state has {} entries, model input dimension is {r}",
                x_r.len()
            )));
        }
        let mut alg = Reals;
        let net = prepare_net(&mut alg, &self.arch, &self.params);
        let stdc = prepare_std(&mut alg, &self.standardizer);
        let x: Vec<f64> = x_r.iter().copied().collect();
        let raw = net_eval(&mut alg, &self.arch, &net, &stdc, &x, true, need_hess)?;
        let g = raw.g.expect("gradient requested");
        let e_hat = raw.e - self.force_offset.dot(x_r) - self.energy_offset;
        let f_hat = DVector::from_fn(r, |k, _| g[k] - self.force_offset[k]);
        let k_hat = raw.h_upper.map(|hu| mirror_upper(r, &hu));
        Ok((e_hat, f_hat, k_hat))
    }
}

/// Factor Ã with ÃᵀÃ = K/2 for a symmetric positive semidefinite K, via the
/// eigendecomposition K = QΛQᵀ: Ã = diag(√(Λ/2)) Qᵀ. Eigenvalues inside the
/// negative noise band are clamped to zero; genuinely negative ones are
/// rejected.
pub fn physical_quadratic_factor(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = k.nrows();
    if k.ncols() != r || r == 0 {
        return Err(Error::input("quadratic seed must be square and nonempty"));
    }
    let scale = k.amax();
    if (k - k.transpose()).amax() > 1e-10 * (1.0 + scale) {
        return Err(Error::input("quadratic seed must be symmetric"));
    }
    let sym = (k + k.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let floor = -1e-10 * (1.0 + scale);
    let mut lambda = eig.eigenvalues.clone();
    for v in lambda.iter_mut() {
        if *v < floor {
            return Err(Error::input(format!(
                "quadratic seed has negative eigenvalue {v}"
            )));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    // Ã = diag(√(λ/2)) Qᵀ.
    let mut a = eig.eigenvectors.transpose();
    for (i, mut row) in a.row_iter_mut().enumerate() {
        let s = (lambda[i] / 2.0).sqrt();
        for v in row.iter_mut() {
            *v *= s;
        }
    }
    Ok(a)
}
