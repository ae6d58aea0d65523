//! Second-order training of the convex energy surrogate.
//!
//! The loss compares the surrogate's energy, force (input gradient), and
//! tangent (input Hessian) against reduced reference data with halved mean
//! squared errors:
//!
//! ```text
//! L_E = 1/(2N)    Σ_s (ê_s - e_s)²
//! L_F = 1/(2Nr)   Σ_s Σ_k (f̂_sk - f_sk)²
//! L_K = 1/(2Nr²)  Σ_s Σ_ij (K̂_sij - K_sij)²
//! ```
//!
//! The three terms live on very different scales, so several balancing
//! strategies are provided: fixed weights, loss-magnitude equalization, and
//! gradient-norm equalization with an exponential moving average. Gradients
//! can be blended as a weighted sum or with a conflict-free aggregation that
//! projects away mutually opposed components. Optimization is full-batch
//! Adam; every epoch rebuilds the reverse-mode tape because the numerically
//! stable activations branch on current values.


use crate::autodiff::{Algebra, Reals, Tape, Var};
use crate::error::{Error, Result};
use crate::pann::{net_eval, prepare_net, prepare_std, upper_pairs, PannModel};
use crate::reduction::ReducedDataset;

/// How the three loss weights are chosen each epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BalanceKind {
    /// Unit weights on all three terms.
    PlainSum,
    /// Only the tangent term drives the update.
    HessianOnly,
    /// Fixed weights (energy, force, tangent).
    StaticWeights([f64; 3]),
    /// Weights proportional to total-over-own gradient norm, smoothed by an
    /// exponential moving average: every term then pulls with a comparable
    /// gradient magnitude.
    DynamicPinn,
    /// Weights from relative loss magnitudes, `λ_i = (1 - L_i/ΣL)/2`,
    /// summing to one.
    DynamicSameScale,
}

/// Fixed-weight preset favoring rough parity of raw magnitudes.
pub fn static_intuitive() -> [f64; 3] {
    [1.0, 1.0, 1e-9]
}

/// Fixed-weight preset tuned toward the force term.
pub fn static_maximum() -> [f64; 3] {
    [1.0, 9e2, 9e-8]
}

/// Fixed-weight preset derived from typical loss standard deviations.
pub fn static_stddev() -> [f64; 3] {
    [3e-1, 2e-2, 6e-12]
}

/// Linear ramp on the tangent weight: zero before `start`, full after `end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HessianRamp {
    pub start: usize,
    pub end: usize,
}

impl HessianRamp {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if end <= start {
            return Err(Error::input(format!(
                "ramp must end after it starts (got {start}..{end})"
            )));
        }
        Ok(HessianRamp { start, end })
    }

    /// Multiplier in [0, 1] applied to the tangent weight at `epoch`.
    pub fn factor(&self, epoch: usize) -> f64 {
        let t = (epoch as f64 - self.start as f64) / (self.end as f64 - self.start as f64);
        t.clamp(0.0, 1.0)
    }
}

/// How per-term gradients combine into one update direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Plain weighted sum of the per-term gradients.
    WeightedSum,
    /// Projects each weighted gradient off every peer it opposes (negative
    /// inner product) before summing; one sweep in term order against the
    /// unmodified peers.
    NonConflicting,
}

/// Complete balancing configuration for a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceStrategy {
    pub kind: BalanceKind,
    pub ramp: Option<HessianRamp>,
    pub aggregation: Aggregation,
    /// Smoothing factor of the gradient-norm moving average.
    pub ema_alpha: f64,
}

impl BalanceStrategy {
    pub fn new(kind: BalanceKind) -> Self {
        BalanceStrategy {
            kind,
            ramp: None,
            aggregation: Aggregation::WeightedSum,
            ema_alpha: 0.9,
        }
    }
}

/// Loss-magnitude weights: `λ_i = (1 - L_i/ΣL)/2`, which sum to one; an
/// all-zero loss vector falls back to uniform thirds.
pub fn same_scale_weights(losses: &[f64; 3]) -> [f64; 3] {
    let total: f64 = losses.iter().sum();
    if total == 0.0 {
        return [1.0 / 3.0; 3];
    }
    [
        0.5 * (1.0 - losses[0] / total),
        0.5 * (1.0 - losses[1] / total),
        0.5 * (1.0 - losses[2] / total),
    ]
}

/// Gradient-norm weights `λ̂_i = (Σ_j ‖g_j‖)/‖g_i‖`, smoothed across epochs:
/// the average starts at the first estimate and then blends with factor
/// `alpha`. Terms with vanished gradients get weight zero.
pub fn pinn_weights(norms: &[f64; 3], ema: &mut Option<[f64; 3]>, alpha: f64) -> [f64; 3] {
    let total: f64 = norms.iter().sum();
    let mut raw = [0.0; 3];
    for i in 0..3 {
        if norms[i] > 0.0 {
            raw[i] = total / norms[i];
        }
    }
    let next = match ema {
        None => raw,
        Some(prev) => {
            let mut out = [0.0; 3];
            for i in 0..3 {
                out[i] = alpha * prev[i] + (1.0 - alpha) * raw[i];
            }
            out
        }
    };
    *ema = Some(next);
    next
}

/// Conflict-free gradient blend: each gradient is swept once, in index
/// order, against the *original* peers, removing any component with a
/// negative inner product; the cleaned gradients are summed.
pub fn aggregate_nonconflicting(grads: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = grads.first() else {
        return Vec::new();
    };
    let d = first.len();
    let mut out = vec![0.0; d];
    for (i, gi) in grads.iter().enumerate() {
        let mut g = gi.clone();
        for (j, gj) in grads.iter().enumerate() {
            if i == j {
                continue;
            }
            let dot: f64 = g.iter().zip(gj).map(|(a, b)| a * b).sum();
            if dot < 0.0 {
                let n2: f64 = gj.iter().map(|v| v * v).sum();
                if n2 > 0.0 {
                    let c = dot / n2;
                    for (gk, &pjk) in g.iter_mut().zip(gj) {
                        *gk -= c * pjk;
                    }
                }
            }
        }
        for (o, v) in out.iter_mut().zip(&g) {
            *o += v;
        }
    }
    out
}

/// Full-batch Adam with bias correction.
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Loss evaluation
// ---------------------------------------------------------------------------

/// Builds all three losses over a dataset, generically: on a [`Tape`] for
/// training, on [`Reals`] for metrics. Shapes and op order are identical in
/// both, so the two paths agree bitwise.
fn losses_generic<A: Algebra>(
    alg: &mut A,
    model_arch: &crate::pann::IcnnArch,
    standardizer: &crate::pann::Standardizer,
    theta: &[A::S],
    data: &ReducedDataset,
) -> Result<[A::S; 3]> {
    let r = data.r;
    if r != model_arch.input_dim {
        return Err(Error::input(format!(
            "dataset dimension {r} does not match model input dimension {}",
            model_arch.input_dim
        )));
    }
    let n = data.x_r.len();
    if n == 0 {
        return Err(Error::input("cannot evaluate losses on an empty dataset"));
    }
    let net = prepare_net(alg, model_arch, theta);
    let stdc = prepare_std(alg, standardizer);

    // Origin corrections, shared across samples: ê(x) = raw(x) - g0·x - e0.
    let zeros: Vec<A::S> = (0..r).map(|_| alg.lit(0.0)).collect();
    let raw0 = net_eval(alg, model_arch, &net, &stdc, &zeros, true, false)?;
    let g0 = raw0.g.expect("gradient requested");
    let e0 = raw0.e;

    let pairs = upper_pairs(r);
    let mut terms_e = Vec::with_capacity(n);
    let mut terms_f = Vec::with_capacity(n * r);
    let mut terms_k = Vec::with_capacity(n * pairs.len());
    for s in 0..n {
        let x_lit: Vec<A::S> = data.x_r[s].iter().map(|&v| alg.lit(v)).collect();
        let raw = net_eval(alg, model_arch, &net, &stdc, &x_lit, true, true)?;
        let aff = alg.dot(&g0, &x_lit);
        let shift = alg.add(aff, e0);
        let e_hat = alg.sub(raw.e, shift);
        let target = alg.lit(data.e[s]);
        let de = alg.sub(e_hat, target);
        terms_e.push(alg.mul(de, de));

        let g = raw.g.expect("gradient requested");
        for k in 0..r {
            let f_hat = alg.sub(g[k], g0[k]);
            let target = alg.lit(data.f_r[s][k]);
            let df = alg.sub(f_hat, target);
            terms_f.push(alg.mul(df, df));
        }

        let hu = raw.h_upper.expect("curvature requested");
        let k_ref = data.k_r[s].as_ref().ok_or_else(|| {
            Error::input(format!("sample {s} carries no tangent; training needs one"))
        })?;
        // The packed upper triangle covers the full double sum: off-diagonal
        // squared differences count twice (the reference tangent is
        // symmetric to rounding; its upper triangle is read).
        for (pi, &(a, b)) in pairs.iter().enumerate() {
            let target = alg.lit(k_ref[(a, b)]);
            let dk = alg.sub(hu[pi], target);
            let sq = alg.mul(dk, dk);
            terms_k.push(if a == b { sq } else { alg.scale(sq, 2.0) });
        }
    }
    let nf = n as f64;
    let rf = r as f64;
    let se = alg.sum(&terms_e);
    let le = alg.scale(se, 1.0 / (2.0 * nf));
    let sf = alg.sum(&terms_f);
    let lf = alg.scale(sf, 1.0 / (2.0 * nf * rf));
    let sk = alg.sum(&terms_k);
    let lk = alg.scale(sk, 1.0 / (2.0 * nf * rf * rf));
    Ok([le, lf, lk])
}

/// Energy, force, and tangent losses of a model over a dataset.
pub fn dataset_losses(model: &PannModel, data: &ReducedDataset) -> Result<[f64; 3]> {
    let mut alg = Reals;
    losses_generic(
        &mut alg,
        &model.arch,
        &model.standardizer,
        &model.params,
        data,
    )
}

/// Per-term losses and their parameter gradients, computed on the same tape
/// the trainer uses — for balance diagnostics and derivative checks.
pub fn loss_gradients(
    model: &PannModel,
    data: &ReducedDataset,
) -> Result<([f64; 3], [Vec<f64>; 3])> {
    let mut tape = Tape::new();
    let theta: Vec<Var> = model.params.iter().map(|&v| tape.leaf(v)).collect();
    let ls = losses_generic(&mut tape, &model.arch, &model.standardizer, &theta, data)?;
    let values = [tape.value(ls[0]), tape.value(ls[1]), tape.value(ls[2])];
    let mut adj = Vec::new();
    let grads = std::array::from_fn(|i| {
        tape.gradient_into(ls[i], &mut adj);
        theta.iter().map(|v| adj[v.index()]).collect()
    });
    Ok((values, grads))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub strategy: BalanceStrategy,
}

/// One history row: losses at the *start* of the epoch (row 0 is the
/// untouched initialization; the final row follows the last step), plus the
/// weights used for that epoch's update.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: [f64; 3],
    pub val: [f64; 3],
    pub weights: [f64; 3],
}

/// A finished run: the checkpoint with the lowest validation force loss,
/// where it occurred, the full loss history, and — if the run blew up — the
/// reason it stopped early.
pub struct TrainedRun {
    pub model: PannModel,
    pub best_epoch: usize,
    pub best_val_lf: f64,
    pub history: Vec<EpochRecord>,
    pub failure: Option<String>,
}

/// Trains `model` on `train_data`, checkpointing on validation force loss.
///
/// A numerical blow-up (overflow in an activation, non-finite loss) does not
/// abort the study: the run is returned with `failure` set and the best
/// checkpoint reached so far. Structural problems (dimension mismatches,
/// missing tangents) are hard errors.
pub fn train(
    train_data: &ReducedDataset,
    val_data: &ReducedDataset,
    mut model: PannModel,
    settings: &TrainSettings,
) -> Result<TrainedRun> {
    let strategy = settings.strategy;
    if !(0.0..1.0).contains(&strategy.ema_alpha) {
        return Err(Error::input(format!(
            "moving-average factor must lie in [0, 1), got {}",
            strategy.ema_alpha
        )));
    }
    if settings.learning_rate <= 0.0 {
        return Err(Error::input("learning rate must be positive"));
    }
    let p = model.params.len();
    let mut adam = Adam::new(p, settings.learning_rate);
    let mut tape = Tape::new();
    let mut ema: Option<[f64; 3]> = None;
    let mut history: Vec<EpochRecord> = Vec::with_capacity(settings.epochs + 1);
    let mut best_epoch = 0usize;
    let mut best_val_lf = f64::INFINITY;
    let mut best_params = model.params.clone();
    let mut failure = None;
    let mut adj: Vec<f64> = Vec::new();

    for epoch in 0..=settings.epochs {
        tape.clear();
        let theta: Vec<Var> = model.params.iter().map(|&v| tape.leaf(v)).collect();
        let ls = match losses_generic(
            &mut tape,
            &model.arch,
            &model.standardizer,
            &theta,
            train_data,
        ) {
            Ok(ls) => ls,
            Err(Error::NonFinite(what)) => {
                failure = Some(format!("epoch {epoch}: overflow in {what}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let lvals = [tape.value(ls[0]), tape.value(ls[1]), tape.value(ls[2])];
        if lvals.iter().any(|v| !v.is_finite()) {
            failure = Some(format!(
                "epoch {epoch}: non-finite loss (E {}, F {}, K {})",
                lvals[0], lvals[1], lvals[2]
            ));
            break;
        }

        // Per-term parameter gradients, where the strategy needs them.
        let needs_per_term = strategy.kind == BalanceKind::DynamicPinn
            || strategy.aggregation == Aggregation::NonConflicting;
        let mut per_term: [Option<Vec<f64>>; 3] = [None, None, None];
        if needs_per_term {
            for i in 0..3 {
                tape.gradient_into(ls[i], &mut adj);
                per_term[i] = Some(theta.iter().map(|v| adj[v.index()]).collect());
            }
        }
        let mut weights = match strategy.kind {
            BalanceKind::PlainSum => [1.0, 1.0, 1.0],
            BalanceKind::HessianOnly => [0.0, 0.0, 1.0],
            BalanceKind::StaticWeights(w) => w,
            BalanceKind::DynamicSameScale => same_scale_weights(&lvals),
            BalanceKind::DynamicPinn => {
                let norms = std::array::from_fn(|i| {
                    let g = per_term[i].as_ref().expect("per-term gradients computed");
                    g.iter().map(|v| v * v).sum::<f64>().sqrt()
                });
                pinn_weights(&norms, &mut ema, strategy.ema_alpha)
            }
        };
        if let Some(ramp) = strategy.ramp {
            weights[2] *= ramp.factor(epoch);
        }

        // Metrics at the current parameters; checkpoint on validation force
        // loss. The final row records the state after the last step.
        let val = match dataset_losses(&model, val_data) {
            Ok(v) => v,
            Err(Error::NonFinite(what)) => {
                failure = Some(format!("epoch {epoch}: overflow in {what} (validation)"));
                break;
            }
            Err(e) => return Err(e),
        };
        history.push(EpochRecord {
            epoch,
            train: lvals,
            val,
            weights,
        });
        if val[1] < best_val_lf {
            best_val_lf = val[1];
            best_epoch = epoch;
            best_params.copy_from_slice(&model.params);
        }
        if epoch == settings.epochs {
            break;
        }

        let grad: Vec<f64> = match strategy.aggregation {
            Aggregation::WeightedSum => {
                if needs_per_term {
                    let mut g = vec![0.0; p];
                    for i in 0..3 {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        let gi = per_term[i].as_ref().expect("per-term gradients computed");
                        for (acc, &v) in g.iter_mut().zip(gi) {
                            *acc += weights[i] * v;
                        }
                    }
                    g
                } else {
                    // One backward sweep over the weighted total.
                    let mut total: Option<Var> = None;
                    for i in 0..3 {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        let term = tape.scale(ls[i], weights[i]);
                        total = Some(match total {
                            None => term,
                            Some(acc) => tape.add(acc, term),
                        });
                    }
                    match total {
                        None => vec![0.0; p],
                        Some(t) => {
                            tape.gradient_into(t, &mut adj);
                            theta.iter().map(|v| adj[v.index()]).collect()
                        }
                    }
                }
            }
            Aggregation::NonConflicting => {
                let weighted: Vec<Vec<f64>> = (0..3)
                    .filter(|&i| weights[i] != 0.0)
                    .map(|i| {
                        let gi = per_term[i].as_ref().expect("per-term gradients computed");
                        gi.iter().map(|&v| weights[i] * v).collect()
                    })
                    .collect();
                if weighted.is_empty() {
                    vec![0.0; p]
                } else {
                    aggregate_nonconflicting(&weighted)
                }
            }
        };
        adam.step(&mut model.params, &grad);
    }

    model.params.copy_from_slice(&best_params);
    model.recompute_offsets();
    Ok(TrainedRun {
        model,
        best_epoch,
        best_val_lf,
        history,
        failure,
    })
}
