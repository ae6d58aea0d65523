//! Acceptance suite: one test per shipped guarantee, each printing a
//! `PASS`/`FAIL` line (visible with `cargo test --test acceptance --
//! --nocapture`). Tolerances are pinned here and nowhere else; loosening one
//! is a contract change, not a fix.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hyperred::cli::{
    self, run_build_tpwl, run_generate, run_reduce, run_report, run_solve, run_train,
    ExperimentConfig,
};
use hyperred::pann::{
    parameter_count, physical_quadratic_factor, IcnnArch, PannModel, Standardizer,
};
use hyperred::reduction::ReducedDataset;
use hyperred::refmodel::{RegimeLabel, TrussModel};
use hyperred::tpwl;
use hyperred::training::{
    self, dataset_losses, loss_gradients, pinn_weights, same_scale_weights, BalanceKind,
    HessianRamp,
};

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

/// Runs one criterion, prints its verdict with the elapsed time, enforces the
/// wall-clock budget, and fails the test on any reported defect.
fn criterion(name: &str, budget: Duration, body: impl FnOnce() -> Result<(), String>) {
    let started = Instant::now();
    let result = body();
    let elapsed = started.elapsed();
    match &result {
        Ok(()) => println!("PASS  {name}  ({elapsed:.2?})"),
        Err(why) => println!("FAIL  {name}  ({elapsed:.2?}): {why}"),
    }
    if let Err(why) = result {
        panic!("{name}: {why}");
    }
    assert!(
        elapsed <= budget,
        "{name}: took {elapsed:.2?}, budget is {budget:.2?}"
    );
}

fn check(ok: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(why())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// Random symmetric positive definite matrix `RᵀR + I`.
fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let r = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    r.transpose() * &r + DMatrix::identity(n, n)
}

/// Random regression targets shaped like a projected dataset; the tangent
/// targets are symmetric, as projection guarantees for the real pipeline.
fn synthetic_dataset(rng: &mut ChaCha8Rng, r: usize, m: usize) -> ReducedDataset {
    let mut data = ReducedDataset {
        r,
        x_r: Vec::new(),
        e: Vec::new(),
        f_r: Vec::new(),
        k_r: Vec::new(),
        labels: Vec::new(),
    };
    for _ in 0..m {
        data.x_r.push(random_vector(rng, r, 1.5));
        data.e.push(rng.random_range(0.0..2.0));
        data.f_r.push(random_vector(rng, r, 1.0));
        let raw = DMatrix::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0));
        data.k_r.push(Some(&raw + raw.transpose()));
        data.labels.push(RegimeLabel::Interpolation);
    }
    data
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

#[test]
fn parameter_count_matches_closed_form() {
    criterion(
        "parameter count matches the closed form",
        Duration::from_secs(1),
        || {
            for (r, h, l, expected) in [(4, 50, 3, 5822), (4, 75, 2, 6472), (4, 150, 1, 922)] {
                let got = parameter_count(r, h, l);
                check(got == expected, || {
                    format!("count({r}, {h}, {l}) = {got}, expected {expected}")
                })?;
                let arch = IcnnArch {
                    input_dim: r,
                    width: h,
                    hidden_layers: l,
                };
                let model =
                    PannModel::glorot(arch, Standardizer::identity(r), 1).map_err(|e| e.to_string())?;
                check(model.params.len() == expected, || {
                    format!(
                        "glorot({r}, {h}, {l}) allocated {} parameters, expected {expected}",
                        model.params.len()
                    )
                })?;
            }
            Ok(())
        },
    );
}

#[test]
fn network_derivatives_match_finite_differences() {
    criterion(
        "forces and tangents match finite differences of the energy",
        Duration::from_secs(30),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);

            // Full-order model first: internal force against differentiated
            // energy, tangent against differentiated force.
            let truss = TrussModel::cantilever_lattice(5, 3, 1.0, 1.0, 1000.0)
                .map_err(|e| e.to_string())?;
            let n = truss.n();
            for probe in 0..50 {
                let x = random_vector(&mut rng, n, 0.05);
                let state = truss.evaluate(&x).map_err(|e| e.to_string())?;
                for j in 0..n {
                    let h = 1e-6 * (1.0 + x[j].abs());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let sp = truss.evaluate(&xp).map_err(|e| e.to_string())?;
                    let sm = truss.evaluate(&xm).map_err(|e| e.to_string())?;
                    let fd_force = (sp.e - sm.e) / (2.0 * h);
                    check(rel_err(state.f[j], fd_force) <= 1e-5, || {
                        format!(
                            "model probe {probe}: force[{j}] = {} vs finite difference {fd_force}",
                            state.f[j]
                        )
                    })?;
                    for i in 0..n {
                        let fd_tangent = (sp.f[i] - sm.f[i]) / (2.0 * h);
                        check(rel_err(state.k[(i, j)], fd_tangent) <= 1e-4, || {
                            format!(
                                "model probe {probe}: tangent[{i},{j}] = {} vs finite \
                                 difference {fd_tangent}",
                                state.k[(i, j)]
                            )
                        })?;
                    }
                }
            }

            // Then the network surrogate, to tighter tolerances.
            let arch = IcnnArch {
                input_dim: 3,
                width: 12,
                hidden_layers: 2,
            };
            let samples: Vec<DVector<f64>> = (0..40).map(|_| random_vector(&mut rng, 3, 2.0)).collect();
            let standardizer = Standardizer::fit(&samples).map_err(|e| e.to_string())?;
            let mut model =
                PannModel::glorot(arch, standardizer, 21).map_err(|e| e.to_string())?;
            let k0 = random_spd(&mut rng, 3);
            model.apply_physical_quadratic(&k0).map_err(|e| e.to_string())?;

            for probe in 0..50 {
                let x = random_vector(&mut rng, 3, 2.0);
                let (_, f, k) = model.evaluate(&x, true).map_err(|e| e.to_string())?;
                let k = k.expect("tangent requested");
                for j in 0..3 {
                    let h = 1e-6 * (1.0 + x[j].abs());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let (ep, fp, _) = model.evaluate(&xp, false).map_err(|e| e.to_string())?;
                    let (em, fm, _) = model.evaluate(&xm, false).map_err(|e| e.to_string())?;
                    let fd_force = (ep - em) / (2.0 * h);
                    check(rel_err(f[j], fd_force) <= 1e-6, || {
                        format!(
                            "probe {probe}: force[{j}] = {} vs finite difference {fd_force}",
                            f[j]
                        )
                    })?;
                    for i in 0..3 {
                        let fd_tangent = (fp[i] - fm[i]) / (2.0 * h);
                        check(rel_err(k[(i, j)], fd_tangent) <= 1e-5, || {
                            format!(
                                "probe {probe}: tangent[{i},{j}] = {} vs finite difference {fd_tangent}",
                                k[(i, j)]
                            )
                        })?;
                    }
                }
            }
            Ok(())
        },
    );
}

#[test]
fn training_gradients_match_finite_differences_for_all_balancings() {
    criterion(
        "loss gradients match finite differences under every balancing",
        Duration::from_secs(120),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let data = synthetic_dataset(&mut rng, 2, 5);
            let arch = IcnnArch {
                input_dim: 2,
                width: 8,
                hidden_layers: 2,
            };
            let standardizer = Standardizer::fit(&data.x_r).map_err(|e| e.to_string())?;
            let model = PannModel::glorot(arch, standardizer, 3).map_err(|e| e.to_string())?;
            let (losses, grads) = loss_gradients(&model, &data).map_err(|e| e.to_string())?;
            let norms: [f64; 3] = std::array::from_fn(|i| {
                grads[i].iter().map(|v| v * v).sum::<f64>().sqrt()
            });

            let kinds: [(&str, [f64; 3]); 5] = [
                ("plain-sum", [1.0, 1.0, 1.0]),
                ("hessian-only", [0.0, 0.0, 1.0]),
                ("static-intuitive", training::static_intuitive()),
                ("same-scale", same_scale_weights(&losses)),
                ("pinn", pinn_weights(&norms, &mut None, 0.9)),
            ];
            for (kind, weights) in kinds {
                // The trainer's update direction for this epoch's weights...
                let combined: Vec<f64> = (0..model.params.len())
                    .map(|j| (0..3).map(|i| weights[i] * grads[i][j]).sum())
                    .collect();
                // ...against finite differences of the frozen-weight objective.
                let mut fd = vec![0.0; model.params.len()];
                let mut probe = model.clone();
                for j in 0..probe.params.len() {
                    let h = 1e-6 * (1.0 + probe.params[j].abs());
                    let orig = probe.params[j];
                    probe.params[j] = orig + h;
                    let lp = dataset_losses(&probe, &data).map_err(|e| e.to_string())?;
                    probe.params[j] = orig - h;
                    let lm = dataset_losses(&probe, &data).map_err(|e| e.to_string())?;
                    probe.params[j] = orig;
                    let op: f64 = (0..3).map(|i| weights[i] * lp[i]).sum();
                    let om: f64 = (0..3).map(|i| weights[i] * lm[i]).sum();
                    fd[j] = (op - om) / (2.0 * h);
                }
                let diff: f64 = combined
                    .iter()
                    .zip(&fd)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let scale: f64 = 1.0 + fd.iter().map(|v| v * v).sum::<f64>().sqrt();
                check(diff / scale <= 1e-4, || {
                    format!("{kind}: gradient deviates from finite differences by {}", diff / scale)
                })?;
            }
            Ok(())
        },
    );
}

#[test]
fn structural_guarantees_hold_on_random_models() {
    criterion(
        "predicted tangents are symmetric PSD, energies convex, origin pinned",
        Duration::from_secs(120),
        || {
            let archs = [
                (2, 8, 1),
                (2, 8, 2),
                (2, 12, 2),
                (2, 16, 3),
                (3, 8, 3),
                (3, 12, 1),
                (3, 16, 2),
                (4, 8, 1),
                (4, 12, 3),
                (4, 16, 2),
            ];
            for (m, &(r, width, depth)) in archs.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + m as u64);
                let arch = IcnnArch {
                    input_dim: r,
                    width,
                    hidden_layers: depth,
                };
                // Alternate plain and standardized/physically seeded models.
                let mut model = if m % 2 == 0 {
                    PannModel::glorot(arch, Standardizer::identity(r), m as u64)
                        .map_err(|e| e.to_string())?
                } else {
                    let samples: Vec<DVector<f64>> =
                        (0..30).map(|_| random_vector(&mut rng, r, 2.0)).collect();
                    let s = Standardizer::fit(&samples).map_err(|e| e.to_string())?;
                    let mut model =
                        PannModel::glorot(arch, s, m as u64).map_err(|e| e.to_string())?;
                    let k0 = random_spd(&mut rng, r);
                    model.apply_physical_quadratic(&k0).map_err(|e| e.to_string())?;
                    model
                };
                model.recompute_offsets();

                // Origin: zero energy and zero force, by construction.
                let zero = DVector::zeros(r);
                let (e0, f0, _) = model.evaluate(&zero, false).map_err(|e| e.to_string())?;
                check(e0 == 0.0, || format!("model {m}: energy at origin is {e0}"))?;
                check(f0.norm() <= 1e-12, || {
                    format!("model {m}: force at origin has norm {}", f0.norm())
                })?;

                let mut prev: Option<(DVector<f64>, f64, DVector<f64>)> = None;
                for probe in 0..50 {
                    let x = random_vector(&mut rng, r, 2.0);
                    let (e, f, k) = model.evaluate(&x, true).map_err(|e| e.to_string())?;
                    let k = k.expect("tangent requested");
                    for a in 0..r {
                        for b in (a + 1)..r {
                            check(k[(a, b)].to_bits() == k[(b, a)].to_bits(), || {
                                format!("model {m} probe {probe}: tangent not bitwise symmetric")
                            })?;
                        }
                    }
                    let eig = k.clone().symmetric_eigen().eigenvalues;
                    let spread = eig.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                    let min = eig.iter().fold(f64::INFINITY, |acc, &v| acc.min(v));
                    check(min >= -1e-9 * (1.0 + spread), || {
                        format!("model {m} probe {probe}: tangent eigenvalue {min} (scale {spread})")
                    })?;
                    // First-order convexity against the previous probe.
                    if let Some((y, ey, fy)) = prev.take() {
                        let gap = e - (ey + fy.dot(&(&x - &y)));
                        check(gap >= -1e-9 * (1.0 + e.abs()), || {
                            format!("model {m} probe {probe}: convexity gap {gap}")
                        })?;
                    }
                    prev = Some((x, e, f));
                }
            }
            Ok(())
        },
    );
}

#[test]
fn physical_seeding_reproduces_half_the_rest_tangent() {
    criterion(
        "quadratic seed factor satisfies AᵀA = K/2 on random SPD tangents",
        Duration::from_secs(30),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            for trial in 0..20 {
                let r = [2usize, 4, 8][trial % 3];
                let k = random_spd(&mut rng, r);
                let a = physical_quadratic_factor(&k).map_err(|e| e.to_string())?;
                let err = (a.transpose() * &a - &k * 0.5).norm() / k.norm();
                check(err <= 1e-10, || {
                    format!("trial {trial} (r = {r}): relative factor error {err}")
                })?;
            }
            Ok(())
        },
    );
}

#[test]
fn tpwl_reproduces_stored_points_and_weights_partition_unity() {
    criterion(
        "piecewise-linear surrogate is exact at stored points; weights sum to one",
        Duration::from_secs(30),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            // Smooth synthetic trajectory with analytic forces and tangents.
            let r = 3;
            let m = 40;
            let mut data = ReducedDataset {
                r,
                x_r: Vec::new(),
                e: Vec::new(),
                f_r: Vec::new(),
                k_r: Vec::new(),
                labels: Vec::new(),
            };
            for s in 0..m {
                let t = s as f64 / (m - 1) as f64 * 2.0;
                let x = DVector::from_vec(vec![t, t * t, (1.5 * t).sin()]);
                // f(x) = x + 0.3 (x·x) x has Jacobian I(1 + 0.3 x·x) + 0.6 x xᵀ.
                let q = x.dot(&x);
                let f = &x * (1.0 + 0.3 * q);
                let k = DMatrix::identity(r, r) * (1.0 + 0.3 * q) + &x * x.transpose() * 0.6;
                data.x_r.push(x);
                data.e.push(0.5 * q);
                data.f_r.push(f);
                data.k_r.push(Some(k));
                data.labels.push(RegimeLabel::Interpolation);
            }
            let model = tpwl::build(&data, 0.5, tpwl::DEFAULT_BETA).map_err(|e| e.to_string())?;

            for &idx in &model.source_indices {
                let (f, _) = model.force_and_tangent(&data.x_r[idx]);
                let err = (&f - &data.f_r[idx]).norm() / (1.0 + data.f_r[idx].norm());
                check(err <= 1e-6, || {
                    format!("stored point {idx}: force reproduction error {err}")
                })?;
            }
            for probe in 0..1000 {
                let x = random_vector(&mut rng, r, 3.0);
                let w = model.weights(&x);
                let sum: f64 = w.iter().sum();
                check((sum - 1.0).abs() <= 1e-12, || {
                    format!("probe {probe}: weights sum to {sum}")
                })?;
                check(w.iter().all(|&v| (0.0..=1.0).contains(&v)), || {
                    format!("probe {probe}: a weight left [0, 1]")
                })?;
            }
            Ok(())
        },
    );
}

#[test]
fn balancing_weights_match_their_closed_forms() {
    criterion(
        "balancing weights match their closed forms",
        Duration::from_secs(1),
        || {
            // Loss-magnitude weights: λ_i = (1 - L_i/ΣL)/2.
            let w = same_scale_weights(&[1.0, 2.0, 3.0]);
            let expected = [5.0 / 12.0, 4.0 / 12.0, 3.0 / 12.0];
            for i in 0..3 {
                check((w[i] - expected[i]).abs() <= 1e-15, || {
                    format!("loss-magnitude weight {i}: {} vs {}", w[i], expected[i])
                })?;
            }
            let sum: f64 = w.iter().sum();
            check((sum - 1.0).abs() <= 1e-15, || format!("weights sum to {sum}"))?;
            for (i, &w) in same_scale_weights(&[2.0; 3]).iter().enumerate() {
                check((w - 1.0 / 3.0).abs() <= 1e-15, || {
                    format!("equal losses: weight {i} is {w}, expected 1/3")
                })?;
            }
            check(same_scale_weights(&[0.0; 3]) == [1.0 / 3.0; 3], || {
                "zero losses must fall back to uniform thirds".into()
            })?;

            // Gradient-norm weights: λ_i ‖g_i‖ identical across terms.
            let norms = [3.0, 0.5, 10.0];
            let w = pinn_weights(&norms, &mut None, 0.9);
            let total: f64 = norms.iter().sum();
            for i in 0..3 {
                check(rel_err(w[i] * norms[i], total) <= 1e-8, || {
                    format!("scaled gradient norm {i}: {} vs {total}", w[i] * norms[i])
                })?;
            }
            let w = pinn_weights(&[0.0, 1.0, 2.0], &mut None, 0.9);
            check(w[0] == 0.0, || "vanished gradient must get weight zero".into())?;
            check(w[1] == 3.0 && w[2] == 1.5, || {
                format!("weights with a vanished term: {w:?}")
            })?;
            // The moving average starts at the first estimate, then blends.
            let mut ema = None;
            let first = pinn_weights(&[1.0, 1.0, 2.0], &mut ema, 0.9);
            check(ema == Some(first), || "average must start at the estimate".into())?;
            let second = pinn_weights(&[2.0, 1.0, 1.0], &mut ema, 0.9);
            let raw = [2.0, 4.0, 4.0];
            for i in 0..3 {
                let blended = 0.9 * first[i] + 0.1 * raw[i];
                check(rel_err(second[i], blended) <= 1e-12, || {
                    format!("smoothed weight {i}: {} vs {blended}", second[i])
                })?;
            }

            // Tangent fade-in: clamped linear ramp over the epoch window.
            let ramp = HessianRamp::new(50_000, 100_000).map_err(|e| e.to_string())?;
            for (epoch, expected) in
                [(0, 0.0), (50_000, 0.0), (75_000, 0.5), (100_000, 1.0), (1_000_000, 1.0)]
            {
                let got = ramp.factor(epoch);
                check(got == expected, || {
                    format!("ramp factor at epoch {epoch}: {got} vs {expected}")
                })?;
            }
            check(HessianRamp::new(10, 10).is_err(), || {
                "an empty ramp window must be rejected".into()
            })?;
            Ok(())
        },
    );
}

#[test]
fn training_fits_synthetic_quadratics() {
    criterion(
        "training drops the targeted loss by orders of magnitude",
        Duration::from_secs(300),
        || {
            // Quadratic ground truth e = xᵀAx/2 with exact forces and tangent.
            let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
            let make = |seed: u64, m: usize| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut data = ReducedDataset {
                    r: 2,
                    x_r: Vec::new(),
                    e: Vec::new(),
                    f_r: Vec::new(),
                    k_r: Vec::new(),
                    labels: Vec::new(),
                };
                for _ in 0..m {
                    let x = random_vector(&mut rng, 2, 1.5);
                    data.e.push(0.5 * x.dot(&(&a * &x)));
                    data.f_r.push(&a * &x);
                    data.k_r.push(Some(a.clone()));
                    data.x_r.push(x);
                    data.labels.push(RegimeLabel::Interpolation);
                }
                data
            };
            let train_data = make(1, 24);
            let val_data = make(2, 12);
            let arch = IcnnArch {
                input_dim: 2,
                width: 16,
                hidden_layers: 2,
            };
            let standardizer = Standardizer::fit(&train_data.x_r).map_err(|e| e.to_string())?;

            // Force-only run: the validation force loss must fall by at
            // least three orders of magnitude from the untrained network.
            let model = PannModel::glorot(arch, standardizer.clone(), 9)
                .map_err(|e| e.to_string())?;
            let start = dataset_losses(&model, &val_data).map_err(|e| e.to_string())?;
            let settings = training::TrainSettings {
                epochs: 2000,
                learning_rate: 1e-2,
                strategy: training::BalanceStrategy::new(BalanceKind::StaticWeights([
                    0.0, 1.0, 0.0,
                ])),
            };
            let run = training::train(&train_data, &val_data, model, &settings)
                .map_err(|e| e.to_string())?;
            check(run.failure.is_none(), || {
                format!("force-only run failed: {:?}", run.failure)
            })?;
            check(run.best_val_lf <= 1e-3 * start[1], || {
                format!(
                    "force loss fell from {} to {} — less than three orders",
                    start[1], run.best_val_lf
                )
            })?;

            // Tangent-only run: fitting the tangent alone must still drop the
            // force loss by two orders, because the rest-state corrections pin
            // the integration constants the tangent cannot see.
            let model = PannModel::glorot(arch, standardizer, 9).map_err(|e| e.to_string())?;
            let start = dataset_losses(&model, &val_data).map_err(|e| e.to_string())?;
            let settings = training::TrainSettings {
                epochs: 2000,
                learning_rate: 1e-2,
                strategy: training::BalanceStrategy::new(BalanceKind::HessianOnly),
            };
            let run = training::train(&train_data, &val_data, model, &settings)
                .map_err(|e| e.to_string())?;
            check(run.failure.is_none(), || {
                format!("tangent-only run failed: {:?}", run.failure)
            })?;
            check(run.best_val_lf <= 1e-2 * start[1], || {
                format!(
                    "force loss fell from {} to {} — less than two orders",
                    start[1], run.best_val_lf
                )
            })?;
            Ok(())
        },
    );
}

// ---------------------------------------------------------------------------
// End-to-end pipeline criteria
// ---------------------------------------------------------------------------

struct SummaryRow {
    surrogate: String,
    case: String,
    diverged: usize,
    state_median: Option<f64>,
}

fn smoke_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_smoke();
    cfg.output.directory = dir.display().to_string();
    cfg
}

fn run_pipeline(cfg: &ExperimentConfig) -> Result<(), String> {
    run_generate(cfg, false).map_err(|e| format!("generate: {e}"))?;
    run_reduce(cfg, false).map_err(|e| format!("reduce: {e}"))?;
    run_build_tpwl(cfg, false).map_err(|e| format!("build-tpwl: {e}"))?;
    run_train(cfg, false).map_err(|e| format!("train: {e}"))?;
    run_solve(cfg, false).map_err(|e| format!("solve: {e}"))?;
    run_report(cfg, false).map_err(|e| format!("report: {e}"))?;
    Ok(())
}

fn read_summary(cfg: &ExperimentConfig) -> Result<Vec<SummaryRow>, String> {
    let path = cli::Paths::new(cfg).summary_csv();
    let text = std::fs::read_to_string(&path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 21 {
            return Err(format!("malformed summary row: {line}"));
        }
        rows.push(SummaryRow {
            surrogate: cells[0].into(),
            case: cells[1].into(),
            diverged: cells[4].parse().map_err(|e| format!("{line}: {e}"))?,
            state_median: if cells[8].is_empty() {
                None
            } else {
                Some(cells[8].parse().map_err(|e| format!("{line}: {e}"))?)
            },
        });
    }
    Ok(rows)
}

#[test]
fn smoke_pipeline_separates_interpolation_from_extrapolation() {
    criterion(
        "smoke pipeline: accurate interpolation, honest extrapolation",
        Duration::from_secs(1200),
        || {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let cfg = smoke_config(&dir.path().join("out"));
            run_pipeline(&cfg)?;
            let rows = read_summary(&cfg)?;

            // The piecewise-linear surrogate must track every case.
            for case in cli::CASE_NAMES {
                let row = rows
                    .iter()
                    .find(|r| r.surrogate == "tpwl" && r.case == case)
                    .ok_or_else(|| format!("missing summary row for tpwl/{case}"))?;
                check(row.diverged == 0, || {
                    format!("tpwl/{case}: {} diverged steps", row.diverged)
                })?;
            }

            // Best network variant: every training-range step converges with
            // a median state error under 5%, and its own far-reverse error is
            // at least ten times worse (or the continuation diverges) —
            // interpolation quality must not silently extend to unseen loads.
            let pann: Vec<&SummaryRow> = rows
                .iter()
                .filter(|r| r.surrogate.starts_with("pann-") && r.case == "interp")
                .collect();
            check(!pann.is_empty(), || "no network summary rows".into())?;
            let best = pann
                .iter()
                .min_by(|a, b| {
                    let av = a.state_median.unwrap_or(f64::INFINITY);
                    let bv = b.state_median.unwrap_or(f64::INFINITY);
                    av.partial_cmp(&bv).expect("medians are comparable")
                })
                .expect("at least one network row");
            check(best.diverged == 0, || {
                format!("{}/interp: {} diverged steps", best.surrogate, best.diverged)
            })?;
            let interp = best
                .state_median
                .ok_or_else(|| "no interpolation median".to_string())?;
            check(interp < 0.05, || {
                format!("{}: interpolation median state error {interp}", best.surrogate)
            })?;

            let far = rows
                .iter()
                .find(|r| r.surrogate == best.surrogate && r.case == "extrap-reverse-far")
                .ok_or_else(|| "missing far-reverse row".to_string())?;
            let degraded = match far.state_median {
                None => far.diverged > 0,
                Some(median) => far.diverged > 0 || median >= 10.0 * interp,
            };
            check(degraded, || {
                format!(
                    "{}: far-reverse median {:?} with {} divergences — extrapolation looks \
                     implausibly good",
                    best.surrogate, far.state_median, far.diverged
                )
            })?;
            println!(
                "  best variant {}: interp median {interp:.3e}, far-reverse {:?}",
                best.surrogate, far.state_median
            );
            Ok(())
        },
    );
}

#[test]
fn smoke_pipeline_is_bitwise_deterministic() {
    criterion(
        "smoke pipeline reruns are bitwise identical",
        Duration::from_secs(1200),
        || {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let cfg_a = smoke_config(&dir.path().join("a"));
            let cfg_b = smoke_config(&dir.path().join("b"));
            run_pipeline(&cfg_a)?;
            run_pipeline(&cfg_b)?;

            let pa = cli::Paths::new(&cfg_a);
            let pb = cli::Paths::new(&cfg_b);
            let mut pairs = vec![
                (pa.steps_csv(), pb.steps_csv()),
                (pa.summary_csv(), pb.summary_csv()),
                (pa.training_csv(), pb.training_csv()),
                (pa.spectrum_csv(), pb.spectrum_csv()),
                (pa.basis(), pb.basis()),
                (pa.tpwl(), pb.tpwl()),
                (pa.snapshot("interp"), pb.snapshot("interp")),
                (pa.trace("tpwl", "extrap-reverse-far"), pb.trace("tpwl", "extrap-reverse-far")),
            ];
            for variant in &cfg_a.training.variants {
                for init in 0..cfg_a.training.initializations {
                    pairs.push((
                        pa.pann_model(&variant.name, init),
                        pb.pann_model(&variant.name, init),
                    ));
                    pairs.push((
                        pa.history(&variant.name, init),
                        pb.history(&variant.name, init),
                    ));
                }
                pairs.push((
                    pa.trace(&format!("pann-{}", variant.name), "interp"),
                    pb.trace(&format!("pann-{}", variant.name), "interp"),
                ));
            }
            for (a, b) in pairs {
                let ba = std::fs::read(&a).map_err(|e| format!("{}: {e}", a.display()))?;
                let bb = std::fs::read(&b).map_err(|e| format!("{}: {e}", b.display()))?;
                check(ba == bb, || {
                    format!("{} and {} differ", a.display(), b.display())
                })?;
            }
            Ok(())
        },
    );
}
