//! Self-checks run by the `check` subcommand: finite differences, zero-init
//! transparency, the two-round trajectory recursion and the moment identity.

use std::sync::Arc;

use fedlora::adapter::{adapter_backward, adapter_forward, LoraAdapter};
use fedlora::fed::{sample_batch, ClientState, Simulation};
use fedlora::linalg::{gaussian_matrix, EntityKind, RngStream};
use fedlora::metrics::{
    activation_moments, moment_identity_check, trajectory_oracle, TrajectoryStep,
};
use fedlora::model::{
    backward, forward, frozen_forward, loss, Activation, AdaptedLayer, AdaptedNetwork, LossKind,
    Targets,
};
use fedlora::optim::OptimizerState;
use fedlora::tasks::DatasetTargets;
use fedlora::{AggregationStrategy, Dataset, ExperimentConfig, Matrix, Network, RuleName};

/// Deliberate defects for exercising the checker itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Negate the analytic gradient of `B` before comparing.
    GradBSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Summary on success, the first failing case's inputs otherwise.
    pub detail: String,
}

const FD_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const TRAJECTORY_TOL: f64 = 1e-10;

/// Largest entry-wise difference, relative to the larger of the two
/// matrices' largest entries.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic.max_abs_diff(numeric).expect("same shape");
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `p`.
fn numeric_grad(p: &Matrix, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(p.rows(), p.cols());
    let mut q = p.clone();
    for i in 0..p.rows() {
        for j in 0..p.cols() {
            let v = p.get(i, j);
            q.set(i, j, v + FD_STEP);
            let up = f(&q);
            q.set(i, j, v - FD_STEP);
            let down = f(&q);
            q.set(i, j, v);
            g.set(i, j, (up - down) / (2.0 * FD_STEP));
        }
    }
    g
}

fn dim(rng: &mut RngStream, max: usize) -> usize {
    1 + (rng.uniform() * max as f64) as usize % max
}

fn adapter_case(seed: u64, fault: Option<Fault>) -> Result<f64, String> {
    let mut rng = RngStream::new(seed, EntityKind::Test, 1, 0);
    let (d, k, r, b) = (
        dim(&mut rng, 8),
        dim(&mut rng, 8),
        dim(&mut rng, 8),
        dim(&mut rng, 4),
    );
    let gamma = 0.1 + 2.0 * rng.uniform();
    let adapter = LoraAdapter::from_parts(
        gaussian_matrix(r, k, 1.0, &mut rng),
        gaussian_matrix(d, r, 1.0, &mut rng),
        gamma,
    )
    .expect("conformable");
    let w0: Matrix = gaussian_matrix(d, k, 1.0, &mut rng);
    let x: Matrix = gaussian_matrix(k, b, 1.0, &mut rng);
    let y: Matrix = gaussian_matrix(d, b, 1.0, &mut rng);
    let objective = |a: &LoraAdapter<f64>, x: &Matrix| {
        let h = adapter_forward(a, &w0, x).expect("shapes").h;
        let diff = h.sub(&y).expect("shapes");
        0.5 * diff.data().iter().map(|e| e * e).sum::<f64>()
    };
    let h = adapter_forward(&adapter, &w0, &x)
        .map_err(|e| e.to_string())?
        .h;
    let v = h.sub(&y).map_err(|e| e.to_string())?;
    let mut g = adapter_backward(&adapter, &x, &v).map_err(|e| e.to_string())?;
    if fault == Some(Fault::GradBSign) {
        g.grad_b = g.grad_b.scale(-1.0);
    }
    let num_a = numeric_grad(adapter.a(), |a| {
        let mut t = adapter.clone();
        t.set_a(a.clone()).expect("shape");
        objective(&t, &x)
    });
    let num_b = numeric_grad(adapter.b(), |bm| {
        let mut t = adapter.clone();
        t.set_b(bm.clone()).expect("shape");
        objective(&t, &x)
    });
    // The adapter-only input gradient: subtract the frozen path.
    let base_grad_x = fedlora::linalg::matmul_tn(&w0, &v).expect("shapes");
    let mut num_x = numeric_grad(&x, |xm| objective(&adapter, xm));
    num_x.add_scaled(-1.0, &base_grad_x).expect("shapes");
    let worst = relative_error(&g.grad_a, &num_a)
        .max(relative_error(&g.grad_b, &num_b))
        .max(relative_error(&g.grad_x, &num_x));
    if worst < FD_TOL {
        Ok(worst)
    } else {
        Err(format!(
            "adapter instance seed={seed} d={d} k={k} r={r} batch={b} gamma={gamma}: relative error {worst:e}"
        ))
    }
}

fn random_network(
    rng: &mut RngStream,
    widths: &[usize],
    kind: LossKind,
    act: Activation,
) -> Network {
    let mut layers = Vec::new();
    for l in 0..widths.len() - 1 {
        let (k, d) = (widths[l], widths[l + 1]);
        let r = dim(rng, 4);
        let adapter = LoraAdapter::from_parts(
            gaussian_matrix(r, k, 0.7, rng),
            gaussian_matrix(d, r, 0.7, rng),
            0.5 + rng.uniform(),
        )
        .expect("conformable");
        let activation = if l + 2 == widths.len() {
            Activation::Identity
        } else {
            act
        };
        layers.push(
            AdaptedLayer::new(
                Arc::new(gaussian_matrix(d, k, 0.7, rng)),
                adapter,
                activation,
            )
            .expect("shapes"),
        );
    }
    AdaptedNetwork::new(layers, kind).expect("conformable")
}

fn network_case(seed: u64, kind: LossKind, fault: Option<Fault>) -> Result<f64, String> {
    let mut rng = RngStream::new(seed, EntityKind::Test, 2, 0);
    let depth = 1 + dim(&mut rng, 3);
    let widths: Vec<usize> = (0..depth).map(|_| 1 + dim(&mut rng, 7)).collect();
    let b = dim(&mut rng, 4);
    let net = random_network(&mut rng, &widths, kind, Activation::Tanh);
    let x: Matrix = gaussian_matrix(widths[0], b, 1.0, &mut rng);
    let out_dim = *widths.last().expect("non-empty");
    let targets = match kind {
        LossKind::SquaredError => Targets::Regression(gaussian_matrix(out_dim, b, 1.0, &mut rng)),
        LossKind::CrossEntropy => Targets::Classes(
            (0..b)
                .map(|_| (rng.uniform() * out_dim as f64) as usize % out_dim)
                .collect(),
        ),
    };
    let objective = |n: &Network, x: &Matrix| {
        let (out, _) = forward(n, x).expect("shapes");
        loss(&out, &targets, kind).expect("targets").0
    };
    let (out, trace) = forward(&net, &x).map_err(|e| e.to_string())?;
    let (_, v) = loss(&out, &targets, kind).map_err(|e| e.to_string())?;
    let mut grads = backward(&net, &trace, &v).map_err(|e| e.to_string())?;
    if fault == Some(Fault::GradBSign) {
        for g in &mut grads.layers {
            g.grad_b = g.grad_b.scale(-1.0);
        }
    }
    let mut worst = relative_error(
        &grads.input_grad,
        &numeric_grad(&x, |xm| objective(&net, xm)),
    );
    for (l, g) in grads.layers.iter().enumerate() {
        let layer = &net.layers()[l];
        let num_a = numeric_grad(layer.adapter.a(), |a| {
            let mut t = net.clone();
            t.layers_mut()[l].adapter.set_a(a.clone()).expect("shape");
            objective(&t, &x)
        });
        let num_b = numeric_grad(layer.adapter.b(), |bm| {
            let mut t = net.clone();
            t.layers_mut()[l].adapter.set_b(bm.clone()).expect("shape");
            objective(&t, &x)
        });
        worst = worst
            .max(relative_error(&g.grad_a, &num_a))
            .max(relative_error(&g.grad_b, &num_b));
    }
    if worst < FD_TOL {
        Ok(worst)
    } else {
        Err(format!(
            "network instance seed={seed} loss={kind:?} widths={widths:?} batch={b}: relative error {worst:e}"
        ))
    }
}

pub fn finite_difference_suite(instances: u64, fault: Option<Fault>) -> SuiteOutcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in 0..instances {
        let results = [
            adapter_case(seed, fault),
            network_case(seed, LossKind::SquaredError, fault),
            network_case(seed, LossKind::CrossEntropy, fault),
        ];
        for r in results {
            cases += 1;
            match r {
                Ok(e) => worst = worst.max(e),
                Err(detail) => {
                    return SuiteOutcome {
                        name: "finite-difference",
                        passed: false,
                        cases,
                        detail,
                    }
                }
            }
        }
    }
    SuiteOutcome {
        name: "finite-difference",
        passed: true,
        cases,
        detail: format!("worst relative error {worst:.2e} (tolerance {FD_TOL:e})"),
    }
}

/// A fresh system must reproduce the frozen network exactly.
pub fn transparency_suite() -> SuiteOutcome {
    let cfg = ExperimentConfig {
        d: 16,
        k: 12,
        rank: 4,
        n_train: 64,
        n_val: 32,
        ..Default::default()
    };
    let outcome = (|| -> Result<String, String> {
        let sim = Simulation::<f64>::new(cfg.clone()).map_err(|e| e.to_string())?;
        let all: Vec<usize> = (0..sim.validation().len()).collect();
        let (x, targets) = sim.validation().batch(&all).map_err(|e| e.to_string())?;
        let net = &sim.clients()[0].network;
        let frozen = frozen_forward(net, &x).map_err(|e| e.to_string())?;
        let (frozen_loss, _) = loss(&frozen, &targets, net.loss_kind).map_err(|e| e.to_string())?;
        let record = sim.evaluate(None).map_err(|e| e.to_string())?;
        let (_, trace) = forward(net, &x).map_err(|e| e.to_string())?;
        let moments = activation_moments(&trace);
        if record.mean_loss.to_bits() != frozen_loss.to_bits() {
            return Err(format!(
                "round-0 loss {} differs from frozen loss {} (config {cfg:?})",
                record.mean_loss, frozen_loss
            ));
        }
        if moments.iter().any(|&(m, v)| m != 0.0 || v != 0.0) {
            return Err(format!(
                "non-zero adapter moments {moments:?} at initialization"
            ));
        }
        Ok(format!("loss {frozen_loss} bit-identical, moments all 0"))
    })();
    match outcome {
        Ok(detail) => SuiteOutcome {
            name: "transparency",
            passed: true,
            cases: 1,
            detail,
        },
        Err(detail) => SuiteOutcome {
            name: "transparency",
            passed: false,
            cases: 1,
            detail,
        },
    }
}

const SHARD: usize = 3;
const BATCH: usize = 2;

/// Runs two rounds of one-step split aggregation and compares every client
/// against the closed-form recursion.
pub fn trajectory_case(d: usize, k: usize, r: usize, n: usize, seed: u64) -> Result<f64, String> {
    let eta = 0.05;
    let cfg = ExperimentConfig {
        n_clients: n,
        rank: r,
        d,
        k,
        layers: 1,
        rule: RuleName::Federated,
        alpha: 2.0,
        strategy: AggregationStrategy::ShareAOnly,
        lr: eta,
        local_steps: 1,
        batch_size: BATCH,
        rounds: 2,
        seed,
        ..Default::default()
    };
    let gamma = cfg.gamma().map_err(|e| e.to_string())?;
    let mut rng = RngStream::new(seed, EntityKind::Test, 3, 0);
    let w0 = Arc::new(gaussian_matrix::<f64>(d, k, 1.0, &mut rng));
    let mut a0 = Vec::new();
    let mut clients = Vec::new();
    for id in 0..n {
        let a: Matrix = gaussian_matrix(r, k, 1.0 / (k as f64).sqrt(), &mut rng);
        let adapter = LoraAdapter::from_parts(a.clone(), Matrix::zeros(d, r), gamma)
            .map_err(|e| e.to_string())?;
        let layer = AdaptedLayer::new(w0.clone(), adapter, Activation::Identity)
            .map_err(|e| e.to_string())?;
        let shard = Dataset::new(
            gaussian_matrix(k, SHARD, 1.0, &mut rng),
            DatasetTargets::Regression(gaussian_matrix(d, SHARD, 1.0, &mut rng)),
        )
        .map_err(|e| e.to_string())?;
        clients.push(ClientState {
            id,
            network: AdaptedNetwork::new(vec![layer], LossKind::SquaredError)
                .map_err(|e| e.to_string())?,
            optimizers: vec![OptimizerState::sgd(eta)],
            shard,
            diverged: false,
        });
        a0.push(a);
    }
    let data: Vec<[TrajectoryStep; 2]> = clients
        .iter()
        .map(|c| {
            [1usize, 2].map(|round| {
                let mut brng = RngStream::new(seed, EntityKind::Batch, c.id as u64, round as u64);
                let idx = sample_batch(SHARD, BATCH, &mut brng);
                let (x, t) = c.shard.batch(&idx).expect("indices in range");
                let Targets::Regression(y) = t else {
                    unreachable!("regression shard")
                };
                TrajectoryStep { x, y }
            })
        })
        .collect();
    let expected = trajectory_oracle(eta, gamma, &w0, &a0, &data).map_err(|e| e.to_string())?;

    let validation = clients[0].shard.clone();
    let mut sim = Simulation::from_parts(cfg, clients, validation).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for round in 1..=2 {
        sim.run_round().map_err(|e| e.to_string())?;
        for (c, want) in sim.clients().iter().zip(&expected) {
            let (wa, wb) = if round == 1 {
                (&want.a1, &want.b1)
            } else {
                (&want.a2, &want.b2)
            };
            let err = c
                .a(0)
                .max_abs_diff(wa)
                .expect("shape")
                .max(c.b(0).max_abs_diff(wb).expect("shape"));
            worst = worst.max(err);
            if !(err <= TRAJECTORY_TOL) {
                return Err(format!(
                    "d={d} k={k} r={r} N={n} seed={seed} eta={eta} gamma={gamma}: client {} round {round} differs by {err:e}",
                    c.id
                ));
            }
        }
    }
    Ok(worst)
}

pub fn trajectory_suite() -> SuiteOutcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for d in [1, 2, 4] {
        for k in [1, 2, 4] {
            for r in [1, 2, 4] {
                for n in 1..=3 {
                    cases += 1;
                    match trajectory_case(d, k, r, n, 7) {
                        Ok(e) => worst = worst.max(e),
                        Err(detail) => {
                            return SuiteOutcome {
                                name: "trajectory",
                                passed: false,
                                cases,
                                detail,
                            }
                        }
                    }
                }
            }
        }
    }
    SuiteOutcome {
        name: "trajectory",
        passed: true,
        cases,
        detail: format!("worst deviation {worst:.2e} (tolerance {TRAJECTORY_TOL:e})"),
    }
}

pub fn moment_suite() -> SuiteOutcome {
    let (r, n, k, sigma, samples) = (8, 2, 4, 1.0, 10_000);
    let check = moment_identity_check(r, n, k, sigma, samples, 11);
    let ok = |m: &fedlora::metrics::MomentEstimate| {
        (m.diag_mean - check.target).abs() <= 0.05 * check.target && m.max_off_diag < 0.1
    };
    let passed = ok(&check.mean_mean) && ok(&check.own_mean);
    SuiteOutcome {
        name: "moment-identity",
        passed,
        cases: 2,
        detail: format!(
            "r={r} N={n} k={k} sigma={sigma} samples={samples}: target {:.4} | mean-mean diag {:.4} off {:.4} | own-mean diag {:.4} off {:.4}",
            check.target,
            check.mean_mean.diag_mean,
            check.mean_mean.max_off_diag,
            check.own_mean.diag_mean,
            check.own_mean.max_off_diag
        ),
    }
}

pub fn run_all(instances: u64, fault: Option<Fault>) -> Vec<SuiteOutcome> {
    vec![
        finite_difference_suite(instances, fault),
        transparency_suite(),
        trajectory_suite(),
        moment_suite(),
    ]
}
