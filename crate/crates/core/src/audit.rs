//! Reverse-mode gradients checked against central finite differences.
//!
//! Every registered operator gets a battery of randomized probes. One probe
//! builds a small case, contracts the operator output with a random linear
//! head so every output element influences the scalar root, runs the tape
//! backward, and then re-derives one input coordinate's slope by symmetric
//! perturbation with step `h = cbrt(machine eps) * max(1, |x|)`. The same
//! driver audits the assembled network end to end through its training loss.
//!
//! Operators with kinks (relu, abs, max) are probed at points bounded away
//! from the non-smooth set so the two-sided difference stays on one branch.

use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig, SeedMode};
use crate::scalar::{Precision, Scalar};
use crate::tape::{ConvSpec, Tape, TensorId};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ── probe driver ────────────────────────────────────────────────────────────

/// One randomized audit case: tracked leaf tensors plus a function that
/// rebuilds the computation under test from them on any tape.
pub struct Case<T: Scalar> {
    pub inputs: Vec<(Vec<usize>, Vec<T>)>,
    pub build: Box<dyn Fn(&mut Tape<T>, &[TensorId]) -> Result<TensorId>>,
}

/// Relative error with a unit floor, so tiny gradients are compared
/// absolutely and large ones proportionally.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0)
}

fn fd_step<T: Scalar>(x: f64) -> f64 {
    T::epsilon().to_f64().cbrt() * x.abs().max(1.0)
}

/// Check one random coordinate of one random input against the
/// central-difference slope. Returns the relative error.
pub fn probe<T: Scalar>(case: &Case<T>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ids = Vec::with_capacity(case.inputs.len());
    for (shape, data) in &case.inputs {
        ids.push(tape.leaf(shape, data.clone())?);
    }
    let out = (case.build)(&mut tape, &ids)?;
    let out_shape = tape.shape(out).to_vec();
    let head: Vec<T> = uniform(rng, out_shape.iter().product(), -1.0, 1.0);

    let root = contract(&mut tape, out, &out_shape, &head)?;
    tape.backward(root)?;

    let which = rng.random_range(0..case.inputs.len());
    let elem = rng.random_range(0..case.inputs[which].1.len());
    let analytic = tape
        .grad(ids[which])
        .ok_or_else(|| Error::verification("audit input received no gradient".to_string()))?[elem]
        .to_f64();

    let x0 = case.inputs[which].1[elem].to_f64();
    let h = fd_step::<T>(x0);
    let eval = |shift: f64| -> Result<f64> {
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(case.inputs.len());
        for (i, (shape, data)) in case.inputs.iter().enumerate() {
            let mut d = data.clone();
            if i == which {
                d[elem] = T::from_f64(x0 + shift);
            }
            ids.push(tape.constant(shape, d)?);
        }
        let out = (case.build)(&mut tape, &ids)?;
        let root = contract(&mut tape, out, &out_shape, &head)?;
        Ok(tape.value(root)?.to_f64())
    };
    let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
    Ok(rel_err(analytic, fd))
}

fn contract<T: Scalar>(
    tape: &mut Tape<T>,
    out: TensorId,
    shape: &[usize],
    head: &[T],
) -> Result<TensorId> {
    let w = tape.constant(shape, head.to_vec())?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod, None, false)
}

// ── reports ─────────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AuditReport {
    pub name: String,
    pub probes: usize,
    pub worst_rel_err: f64,
    pub tol: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < self.tol
    }
}

/// One aligned line per audited operator, worst error against tolerance.
pub fn format_reports(reports: &[AuditReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in reports {
        s.push_str(&format!(
            "{:width$}  probes {:>4}  worst rel err {:.3e}  tol {:.0e}  {}\n",
            r.name,
            r.probes,
            r.worst_rel_err,
            r.tol,
            if r.passed() { "pass" } else { "FAIL" },
        ));
    }
    s
}

pub fn all_passed(reports: &[AuditReport]) -> bool {
    reports.iter().all(AuditReport::passed)
}

/// Names of every failing audit, for error messages.
pub fn failures(reports: &[AuditReport]) -> Vec<String> {
    reports.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect()
}

// ── operator registry ───────────────────────────────────────────────────────

type CaseGen<T> = Box<dyn Fn(&mut ChaCha8Rng) -> Result<Case<T>>>;

/// A named generator of randomized audit cases for one operator.
pub struct OperatorAudit<T: Scalar> {
    pub name: &'static str,
    gen: CaseGen<T>,
}

impl<T: Scalar> OperatorAudit<T> {
    pub fn new(name: &'static str, gen: CaseGen<T>) -> Self {
        OperatorAudit { name, gen }
    }

    /// Run `probes` independent randomized probes and report the worst error.
    pub fn run(&self, probes: usize, rng: &mut ChaCha8Rng) -> Result<AuditReport> {
        let mut worst = 0.0f64;
        for _ in 0..probes {
            let case = (self.gen)(rng)?;
            worst = worst.max(probe(&case, rng)?);
        }
        Ok(AuditReport {
            name: self.name.to_string(),
            probes,
            worst_rel_err: worst,
            tol: T::GRAD_TOL,
        })
    }
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<T> {
    (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect()
}

/// Values with |x| in [margin, margin+1), random sign: safe for kinked ops.
fn away_from_zero<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let mag = margin + rng.random_range(0.0..1.0);
            T::from_f64(if rng.random_range(0..2) == 0 { mag } else { -mag })
        })
        .collect()
}

/// A shuffled comb 0.1·k plus small jitter: pairwise gaps stay well above the
/// finite-difference step, so max-reductions never change winner mid-probe.
fn comb<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    let mut vals: Vec<f64> = (0..n).map(|k| 0.1 * k as f64).collect();
    for i in 0..n {
        let j = rng.random_range(i..n);
        vals.swap(i, j);
    }
    vals.iter().map(|&v| T::from_f64(v + rng.random_range(-0.02..0.02))).collect()
}

fn unary_case<T: Scalar>(
    data: Vec<T>,
    op: impl Fn(&mut Tape<T>, TensorId) -> TensorId + 'static,
) -> Case<T> {
    let n = data.len();
    Case {
        inputs: vec![(vec![n], data)],
        build: Box::new(move |tape, ids| Ok(op(tape, ids[0]))),
    }
}

/// Every differentiable tape operator, each with its own case generator.
pub fn operator_audits<T: Scalar>() -> Vec<OperatorAudit<T>> {
    let mut v: Vec<OperatorAudit<T>> = Vec::new();
    let mut add = |name: &'static str, gen: CaseGen<T>| v.push(OperatorAudit::new(name, gen));

    add(
        "add",
        Box::new(|rng| {
            let a = uniform(rng, 6, -2.0, 2.0);
            let b = uniform(rng, 3, -2.0, 2.0);
            Ok(Case {
                inputs: vec![(vec![2, 3], a), (vec![3], b)],
                build: Box::new(|t, ids| t.add(ids[0], ids[1])),
            })
        }),
    );
    add(
        "sub",
        Box::new(|rng| {
            let a = uniform(rng, 6, -2.0, 2.0);
            let b = uniform(rng, 2, -2.0, 2.0);
            Ok(Case {
                inputs: vec![(vec![2, 3], a), (vec![2, 1], b)],
                build: Box::new(|t, ids| t.sub(ids[0], ids[1])),
            })
        }),
    );
    add(
        "mul",
        Box::new(|rng| {
            let a = uniform(rng, 6, -2.0, 2.0);
            let b = uniform(rng, 3, -2.0, 2.0);
            Ok(Case {
                inputs: vec![(vec![2, 3], a), (vec![3], b)],
                build: Box::new(|t, ids| t.mul(ids[0], ids[1])),
            })
        }),
    );
    add(
        "div",
        Box::new(|rng| {
            let a = uniform(rng, 6, -2.0, 2.0);
            let b = away_from_zero(rng, 3, 0.5);
            Ok(Case {
                inputs: vec![(vec![2, 3], a), (vec![3], b)],
                build: Box::new(|t, ids| t.div(ids[0], ids[1])),
            })
        }),
    );

    add("silu", Box::new(|rng| Ok(unary_case(uniform(rng, 10, -3.0, 3.0), |t, x| t.silu(x)))));
    add(
        "relu",
        Box::new(|rng| Ok(unary_case(away_from_zero(rng, 10, 0.1), |t, x| t.relu(x)))),
    );
    add("sigmoid", Box::new(|rng| Ok(unary_case(uniform(rng, 10, -4.0, 4.0), |t, x| t.sigmoid(x)))));
    add("exp", Box::new(|rng| Ok(unary_case(uniform(rng, 10, -2.0, 2.0), |t, x| t.exp(x)))));
    add(
        "softplus",
        Box::new(|rng| Ok(unary_case(uniform(rng, 10, -30.0, 30.0), |t, x| t.softplus(x)))),
    );
    add("sqrt", Box::new(|rng| Ok(unary_case(uniform(rng, 8, 0.25, 4.0), |t, x| t.sqrt(x)))));
    add("abs", Box::new(|rng| Ok(unary_case(away_from_zero(rng, 10, 0.1), |t, x| t.abs(x)))));
    add(
        "affine",
        Box::new(|rng| {
            let m = T::from_f64(rng.random_range(-2.0..2.0));
            let c = T::from_f64(rng.random_range(-1.0..1.0));
            Ok(unary_case(uniform(rng, 8, -2.0, 2.0), move |t, x| t.affine(x, m, c)))
        }),
    );

    add(
        "matmul",
        Box::new(|rng| {
            let a = uniform(rng, 6, -1.0, 1.0);
            let b = uniform(rng, 12, -1.0, 1.0);
            Ok(Case {
                inputs: vec![(vec![2, 3], a), (vec![3, 4], b)],
                build: Box::new(|t, ids| t.matmul(ids[0], ids[1])),
            })
        }),
    );
    add(
        "transpose",
        Box::new(|rng| {
            let a = uniform(rng, 12, -2.0, 2.0);
            Ok(Case {
                inputs: vec![(vec![3, 4], a)],
                build: Box::new(|t, ids| t.transpose(ids[0])),
            })
        }),
    );
    add(
        "reshape",
        Box::new(|rng| {
            let a = uniform(rng, 12, -2.0, 2.0);
            Ok(Case {
                inputs: vec![(vec![2, 6], a)],
                build: Box::new(|t, ids| t.reshape(ids[0], &[3, 4])),
            })
        }),
    );

    add(
        "sum",
        Box::new(|rng| {
            let a = uniform(rng, 24, -2.0, 2.0);
            let axis = match rng.random_range(0..4) {
                3 => None,
                k => Some(k),
            };
            let keepdim = rng.random_range(0..2) == 1;
            Ok(Case {
                inputs: vec![(vec![2, 3, 4], a)],
                build: Box::new(move |t, ids| t.sum(ids[0], axis, keepdim)),
            })
        }),
    );
    add(
        "mean",
        Box::new(|rng| {
            let a = uniform(rng, 24, -2.0, 2.0);
            let axis = match rng.random_range(0..4) {
                3 => None,
                k => Some(k),
            };
            let keepdim = rng.random_range(0..2) == 1;
            Ok(Case {
                inputs: vec![(vec![2, 3, 4], a)],
                build: Box::new(move |t, ids| t.mean(ids[0], axis, keepdim)),
            })
        }),
    );
    add(
        "max",
        Box::new(|rng| {
            let a = comb(rng, 15);
            let axis = match rng.random_range(0..3) {
                2 => None,
                k => Some(k),
            };
            Ok(Case {
                inputs: vec![(vec![3, 5], a)],
                build: Box::new(move |t, ids| t.max(ids[0], axis, false)),
            })
        }),
    );
    add(
        "softmax",
        Box::new(|rng| {
            let a = uniform(rng, 12, -3.0, 3.0);
            let axis = rng.random_range(0..2);
            Ok(Case {
                inputs: vec![(vec![3, 4], a)],
                build: Box::new(move |t, ids| t.softmax(ids[0], axis)),
            })
        }),
    );

    add(
        "concat",
        Box::new(|rng| {
            let axis = rng.random_range(0..2);
            let (sb, nb) = if axis == 0 { (vec![1, 3], 3) } else { (vec![2, 2], 4) };
            let a = uniform(rng, 6, -2.0, 2.0);
            let b = uniform(rng, nb, -2.0, 2.0);
            Ok(Case {
                inputs: vec![(vec![2, 3], a), (sb, b)],
                build: Box::new(move |t, ids| t.concat(&[ids[0], ids[1]], axis)),
            })
        }),
    );
    add(
        "narrow",
        Box::new(|rng| {
            let a = uniform(rng, 10, -2.0, 2.0);
            let axis = rng.random_range(0..2);
            let extent = [2, 5][axis];
            let len = rng.random_range(1..=extent);
            let start = rng.random_range(0..=extent - len);
            Ok(Case {
                inputs: vec![(vec![2, 5], a)],
                build: Box::new(move |t, ids| t.narrow(ids[0], axis, start, len)),
            })
        }),
    );

    add(
        "conv2d",
        Box::new(|rng| {
            let x = uniform(rng, 75, -1.0, 1.0);
            let w = uniform(rng, 54, -1.0, 1.0);
            let b = uniform(rng, 2, -1.0, 1.0);
            Ok(Case {
                inputs: vec![(vec![1, 3, 5, 5], x), (vec![2, 3, 3, 3], w), (vec![2], b)],
                build: Box::new(|t, ids| t.conv2d(ids[0], ids[1], Some(ids[2]), ConvSpec::unit(1))),
            })
        }),
    );
    add(
        "conv2d_strided",
        Box::new(|rng| {
            let x = uniform(rng, 72, -1.0, 1.0);
            let w = uniform(rng, 54, -1.0, 1.0);
            let spec = ConvSpec { stride: 2, padding: 1, depthwise: false, pad_mode: crate::tape::PadMode::Zero };
            Ok(Case {
                inputs: vec![(vec![1, 2, 6, 6], x), (vec![3, 2, 3, 3], w)],
                build: Box::new(move |t, ids| t.conv2d(ids[0], ids[1], None, spec)),
            })
        }),
    );
    add(
        "conv2d_replicate",
        Box::new(|rng| {
            let x = uniform(rng, 50, -1.0, 1.0);
            let w = uniform(rng, 36, -1.0, 1.0);
            let spec = ConvSpec::unit(1).with_replicate_padding();
            Ok(Case {
                inputs: vec![(vec![1, 2, 5, 5], x), (vec![2, 2, 3, 3], w)],
                build: Box::new(move |t, ids| t.conv2d(ids[0], ids[1], None, spec)),
            })
        }),
    );
    add(
        "conv2d_depthwise",
        Box::new(|rng| {
            let x = uniform(rng, 75, -1.0, 1.0);
            let w = uniform(rng, 27, -1.0, 1.0);
            let b = uniform(rng, 3, -1.0, 1.0);
            let spec = ConvSpec { stride: 1, padding: 1, depthwise: true, pad_mode: crate::tape::PadMode::Zero };
            Ok(Case {
                inputs: vec![(vec![1, 3, 5, 5], x), (vec![3, 1, 3, 3], w), (vec![3], b)],
                build: Box::new(move |t, ids| t.conv2d(ids[0], ids[1], Some(ids[2]), spec)),
            })
        }),
    );

    add(
        "layer_norm",
        Box::new(|rng| {
            // Channel values sit a unit apart plus jitter, keeping every
            // position's variance O(1) and the quotient's curvature error
            // well under the f32 tolerance.
            let mut x = Vec::with_capacity(72);
            for _ in 0..2 {
                for c in 0..4 {
                    for _ in 0..9 {
                        x.push(T::from_f64(c as f64 + rng.random_range(-0.3..0.3)));
                    }
                }
            }
            let g = uniform(rng, 4, 0.5, 1.5);
            let b = uniform(rng, 4, -0.5, 0.5);
            Ok(Case {
                inputs: vec![(vec![2, 4, 3, 3], x), (vec![4], g), (vec![4], b)],
                build: Box::new(|t, ids| t.layer_norm(ids[0], ids[1], ids[2], 1e-6)),
            })
        }),
    );
    add(
        "dft2d",
        Box::new(|rng| {
            let x = uniform(rng, 32, -1.0, 1.0);
            Ok(Case {
                inputs: vec![(vec![1, 2, 4, 4], x)],
                build: Box::new(|t, ids| t.dft2d(ids[0])),
            })
        }),
    );
    add(
        "pixel_shuffle",
        Box::new(|rng| {
            let x = uniform(rng, 48, -2.0, 2.0);
            Ok(Case {
                inputs: vec![(vec![1, 8, 2, 3], x)],
                build: Box::new(|t, ids| t.pixel_shuffle(ids[0], 2)),
            })
        }),
    );
    add(
        "neighborhood_mean",
        Box::new(|rng| {
            let x = uniform(rng, 108, -1.0, 1.0);
            let mut positions = Vec::with_capacity(3);
            while positions.len() < 3 {
                let p = (rng.random_range(0..6), rng.random_range(0..6));
                if !positions.contains(&p) {
                    positions.push(p);
                }
            }
            Ok(Case {
                inputs: vec![(vec![3, 6, 6], x)],
                build: Box::new(move |t, ids| t.neighborhood_mean(ids[0], &positions, 1)),
            })
        }),
    );

    v
}

// ── end-to-end network audit ────────────────────────────────────────────────

/// Composite tolerance for the whole-network audit: looser than the per-op
/// bound because errors accumulate through depth.
pub fn end_to_end_tol(p: Precision) -> f64 {
    match p {
        Precision::Double => 1e-5,
        Precision::Single => 1e-3,
    }
}

/// Audit the full model through its training loss at the small test
/// configuration: one backward pass, then up to `probes` randomly chosen
/// parameter coordinates re-derived by central differences.
pub fn audit_network<T: Scalar>(probes: usize, seed: u64) -> Result<AuditReport> {
    audit_network_with::<T>(NetworkConfig::smoke(), probes, seed)
}

/// [`audit_network`] over an arbitrary (small) configuration.
pub fn audit_network_with<T: Scalar>(
    config: NetworkConfig,
    probes: usize,
    seed: u64,
) -> Result<AuditReport> {
    // The deepest grid must hold at least `centroids` distinct cells.
    let cells = (config.centroids as f64).sqrt().ceil() as usize;
    let side = config.spatial_divisor() * cells.max(2);
    let mut model: Model<T> = Model::build(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00E2E00A0D17);

    // A fresh model is the exact identity (zeroed residual head), which makes
    // every interior gradient identically zero — true but vacuous. Shake all
    // parameters into general position first.
    for pid in model.store.iter_ids().collect::<Vec<_>>() {
        for v in model.store.data_mut(pid).iter_mut() {
            *v = *v + T::from_f64(rng.random_range(-0.05..0.05));
        }
    }

    // The difference quotients run on a double-precision twin carrying the
    // exact same parameter values. A single-precision forward accumulates
    // enough rounding that a quotient of two f32 losses measures that noise
    // (or, with a larger step, kink crossings) instead of the slope; against
    // an accurate reference the tolerance budgets only the rounding of the
    // backward pass actually under audit.
    let mut twin: Model<f64> = Model::build(config, seed)?;
    let pids: Vec<_> = model.store.iter_ids().collect();
    for &pid in &pids {
        let vals: Vec<f64> = model.store.data(pid).iter().map(|&v| v.to_f64()).collect();
        twin.store.data_mut(pid).copy_from_slice(&vals);
    }

    let n = 3 * side * side;
    let input: Vec<T> = uniform(&mut rng, n, 0.0, 1.0);
    let target: Vec<T> = uniform(&mut rng, n, 0.0, 1.0);
    let input64: Vec<f64> = input.iter().map(|&v| v.to_f64()).collect();
    let target64: Vec<f64> = target.iter().map(|&v| v.to_f64()).collect();
    let shape = [1usize, 3, side, side];

    let eval = |model: &Model<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let binds = model.store.bind(&mut tape)?;
        let x = tape.constant(&shape, input64.clone())?;
        let t = tape.constant(&shape, target64.clone())?;
        let pred = model.forward(&mut tape, &binds, x, SeedMode::Eval)?;
        let loss = model.loss(&mut tape, pred, t)?;
        tape.value(loss)
    };

    // Analytic gradients for every parameter, from a single backward pass.
    let grads: Vec<Vec<T>> = {
        let mut tape = Tape::new();
        let binds = model.store.bind(&mut tape)?;
        let x = tape.constant(&shape, input.clone())?;
        let t = tape.constant(&shape, target.clone())?;
        let pred = model.forward(&mut tape, &binds, x, SeedMode::Eval)?;
        let loss = model.loss(&mut tape, pred, t)?;
        tape.backward(loss)?;
        model.store.gradients(&tape, &binds)
    };

    let mut worst = 0.0f64;
    for _ in 0..probes {
        let which = rng.random_range(0..pids.len());
        let pid = pids[which];
        let elem = rng.random_range(0..model.store.data(pid).len());
        let analytic = grads[which][elem].to_f64();

        let x0 = twin.store.data(pid)[elem];
        let h = fd_step::<f64>(x0);
        twin.store.data_mut(pid)[elem] = x0 + h;
        let up = eval(&twin)?;
        twin.store.data_mut(pid)[elem] = x0 - h;
        let down = eval(&twin)?;
        twin.store.data_mut(pid)[elem] = x0;

        worst = worst.max(rel_err(analytic, (up - down) / (2.0 * h)));
    }
    Ok(AuditReport {
        name: "network(end-to-end)".to_string(),
        probes,
        worst_rel_err: worst,
        tol: end_to_end_tol(T::PRECISION),
    })
}

/// All operator audits plus the end-to-end pass, in deterministic order.
/// The whole-network audit is capped at 50 probes; each costs two forward
/// passes of the full model.
pub fn run_full_audit<T: Scalar>(probes: usize, seed: u64) -> Result<Vec<AuditReport>> {
    run_full_audit_with::<T>(NetworkConfig::smoke(), probes, seed)
}

/// [`run_full_audit`] with a caller-chosen network configuration for the
/// end-to-end leg.
pub fn run_full_audit_with<T: Scalar>(
    config: NetworkConfig,
    probes: usize,
    seed: u64,
) -> Result<Vec<AuditReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for audit in operator_audits::<T>() {
        reports.push(audit.run(probes, &mut rng)?);
    }
    reports.push(audit_network_with::<T>(config, probes.min(50), seed)?);
    Ok(reports)
}

// ── tests ───────────────────────────────────────────────────────────────────
