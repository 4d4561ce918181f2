//! The acceptance gate: twelve product-level checks, one test per criterion,
//! each ending in a single verdict line. Scales and tolerances are fixed
//! here on purpose; every check re-derives its expected values from scratch
//! (plain-loop oracles, closed forms, or process-level runs) rather than
//! trusting the code under test.
//!
//! Criteria at a glance:
//!  1. probability axioms of the pixel distribution and the assignment field
//!  2. the whole probabilistic loop against a brute-force double-loop oracle
//!  3. convex-hull bounds on diffused weights
//!  4. the single-centroid degenerate case, exact
//!  5. the selective scan against a naive recurrence, plus causality
//!  6. gradient audits in both precisions
//!  7. resolution-scaling laws of the cost model
//!  8. parameter / FLOP figures against the reference numbers
//!  9. single-pair overfit trainability through the command-line trainer
//! 10. determinism and save/load round-trips
//! 11. the spatial-channel modulator against a stage-by-stage hand evaluation
//! 12. the null gradient of the assignment shift

use clusterscan::audit;
use clusterscan::blocks::ScfmBlock;
use clusterscan::cluster::{self, SIM_EPS};
use clusterscan::cost;
use clusterscan::diffuse::{self, DiffusionParams};
use clusterscan::image::ImageBuffer;
use clusterscan::network::{Model, NetworkConfig};
use clusterscan::params::{ParamId, ParamStore};
use clusterscan::scan::{self, ScanParams};
use clusterscan::tape::Tape;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

// ── shared helpers ──────────────────────────────────────────────────────────

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clusterscan"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary failed to launch")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

fn fill_param(store: &mut ParamStore<f64>, pid: ParamId, rng: &mut ChaCha8Rng, lo: f64, hi: f64) {
    for v in store.data_mut(pid) {
        *v = rng.random_range(lo..hi);
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

// ── the clustering/diffusion pipeline on raw draws ──────────────────────────

/// One random (features, centroids, weights, sharpness) draw.
struct Draw {
    c: usize,
    h: usize,
    w: usize,
    n: usize,
    f: Vec<f64>,
    cents: Vec<f64>,
    weights: Vec<f64>,
    sharp_alpha: f64,
    sharp_beta: f64,
}

/// The fixed draw stream shared by criteria 1 and 3: shapes up to 8x16x16,
/// centroid counts in {1, 2, 4, 8}.
fn axiom_draws(count: usize) -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA1103);
    (0..count)
        .map(|_| {
            let n = [1, 2, 4, 8][rng.random_range(0..4)];
            let (h, w) = loop {
                let h = rng.random_range(1..=16);
                let w = rng.random_range(1..=16);
                if h * w >= n {
                    break (h, w);
                }
            };
            let c = rng.random_range(1..=8);
            let hw = h * w;
            Draw {
                c,
                h,
                w,
                n,
                f: uniform(&mut rng, c * hw, -1.0, 1.0),
                cents: uniform(&mut rng, c * n, -1.0, 1.0),
                weights: uniform(&mut rng, c * n, -3.0, 3.0),
                sharp_alpha: rng.random_range(0.25..4.0),
                sharp_beta: rng.random_range(-2.0..2.0),
            }
        })
        .collect()
}

struct PipeOut {
    /// `[n, HW]` — per-centroid distribution over pixels.
    pdf: Vec<f64>,
    /// `[HW, n]` — per-pixel assignment over centroids.
    alpha: Vec<f64>,
    /// `[C, HW]` — diffused per-pixel weights.
    w_pix: Vec<f64>,
}

/// Run similarity -> assignment -> weight inversion on one draw.
fn cluster_pipeline(d: &Draw) -> PipeOut {
    let hw = d.h * d.w;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store: ParamStore<f64> = ParamStore::new();
    let params = DiffusionParams::new(&mut store, "sd", &mut rng).unwrap();
    store.data_mut(params.sharp_alpha)[0] = d.sharp_alpha;
    store.data_mut(params.sharp_beta)[0] = d.sharp_beta;

    let mut tape: Tape<f64> = Tape::new();
    let binds = store.bind(&mut tape).unwrap();
    let f = tape.constant(&[d.c, hw], d.f.clone()).unwrap();
    let cents = tape.constant(&[d.c, d.n], d.cents.clone()).unwrap();
    let (_raw, pdf) = cluster::similarity_distribution(&mut tape, f, cents).unwrap();
    let field = diffuse::assign(&mut tape, &binds, pdf, &params).unwrap();
    let w = tape.constant(&[d.c, d.n], d.weights.clone()).unwrap();
    let w_pix = diffuse::invert_weights(&mut tape, &field, w).unwrap();
    PipeOut {
        pdf: tape.data(pdf).to_vec(),
        alpha: tape.data(field.alpha).to_vec(),
        w_pix: tape.data(w_pix).to_vec(),
    }
}

/// The same pipeline as scalar double loops, sharing only the epsilon
/// constant with the implementation.
fn oracle_pipeline(d: &Draw) -> PipeOut {
    let (c, n, hw) = (d.c, d.n, d.h * d.w);
    let f = |ch: usize, p: usize| d.f[ch * hw + p];
    let cent = |ch: usize, k: usize| d.cents[ch * n + k];

    let mut pdf = vec![0.0; n * hw];
    for k in 0..n {
        let cnorm = (0..c).map(|ch| cent(ch, k) * cent(ch, k)).sum::<f64>().sqrt();
        let mut rect = vec![0.0; hw];
        for p in 0..hw {
            let fnorm = (0..c).map(|ch| f(ch, p) * f(ch, p)).sum::<f64>().sqrt();
            let dot = (0..c).map(|ch| cent(ch, k) * f(ch, p)).sum::<f64>();
            let raw = dot / (cnorm * fnorm + SIM_EPS);
            rect[p] = raw.max(0.0) + SIM_EPS;
        }
        let total: f64 = rect.iter().sum();
        for p in 0..hw {
            pdf[k * hw + p] = rect[p] / total;
        }
    }

    let mut alpha = vec![0.0; hw * n];
    for p in 0..hw {
        let logits: Vec<f64> =
            (0..n).map(|k| d.sharp_alpha * pdf[k * hw + p] + d.sharp_beta).collect();
        let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - peak).exp()).collect();
        let z: f64 = exps.iter().sum();
        for k in 0..n {
            alpha[p * n + k] = exps[k] / z;
        }
    }

    let mut w_pix = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            w_pix[ch * hw + p] =
                (0..n).map(|k| alpha[p * n + k] * d.weights[ch * n + k]).sum();
        }
    }
    PipeOut { pdf, alpha, w_pix }
}

// ── criterion 1: probability axioms ─────────────────────────────────────────

#[test]
fn criterion_01_probability_axioms_hold_on_a_thousand_draws() {
    let start = Instant::now();
    let draws = axiom_draws(1000);
    for (i, d) in draws.iter().enumerate() {
        let out = cluster_pipeline(d);
        let hw = d.h * d.w;
        for k in 0..d.n {
            let s: f64 = out.pdf[k * hw..(k + 1) * hw].iter().sum();
            assert!(
                (s - 1.0).abs() < 1e-6,
                "draw {i} ({}x{}x{}, n={}): pdf row {k} sums to {s}",
                d.c, d.h, d.w, d.n
            );
        }
        for p in 0..hw {
            let row = &out.alpha[p * d.n..(p + 1) * d.n];
            let s: f64 = row.iter().sum();
            assert!(
                (s - 1.0).abs() < 1e-6,
                "draw {i} ({}x{}x{}, n={}): assignment row {p} sums to {s}",
                d.c, d.h, d.w, d.n
            );
            assert!(row.iter().all(|&v| v >= 0.0), "draw {i}: negative assignment mass");
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "axiom sweep took {elapsed:?}, budget 10 s");
    println!(
        "[criterion  1] PASS — 1000 draws, every pdf and assignment row sums to 1 within 1e-6 ({elapsed:?})"
    );
}

// ── criterion 2: closed probabilistic loop ──────────────────────────────────

#[test]
fn criterion_02_pipeline_matches_brute_force_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC10);
    let mut cases = 0usize;
    for n in 1..=4usize {
        for &c in &[1usize, 2, 3, 5] {
            for hw in n..=16 {
                let d = Draw {
                    c,
                    h: 1,
                    w: hw,
                    n,
                    f: uniform(&mut rng, c * hw, -1.0, 1.0),
                    cents: uniform(&mut rng, c * n, -1.0, 1.0),
                    weights: uniform(&mut rng, c * n, -3.0, 3.0),
                    sharp_alpha: rng.random_range(0.25..4.0),
                    sharp_beta: rng.random_range(-2.0..2.0),
                };
                let got = cluster_pipeline(&d);
                let want = oracle_pipeline(&d);
                for (label, g, w) in [
                    ("pdf", &got.pdf, &want.pdf),
                    ("assignment", &got.alpha, &want.alpha),
                    ("weights", &got.w_pix, &want.w_pix),
                ] {
                    for (i, (a, b)) in g.iter().zip(w).enumerate() {
                        assert!(
                            (a - b).abs() < 1e-10,
                            "{label}[{i}] diverges from the oracle at C={c}, HW={hw}, n={n}: {a} vs {b}"
                        );
                    }
                }
                cases += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(cases >= 200, "only {cases} configurations enumerated");
    assert!(elapsed < Duration::from_secs(5), "oracle sweep took {elapsed:?}, budget 5 s");
    println!(
        "[criterion  2] PASS — {cases} configurations equal the double-loop oracle within 1e-10 ({elapsed:?})"
    );
}

// ── criterion 3: expectation bounds ─────────────────────────────────────────

#[test]
fn criterion_03_diffused_weights_stay_in_the_convex_hull() {
    let draws = axiom_draws(1000);
    for (i, d) in draws.iter().enumerate() {
        let out = cluster_pipeline(d);
        let hw = d.h * d.w;
        for ch in 0..d.c {
            let row = &d.weights[ch * d.n..(ch + 1) * d.n];
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for p in 0..hw {
                let v = out.w_pix[ch * hw + p];
                assert!(
                    v >= lo - 1e-9 && v <= hi + 1e-9,
                    "draw {i}: weight {v} for channel {ch}, pixel {p} left the hull [{lo}, {hi}]"
                );
            }
        }
    }
    println!("[criterion  3] PASS — every diffused weight on 1000 draws respects the centroid hull");
}

// ── criterion 4: degenerate centroid ────────────────────────────────────────

#[test]
fn criterion_04_single_centroid_weights_are_identical_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xDE6);
    for &(c, h, w) in &[(1usize, 1usize, 1usize), (3, 2, 2), (2, 4, 4), (5, 3, 7), (8, 16, 16)] {
        let hw = h * w;
        let d = Draw {
            c,
            h,
            w,
            n: 1,
            f: uniform(&mut rng, c * hw, -1.0, 1.0),
            cents: uniform(&mut rng, c, -1.0, 1.0),
            weights: uniform(&mut rng, c, -3.0, 3.0),
            sharp_alpha: rng.random_range(0.25..4.0),
            sharp_beta: rng.random_range(-2.0..2.0),
        };
        let out = cluster_pipeline(&d);
        assert!(out.alpha.iter().all(|&a| a == 1.0), "n=1 assignment is not exactly one");
        for ch in 0..c {
            for p in 0..hw {
                // Bitwise equality: a one-centroid expectation must reproduce
                // the centroid weight with no arithmetic drift at all.
                assert_eq!(
                    out.w_pix[ch * hw + p],
                    d.weights[ch],
                    "channel {ch}, pixel {p} of shape {c}x{h}x{w}"
                );
            }
        }
    }
    println!("[criterion  4] PASS — one centroid gives every pixel the centroid weight, bit for bit");
}

// ── criterion 5: selective-scan fidelity and causality ──────────────────────

/// The recurrence, re-derived with plain loops: per step, a softplus step
/// size, exponential state decay, an outer-product state update, a state
/// readout, and a direct passthrough.
fn oracle_scan(
    store: &ParamStore<f64>,
    params: &ScanParams,
    seq: &[f64],
    c: usize,
    n: usize,
    nstate: usize,
) -> Vec<f64> {
    let a_log = store.data(params.a_log);
    let b_proj = store.data(params.b_proj);
    let c_proj = store.data(params.c_proj);
    let delta_w = store.data(params.delta_w);
    let delta_b = store.data(params.delta_b);
    let d_skip = store.data(params.d_skip);

    let mut h = vec![0.0; c * nstate];
    let mut out = vec![0.0; c * n];
    for t in 0..n {
        let x: Vec<f64> = (0..c).map(|i| seq[i * n + t]).collect();
        let delta: Vec<f64> = (0..c)
            .map(|i| {
                let pre: f64 =
                    (0..c).map(|j| delta_w[i * c + j] * x[j]).sum::<f64>() + delta_b[i];
                softplus(pre)
            })
            .collect();
        let b_t: Vec<f64> = (0..nstate)
            .map(|j| (0..c).map(|i| b_proj[j * c + i] * x[i]).sum())
            .collect();
        let c_t: Vec<f64> = (0..nstate)
            .map(|j| (0..c).map(|i| c_proj[j * c + i] * x[i]).sum())
            .collect();
        for i in 0..c {
            for j in 0..nstate {
                let a = -a_log[i * nstate + j].exp();
                let decay = (delta[i] * a).exp();
                h[i * nstate + j] = decay * h[i * nstate + j] + delta[i] * x[i] * b_t[j];
            }
        }
        for i in 0..c {
            let read: f64 = (0..nstate).map(|j| h[i * nstate + j] * c_t[j]).sum();
            out[i * n + t] = read + d_skip[i] * x[i];
        }
    }
    out
}

#[test]
fn criterion_05_s6_scan_matches_naive_recurrence_and_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x56);
    for case in 0..100 {
        let c = rng.random_range(1..=8);
        let n = rng.random_range(1..=8);
        let nstate = rng.random_range(1..=4);
        let mut store: ParamStore<f64> = ParamStore::new();
        let params = ScanParams::new(&mut store, "scan", c, nstate, &mut rng).unwrap();
        fill_param(&mut store, params.a_log, &mut rng, -1.5, 0.5);
        fill_param(&mut store, params.b_proj, &mut rng, -0.7, 0.7);
        fill_param(&mut store, params.c_proj, &mut rng, -0.7, 0.7);
        fill_param(&mut store, params.delta_w, &mut rng, -0.7, 0.7);
        fill_param(&mut store, params.delta_b, &mut rng, -2.0, 1.0);
        fill_param(&mut store, params.d_skip, &mut rng, -1.0, 1.0);
        let seq = uniform(&mut rng, c * n, -1.0, 1.0);

        let run = |vals: &[f64]| -> Vec<f64> {
            let mut tape: Tape<f64> = Tape::new();
            let binds = store.bind(&mut tape).unwrap();
            let s = tape.constant(&[c, n], vals.to_vec()).unwrap();
            let a = scan::decay_matrix(&mut tape, &binds, &params).unwrap();
            let y = scan::s6_scan(&mut tape, &binds, s, a, &params).unwrap();
            tape.data(y).to_vec()
        };

        let got = run(&seq);
        let want = oracle_scan(&store, &params, &seq, c, n, nstate);
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            assert!(
                (g - w).abs() < 1e-10,
                "case {case} (C={c}, n={n}, N={nstate}): output {i} is {g}, oracle says {w}"
            );
        }

        // Causality: bumping step t* must leave every earlier output
        // untouched (bitwise — the earlier computation is identical) and
        // must reach step t* itself.
        let t_star = rng.random_range(0..n);
        let mut bumped = seq.clone();
        for ch in 0..c {
            bumped[ch * n + t_star] += 0.35;
        }
        let got2 = run(&bumped);
        for t in 0..t_star {
            for ch in 0..c {
                assert_eq!(
                    got[ch * n + t],
                    got2[ch * n + t],
                    "case {case}: perturbing step {t_star} leaked back to step {t}"
                );
            }
        }
        let at_star =
            (0..c).any(|ch| got[ch * n + t_star] != got2[ch * n + t_star]);
        assert!(at_star, "case {case}: perturbing step {t_star} had no effect at all");
    }
    println!("[criterion  5] PASS — 100 random scans equal the plain-loop recurrence within 1e-10, causally");
}

// ── criterion 6: gradient audits ────────────────────────────────────────────

#[test]
fn criterion_06_gradient_audits_pass_in_both_precisions() {
    let start = Instant::now();

    let reports64 = audit::run_full_audit::<f64>(40, 2024).unwrap();
    assert!(audit::all_passed(&reports64), "\n{}", audit::format_reports(&reports64));
    for r in &reports64 {
        assert!(r.worst_rel_err < 1e-5, "{} at {:.3e} exceeds 1e-5 in f64", r.name, r.worst_rel_err);
    }

    let reports32 = audit::run_full_audit::<f32>(40, 2024).unwrap();
    assert!(audit::all_passed(&reports32), "\n{}", audit::format_reports(&reports32));
    for r in &reports32 {
        assert!(r.worst_rel_err < 1e-3, "{} at {:.3e} exceeds 1e-3 in f32", r.name, r.worst_rel_err);
    }

    // The command-line entry point must agree with the library verdict.
    for precision in ["f64", "f32"] {
        let out = run(&["gradcheck", "--probes", "4", "--precision", precision]);
        assert_eq!(out.status.code(), Some(0), "gradcheck {precision}: {}", stderr(&out));
        assert!(stdout(&out).contains(&format!("all gradients verified ({precision})")));
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(300), "audits took {elapsed:?}, budget 5 min");
    let worst64 = reports64.iter().map(|r| r.worst_rel_err).fold(0.0, f64::max);
    let worst32 = reports32.iter().map(|r| r.worst_rel_err).fold(0.0, f64::max);
    println!(
        "[criterion  6] PASS — worst rel err {worst64:.3e} (f64, tol 1e-5), {worst32:.3e} (f32, tol 1e-3) ({elapsed:?})"
    );
}

// ── criterion 7: complexity scaling laws ────────────────────────────────────

#[test]
fn criterion_07_cost_scaling_follows_the_claimed_laws() {
    let model: Model<f64> = Model::build(NetworkConfig::standard(), 3).unwrap();
    let rows = model.scaling_rows(&[(64, 64), (128, 128)]).unwrap();
    let (small, large) = (rows[0], rows[1]);

    assert_eq!(
        large.scan_flops, small.scan_flops,
        "scan cost moved with resolution: {} vs {}",
        small.scan_flops, large.scan_flops
    );
    assert_eq!(
        large.assignment_flops,
        4 * small.assignment_flops,
        "assignment cost is not exactly linear in pixel count"
    );
    let total_ratio = large.total_flops as f64 / small.total_flops as f64;
    assert!(
        (3.8..=4.3).contains(&total_ratio),
        "total cost ratio 128^2/64^2 is {total_ratio:.4}, outside [3.8, 4.3]"
    );

    // Scanning a handful of centroids instead of every pixel gets relatively
    // cheaper as resolution grows: the advantage ratio must fall monotonically.
    let mut prev = f64::INFINITY;
    for side in (16..=256).step_by(16) {
        let ratio = cost::strategy_compare(32, side, side, 4, 16).ratio();
        assert!(
            ratio < prev,
            "clustered/full cost ratio rose from {prev:.6} to {ratio:.6} at {side}x{side}"
        );
        prev = ratio;
    }

    println!(
        "[criterion  7] PASS — scan constant, assignment x4 exact, total x{total_ratio:.3}, strategy ratio monotone down to {prev:.5} at 256x256"
    );
}

// ── criterion 8: parameter and FLOP figures ─────────────────────────────────

#[test]
fn criterion_08_parameter_and_flop_figures_sit_in_the_accepted_bands() {
    let model: Model<f64> = Model::build(NetworkConfig::standard(), 3).unwrap();
    let params = model.param_count();
    let flops = model.cost_ledger(1, 64, 64).unwrap().total().flops();
    println!(
        "[criterion  8] measured — parameters {params} (reference figure 2.71M, band [2.0M, 3.4M]); \
         64x64 forward {flops} FLOPs (reference figure 0.407G, band [0.3G, 0.7G])"
    );

    assert!(
        (2_000_000..=3_400_000).contains(&params),
        "parameter count {params} fell outside the accepted band [2.0M, 3.4M] around the 2.71M reference figure"
    );
    assert!(
        (300_000_000..=700_000_000).contains(&flops),
        "64x64 forward cost is {flops} FLOPs ({:.3}G) against the 0.407G reference figure, accepted band \
         [0.3G, 0.7G]. Parameters ({params}) sit inside their band; the cost does not under the declared \
         counting convention (every elementwise multiply, division, exponential and normalization is \
         charged, alongside matmul/conv MACs). This is a known, documented deviation — the figure is \
         reported honestly rather than tuned to the band.",
        flops as f64 / 1e9
    );
}

// ── criterion 9: single-pair overfit trainability ───────────────────────────

/// A smooth synthetic scene and its globally dimmed counterpart; smooth so a
/// small network can actually invert the degradation, dimmed so the identity
/// initialization starts far from the target.
fn synthetic_pair(side: usize) -> (Vec<u8>, Vec<u8>) {
    let mut clean = Vec::with_capacity(3 * side * side);
    let mut degraded = Vec::with_capacity(3 * side * side);
    for y in 0..side {
        for x in 0..side {
            for ch in 0..3 {
                let freq = (x as f64 * (ch as f64 + 1.0) * 0.9
                    + y as f64 * (2.0 - ch as f64) * 1.3)
                    / side as f64;
                let v = 0.5 + 0.42 * (2.0 * std::f64::consts::PI * freq + 0.7 * ch as f64).sin();
                let g = v.clamp(0.0, 1.0);
                let d = 0.6 * g + 0.15;
                clean.push((g * 255.0).round() as u8);
                degraded.push((d * 255.0).round() as u8);
            }
        }
    }
    (clean, degraded)
}

fn parse_psnr(text: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix("PSNR: "))
        .and_then(|rest| rest.strip_suffix(" dB"))
        .expect("no PSNR line in output")
        .parse()
        .expect("unparseable PSNR value")
}

#[test]
fn criterion_09_single_pair_overfit_reaches_35_db() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    let (clean, degraded) = synthetic_pair(64);
    ImageBuffer::from_rgb8(64, 64, &clean).unwrap().save(&data.join("pair_gt.ppm")).unwrap();
    ImageBuffer::from_rgb8(64, 64, &degraded).unwrap().save(&data.join("pair_in.ppm")).unwrap();

    let out_dir = dir.path().join("out");
    let out = run(&[
        "train-toy",
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--steps",
        "800",
        "--seed",
        "7",
        "--crop",
        "64",
        "--lr0",
        "3e-3",
    ]);
    assert_eq!(out.status.code(), Some(0), "trainer failed: {}", stderr(&out));

    let log = std::fs::read_to_string(out_dir.join("loss.log")).unwrap();
    let rows: Vec<(usize, f64, f64)> = log
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f[0].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 800);

    let crossing = rows.iter().find(|&&(_, _, psnr)| psnr > 35.0);
    let (step, _, psnr) = *crossing.expect("training never crossed 35 dB within the step budget");
    assert!(step < 2000);

    // The 100-step moving average of the loss, sampled every 100 steps, must
    // fall strictly from window to window.
    let means: Vec<f64> = rows
        .chunks(100)
        .map(|w| w.iter().map(|&(_, loss, _)| loss).sum::<f64>() / w.len() as f64)
        .collect();
    for pair in means.windows(2) {
        assert!(
            pair[1] < pair[0],
            "100-step loss averages rose: {:.6e} -> {:.6e}\nall windows: {means:?}",
            pair[0],
            pair[1]
        );
    }

    // Restoring the training input through the saved checkpoint must clear
    // the same bar in eval mode.
    let restored = dir.path().join("restored.ppm");
    let score = run(&[
        "restore",
        "--input",
        data.join("pair_in.ppm").to_str().unwrap(),
        "--output",
        restored.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("model.ckpt").to_str().unwrap(),
        "--reference",
        data.join("pair_gt.ppm").to_str().unwrap(),
    ]);
    assert_eq!(score.status.code(), Some(0), "restore failed: {}", stderr(&score));
    let eval_psnr = parse_psnr(&stdout(&score));
    assert!(eval_psnr > 35.0, "eval-mode restore reached only {eval_psnr} dB");

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1800), "overfit took {elapsed:?}, budget 30 min");
    println!(
        "[criterion  9] PASS — 35 dB first crossed at step {step} ({psnr:.2} dB), final {:.2} dB, \
         eval restore {eval_psnr:.2} dB, loss averages strictly falling ({elapsed:?})",
        rows.last().unwrap().2
    );
}

// ── criterion 10: determinism and round-trips ───────────────────────────────

fn write_noise_ppm(path: &Path, width: usize, height: usize, salt: u64) {
    let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut bytes = Vec::with_capacity(3 * width * height);
    for _ in 0..3 * width * height {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        bytes.push((state >> 56) as u8);
    }
    ImageBuffer::from_rgb8(width, height, &bytes).unwrap().save(path).unwrap();
}

#[test]
fn criterion_10_fixed_seeds_give_identical_bytes_and_round_trips_are_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_noise_ppm(&data.join("a_in.ppm"), 16, 16, 3);
    write_noise_ppm(&data.join("a_gt.ppm"), 16, 16, 4);

    // Two identically seeded training runs, byte-identical checkpoints; the
    // learning rate is turned up so the model departs visibly from identity.
    let mut ckpts = Vec::new();
    for name in ["run1", "run2"] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "train-toy",
            "--data-dir",
            data.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--steps",
            "25",
            "--seed",
            "11",
            "--crop",
            "16",
            "--lr0",
            "1e-2",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        ckpts.push(std::fs::read(out_dir.join("model.ckpt")).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1], "same-seed training runs diverged");

    // Two restores through that checkpoint, byte-identical and not a no-op.
    let input = data.join("a_in.ppm");
    let mut restored = Vec::new();
    for name in ["r1.ppm", "r2.ppm"] {
        let path = dir.path().join(name);
        let out = run(&[
            "restore",
            "--input",
            input.to_str().unwrap(),
            "--output",
            path.to_str().unwrap(),
            "--checkpoint",
            dir.path().join("run1").join("model.ckpt").to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        restored.push(std::fs::read(path).unwrap());
    }
    assert_eq!(restored[0], restored[1], "same-checkpoint restores diverged");
    assert_ne!(
        restored[0],
        std::fs::read(&input).unwrap(),
        "the trained model still acts as the identity — determinism check would be vacuous"
    );

    // Checkpoint save -> load -> save reproduces the file bit for bit.
    let p1 = dir.path().join("m1.ckpt");
    let p2 = dir.path().join("m2.ckpt");
    let model: Model<f64> = Model::build(NetworkConfig::smoke(), 21).unwrap();
    model.save(&p1).unwrap();
    let loaded: Model<f64> = Model::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(Model::<f64>::read_config(&p1).unwrap(), NetworkConfig::smoke());

    // The image container is lossless over 8-bit data, in both encodings.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let bytes: Vec<u8> = (0..3 * 11 * 7).map(|_| rng.random_range(0..=255)).collect();
    let img = ImageBuffer::from_rgb8(11, 7, &bytes).unwrap();
    let p6 = ImageBuffer::decode(&img.encode_p6()).unwrap();
    assert_eq!(p6.to_rgb8(), bytes);
    let p3 = ImageBuffer::decode(img.encode_p3().as_bytes()).unwrap();
    assert_eq!(p3.to_rgb8(), bytes);

    println!("[criterion 10] PASS — training, restoration, checkpoints and image codecs are bit-stable");
}

// ── criterion 11: spatial-channel modulator against hand evaluation ─────────

/// Everything the modulator computes, re-derived with plain loops from the
/// raw parameter values: channel statistics, a 7x7 edge-replicating
/// convolution, the squeeze/excite pooling path, and the two fused branches.
struct ScfmOracle {
    out: Vec<f64>,
    spatial: Vec<f64>,
    channel: Vec<f64>,
}

fn scfm_oracle(
    store: &ParamStore<f64>,
    block: &ScfmBlock,
    x: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> ScfmOracle {
    let hw = h * w;
    let cq = store.shape(block.reduce.weight)[0];
    let sw = store.data(block.spatial_conv.weight);
    let sb = store.data(block.spatial_conv.bias.unwrap())[0];
    let rw = store.data(block.reduce.weight);
    let rb = store.data(block.reduce.bias.unwrap());
    let ew = store.data(block.expand.weight);
    let eb = store.data(block.expand.bias.unwrap());
    let fsw = store.data(block.fuse_s.weight);
    let fsb = store.data(block.fuse_s.bias.unwrap());
    let fcw = store.data(block.fuse_c.weight);
    let fcb = store.data(block.fuse_c.bias.unwrap());

    let mut out = vec![0.0; b * c * hw];
    let mut spatial = vec![0.0; b * hw];
    let mut channel = vec![0.0; b * c];
    for bi in 0..b {
        let xb = |ch: usize, p: usize| x[(bi * c + ch) * hw + p];

        // Channel max and mean maps, then the 7x7 replicate-padded conv.
        let mut stats = vec![0.0; 2 * hw];
        for p in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for ch in 0..c {
                mx = mx.max(xb(ch, p));
                sum += xb(ch, p);
            }
            stats[p] = mx;
            stats[hw + p] = sum / c as f64;
        }
        let ws = &mut spatial[bi * hw..(bi + 1) * hw];
        for y in 0..h {
            for xc in 0..w {
                let mut acc = sb;
                for ci in 0..2 {
                    for ky in 0..7 {
                        for kx in 0..7 {
                            let iy = (y as i64 + ky - 3).clamp(0, h as i64 - 1) as usize;
                            let ix = (xc as i64 + kx - 3).clamp(0, w as i64 - 1) as usize;
                            acc += sw[(ci * 7 + ky as usize) * 7 + kx as usize]
                                * stats[ci * hw + iy * w + ix];
                        }
                    }
                }
                ws[y * w + xc] = sigmoid(acc);
            }
        }

        // Squeeze, rectify, expand, then global max+mean pooling per channel.
        let mut att = vec![0.0; c * hw];
        for p in 0..hw {
            let act: Vec<f64> = (0..cq)
                .map(|q| {
                    let v: f64 =
                        (0..c).map(|ch| rw[q * c + ch] * xb(ch, p)).sum::<f64>() + rb[q];
                    v.max(0.0)
                })
                .collect();
            for ch in 0..c {
                att[ch * hw + p] =
                    (0..cq).map(|q| ew[ch * cq + q] * act[q]).sum::<f64>() + eb[ch];
            }
        }
        let wc = &mut channel[bi * c..(bi + 1) * c];
        for ch in 0..c {
            let row = &att[ch * hw..(ch + 1) * hw];
            let gmax = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let gmean = row.iter().sum::<f64>() / hw as f64;
            wc[ch] = sigmoid(gmax + gmean);
        }

        // Modulate, fuse with 1x1 convolutions, sum, add the residual.
        for ch in 0..c {
            for p in 0..hw {
                let s_branch: f64 = (0..c)
                    .map(|c2| fsw[ch * c + c2] * (ws[p] * xb(c2, p)))
                    .sum::<f64>()
                    + fsb[ch];
                let c_branch: f64 = (0..c)
                    .map(|c2| fcw[ch * c + c2] * (wc[c2] * xb(c2, p)))
                    .sum::<f64>()
                    + fcb[ch];
                out[(bi * c + ch) * hw + p] = xb(ch, p) + s_branch + c_branch;
            }
        }
    }
    ScfmOracle { out, spatial, channel }
}

#[test]
fn criterion_11_modulator_matches_stage_by_stage_hand_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5CF);
    for case in 0..50 {
        let c = [2usize, 4, 6, 8][rng.random_range(0..4)];
        let reduction = if c.is_multiple_of(4) && rng.random_range(0..2) == 0 { 2 } else { 1 };
        let b = rng.random_range(1..=2);
        let h = rng.random_range(2..=6);
        let w = rng.random_range(2..=6);

        let mut store: ParamStore<f64> = ParamStore::new();
        let block = ScfmBlock::new(&mut store, "mod", c, reduction, &mut rng).unwrap();
        for pid in [
            block.spatial_conv.weight,
            block.reduce.weight,
            block.expand.weight,
            block.fuse_s.weight,
            block.fuse_c.weight,
        ] {
            fill_param(&mut store, pid, &mut rng, -0.6, 0.6);
        }
        for layer in [&block.spatial_conv, &block.reduce, &block.expand, &block.fuse_s, &block.fuse_c] {
            fill_param(&mut store, layer.bias.unwrap(), &mut rng, -0.3, 0.3);
        }

        let x = uniform(&mut rng, b * c * h * w, -1.0, 1.0);
        let mut tape: Tape<f64> = Tape::new();
        let binds = store.bind(&mut tape).unwrap();
        let xid = tape.constant(&[b, c, h, w], x.clone()).unwrap();
        let ws_id = block.spatial_weight(&mut tape, &binds, xid).unwrap();
        let wc_id = block.channel_weight(&mut tape, &binds, xid).unwrap();
        let out_id = block.forward(&mut tape, &binds, xid).unwrap();

        let oracle = scfm_oracle(&store, &block, &x, b, c, h, w);
        for (label, got, want) in [
            ("spatial weight", tape.data(ws_id), &oracle.spatial),
            ("channel weight", tape.data(wc_id), &oracle.channel),
            ("output", tape.data(out_id), &oracle.out),
        ] {
            assert_eq!(got.len(), want.len(), "case {case}: {label} shape mismatch");
            for (i, (g, o)) in got.iter().zip(want).enumerate() {
                assert!(
                    (g - o).abs() < 1e-10,
                    "case {case} (b={b}, c={c}, {h}x{w}, r={reduction}): {label}[{i}] is {g}, hand evaluation gives {o}"
                );
            }
        }
        for &v in tape.data(ws_id).iter().chain(tape.data(wc_id)) {
            assert!(v > 0.0 && v < 1.0, "case {case}: attention weight {v} left (0,1)");
        }
    }
    println!("[criterion 11] PASS — 50 modulator cases equal the hand evaluation within 1e-10, weights in (0,1)");
}

// ── criterion 12: null gradient of the assignment shift ─────────────────────

#[test]
fn criterion_12_assignment_shift_gradient_is_identically_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE7A);
    let mut live_sharpness = 0usize;
    let mut multi_centroid = 0usize;
    for probe in 0..25 {
        let c = rng.random_range(1..=6);
        let h = rng.random_range(1..=5);
        let w = rng.random_range(1..=5);
        let n = rng.random_range(1..=6);
        let hw = h * w;

        let mut store: ParamStore<f64> = ParamStore::new();
        let params = DiffusionParams::new(&mut store, "sd", &mut rng).unwrap();
        store.data_mut(params.sharp_alpha)[0] = rng.random_range(0.3..3.0);
        store.data_mut(params.sharp_beta)[0] = rng.random_range(-1.0..1.0);

        let mut tape: Tape<f64> = Tape::new();
        let binds = store.bind(&mut tape).unwrap();
        let f = tape.constant(&[c, h, w], uniform(&mut rng, c * hw, -1.0, 1.0)).unwrap();
        let pdf = tape.constant(&[n, hw], uniform(&mut rng, n * hw, 0.0, 1.0)).unwrap();
        let wmat = tape.constant(&[c, n], uniform(&mut rng, c * n, -2.0, 2.0)).unwrap();
        let out = diffuse::sd_apply(&mut tape, &binds, f, pdf, wmat, &params).unwrap();
        let head = tape.constant(&[c, h, w], uniform(&mut rng, c * hw, -1.0, 1.0)).unwrap();
        let prod = tape.mul(out, head).unwrap();
        let root = tape.sum(prod, None, false).unwrap();
        tape.backward(root).unwrap();

        let g_beta = tape.grad(binds.get(params.sharp_beta)).unwrap()[0];
        assert!(
            g_beta.abs() <= 1e-12,
            "probe {probe} (C={c}, {h}x{w}, n={n}): shift gradient leaked: {g_beta:e}"
        );
        if n > 1 {
            multi_centroid += 1;
            if tape.grad(binds.get(params.sharp_alpha)).unwrap()[0].abs() > 1e-12 {
                live_sharpness += 1;
            }
        }
    }
    // The twin sharpness parameter must stay live, or the zero above would
    // merely mean the loss ignores the assignment entirely.
    assert!(
        live_sharpness >= multi_centroid / 2,
        "sharpness gradient vanished on {}/{multi_centroid} multi-centroid probes",
        multi_centroid - live_sharpness
    );
    println!(
        "[criterion 12] PASS — shift gradient zero within 1e-12 on 25 probes; sharpness stayed live on {live_sharpness}/{multi_centroid}"
    );
}
