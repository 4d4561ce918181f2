//! Selective state-space recurrence over the centroid sequence.
//!
//! For each sequence step `t` and channel `c` with state size `N`:
//!
//! ```text
//! delta_t  = softplus(W_delta x_t + b_delta)            per channel
//! Abar     = exp(delta_t * A)                            A = -exp(A_log) < 0
//! h_t      = Abar * h_{t-1} + (delta_t * x_t) B_t^T      B_t = W_B x_t
//! y_t      = h_t C_t + D * x_t                           C_t = W_C x_t
//! ```
//!
//! The sequence here is the n refined centroids, so the whole scan costs
//! `n (C^2 + 6C + 8CN)` multiply-accumulates — independent of image size.
//! [`scan_cost`] is the closed form of exactly the operations `s6_scan`
//! emits; a test pins the two against each other.

use crate::error::{Error, Result};
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use rand::Rng;

/// Learnable pieces of one scan head.
pub struct ScanParams {
    /// `[C, N]`; the state decay matrix is `A = -exp(A_log)`.
    pub a_log: ParamId,
    /// Input-dependent state injection map, `[N, C]`, no bias.
    pub b_proj: ParamId,
    /// Input-dependent state readout map, `[N, C]`, no bias.
    pub c_proj: ParamId,
    /// Step-size map, `[C, C]` plus bias `[C]`, passed through softplus.
    pub delta_w: ParamId,
    pub delta_b: ParamId,
    /// Direct input passthrough, `[C]`.
    pub d_skip: ParamId,
    pub channels: usize,
    pub state_dim: usize,
}

impl ScanParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        state_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::contract("state dimension must be >= 1".to_string()));
        }
        // Decay spectrum 1..N per channel: A starts at {-1, ..., -N}.
        let a_init: Vec<f64> = (0..channels)
            .flat_map(|_| (1..=state_dim).map(|j| (j as f64).ln()))
            .collect();
        let a_log = store.register(&format!("{name}.a_log"), &[channels, state_dim], Init::Values(a_init), rng)?;
        let b_proj = store.register(
            &format!("{name}.b_proj"),
            &[state_dim, channels],
            Init::FanInUniform { fan_in: channels },
            rng,
        )?;
        let c_proj = store.register(
            &format!("{name}.c_proj"),
            &[state_dim, channels],
            Init::FanInUniform { fan_in: channels },
            rng,
        )?;
        let delta_w = store.register(
            &format!("{name}.delta_w"),
            &[channels, channels],
            Init::FanInUniform { fan_in: channels },
            rng,
        )?;
        // Bias chosen so initial step sizes spread log-uniformly over
        // [1e-3, 1e-1]: b = softplus^{-1}(dt) = ln(e^dt - 1).
        let delta_b_init: Vec<f64> = (0..channels)
            .map(|c| {
                let lo = (1e-3f64).ln();
                let hi = (1e-1f64).ln();
                let frac = if channels > 1 { c as f64 / (channels - 1) as f64 } else { 0.0 };
                let dt = (lo + frac * (hi - lo)).exp();
                (dt.exp() - 1.0).ln()
            })
            .collect();
        let delta_b =
            store.register(&format!("{name}.delta_b"), &[channels], Init::Values(delta_b_init), rng)?;
        let d_skip = store.register(&format!("{name}.d_skip"), &[channels], Init::Ones, rng)?;
        Ok(ScanParams { a_log, b_proj, c_proj, delta_w, delta_b, d_skip, channels, state_dim })
    }
}

/// Materialize `A = -exp(A_log)`, shape `[C, N]`. Callers rebuild it next to
/// each scan so the recorded cost of a scan scope is self-contained (the
/// closed form counts these `3CN` element operations as part of the scan).
pub fn decay_matrix<T: Scalar>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    params: &ScanParams,
) -> Result<TensorId> {
    let pos = tape.exp(binds.get(params.a_log));
    Ok(tape.affine(pos, -T::one(), T::zero()))
}

/// Run the scan over `seq` `[C, n]`, producing per-centroid weights `[C, n]`.
/// `a` must come from [`decay_matrix`] over the same parameters.
pub fn s6_scan<T: Scalar>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    seq: TensorId,
    a: TensorId,
    params: &ScanParams,
) -> Result<TensorId> {
    let s = tape.shape(seq).to_vec();
    if s.len() != 2 || s[0] != params.channels {
        return Err(Error::shape(format!(
            "s6_scan expects [C={}, n], got {s:?}",
            params.channels
        )));
    }
    let (c, n) = (s[0], s[1]);
    let nstate = params.state_dim;

    let delta_bias = tape.reshape(binds.get(params.delta_b), &[c, 1])?;
    let d_col = tape.reshape(binds.get(params.d_skip), &[c, 1])?;
    let mut h = tape.tensor(&[c, nstate], crate::tape::Fill::Zeros, false)?;
    let mut outputs = Vec::with_capacity(n);
    for t in 0..n {
        let x_t = tape.narrow(seq, 1, t, 1)?; // [C, 1]

        let dp = tape.matmul(binds.get(params.delta_w), x_t)?;
        let dpb = tape.add(dp, delta_bias)?;
        let delta = tape.softplus(dpb); // [C, 1]

        let da = tape.mul(delta, a)?; // [C, N]
        let abar = tape.exp(da);

        let b_t = tape.matmul(binds.get(params.b_proj), x_t)?; // [N, 1]
        let b_row = tape.transpose(b_t)?; // [1, N]
        let dx = tape.mul(delta, x_t)?; // [C, 1]
        let bx = tape.matmul(dx, b_row)?; // [C, N]

        let decayed = tape.mul(abar, h)?;
        h = tape.add(decayed, bx)?;

        let c_t = tape.matmul(binds.get(params.c_proj), x_t)?; // [N, 1]
        let y = tape.matmul(h, c_t)?; // [C, 1]
        let skip = tape.mul(d_col, x_t)?;
        outputs.push(tape.add(y, skip)?);
    }
    tape.concat(&outputs, 1)
}

/// Exact multiply-accumulate count of [`s6_scan`] for `channels = c`,
/// sequence length `n` and state size `nstate`. Independent of image size.
pub fn scan_cost(c: u64, n: u64, nstate: u64) -> u64 {
    n * (c * c + 6 * c + 8 * c * nstate)
}
