//! Feature aggregation: turning a feature map into a handful of refined
//! cluster centroids.
//!
//! The stage runs once per forward pass, with no iterative fitting:
//! seeded positions are sampled, local neighborhood means become initial
//! centroids, every pixel gets a similarity distribution over centroids, and
//! a single gated update refines each centroid from the pixels that lean
//! towards it.

use crate::error::{Error, Result};
use crate::nn::ChannelMap;
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Guard added to cosine denominators and to rectified similarities, so the
/// distribution stays well-defined for zero vectors and all-negative rows.
pub const SIM_EPS: f64 = 1e-8;

/// Learnable pieces of the aggregation stage for one block.
pub struct AggregatorParams {
    /// Maps initial centroids `c_k` to value vectors `v_k`.
    pub value_proj: ChannelMap,
    /// Maps pixel features `f_p` to aggregation features.
    pub pixel_proj: ChannelMap,
    /// Gate sharpness, initialized to 1.
    pub alpha_gate: ParamId,
    /// Gate shift, initialized to 0.
    pub beta_gate: ParamId,
    /// Number of centroids.
    pub n: usize,
    /// Side length of the square init neighborhood (odd).
    pub knn_k: usize,
}

impl AggregatorParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        n: usize,
        knn_k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("centroid count must be >= 1".to_string()));
        }
        if knn_k.is_multiple_of(2) {
            return Err(Error::contract(format!("neighborhood size must be odd, got {knn_k}")));
        }
        Ok(AggregatorParams {
            value_proj: ChannelMap::new(store, &format!("{name}.value_proj"), channels, channels, true, rng)?,
            pixel_proj: ChannelMap::new(store, &format!("{name}.pixel_proj"), channels, channels, true, rng)?,
            alpha_gate: store.register(&format!("{name}.alpha_gate"), &[1], Init::Ones, rng)?,
            beta_gate: store.register(&format!("{name}.beta_gate"), &[1], Init::Zeros, rng)?,
            n,
            knn_k,
        })
    }
}

/// Everything the aggregation stage produces for one feature map.
pub struct CentroidSet {
    /// Initial centroids, `[C, n]`.
    pub initial: TensorId,
    /// Refined centroids, `[C, n]`.
    pub refined: TensorId,
    /// Signed cosine similarities, `[n, HW]`, entries in `[-1, 1]`.
    pub raw_sim: TensorId,
    /// Per-pixel distribution over centroids, `[n, HW]`, rows sum to 1 over
    /// pixels of each centroid row.
    pub pdf: TensorId,
    /// Refinement normalizers, `[n]`, each `>= 1`.
    pub norm_factors: TensorId,
}

/// Draw `n` distinct pixel positions of an `h x w` grid by a seeded partial
/// Fisher-Yates shuffle of the flat index range.
pub fn sample_positions(h: usize, w: usize, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let hw = h * w;
    if n > hw {
        return Err(Error::contract(format!(
            "cannot sample {n} distinct positions from a {h}x{w} grid"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..hw).collect();
    for i in 0..n {
        let j = rng.random_range(i..hw);
        idx.swap(i, j);
    }
    Ok(idx[..n].iter().map(|&p| (p / w, p % w)).collect())
}

/// Initial centroids: mean feature over the `knn_k x knn_k` neighborhood
/// (clipped at borders) of each of `n` seeded distinct positions.
pub fn init_centroids<T: Scalar>(
    tape: &mut Tape<T>,
    f: TensorId,
    n: usize,
    seed: u64,
    knn_k: usize,
) -> Result<TensorId> {
    let s = tape.shape(f).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("init_centroids expects [C,H,W], got {s:?}")));
    }
    let positions = sample_positions(s[1], s[2], n, seed)?;
    tape.neighborhood_mean(f, &positions, knn_k / 2)
}

/// Cosine similarities of every pixel against every centroid, and the
/// rectified-and-normalized distribution built from them.
///
/// `f_flat` is `[C, HW]`, `centroids` is `[C, n]`; returns
/// `(raw_sim, pdf)`, both `[n, HW]`.
pub fn similarity_distribution<T: Scalar>(
    tape: &mut Tape<T>,
    f_flat: TensorId,
    centroids: TensorId,
) -> Result<(TensorId, TensorId)> {
    let fs = tape.shape(f_flat).to_vec();
    let cs = tape.shape(centroids).to_vec();
    if fs.len() != 2 || cs.len() != 2 || fs[0] != cs[0] {
        return Err(Error::shape(format!(
            "similarity_distribution expects [C,HW] and [C,n] with equal C, got {fs:?} and {cs:?}"
        )));
    }
    let eps = tape.scalar(T::from_f64(SIM_EPS));
    let cent_t = tape.transpose(centroids)?;
    let dots = tape.matmul(cent_t, f_flat)?; // [n, HW]

    let f_sq = tape.mul(f_flat, f_flat)?;
    let f_ss = tape.sum(f_sq, Some(0), true)?; // [1, HW]
    let f_norm = tape.sqrt(f_ss);

    let c_sq = tape.mul(centroids, centroids)?;
    let c_ss = tape.sum(c_sq, Some(0), true)?; // [1, n]
    let c_norm = tape.sqrt(c_ss);
    let c_norm_col = tape.transpose(c_norm)?; // [n, 1]

    let denom = tape.mul(c_norm_col, f_norm)?; // [n, HW]
    let denom_e = tape.add(denom, eps)?;
    let raw_sim = tape.div(dots, denom_e)?;

    let rect = tape.relu(raw_sim);
    let rect_e = tape.add(rect, eps)?;
    let row_sum = tape.sum(rect_e, Some(1), true)?; // [n, 1]
    let pdf = tape.div(rect_e, row_sum)?;
    Ok((raw_sim, pdf))
}

/// One gated refinement step. `f_flat` is `[C, HW]`; returns the refined
/// centroids `[C, n]` and the normalizers `[n]`.
pub fn refine_centroids<T: Scalar>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    f_flat: TensorId,
    centroids: TensorId,
    pdf: TensorId,
    params: &AggregatorParams,
) -> Result<(TensorId, TensorId)> {
    let n = tape.shape(centroids)[1];
    let v = params.value_proj.forward(tape, binds, centroids)?; // [C, n]
    let f_hat = params.pixel_proj.forward(tape, binds, f_flat)?; // [C, HW]

    let alpha = binds.get(params.alpha_gate);
    let beta = binds.get(params.beta_gate);
    let scaled = tape.mul(pdf, alpha)?;
    let shifted = tape.add(scaled, beta)?;
    let gate = tape.sigmoid(shifted); // [n, HW]

    let gate_t = tape.transpose(gate)?; // [HW, n]
    let weighted = tape.matmul(f_hat, gate_t)?; // [C, n]

    let gate_sum = tape.sum(gate, Some(1), true)?; // [n, 1]
    let one = tape.scalar(T::one());
    let norm = tape.add(gate_sum, one)?; // [n, 1]

    let num = tape.add(v, weighted)?;
    let norm_row = tape.transpose(norm)?; // [1, n]
    let refined = tape.div(num, norm_row)?;
    let norm_factors = tape.reshape(norm, &[n])?;
    Ok((refined, norm_factors))
}

/// The full aggregation pipeline for one `[C,H,W]` feature map.
pub fn aggregate<T: Scalar>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    f: TensorId,
    params: &AggregatorParams,
    seed: u64,
) -> Result<CentroidSet> {
    let s = tape.shape(f).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("aggregate expects [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let initial = init_centroids(tape, f, params.n, seed, params.knn_k)?;
    let f_flat = tape.reshape(f, &[c, h * w])?;
    let (raw_sim, pdf) = similarity_distribution(tape, f_flat, initial)?;
    let (refined, norm_factors) = refine_centroids(tape, binds, f_flat, initial, pdf, params)?;
    Ok(CentroidSet { initial, refined, raw_sim, pdf, norm_factors })
}
