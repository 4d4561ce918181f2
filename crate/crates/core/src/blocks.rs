//! Composite blocks: the cluster-scan mixer, the dual-branch modulator,
//! the convolutional feed-forward block, and their decoder-side stack.
//!
//! Every block is shape-preserving and residual, so a freshly zeroed
//! parameter set makes the whole stack an identity function.

use crate::cluster::{self, AggregatorParams};
use crate::diffuse::{self, DiffusionParams};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, NormLayer};
use crate::params::{Bindings, ParamStore};
use crate::scalar::Scalar;
use crate::scan::{self, ScanParams};
use crate::tape::{Tape, TensorId};
use rand::Rng;

/// Widths and ratios shared by every block in a model.
#[derive(Clone, Copy, Debug)]
pub struct BlockHyper {
    /// Number of cluster centroids per feature map.
    pub centroids: usize,
    /// State dimension of the selective scan.
    pub state_dim: usize,
    /// Side length of the square centroid-init neighborhood (odd).
    pub knn_k: usize,
    /// Channel expansion inside the feed-forward block.
    pub ffn_expansion: usize,
    /// Channel reduction inside the modulator's channel branch.
    pub scfm_reduction: usize,
}

impl Default for BlockHyper {
    fn default() -> Self {
        BlockHyper {
            centroids: 4,
            state_dim: 16,
            knn_k: 3,
            ffn_expansion: 2,
            scfm_reduction: 4,
        }
    }
}

// ── feed-forward block ──────────────────────────────────────────────────────

/// Residual convolutional feed-forward block:
/// `x + contract(SiLU(dwconv(expand(norm(x)))))`.
pub struct FfnBlock {
    pub norm: NormLayer,
    pub expand: Conv2dLayer,
    pub dwconv: Conv2dLayer,
    pub contract: Conv2dLayer,
    pub channels: usize,
}

impl FfnBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        expansion: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::contract("ffn expansion must be >= 1".to_string()));
        }
        let wide = channels * expansion;
        Ok(FfnBlock {
            norm: NormLayer::new(store, &format!("{name}.norm"), channels, rng)?,
            expand: Conv2dLayer::same(store, &format!("{name}.expand"), channels, wide, 1, rng)?,
            dwconv: Conv2dLayer::depthwise(store, &format!("{name}.dwconv"), wide, 3, rng)?,
            contract: Conv2dLayer::same(store, &format!("{name}.contract"), wide, channels, 1, rng)?,
            channels,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        x: TensorId,
    ) -> Result<TensorId> {
        let normed = self.norm.forward(tape, binds, x)?;
        let wide = self.expand.forward(tape, binds, normed)?;
        let mixed = self.dwconv.forward(tape, binds, wide)?;
        let act = tape.silu(mixed);
        let narrow = self.contract.forward(tape, binds, act)?;
        tape.add(x, narrow)
    }
}

// ── spatial-channel modulator ───────────────────────────────────────────────

/// Dual-branch sigmoid attention. The spatial branch weights each pixel from
/// channel statistics; the channel branch weights each channel from global
/// spatial statistics of a squeezed feature map; 1x1 convolutions fuse the
/// two modulated copies.
pub struct ScfmBlock {
    pub spatial_conv: Conv2dLayer,
    pub reduce: Conv2dLayer,
    pub expand: Conv2dLayer,
    pub fuse_s: Conv2dLayer,
    pub fuse_c: Conv2dLayer,
    pub channels: usize,
}

impl ScfmBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::contract(format!(
                "modulator needs channels divisible by the reduction ratio, got {channels}/{reduction}"
            )));
        }
        let squeezed = channels / reduction;
        // Replicate padding keeps the 7x7 spatial statistics free of border
        // artifacts: a constant map yields one attention value everywhere.
        let spatial_spec = crate::tape::ConvSpec::unit(3).with_replicate_padding();
        Ok(ScfmBlock {
            spatial_conv: Conv2dLayer::new(
                store,
                &format!("{name}.spatial_conv"),
                2,
                1,
                7,
                spatial_spec,
                true,
                rng,
            )?,
            reduce: Conv2dLayer::same(store, &format!("{name}.reduce"), channels, squeezed, 1, rng)?,
            expand: Conv2dLayer::same(store, &format!("{name}.expand"), squeezed, channels, 1, rng)?,
            fuse_s: Conv2dLayer::same(store, &format!("{name}.fuse_s"), channels, channels, 1, rng)?,
            fuse_c: Conv2dLayer::same(store, &format!("{name}.fuse_c"), channels, channels, 1, rng)?,
            channels,
        })
    }

    /// Per-pixel attention `[B,1,H,W]` from channel max and mean maps.
    pub fn spatial_weight<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        x: TensorId,
    ) -> Result<TensorId> {
        let mx = tape.max(x, Some(1), true)?;
        let mn = tape.mean(x, Some(1), true)?;
        let cat = tape.concat(&[mx, mn], 1)?;
        let conv = self.spatial_conv.forward(tape, binds, cat)?;
        Ok(tape.sigmoid(conv))
    }

    /// Per-channel attention `[B,C,1,1]` from global max and mean pooling of
    /// the squeezed-and-expanded feature map.
    pub fn channel_weight<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        x: TensorId,
    ) -> Result<TensorId> {
        let red = self.reduce.forward(tape, binds, x)?;
        let act = tape.relu(red);
        let att = self.expand.forward(tape, binds, act)?;
        let mx_h = tape.max(att, Some(2), true)?;
        let mx = tape.max(mx_h, Some(3), true)?;
        let av_h = tape.mean(att, Some(2), true)?;
        let av = tape.mean(av_h, Some(3), true)?;
        let pooled = tape.add(mx, av)?;
        Ok(tape.sigmoid(pooled))
    }

    /// The two modulated copies, fused and summed — no residual.
    pub fn body<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        x: TensorId,
    ) -> Result<TensorId> {
        let ws = self.spatial_weight(tape, binds, x)?;
        let wc = self.channel_weight(tape, binds, x)?;
        let sx = tape.mul(ws, x)?;
        let cx = tape.mul(wc, x)?;
        let s_branch = self.fuse_s.forward(tape, binds, sx)?;
        let c_branch = self.fuse_c.forward(tape, binds, cx)?;
        tape.add(s_branch, c_branch)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        x: TensorId,
    ) -> Result<TensorId> {
        let b = self.body(tape, binds, x)?;
        tape.add(x, b)
    }
}

// ── cluster-scan mixer ──────────────────────────────────────────────────────

/// The token mixer: normalized input feeds a depthwise-conv stem, each batch
/// element is clustered to `n` centroids, the centroids are run through the
/// selective scan, the per-centroid weights are diffused back to pixels, and
/// the result gates against a SiLU branch of the same normalized input.
/// Residual around the whole mixer.
pub struct CcsmBlock {
    /// Distinguishes this block in eval-time seed derivation.
    pub uid: u64,
    pub channels: usize,
    pub norm_in: NormLayer,
    pub in_mlp: Conv2dLayer,
    pub dwconv: Conv2dLayer,
    pub gate_mlp: Conv2dLayer,
    pub out_proj: Conv2dLayer,
    pub norm_f: NormLayer,
    pub aggregator: AggregatorParams,
    pub scan: ScanParams,
    pub diffusion: DiffusionParams,
}

impl CcsmBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        hyper: &BlockHyper,
        uid: u64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(CcsmBlock {
            uid,
            channels,
            norm_in: NormLayer::new(store, &format!("{name}.norm_in"), channels, rng)?,
            in_mlp: Conv2dLayer::same(store, &format!("{name}.in_mlp"), channels, channels, 1, rng)?,
            dwconv: Conv2dLayer::depthwise(store, &format!("{name}.dwconv"), channels, 3, rng)?,
            gate_mlp: Conv2dLayer::same(store, &format!("{name}.gate_mlp"), channels, channels, 1, rng)?,
            out_proj: Conv2dLayer::same(store, &format!("{name}.out_proj"), channels, channels, 1, rng)?,
            norm_f: NormLayer::new(store, &format!("{name}.norm_f"), channels, rng)?,
            aggregator: AggregatorParams::new(
                store,
                &format!("{name}.agg"),
                channels,
                hyper.centroids,
                hyper.knn_k,
                rng,
            )?,
            scan: ScanParams::new(store, &format!("{name}.scan"), channels, hyper.state_dim, rng)?,
            diffusion: DiffusionParams::new(store, &format!("{name}.sd"), rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        x: TensorId,
        seed: u64,
    ) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape(format!(
                "mixer expects [B,{},H,W], got {s:?}",
                self.channels
            )));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let normed = self.norm_in.forward(tape, binds, x)?;
        let stem = self.in_mlp.forward(tape, binds, normed)?;
        let local = self.dwconv.forward(tape, binds, stem)?;
        let f_d = tape.silu(local);
        let mut slices = Vec::with_capacity(b);
        for bi in 0..b {
            let one = tape.narrow(f_d, 0, bi, 1)?;
            let f = tape.reshape(one, &[c, h, w])?;
            tape.push_scope("fa");
            let cs = cluster::aggregate(tape, binds, f, &self.aggregator, seed)?;
            tape.pop_scope();
            tape.push_scope("s6");
            // The decay matrix is parameter-only; rebuilding it per element
            // keeps every recorded cost an exact multiple of the batch size.
            let decay = scan::decay_matrix(tape, binds, &self.scan)?;
            let weights = scan::s6_scan(tape, binds, cs.refined, decay, &self.scan)?;
            tape.pop_scope();
            tape.push_scope("sd");
            let modulated = diffuse::sd_apply(tape, binds, f, cs.pdf, weights, &self.diffusion)?;
            tape.pop_scope();
            slices.push(tape.reshape(modulated, &[1, c, h, w])?);
        }
        let f_sd = if b == 1 { slices[0] } else { tape.concat(&slices, 0)? };
        let f_f = self.norm_f.forward(tape, binds, f_sd)?;
        let gate_pre = self.gate_mlp.forward(tape, binds, normed)?;
        let gate = tape.silu(gate_pre);
        let mixed = tape.mul(f_f, gate)?;
        let out = self.out_proj.forward(tape, binds, mixed)?;
        tape.add(x, out)
    }
}

// ── decoder block ───────────────────────────────────────────────────────────

/// One decoder-side block: the mixer (with its own residual), an additive
/// modulator branch taken from the block input, then the feed-forward block.
pub struct DecoderBlock {
    pub ccsm: CcsmBlock,
    pub scfm: ScfmBlock,
    pub ffn: FfnBlock,
}

impl DecoderBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        hyper: &BlockHyper,
        uid: u64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(DecoderBlock {
            ccsm: CcsmBlock::new(store, &format!("{name}.ccsm"), channels, hyper, uid, rng)?,
            scfm: ScfmBlock::new(store, &format!("{name}.scfm"), channels, hyper.scfm_reduction, rng)?,
            ffn: FfnBlock::new(store, &format!("{name}.ffn"), channels, hyper.ffn_expansion, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        x: TensorId,
        seed: u64,
    ) -> Result<TensorId> {
        tape.push_scope("ccsm");
        let y1 = self.ccsm.forward(tape, binds, x, seed)?;
        tape.pop_scope();
        tape.push_scope("scfm");
        let branch = self.scfm.body(tape, binds, x)?;
        tape.pop_scope();
        let y2 = tape.add(y1, branch)?;
        tape.push_scope("ffn");
        let y3 = self.ffn.forward(tape, binds, y2)?;
        tape.pop_scope();
        Ok(y3)
    }
}
