//! The full restoration network: an asymmetric U-Net whose encoder uses only
//! feed-forward blocks and whose decoder stacks cluster-scan mixer blocks,
//! plus the reconstruction loss, the training step, and checkpoint I/O.

use crate::blocks::{BlockHyper, DecoderBlock, FfnBlock};
use crate::cost::{self, CostLedger, ScalingRow};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, Downsample, Upsample};
use crate::optim::AdamW;
use crate::params::{Bindings, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Neighborhood side used for centroid initialization everywhere.
pub const KNN_K: usize = 3;
/// Channel reduction of the modulator's squeeze branch.
pub const SCFM_REDUCTION: usize = 4;

const CHECKPOINT_MAGIC: u32 = u32::from_le_bytes(*b"CSUN");
const CHECKPOINT_VERSION: u32 = 1;

// ── configuration ───────────────────────────────────────────────────────────

/// How per-block sampling seeds are chosen during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedPolicy {
    /// Seeds derived from feature extents and block identity; repeatable.
    FixedByShape,
    /// Fresh seeds drawn per training step; sampling acts as a regularizer.
    FreshPerStep,
}

/// Seed source for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum SeedMode {
    /// Derive per-block seeds from extents and block identity.
    Eval,
    /// Mix the given per-step base into every block's seed.
    Train { base: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Encoder/decoder resolution levels.
    pub levels: usize,
    /// Feed-forward blocks per encoder level (mirrored by the decoder).
    pub blocks_per_level: Vec<usize>,
    pub bottleneck_blocks: usize,
    pub refine_blocks: usize,
    /// Channel width at the first level; doubles per level.
    pub embed_dim: usize,
    /// Cluster centroids per feature map.
    pub centroids: usize,
    /// State dimension of the selective scan.
    pub state_dim: usize,
    pub ffn_expansion: usize,
    /// Weight of the frequency-domain term in the loss.
    pub fft_loss_weight: f64,
    /// Training crop side length.
    pub crop_size: usize,
    pub seed_policy: SeedPolicy,
}

impl NetworkConfig {
    /// The full-size configuration.
    pub fn standard() -> Self {
        NetworkConfig {
            levels: 3,
            blocks_per_level: vec![2, 4, 4],
            bottleneck_blocks: 4,
            refine_blocks: 4,
            embed_dim: 32,
            centroids: 4,
            state_dim: 16,
            ffn_expansion: 2,
            fft_loss_weight: 0.1,
            crop_size: 64,
            seed_policy: SeedPolicy::FixedByShape,
        }
    }

    /// A minimal configuration that exercises every code path cheaply.
    pub fn smoke() -> Self {
        NetworkConfig {
            levels: 3,
            blocks_per_level: vec![1, 1, 1],
            bottleneck_blocks: 1,
            refine_blocks: 1,
            embed_dim: 4,
            centroids: 2,
            state_dim: 4,
            ffn_expansion: 2,
            fft_loss_weight: 0.1,
            crop_size: 64,
            seed_policy: SeedPolicy::FixedByShape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("levels must be >= 1".to_string()));
        }
        if self.blocks_per_level.len() != self.levels {
            return Err(Error::config(format!(
                "blocks_per_level has {} entries for {} levels",
                self.blocks_per_level.len(),
                self.levels
            )));
        }
        if self.blocks_per_level.contains(&0) {
            return Err(Error::config("every level needs at least one block".to_string()));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(SCFM_REDUCTION) {
            return Err(Error::config(format!(
                "embed_dim must be a positive multiple of {SCFM_REDUCTION}, got {}",
                self.embed_dim
            )));
        }
        if self.centroids == 0 || self.state_dim == 0 || self.ffn_expansion == 0 {
            return Err(Error::config(
                "centroids, state_dim and ffn_expansion must be >= 1".to_string(),
            ));
        }
        if self.fft_loss_weight < 0.0 {
            return Err(Error::config("fft_loss_weight must be >= 0".to_string()));
        }
        Ok(())
    }

    /// Channel width at resolution level `i`.
    pub fn channels_at(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    /// Both spatial extents must divide this for a forward pass.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.levels
    }

    fn hyper(&self) -> BlockHyper {
        BlockHyper {
            centroids: self.centroids,
            state_dim: self.state_dim,
            knn_k: KNN_K,
            ffn_expansion: self.ffn_expansion,
            scfm_reduction: SCFM_REDUCTION,
        }
    }
}

// ── model ───────────────────────────────────────────────────────────────────

struct EncoderLevel {
    blocks: Vec<FfnBlock>,
    down: Option<Downsample>,
}

struct DecoderLevel {
    up: Upsample,
    fuse: Conv2dLayer,
    blocks: Vec<DecoderBlock>,
}

/// Loss and fit quality of one optimization step, measured on its own batch.
#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    pub loss: f64,
    pub psnr: f64,
}

pub struct Model<T: Scalar> {
    pub config: NetworkConfig,
    pub store: ParamStore<T>,
    stem: Conv2dLayer,
    encoder: Vec<EncoderLevel>,
    bridge: Conv2dLayer,
    bottleneck: Vec<DecoderBlock>,
    decoder: Vec<DecoderLevel>,
    refine: Vec<DecoderBlock>,
    head: Conv2dLayer,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Every dotted path one mixer block contributes to the ledger.
fn mixer_block_costs(
    led: &mut CostLedger,
    prefix: &str,
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    cfg: &NetworkConfig,
) {
    let hw = h * w;
    led.entry(&format!("{prefix}.ccsm")).add(&cost::mixer_entry(batch, c, hw));
    led.entry(&format!("{prefix}.ccsm.fa"))
        .add(&cost::aggregation_entry(batch, c, hw, cfg.centroids));
    led.entry(&format!("{prefix}.ccsm.s6"))
        .add(&cost::scan_entry(batch, c, cfg.centroids, cfg.state_dim));
    led.entry(&format!("{prefix}.ccsm.sd"))
        .add(&cost::diffusion_entry(batch, c, hw, cfg.centroids));
    led.entry(&format!("{prefix}.scfm"))
        .add(&cost::modulator_entry(batch, c, h, w, SCFM_REDUCTION));
    led.entry(&format!("{prefix}.ffn")).add(&cost::ffn_entry(batch, c, hw, cfg.ffn_expansion));
}

/// Per-block sampling seed for one forward pass.
fn block_seed(mode: SeedMode, h: usize, w: usize, uid: u64) -> u64 {
    match mode {
        SeedMode::Eval => splitmix(splitmix(((h as u64) << 32) | w as u64) ^ splitmix(uid)),
        SeedMode::Train { base } => splitmix(base ^ splitmix(uid)),
    }
}

impl<T: Scalar> Model<T> {
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store: ParamStore<T> = ParamStore::new();
        let hyper = config.hyper();
        let mut uid = 0u64;
        let mut next_uid = || {
            let u = uid;
            uid += 1;
            u
        };

        let stem = Conv2dLayer::same(&mut store, "stem", 3, config.embed_dim, 3, &mut rng)?;

        let mut encoder = Vec::with_capacity(config.levels);
        for i in 0..config.levels {
            let c = config.channels_at(i);
            let mut blocks = Vec::new();
            for j in 0..config.blocks_per_level[i] {
                blocks.push(FfnBlock::new(
                    &mut store,
                    &format!("encoder.level{i}.block{j}"),
                    c,
                    config.ffn_expansion,
                    &mut rng,
                )?);
            }
            let down = if i + 1 < config.levels {
                Some(Downsample::new(&mut store, &format!("encoder.level{i}.down"), c, &mut rng)?)
            } else {
                None
            };
            encoder.push(EncoderLevel { blocks, down });
        }

        // A stride-2 stage that keeps the deepest width instead of doubling
        // it; the bottleneck then mixes at the lowest resolution.
        let deep = config.channels_at(config.levels - 1);
        let bridge = Conv2dLayer::new(
            &mut store,
            "bridge",
            deep,
            deep,
            3,
            crate::tape::ConvSpec { stride: 2, padding: 1, depthwise: false, pad_mode: crate::tape::PadMode::Zero },
            true,
            &mut rng,
        )?;

        let mut bottleneck = Vec::new();
        for j in 0..config.bottleneck_blocks {
            bottleneck.push(DecoderBlock::new(
                &mut store,
                &format!("bottleneck.block{j}"),
                deep,
                &hyper,
                next_uid(),
                &mut rng,
            )?);
        }

        let mut decoder = Vec::with_capacity(config.levels);
        for i in (0..config.levels).rev() {
            let c = config.channels_at(i);
            let in_c = if i + 1 == config.levels { deep } else { config.channels_at(i + 1) };
            let up = Upsample::new(&mut store, &format!("decoder.level{i}.up"), in_c, &mut rng)?;
            let fuse = Conv2dLayer::same(
                &mut store,
                &format!("decoder.level{i}.fuse"),
                in_c / 2 + c,
                c,
                1,
                &mut rng,
            )?;
            let mut blocks = Vec::new();
            for j in 0..config.blocks_per_level[i] {
                blocks.push(DecoderBlock::new(
                    &mut store,
                    &format!("decoder.level{i}.block{j}"),
                    c,
                    &hyper,
                    next_uid(),
                    &mut rng,
                )?);
            }
            decoder.push(DecoderLevel { up, fuse, blocks });
        }

        let mut refine = Vec::new();
        for j in 0..config.refine_blocks {
            refine.push(DecoderBlock::new(
                &mut store,
                &format!("refine.block{j}"),
                config.embed_dim,
                &hyper,
                next_uid(),
                &mut rng,
            )?);
        }

        let head = Conv2dLayer::same_zeroed(&mut store, "head", config.embed_dim, 3, 3, &mut rng)?;

        Ok(Model { config, store, stem, encoder, bridge, bottleneck, decoder, refine, head })
    }

    pub fn param_count(&self) -> usize {
        self.store.total_values()
    }

    /// Analytic per-operator cost of one forward pass at the given extents,
    /// computed from layer shapes without executing anything. The dotted
    /// paths, MAC counts and activation counts equal what an instrumented
    /// forward records, entry by entry; the `params` column attributes every
    /// stored value to the path that owns it.
    pub fn cost_ledger(&self, batch: usize, height: usize, width: usize) -> Result<CostLedger> {
        let cfg = &self.config;
        let d = cfg.spatial_divisor();
        if batch == 0 || height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::shape(format!(
                "cost walk needs positive extents divisible by {d}, got {batch}x3x{height}x{width}"
            )));
        }
        let mut led = CostLedger::default();
        led.entry("stem").add(&cost::conv_entry(batch, 3, cfg.embed_dim, 3, height, width));
        let (mut ch, mut h, mut w) = (cfg.embed_dim, height, width);
        for i in 0..cfg.levels {
            for j in 0..cfg.blocks_per_level[i] {
                led.entry(&format!("encoder.level{i}.block{j}"))
                    .add(&cost::ffn_entry(batch, ch, h * w, cfg.ffn_expansion));
            }
            if i + 1 < cfg.levels {
                led.entry(&format!("encoder.level{i}.down"))
                    .add(&cost::conv_entry(batch, ch, 2 * ch, 3, h / 2, w / 2));
                ch *= 2;
                h /= 2;
                w /= 2;
            }
        }
        led.entry("bridge").add(&cost::conv_entry(batch, ch, ch, 3, h / 2, w / 2));
        h /= 2;
        w /= 2;
        for j in 0..cfg.bottleneck_blocks {
            mixer_block_costs(&mut led, &format!("bottleneck.block{j}"), batch, ch, h, w, cfg);
        }
        for i in (0..cfg.levels).rev() {
            led.entry(&format!("decoder.level{i}.up"))
                .add(&cost::conv_entry(batch, ch, 2 * ch, 1, h, w));
            let half = ch / 2;
            h *= 2;
            w *= 2;
            let c = cfg.channels_at(i);
            led.entry(&format!("decoder.level{i}.fuse"))
                .add(&cost::conv_entry(batch, half + c, c, 1, h, w));
            ch = c;
            for j in 0..cfg.blocks_per_level[i] {
                mixer_block_costs(&mut led, &format!("decoder.level{i}.block{j}"), batch, ch, h, w, cfg);
            }
        }
        for j in 0..cfg.refine_blocks {
            mixer_block_costs(&mut led, &format!("refine.block{j}"), batch, cfg.embed_dim, height, width, cfg);
        }
        led.entry("head").add(&cost::conv_entry(batch, cfg.embed_dim, 3, 3, height, width));
        Ok(led)
    }

    /// Batch-1 scaling rows of the analytic ledger over several input shapes.
    pub fn scaling_rows(&self, shapes: &[(usize, usize)]) -> Result<Vec<ScalingRow>> {
        shapes
            .iter()
            .map(|&(h, w)| Ok(ScalingRow::from_ledger(h, w, &self.cost_ledger(1, h, w)?)))
            .collect()
    }

    /// Full forward pass. `x` is `[B,3,H,W]` with both extents divisible by
    /// [`NetworkConfig::spatial_divisor`]; the output adds the learned
    /// residual to the input.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        x: TensorId,
        mode: SeedMode,
    ) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(format!("forward expects [B,3,H,W], got {s:?}")));
        }
        let d = self.config.spatial_divisor();
        if !s[2].is_multiple_of(d) || !s[3].is_multiple_of(d) {
            return Err(Error::shape(format!(
                "spatial extents {}x{} must divide {d}",
                s[2], s[3]
            )));
        }

        tape.push_scope("stem");
        let mut e = self.stem.forward(tape, binds, x)?;
        tape.pop_scope();

        let mut skips = Vec::with_capacity(self.config.levels);
        tape.push_scope("encoder");
        for (i, level) in self.encoder.iter().enumerate() {
            tape.push_scope(&format!("level{i}"));
            for (j, block) in level.blocks.iter().enumerate() {
                tape.push_scope(&format!("block{j}"));
                e = block.forward(tape, binds, e)?;
                tape.pop_scope();
            }
            skips.push(e);
            if let Some(down) = &level.down {
                tape.push_scope("down");
                e = down.forward(tape, binds, e)?;
                tape.pop_scope();
            }
            tape.pop_scope();
        }
        tape.pop_scope();

        tape.push_scope("bridge");
        e = self.bridge.forward(tape, binds, e)?;
        tape.pop_scope();

        tape.push_scope("bottleneck");
        for (j, block) in self.bottleneck.iter().enumerate() {
            tape.push_scope(&format!("block{j}"));
            let es = tape.shape(e).to_vec();
            let seed = block_seed(mode, es[2], es[3], block.ccsm.uid);
            e = block.forward(tape, binds, e, seed)?;
            tape.pop_scope();
        }
        tape.pop_scope();

        tape.push_scope("decoder");
        for (rank, level) in self.decoder.iter().enumerate() {
            let i = self.config.levels - 1 - rank;
            tape.push_scope(&format!("level{i}"));
            tape.push_scope("up");
            let upped = level.up.forward(tape, binds, e)?;
            tape.pop_scope();
            let cat = tape.concat(&[upped, skips[i]], 1)?;
            tape.push_scope("fuse");
            e = level.fuse.forward(tape, binds, cat)?;
            tape.pop_scope();
            for (j, block) in level.blocks.iter().enumerate() {
                tape.push_scope(&format!("block{j}"));
                let es = tape.shape(e).to_vec();
                let seed = block_seed(mode, es[2], es[3], block.ccsm.uid);
                e = block.forward(tape, binds, e, seed)?;
                tape.pop_scope();
            }
            tape.pop_scope();
        }
        tape.pop_scope();

        tape.push_scope("refine");
        for (j, block) in self.refine.iter().enumerate() {
            tape.push_scope(&format!("block{j}"));
            let es = tape.shape(e).to_vec();
            let seed = block_seed(mode, es[2], es[3], block.ccsm.uid);
            e = block.forward(tape, binds, e, seed)?;
            tape.pop_scope();
        }
        tape.pop_scope();

        tape.push_scope("head");
        let residual = self.head.forward(tape, binds, e)?;
        tape.pop_scope();
        tape.add(x, residual)
    }

    /// Convenience wrapper: run one deterministic forward over raw values.
    pub fn restore(&self, shape: &[usize], data: &[T]) -> Result<Vec<T>> {
        let mut tape: Tape<T> = Tape::new();
        let binds = self.store.bind(&mut tape)?;
        let x = tape.constant(shape, data.to_vec())?;
        let y = self.forward(&mut tape, &binds, x, SeedMode::Eval)?;
        Ok(tape.data(y).to_vec())
    }

    /// Reconstruction loss: mean absolute pixel error plus the weighted mean
    /// absolute error of the real and imaginary discrete-spectrum parts.
    pub fn loss(&self, tape: &mut Tape<T>, pred: TensorId, target: TensorId) -> Result<TensorId> {
        if tape.shape(pred) != tape.shape(target) {
            return Err(Error::shape(format!(
                "loss shapes differ: {:?} vs {:?}",
                tape.shape(pred),
                tape.shape(target)
            )));
        }
        let diff = tape.sub(pred, target)?;
        let l1 = {
            let a = tape.abs(diff);
            tape.mean(a, None, false)?
        };
        if self.config.fft_loss_weight == 0.0 {
            return Ok(l1);
        }
        let spec = tape.dft2d(diff)?;
        let mag = tape.abs(spec);
        let fterm = tape.mean(mag, None, false)?;
        let weighted = tape.affine(fterm, T::from_f64(self.config.fft_loss_weight), T::zero());
        tape.add(l1, weighted)
    }

    /// One optimization step over a single batch, reporting the loss and the
    /// prediction's PSNR on that same batch.
    pub fn train_step(
        &mut self,
        opt: &mut AdamW<T>,
        shape: &[usize],
        input: &[T],
        target: &[T],
        lr: f64,
        base_seed: u64,
        step: usize,
    ) -> Result<StepReport> {
        let mut tape: Tape<T> = Tape::new();
        let binds = self.store.bind(&mut tape)?;
        let x = tape.constant(shape, input.to_vec())?;
        let t = tape.constant(shape, target.to_vec())?;
        let pred = self.forward(&mut tape, &binds, x, SeedMode::Train { base: base_seed })?;
        let loss = self.loss(&mut tape, pred, t)?;
        let value = tape.value(loss)?.to_f64();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let psnr = {
            let pv: Vec<f64> = tape.data(pred).iter().map(|&v| v.to_f64()).collect();
            let tv: Vec<f64> = target.iter().map(|&v| v.to_f64()).collect();
            crate::metrics::psnr(&pv, &tv)?
        };
        tape.backward(loss)?;
        let grads = self.store.gradients(&tape, &binds);
        opt.step(&mut self.store, &grads, T::from_f64(lr))?;
        Ok(StepReport { loss: value, psnr })
    }

    // ── checkpointing ───────────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        write_u32(&mut w, CHECKPOINT_MAGIC)?;
        write_u32(&mut w, CHECKPOINT_VERSION)?;
        write_config(&mut w, &self.config)?;
        write_u32(&mut w, self.store.len() as u32)?;
        for pid in self.store.iter_ids() {
            let name = self.store.name(pid).as_bytes();
            write_u32(&mut w, name.len() as u32)?;
            w.write_all(name)?;
            let shape = self.store.shape(pid);
            write_u32(&mut w, shape.len() as u32)?;
            for &ext in shape {
                write_u32(&mut w, ext as u32)?;
            }
            for &v in self.store.data(pid) {
                w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read only the configuration from a checkpoint header.
    pub fn read_config(path: &Path) -> Result<NetworkConfig> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        read_preamble(&mut r)?;
        read_config(&mut r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        read_preamble(&mut r)?;
        let config = read_config(&mut r)?;
        let mut model = Model::build(config, 0)?;
        let count = read_u32(&mut r)? as usize;
        if count != model.store.len() {
            return Err(Error::format(format!(
                "checkpoint holds {count} tensors, the configured model has {}",
                model.store.len()
            )));
        }
        for pid in model.store.iter_ids().collect::<Vec<_>>() {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 4096 {
                return Err(Error::format(format!("unreasonable name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format("parameter name is not UTF-8".to_string()))?;
            if name != model.store.name(pid) {
                return Err(Error::format(format!(
                    "parameter order mismatch: file has {name:?}, model expects {:?}",
                    model.store.name(pid)
                )));
            }
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            if shape != model.store.shape(pid) {
                return Err(Error::format(format!(
                    "shape mismatch for {name:?}: file {shape:?}, model {:?}",
                    model.store.shape(pid)
                )));
            }
            let data = model.store.data_mut(pid);
            let mut buf = [0u8; 4];
            for v in data.iter_mut() {
                r.read_exact(&mut buf).map_err(truncated)?;
                *v = T::from_f64(f32::from_le_bytes(buf) as f64);
            }
        }
        let mut probe = [0u8; 1];
        match r.read(&mut probe) {
            Ok(0) => Ok(model),
            Ok(_) => Err(Error::format("trailing bytes after final tensor".to_string())),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("checkpoint truncated".to_string())
    } else {
        Error::Io(e)
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_preamble<R: Read>(r: &mut R) -> Result<()> {
    let magic = read_u32(r)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "bad magic {magic:#010x}, expected {CHECKPOINT_MAGIC:#010x}"
        )));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    Ok(())
}

fn write_config<W: Write>(w: &mut W, c: &NetworkConfig) -> Result<()> {
    write_u32(w, c.levels as u32)?;
    for &b in &c.blocks_per_level {
        write_u32(w, b as u32)?;
    }
    write_u32(w, c.bottleneck_blocks as u32)?;
    write_u32(w, c.refine_blocks as u32)?;
    write_u32(w, c.embed_dim as u32)?;
    write_u32(w, c.centroids as u32)?;
    write_u32(w, c.state_dim as u32)?;
    write_u32(w, c.ffn_expansion as u32)?;
    w.write_all(&c.fft_loss_weight.to_le_bytes())?;
    write_u32(w, c.crop_size as u32)?;
    write_u32(w, match c.seed_policy {
        SeedPolicy::FixedByShape => 0,
        SeedPolicy::FreshPerStep => 1,
    })?;
    Ok(())
}

fn read_config<R: Read>(r: &mut R) -> Result<NetworkConfig> {
    let levels = read_u32(r)? as usize;
    if levels == 0 || levels > 16 {
        return Err(Error::format(format!("implausible level count {levels}")));
    }
    let mut blocks_per_level = Vec::with_capacity(levels);
    for _ in 0..levels {
        blocks_per_level.push(read_u32(r)? as usize);
    }
    let bottleneck_blocks = read_u32(r)? as usize;
    let refine_blocks = read_u32(r)? as usize;
    let embed_dim = read_u32(r)? as usize;
    let centroids = read_u32(r)? as usize;
    let state_dim = read_u32(r)? as usize;
    let ffn_expansion = read_u32(r)? as usize;
    let fft_loss_weight = read_f64(r)?;
    let crop_size = read_u32(r)? as usize;
    let seed_policy = match read_u32(r)? {
        0 => SeedPolicy::FixedByShape,
        1 => SeedPolicy::FreshPerStep,
        other => return Err(Error::format(format!("unknown seed policy tag {other}"))),
    };
    let config = NetworkConfig {
        levels,
        blocks_per_level,
        bottleneck_blocks,
        refine_blocks,
        embed_dim,
        centroids,
        state_dim,
        ffn_expansion,
        fft_loss_weight,
        crop_size,
        seed_policy,
    };
    config.validate().map_err(|e| Error::format(format!("checkpoint config invalid: {e}")))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn pattern(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let q = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(salt);
                ((q >> 33) % 1000) as f64 / 1000.0
            })
            .collect()
    }

    #[test]
    fn standard_config_parameter_count_sits_in_band() {
        let model: Model<f64> = Model::build(NetworkConfig::standard(), 0).unwrap();
        let count = model.param_count();
        assert!(
            (2_000_000..=3_400_000).contains(&count),
            "parameter count {count} outside band"
        );
    }

    #[test]
    fn analytic_ledger_matches_instrumented_execution_exactly() {
        let mut custom = NetworkConfig::smoke();
        custom.levels = 2;
        custom.blocks_per_level = vec![2, 1];
        custom.bottleneck_blocks = 2;
        custom.refine_blocks = 1;
        custom.embed_dim = 8;
        custom.centroids = 3;
        custom.state_dim = 5;
        custom.ffn_expansion = 3;
        let cases = [
            (NetworkConfig::smoke(), 1usize, 16usize, 24usize),
            (NetworkConfig::smoke(), 2, 16, 16),
            (custom, 1, 12, 8),
        ];
        for (cfg, b, hh, ww) in cases {
            let model: Model<f64> = Model::build(cfg, 11).unwrap();
            let mut tape: Tape<f64> = Tape::new();
            tape.enable_scope_recording();
            let binds = model.store.bind(&mut tape).unwrap();
            let x = tape.constant(&[b, 3, hh, ww], pattern(b * 3 * hh * ww, 77)).unwrap();
            model.forward(&mut tape, &binds, x, SeedMode::Eval).unwrap();
            let measured_macs = tape.scope_macs();
            let measured_act = tape.scope_activations();
            let ledger = model.cost_ledger(b, hh, ww).unwrap();

            let analytic_paths: Vec<&String> = ledger.entries.keys().collect();
            let measured_paths: Vec<&String> = measured_macs.keys().collect();
            assert_eq!(analytic_paths, measured_paths, "path sets differ at {b}x3x{hh}x{ww}");
            for (path, e) in &ledger.entries {
                assert_eq!(e.macs, measured_macs[path], "macs diverge at {path} ({b}x3x{hh}x{ww})");
                assert_eq!(
                    e.activations, measured_act[path],
                    "activations diverge at {path} ({b}x3x{hh}x{ww})"
                );
            }
            assert_eq!(ledger.total().macs, tape.total_macs());
            assert_eq!(ledger.total().params as usize, model.store.total_values());
        }
    }

    #[test]
    fn ledger_is_repeatable_and_scales_exactly_with_batch() {
        let model: Model<f64> = Model::build(NetworkConfig::smoke(), 3).unwrap();
        let one = model.cost_ledger(1, 16, 16).unwrap();
        let again = model.cost_ledger(1, 16, 16).unwrap();
        assert_eq!(one.entries, again.entries);
        let four = model.cost_ledger(4, 16, 16).unwrap();
        for (path, e) in &one.entries {
            let f = &four.entries[path];
            assert_eq!(f.macs, 4 * e.macs, "macs at {path}");
            assert_eq!(f.activations, 4 * e.activations, "activations at {path}");
            assert_eq!(f.params, e.params, "params at {path}");
        }
        assert!(model.cost_ledger(1, 15, 16).is_err());
        assert!(model.cost_ledger(0, 16, 16).is_err());
    }

    #[test]
    fn standard_configuration_cost_totals_are_frozen() {
        let model: Model<f64> = Model::build(NetworkConfig::standard(), 5).unwrap();
        let led = model.cost_ledger(1, 64, 64).unwrap();
        let total = led.total();
        assert_eq!(total.params, 2_772_785);
        assert_eq!(total.params as usize, model.param_count());
        assert_eq!(total.flops(), 2_082_788_384);
    }

    #[test]
    fn resolution_scaling_keeps_scan_constant_and_assignment_linear() {
        let model: Model<f64> = Model::build(NetworkConfig::standard(), 5).unwrap();
        let rows = model.scaling_rows(&[(64, 64), (128, 128)]).unwrap();
        assert_eq!(rows[0].scan_flops, rows[1].scan_flops);
        assert_eq!(rows[1].assignment_flops, 4 * rows[0].assignment_flops);
        let total_ratio = rows[1].total_flops as f64 / rows[0].total_flops as f64;
        assert!((3.8..=4.3).contains(&total_ratio), "total ratio {total_ratio}");
    }

    #[test]
    fn smoke_config_builds_and_runs_a_32x32_forward() {
        let model: Model<f64> = Model::build(NetworkConfig::smoke(), 1).unwrap();
        let out = model.restore(&[1, 3, 32, 32], &pattern(3 * 32 * 32, 5)).unwrap();
        assert_eq!(out.len(), 3 * 32 * 32);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn doubling_embed_dim_roughly_quadruples_parameters() {
        let mut small_cfg = NetworkConfig::smoke();
        small_cfg.embed_dim = 8;
        let mut big_cfg = small_cfg.clone();
        big_cfg.embed_dim = 16;
        let small: Model<f64> = Model::build(small_cfg, 0).unwrap();
        let big: Model<f64> = Model::build(big_cfg, 0).unwrap();
        let ratio = big.param_count() as f64 / small.param_count() as f64;
        assert!((3.2..=4.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = NetworkConfig::smoke();
        c.blocks_per_level = vec![1, 1];
        assert!(Model::<f64>::build(c, 0).is_err());
        let mut c = NetworkConfig::smoke();
        c.embed_dim = 6;
        assert!(Model::<f64>::build(c, 0).is_err());
        let mut c = NetworkConfig::smoke();
        c.centroids = 0;
        assert!(Model::<f64>::build(c, 0).is_err());
    }

    #[test]
    fn freshly_built_model_is_the_identity_map() {
        // The residual head starts zeroed, so before any training the model
        // must return its input bit for bit.
        let model: Model<f64> = Model::build(NetworkConfig::smoke(), 2).unwrap();
        let input = pattern(3 * 16 * 16, 7);
        let out = model.restore(&[1, 3, 16, 16], &input).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn perturbed_head_breaks_the_identity() {
        let mut model: Model<f64> = Model::build(NetworkConfig::smoke(), 2).unwrap();
        model.store.data_mut(model.head.weight)[0] = 0.5;
        let input = pattern(3 * 16 * 16, 7);
        let out = model.restore(&[1, 3, 16, 16], &input).unwrap();
        assert_ne!(out, input);
    }

    #[test]
    fn forward_shape_contract_and_determinism() {
        let model: Model<f64> = Model::build(NetworkConfig::smoke(), 3).unwrap();
        let input = pattern(3 * 64 * 64, 9);
        let a = model.restore(&[1, 3, 64, 64], &input).unwrap();
        let b = model.restore(&[1, 3, 64, 64], &input).unwrap();
        assert_eq!(a.len(), 3 * 64 * 64);
        assert_eq!(a, b, "eval forwards must be bit-identical");
    }

    #[test]
    fn indivisible_extents_are_rejected() {
        let model: Model<f64> = Model::build(NetworkConfig::smoke(), 3).unwrap();
        let err = model.restore(&[1, 3, 30, 30], &pattern(3 * 30 * 30, 11));
        assert!(err.is_err());
    }

    #[test]
    fn loss_of_identical_tensors_is_zero() {
        let model: Model<f64> = Model::build(NetworkConfig::smoke(), 4).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[1, 3, 4, 4], pattern(48, 13)).unwrap();
        let l = model.loss(&mut tape, x, x).unwrap();
        assert_eq!(tape.value(l).unwrap(), 0.0);
    }

    #[test]
    fn plain_term_of_loss_matches_constant_difference() {
        let mut cfg = NetworkConfig::smoke();
        cfg.fft_loss_weight = 0.0;
        let model: Model<f64> = Model::build(cfg, 4).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.tensor(&[1, 3, 4, 4], crate::tape::Fill::Const(0.75), false).unwrap();
        let t = tape.tensor(&[1, 3, 4, 4], crate::tape::Fill::Const(0.25), false).unwrap();
        let l = model.loss(&mut tape, p, t).unwrap();
        assert!((tape.value(l).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_hand_computed_spectrum_term() {
        let model: Model<f64> = Model::build(NetworkConfig::smoke(), 4).unwrap();
        let pv = vec![0.9, 0.1, 0.4, 0.6, 0.2, 0.8, 0.5, 0.3, 0.7, 0.05, 0.95, 0.45];
        let tv = vec![0.5, 0.2, 0.3, 0.9, 0.1, 0.6, 0.4, 0.8, 0.2, 0.15, 0.55, 0.35];
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.constant(&[1, 3, 2, 2], pv.clone()).unwrap();
        let t = tape.constant(&[1, 3, 2, 2], tv.clone()).unwrap();
        let l = model.loss(&mut tape, p, t).unwrap();

        // Hand evaluation: L1 plus 0.1 x mean |spectrum| over both parts,
        // with the 2x2 transform written out directly.
        let mut l1 = 0.0;
        for i in 0..12 {
            l1 += (pv[i] - tv[i]).abs();
        }
        l1 /= 12.0;
        let mut spectral = 0.0;
        for c in 0..3 {
            let d: Vec<f64> = (0..4).map(|i| pv[c * 4 + i] - tv[c * 4 + i]).collect();
            // Real 2x2 transform: four sign patterns, imaginary parts zero.
            let coeffs = [
                d[0] + d[1] + d[2] + d[3],
                d[0] - d[1] + d[2] - d[3],
                d[0] + d[1] - d[2] - d[3],
                d[0] - d[1] - d[2] + d[3],
            ];
            spectral += coeffs.iter().map(|v| v.abs()).sum::<f64>();
        }
        spectral /= 24.0; // mean over 3 channels x 2 parts x 4 bins
        let expect = l1 + 0.1 * spectral;
        assert!(
            (tape.value(l).unwrap() - expect).abs() < 1e-10,
            "got {}, hand {}",
            tape.value(l).unwrap(),
            expect
        );
    }

    #[test]
    fn zero_learning_rate_training_step_keeps_parameters() {
        let mut model: Model<f64> = Model::build(NetworkConfig::smoke(), 5).unwrap();
        let before: Vec<Vec<f64>> =
            model.store.iter_ids().map(|p| model.store.data(p).to_vec()).collect();
        let mut opt = AdamW::new(&model.store);
        let input = pattern(3 * 16 * 16, 15);
        let target = pattern(3 * 16 * 16, 16);
        model
            .train_step(&mut opt, &[1, 3, 16, 16], &input, &target, 0.0, 1, 0)
            .unwrap();
        for (pid, prev) in model.store.iter_ids().zip(before) {
            assert_eq!(model.store.data(pid), prev.as_slice());
        }
    }

    #[test]
    fn a_few_training_steps_reduce_the_loss() {
        let mut model: Model<f64> = Model::build(NetworkConfig::smoke(), 6).unwrap();
        let mut opt = AdamW::with_hyper(&model.store, 0.9, 0.999, 1e-8, 0.0);
        let input = pattern(3 * 16 * 16, 17);
        let target: Vec<f64> = input.iter().map(|v| (v * 0.8 + 0.1).clamp(0.0, 1.0)).collect();
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..12usize {
            let report = model
                .train_step(&mut opt, &[1, 3, 16, 16], &input, &target, 2e-3, 100 + step as u64, step)
                .unwrap();
            assert!(report.psnr.is_finite());
            if step == 0 {
                first = report.loss;
            }
            last = report.loss;
        }
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let mut model: Model<f64> = Model::build(NetworkConfig::smoke(), 7).unwrap();
        let pid = model.store.lookup("stem.weight").unwrap();
        model.store.data_mut(pid)[0] = f64::NAN;
        let mut opt = AdamW::new(&model.store);
        let input = pattern(3 * 16 * 16, 19);
        let err = model
            .train_step(&mut opt, &[1, 3, 16, 16], &input, &input, 1e-3, 1, 41)
            .unwrap_err();
        match err {
            Error::Diverged { step, loss } => {
                assert_eq!(step, 41);
                assert!(!loss.is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn fresh_checkpoint_round_trips_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model: Model<f64> = Model::build(NetworkConfig::smoke(), 8).unwrap();
        model.save(&path).unwrap();
        let loaded: Model<f64> = Model::load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        for (a, b) in model.store.iter_ids().zip(loaded.store.iter_ids()) {
            assert_eq!(model.store.name(a), loaded.store.name(b));
            let da = model.store.data(a);
            let db = loaded.store.data(b);
            for (x, y) in da.iter().zip(db) {
                assert_eq!(x.to_bits(), y.to_bits(), "{} drifted", model.store.name(a));
            }
        }
    }

    #[test]
    fn trained_checkpoint_double_round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let first = dir.path().join("a.ckpt");
        let second = dir.path().join("b.ckpt");
        let mut model: Model<f64> = Model::build(NetworkConfig::smoke(), 9).unwrap();
        let mut opt = AdamW::new(&model.store);
        let input = pattern(3 * 16 * 16, 23);
        model
            .train_step(&mut opt, &[1, 3, 16, 16], &input, &input, 1e-3, 3, 0)
            .unwrap();
        model.save(&first).unwrap();
        let loaded: Model<f64> = Model::load(&first).unwrap();
        loaded.save(&second).unwrap();
        let a = std::fs::read(&first).unwrap();
        let b = std::fs::read(&second).unwrap();
        assert_eq!(a, b, "second save differs from first");
    }

    #[test]
    fn header_echoes_the_configuration() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut cfg = NetworkConfig::smoke();
        cfg.fft_loss_weight = 0.25;
        cfg.crop_size = 48;
        cfg.seed_policy = SeedPolicy::FreshPerStep;
        let model: Model<f64> = Model::build(cfg.clone(), 10).unwrap();
        model.save(&path).unwrap();
        assert_eq!(Model::<f64>::read_config(&path).unwrap(), cfg);
    }

    #[test]
    fn corrupt_and_truncated_checkpoints_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model: Model<f64> = Model::build(NetworkConfig::smoke(), 11).unwrap();
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Truncation anywhere must fail cleanly.
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Model::<f64>::load(&cut).is_err());

        // Trailing garbage is an error, not silently ignored.
        let long = dir.path().join("long.ckpt");
        let mut extended = bytes.clone();
        extended.push(0);
        std::fs::write(&long, &extended).unwrap();
        assert!(Model::<f64>::load(&long).is_err());

        // A flipped magic number is rejected before anything else.
        let bad = dir.path().join("bad.ckpt");
        let mut flipped = bytes;
        flipped[0] ^= 0xFF;
        std::fs::write(&bad, &flipped).unwrap();
        assert!(Model::<f64>::load(&bad).is_err());
    }

    #[test]
    fn eval_seeds_differ_across_blocks_but_not_across_calls() {
        let s1 = block_seed(SeedMode::Eval, 16, 16, 0);
        let s2 = block_seed(SeedMode::Eval, 16, 16, 1);
        let s3 = block_seed(SeedMode::Eval, 16, 16, 0);
        assert_ne!(s1, s2);
        assert_eq!(s1, s3);
        let t1 = block_seed(SeedMode::Train { base: 5 }, 16, 16, 0);
        let t2 = block_seed(SeedMode::Train { base: 6 }, 16, 16, 0);
        assert_ne!(t1, t2);
    }
}
