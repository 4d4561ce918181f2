//! Compute-cost accounting.
//!
//! Everything is counted in MAC-equivalents ("macs") under one convention,
//! declared here and used both by the instrumented tensor engine (which
//! accumulates per executed node) and by the analytic model walker (which
//! computes closed forms from layer shapes without executing anything):
//!
//! * one multiply or fused multiply-add = 1 mac (FLOPs = 2 x macs),
//! * divisions, exponentials, logarithms and square roots = 2 macs (4 FLOPs),
//! * additions, subtractions, comparisons, copies and data movement = free.
//!
//! Composite activations follow from the primitives: sigmoid = exp + div =
//! 4 macs/element, SiLU = sigmoid + mul = 5, softplus = exp + log1p = 4,
//! softmax = exp + div = 4 macs/element. The ledger covers the forward pass
//! only; `activations` counts the output elements of every cost-bearing node.

use crate::scan::scan_cost;
use std::collections::BTreeMap;
use std::fmt::Write;

/// Declared FLOP conversion: every MAC-equivalent is two floating-point ops.
pub const FLOPS_PER_MAC: u64 = 2;

/// Per-element MAC-equivalents of the unary operations.
pub const MUL_MACS: u64 = 1;
pub const DIV_MACS: u64 = 2;
pub const EXP_MACS: u64 = 2;
pub const SQRT_MACS: u64 = 2;
pub const SIGMOID_MACS: u64 = 4;
pub const SILU_MACS: u64 = 5;
pub const SOFTPLUS_MACS: u64 = 4;
pub const SOFTMAX_MACS: u64 = 4;

pub fn matmul_macs(m: usize, k: usize, p: usize) -> u64 {
    (m * k * p) as u64
}

/// Direct convolution: one MAC per kernel tap per output element.
pub fn conv2d_macs(out_elems: usize, cin_per_group: usize, kh: usize, kw: usize) -> u64 {
    (out_elems * cin_per_group * kh * kw) as u64
}

/// Channel layer norm: per normalized vector of length `c`, the variance costs
/// `c` muls, the three divisions and the square root cost 8, and the
/// normalize-plus-affine step costs 2 macs per element.
pub fn layer_norm_macs(c: usize, positions: usize) -> u64 {
    ((3 * c + 8) * positions) as u64
}

/// Mean reduction: additions are free, one division per output element.
pub fn mean_macs(out_elems: usize) -> u64 {
    (2 * out_elems) as u64
}

/// y = a*x + b applied elementwise with scalar constants.
pub fn affine_macs(elems: usize) -> u64 {
    elems as u64
}

/// One-dimensional DFT of length `len`: radix-2 butterflies for powers of two
/// (one complex mul = 4 macs per butterfly), otherwise the direct transform
/// with `len^2` complex multiplies.
pub fn dft1d_macs(len: usize) -> u64 {
    if len == 0 {
        return 0;
    }
    if len.is_power_of_two() {
        let stages = len.trailing_zeros() as u64;
        (len as u64 / 2) * stages * 4
    } else {
        4 * (len as u64) * (len as u64)
    }
}

/// Row-column 2-D DFT over every (batch, channel) plane.
pub fn dft2d_macs(b: usize, c: usize, h: usize, w: usize) -> u64 {
    (b * c) as u64 * (h as u64 * dft1d_macs(w) + w as u64 * dft1d_macs(h))
}

/// Clipped-window neighborhood averaging: one division per output element.
pub fn neighborhood_mean_macs(c: usize, n: usize) -> u64 {
    (2 * c * n) as u64
}

/// Cost and size of one named operator in the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostEntry {
    pub macs: u64,
    pub params: u64,
    pub activations: u64,
}

impl CostEntry {
    pub fn add(&mut self, other: &CostEntry) {
        self.macs += other.macs;
        self.params += other.params;
        self.activations += other.activations;
    }

    pub fn flops(&self) -> u64 {
        self.macs * FLOPS_PER_MAC
    }
}

/// Per-operator cost map, keyed by dotted operator path
/// (e.g. `decoder.level2.block1.ccsm.s6`).
#[derive(Clone, Debug, Default)]
pub struct CostLedger {
    pub entries: BTreeMap<String, CostEntry>,
}

impl CostLedger {
    pub fn entry(&mut self, path: &str) -> &mut CostEntry {
        self.entries.entry(path.to_string()).or_default()
    }

    /// Sum over all entries.
    pub fn total(&self) -> CostEntry {
        let mut t = CostEntry::default();
        for e in self.entries.values() {
            t.add(e);
        }
        t
    }

    /// Sum of macs over entries whose path contains `needle` as a dotted
    /// component (e.g. `s6` matches `decoder.level2.block1.ccsm.s6`).
    pub fn macs_matching(&self, needle: &str) -> u64 {
        self.entries
            .iter()
            .filter(|(k, _)| k.split('.').any(|part| part == needle))
            .map(|(_, e)| e.macs)
            .sum()
    }
}

// ── closed-form component costs ─────────────────────────────────────────────
//
// Each function mirrors the exact operation sequence of one model component;
// the network walker assembles them per dotted path, and a test pins every
// entry against the instrumented tensor engine.

fn entry(macs: u64, params: u64, activations: u64) -> CostEntry {
    CostEntry { macs, params, activations }
}

/// Plain (non-depthwise) convolution with bias; spatial reshuffles that may
/// follow it are free.
pub fn conv_entry(batch: usize, cin: usize, cout: usize, k: usize, out_h: usize, out_w: usize) -> CostEntry {
    let out = batch * cout * out_h * out_w;
    entry(
        conv2d_macs(out, cin, k, k),
        (cout * (cin * k * k + 1)) as u64,
        out as u64,
    )
}

/// Feed-forward block: channel norm, 1x1 expansion to `gamma*c`, depthwise
/// 3x3, SiLU, 1x1 contraction, free residual.
pub fn ffn_entry(batch: usize, c: usize, positions: usize, gamma: usize) -> CostEntry {
    let p = (batch * positions) as u64;
    let (c, g) = (c as u64, gamma as u64);
    entry(
        p * (3 * c + 8 + 2 * g * c * c + 14 * g * c),
        2 * g * c * c + 11 * g * c + 3 * c,
        p * (2 * c + 3 * g * c),
    )
}

/// Dual-branch modulator body: 7x7 spatial attention over channel max/mean
/// maps, squeezed channel attention (`c/r` wide), two 1x1 fuses.
pub fn modulator_entry(batch: usize, c: usize, h: usize, w: usize, r: usize) -> CostEntry {
    let p = (batch * h * w) as u64;
    let (b, c64, w64) = (batch as u64, c as u64, w as u64);
    let sq = (c / r) as u64;
    entry(
        p * (104 + 2 * sq * c64 + 2 * c64 + 2 * c64 * c64) + 2 * b * c64 * w64 + 6 * b * c64,
        99 + 2 * sq * c64 + sq + 2 * c64 * c64 + 3 * c64,
        p * (3 + sq + 5 * c64) + b * c64 * w64 + 2 * b * c64,
    )
}

/// Cluster-scan mixer, own path only: the two norms, input/gate/output 1x1
/// maps, depthwise stem, SiLU gates and the final modulation multiply. The
/// clustered stages have their own entries.
pub fn mixer_entry(batch: usize, c: usize, positions: usize) -> CostEntry {
    let p = (batch * positions) as u64;
    let c64 = c as u64;
    entry(p * (3 * c64 * c64 + 26 * c64 + 16), 3 * c64 * c64 + 17 * c64, p * 9 * c64)
}

/// Aggregation stage: seeded neighborhood-mean centroids, cosine similarity
/// distribution over `n` centroids, one gated refinement.
pub fn aggregation_entry(batch: usize, c: usize, positions: usize, n: usize) -> CostEntry {
    let b = batch as u64;
    let (c64, p, n64) = (c as u64, positions as u64, n as u64);
    entry(
        b * (p * (c64 * c64 + 2 * n64 * c64 + c64 + 10 * n64 + 2)
            + c64 * c64 * n64
            + 5 * c64 * n64
            + 2 * n64),
        2 * c64 * c64 + 2 * c64 + 2,
        b * (p * (6 * n64 + 2 * c64 + 1) + 5 * c64 * n64 + n64),
    )
}

/// Selective scan over the centroid sequence, decay matrix included.
pub fn scan_entry(batch: usize, c: usize, n: usize, state: usize) -> CostEntry {
    let b = batch as u64;
    let (c64, n64, s) = (c as u64, n as u64, state as u64);
    entry(
        b * (3 * c64 * s + scan_cost(c64, n64, s)),
        c64 * c64 + 2 * c64 + 3 * s * c64,
        b * (2 * c64 * s + n64 * (5 * c64 + 2 * s + 4 * c64 * s)),
    )
}

/// Score diffusion: per-pixel assignment softmax, weight inversion, feature
/// modulation.
pub fn diffusion_entry(batch: usize, c: usize, positions: usize, n: usize) -> CostEntry {
    let p = (batch * positions) as u64;
    let (c64, n64) = (c as u64, n as u64);
    entry(p * (5 * n64 + n64 * c64 + c64), 2, p * (2 * n64 + 2 * c64))
}

// ── resolution scaling report ───────────────────────────────────────────────

/// One row of the resolution-scaling table: total forward cost plus the two
/// clustering columns whose growth laws the table demonstrates.
#[derive(Clone, Copy, Debug)]
pub struct ScalingRow {
    pub height: usize,
    pub width: usize,
    pub total_flops: u64,
    /// Selective-scan entries; depends on the centroid count, not on H, W.
    pub scan_flops: u64,
    /// Assignment-and-diffusion entries; exactly linear in H*W.
    pub assignment_flops: u64,
}

impl ScalingRow {
    pub fn from_ledger(height: usize, width: usize, ledger: &CostLedger) -> Self {
        ScalingRow {
            height,
            width,
            total_flops: ledger.total().flops(),
            scan_flops: ledger.macs_matching("s6") * FLOPS_PER_MAC,
            assignment_flops: ledger.macs_matching("sd") * FLOPS_PER_MAC,
        }
    }
}

const SCALING_COLUMNS: [&str; 5] = ["height", "width", "total_flops", "scan_flops", "assignment_flops"];

/// Human-readable aligned table.
pub fn scaling_table(rows: &[ScalingRow]) -> String {
    let mut cells: Vec<[String; 5]> = vec![SCALING_COLUMNS.map(String::from)];
    for r in rows {
        cells.push([
            r.height.to_string(),
            r.width.to_string(),
            r.total_flops.to_string(),
            r.scan_flops.to_string(),
            r.assignment_flops.to_string(),
        ]);
    }
    let widths: Vec<usize> =
        (0..5).map(|i| cells.iter().map(|row| row[i].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &cells {
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            let _ = write!(out, "{cell:>width$}", width = widths[i]);
        }
        out.push('\n');
    }
    out
}

/// Machine-readable comma-separated table with a header line.
pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = SCALING_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.height, r.width, r.total_flops, r.scan_flops, r.assignment_flops
        );
    }
    out
}

// ── scanning-strategy comparison ────────────────────────────────────────────

/// Analytic cost of restoring one `[C,H,W]` map by scanning every pixel as a
/// sequence, against the clustered pipeline that assigns pixels to `n`
/// centroids, scans only those, and diffuses the result back.
#[derive(Clone, Copy, Debug)]
pub struct StrategyCost {
    pub c: usize,
    pub hw: usize,
    pub n: usize,
    /// Selective scan over the full pixel sequence (length `hw`).
    pub full_scan_macs: u64,
    /// Per-pixel sharpened softmax over `n` centroids.
    pub assignment_macs: u64,
    /// Selective scan over the centroid sequence (length `n`).
    pub cluster_scan_macs: u64,
    /// Weight inversion (one `[hw,n] x [n,c]` product) plus modulation.
    pub diffusion_macs: u64,
}

impl StrategyCost {
    /// Assignment, short scan and diffusion together.
    pub fn clustered_macs(&self) -> u64 {
        self.assignment_macs + self.cluster_scan_macs + self.diffusion_macs
    }

    /// Clustered cost over full-sequence cost; far below 1 whenever `n` is
    /// small against `hw`, and decreasing in `hw`.
    pub fn ratio(&self) -> f64 {
        self.clustered_macs() as f64 / self.full_scan_macs as f64
    }
}

/// Cost both scanning strategies at one shape under the declared MAC
/// convention. The full-pixel side is never executed, only counted.
pub fn strategy_compare(c: usize, h: usize, w: usize, n: usize, state: usize) -> StrategyCost {
    let hw = h * w;
    StrategyCost {
        c,
        hw,
        n,
        full_scan_macs: scan_cost(c as u64, hw as u64, state as u64),
        assignment_macs: (hw as u64) * 5 * n as u64,
        cluster_scan_macs: scan_cost(c as u64, n as u64, state as u64),
        diffusion_macs: (hw as u64) * (n as u64 * c as u64 + c as u64),
    }
}

/// Aligned table over several shapes of the same comparison.
pub fn strategy_table(rows: &[StrategyCost]) -> String {
    let mut out = String::from(
        "  pixels  full_scan_macs  clustered_macs  ratio\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>8}  {:>14}  {:>14}  {:.6}",
            r.hw,
            r.full_scan_macs,
            r.clustered_macs(),
            r.ratio()
        );
    }
    out
}
