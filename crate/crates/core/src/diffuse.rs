//! Score diffusing: spreading the n per-centroid weights back to all pixels.
//!
//! Each pixel gets a softmax assignment distribution over centroids from its
//! similarity values, and its weight vector is the expectation of centroid
//! weights under that distribution — a single `[HW,n] x [n,C]` product. The
//! result multiplicatively modulates the feature map that fed the clustering.

use crate::error::{Error, Result};
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use rand::Rng;

/// Learnable sharpness of the assignment softmax. The shift `sharp_beta`
/// cancels inside the softmax, so its gradient is identically zero; it is
/// kept because the formulation names it, and the null gradient is a test.
pub struct DiffusionParams {
    pub sharp_alpha: ParamId,
    pub sharp_beta: ParamId,
}

impl DiffusionParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(DiffusionParams {
            sharp_alpha: store.register(&format!("{name}.sharp_alpha"), &[1], Init::Ones, rng)?,
            sharp_beta: store.register(&format!("{name}.sharp_beta"), &[1], Init::Zeros, rng)?,
        })
    }
}

/// Per-pixel assignment distribution over centroids.
pub struct AssignmentField {
    /// `[HW, n]`, rows sum to 1, entries in (0,1).
    pub alpha: TensorId,
}

/// Softmax over centroids of sharpened similarity scores. `pdf` is `[n, HW]`.
pub fn assign<T: Scalar>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    pdf: TensorId,
    params: &DiffusionParams,
) -> Result<AssignmentField> {
    let s = tape.shape(pdf).to_vec();
    if s.len() != 2 {
        return Err(Error::shape(format!("assign expects pdf [n,HW], got {s:?}")));
    }
    let scaled = tape.mul(pdf, binds.get(params.sharp_alpha))?;
    let shifted = tape.add(scaled, binds.get(params.sharp_beta))?;
    let soft = tape.softmax(shifted, 0)?; // over centroids
    let alpha = tape.transpose(soft)?; // [HW, n]
    Ok(AssignmentField { alpha })
}

/// Expectation of centroid weights under each pixel's assignment:
/// `w_pix[:, p] = sum_k alpha[p, k] * w[:, k]`, returned as `[C, HW]`.
pub fn invert_weights<T: Scalar>(
    tape: &mut Tape<T>,
    field: &AssignmentField,
    w: TensorId,
) -> Result<TensorId> {
    let alpha_shape = tape.shape(field.alpha).to_vec();
    let w_shape = tape.shape(w).to_vec();
    if w_shape.len() != 2 || alpha_shape.len() != 2 || alpha_shape[1] != w_shape[1] {
        return Err(Error::shape(format!(
            "invert_weights: alpha {alpha_shape:?} and weights {w_shape:?} disagree on n"
        )));
    }
    let w_t = tape.transpose(w)?; // [n, C]
    let mixed = tape.matmul(field.alpha, w_t)?; // [HW, C]
    tape.transpose(mixed) // [C, HW]
}

/// Full diffusion applied to the pre-clustering feature map `f_scan_in`
/// (`[C, H, W]`): assignment, inversion, and elementwise modulation.
pub fn sd_apply<T: Scalar>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    f_scan_in: TensorId,
    pdf: TensorId,
    w: TensorId,
    params: &DiffusionParams,
) -> Result<TensorId> {
    let s = tape.shape(f_scan_in).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("sd_apply expects [C,H,W], got {s:?}")));
    }
    let (c, h, wd) = (s[0], s[1], s[2]);
    let field = assign(tape, binds, pdf, params)?;
    let w_pix = invert_weights(tape, &field, w)?;
    let w_map = tape.reshape(w_pix, &[c, h, wd])?;
    tape.mul(f_scan_in, w_map)
}
