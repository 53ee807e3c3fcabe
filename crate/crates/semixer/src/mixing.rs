//! Temporal mixing block: patch interaction, then an MLP across the patch
//! axis, then an MLP across the embedding axis. Both MLP stages normalize
//! first and add a residual after (pre-norm convention).

use crate::numerics::{Tape, TensorId};
use crate::ram::{self, RamMode};
use crate::Result;

/// Layer-normalization scale/shift pair over the embedding axis.
#[derive(Debug, Clone, Copy)]
pub struct LnIds {
    pub gamma: TensorId,
    pub beta: TensorId,
}

/// Two affine maps with a GELU between them. `w1` is [hidden, in],
/// `w2` is [in, hidden]; both carry biases.
#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Query/key/value projections for the attention ablation, each D×D.
#[derive(Debug, Clone, Copy)]
pub struct SamIds {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
}

/// All weights of one temporal mixing block.
#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln_inter: LnIds,
    pub inter: MlpIds,
    pub ln_intra: LnIds,
    pub intra: MlpIds,
    /// Present only for models built with the attention variant.
    pub sam: Option<SamIds>,
}

/// Which patch-interaction stage a block runs before its MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    Ram,
    /// Interaction removed entirely.
    None,
    /// Scaled-dot-product attention.
    Sam,
}

fn mlp(tape: &mut Tape, x: TensorId, w: &MlpIds) -> Result<TensorId> {
    let h = tape.linear(x, w.w1, Some(w.b1))?;
    let h = tape.gelu(h)?;
    tape.linear(h, w.w2, Some(w.b2))
}

/// y = x + transpose(MLP₁(transpose(norm(x)))): mixes information across
/// patches, one embedding column at a time.
pub fn inter_patch_mix(
    tape: &mut Tape,
    x: TensorId,
    ln: &LnIds,
    w: &MlpIds,
) -> Result<TensorId> {
    let normed = tape.layer_norm(x, ln.gamma, ln.beta)?;
    let turned = tape.transpose(normed)?;
    let mixed = mlp(tape, turned, w)?;
    let back = tape.transpose(mixed)?;
    tape.add(x, back)
}

/// y = x + MLP₂(norm(x)): mixes within each patch embedding, row-wise.
pub fn intra_patch_mix(
    tape: &mut Tape,
    x: TensorId,
    ln: &LnIds,
    w: &MlpIds,
) -> Result<TensorId> {
    let normed = tape.layer_norm(x, ln.gamma, ln.beta)?;
    let mixed = mlp(tape, normed, w)?;
    tape.add(x, mixed)
}

/// Interaction stage, then inter-patch mixing, then intra-patch mixing.
pub fn temporal_mixing_block(
    tape: &mut Tape,
    x: TensorId,
    w: &BlockIds,
    kind: AttnKind,
    p: f64,
    mode: &mut RamMode,
) -> Result<TensorId> {
    let interacted = match kind {
        AttnKind::Ram => ram::ram_block(tape, x, p, mode)?,
        AttnKind::None => x,
        AttnKind::Sam => {
            let sam = w.sam.expect("attention weights missing for this block");
            ram::sam_block(tape, x, &sam)?
        }
    };
    let mixed = inter_patch_mix(tape, interacted, &w.ln_inter, &w.inter)?;
    intra_patch_mix(tape, mixed, &w.ln_intra, &w.intra)
}
