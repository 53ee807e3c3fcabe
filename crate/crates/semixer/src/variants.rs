//! Model variants behind a common trait, registered by name.
//!
//! A variant decides how many mixing blocks a model owns, how large each
//! block's patch axis is, which interaction stage runs inside the blocks,
//! and how the per-scale embeddings flow through them. The trainer, the
//! evaluator, and the checkpoint format are variant-agnostic; they resolve
//! the implementation through [`lookup`] or [`by_tag`].

use crate::encoder::{total_patches, ScaleSpec};
use crate::mixing::{temporal_mixing_block, AttnKind, BlockIds};
use crate::numerics::{Tape, TensorId};
use crate::ram::RamMode;
use crate::{Error, Result};

pub trait Variant: Sync {
    /// Registry key, also used in reports and file names.
    fn name(&self) -> &'static str;

    /// Stable byte written to checkpoints.
    fn tag(&self) -> u8;

    /// Patch-axis size of each mixing block, in execution order.
    fn block_sizes(&self, specs: &[ScaleSpec]) -> Vec<usize>;

    /// Mask sizes a training-mode sample must pre-draw, in consumption
    /// order. Empty when the variant never applies a random mask.
    fn mask_sizes(&self, specs: &[ScaleSpec]) -> Vec<usize>;

    /// Whether blocks carry query/key/value projections.
    fn needs_sam_weights(&self) -> bool {
        false
    }

    /// Runs the embeddings through the blocks; the returned matrices are
    /// concatenated row-wise by the head and must total ΣNˢ rows.
    fn forward_trunk(
        &self,
        tape: &mut Tape,
        embeds: &[TensorId],
        blocks: &[BlockIds],
        specs: &[ScaleSpec],
        p: f64,
        mode: &mut RamMode,
    ) -> Result<Vec<TensorId>>;
}

/// Block s consumes the previous stage's output stacked on the s-th
/// embedding: N¹ rows for the first block, N^{s−1} + Nˢ after that.
pub fn chain_sizes(specs: &[ScaleSpec]) -> Vec<usize> {
    specs
        .iter()
        .enumerate()
        .map(|(s, spec)| {
            if s == 0 {
                spec.num_patches
            } else {
                specs[s - 1].num_patches + spec.num_patches
            }
        })
        .collect()
}

/// The progressive chain: each stage mixes the previous output with the
/// current scale's embedding, then keeps only the last Nˢ rows (the ones
/// that originated from scale s).
fn chain_trunk(
    tape: &mut Tape,
    embeds: &[TensorId],
    blocks: &[BlockIds],
    specs: &[ScaleSpec],
    kind: AttnKind,
    p: f64,
    mode: &mut RamMode,
) -> Result<Vec<TensorId>> {
    assert_eq!(embeds.len(), specs.len());
    assert_eq!(blocks.len(), specs.len());
    let mut outs = Vec::with_capacity(specs.len());
    let mut prev: Option<TensorId> = None;
    for (s, &emb) in embeds.iter().enumerate() {
        let (input, keep_from) = match prev {
            None => (emb, 0),
            Some(pr) => (tape.concat_rows(&[pr, emb])?, specs[s - 1].num_patches),
        };
        let y = temporal_mixing_block(tape, input, &blocks[s], kind, p, mode)?;
        let out = if keep_from == 0 {
            y
        } else {
            tape.slice_rows(y, keep_from, specs[s].num_patches)?
        };
        outs.push(out);
        prev = Some(out);
    }
    Ok(outs)
}

pub struct Full;

impl Variant for Full {
    fn name(&self) -> &'static str {
        "full"
    }
    fn tag(&self) -> u8 {
        0
    }
    fn block_sizes(&self, specs: &[ScaleSpec]) -> Vec<usize> {
        chain_sizes(specs)
    }
    fn mask_sizes(&self, specs: &[ScaleSpec]) -> Vec<usize> {
        chain_sizes(specs)
    }
    fn forward_trunk(
        &self,
        tape: &mut Tape,
        embeds: &[TensorId],
        blocks: &[BlockIds],
        specs: &[ScaleSpec],
        p: f64,
        mode: &mut RamMode,
    ) -> Result<Vec<TensorId>> {
        chain_trunk(tape, embeds, blocks, specs, AttnKind::Ram, p, mode)
    }
}

/// Chain without any patch interaction stage.
pub struct NoRam;

impl Variant for NoRam {
    fn name(&self) -> &'static str {
        "no_ram"
    }
    fn tag(&self) -> u8 {
        1
    }
    fn block_sizes(&self, specs: &[ScaleSpec]) -> Vec<usize> {
        chain_sizes(specs)
    }
    fn mask_sizes(&self, _specs: &[ScaleSpec]) -> Vec<usize> {
        Vec::new()
    }
    fn forward_trunk(
        &self,
        tape: &mut Tape,
        embeds: &[TensorId],
        blocks: &[BlockIds],
        specs: &[ScaleSpec],
        p: f64,
        mode: &mut RamMode,
    ) -> Result<Vec<TensorId>> {
        chain_trunk(tape, embeds, blocks, specs, AttnKind::None, p, mode)
    }
}

/// All scales concatenated up front and mixed by one wide block.
pub struct NoMpmc;

impl Variant for NoMpmc {
    fn name(&self) -> &'static str {
        "no_mpmc"
    }
    fn tag(&self) -> u8 {
        2
    }
    fn block_sizes(&self, specs: &[ScaleSpec]) -> Vec<usize> {
        vec![total_patches(specs)]
    }
    fn mask_sizes(&self, specs: &[ScaleSpec]) -> Vec<usize> {
        vec![total_patches(specs)]
    }
    fn forward_trunk(
        &self,
        tape: &mut Tape,
        embeds: &[TensorId],
        blocks: &[BlockIds],
        _specs: &[ScaleSpec],
        p: f64,
        mode: &mut RamMode,
    ) -> Result<Vec<TensorId>> {
        assert_eq!(blocks.len(), 1);
        let stacked = if embeds.len() == 1 {
            embeds[0]
        } else {
            tape.concat_rows(embeds)?
        };
        let y = temporal_mixing_block(tape, stacked, &blocks[0], AttnKind::Ram, p, mode)?;
        Ok(vec![y])
    }
}

/// Chain with scaled-dot-product attention in place of the random mask.
pub struct Sam;

impl Variant for Sam {
    fn name(&self) -> &'static str {
        "sam"
    }
    fn tag(&self) -> u8 {
        3
    }
    fn block_sizes(&self, specs: &[ScaleSpec]) -> Vec<usize> {
        chain_sizes(specs)
    }
    fn mask_sizes(&self, _specs: &[ScaleSpec]) -> Vec<usize> {
        Vec::new()
    }
    fn needs_sam_weights(&self) -> bool {
        true
    }
    fn forward_trunk(
        &self,
        tape: &mut Tape,
        embeds: &[TensorId],
        blocks: &[BlockIds],
        specs: &[ScaleSpec],
        p: f64,
        mode: &mut RamMode,
    ) -> Result<Vec<TensorId>> {
        chain_trunk(tape, embeds, blocks, specs, AttnKind::Sam, p, mode)
    }
}

/// All selectable variants; index equals the checkpoint tag.
pub static REGISTRY: &[&dyn Variant] = &[&Full, &NoRam, &NoMpmc, &Sam];

pub fn names() -> Vec<&'static str> {
    REGISTRY.iter().map(|v| v.name()).collect()
}

pub fn lookup(name: &str) -> Result<&'static dyn Variant> {
    REGISTRY
        .iter()
        .find(|v| v.name() == name)
        .copied()
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown variant {name:?}; registered: {}",
                names().join(", ")
            ))
        })
}

pub fn by_tag(tag: u8) -> Result<&'static dyn Variant> {
    REGISTRY
        .get(tag as usize)
        .copied()
        .ok_or_else(|| Error::Checkpoint(format!("unknown variant tag {tag}")))
}
