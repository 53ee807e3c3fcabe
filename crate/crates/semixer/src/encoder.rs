//! Multiscale patching and patch embedding.
//!
//! A history window of length n is cut into S overlapping patch sequences.
//! Scale s uses patch length Lˢ = αˢ·L¹ and stride Kˢ = Lˢ/2, producing
//! Nˢ = floor((n − Lˢ)/Kˢ) + 2 patches once the series is padded at the end
//! by repeating its final value Kˢ times. L¹ is solved from the target patch
//! count N¹ at the finest scale.

use crate::numerics::{Tape, Tensor, TensorId};
use crate::{Error, Result};

/// Patch geometry of one scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleSpec {
    /// 1-based scale index.
    pub s: usize,
    pub alpha: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub num_patches: usize,
}

/// floor((n − L)/(L/2)) + 2, which reduces to floor(2n/L).
fn patch_count(n: usize, l: usize) -> usize {
    2 * n / l
}

fn finest_len(n: usize, n1: usize) -> Option<usize> {
    let mut l = 2;
    while l <= n {
        let count = patch_count(n, l);
        if count == n1 {
            return Some(l);
        }
        if count < n1 {
            return None;
        }
        l += 2;
    }
    None
}

fn nearby_feasible(n: usize, n1: usize) -> Vec<usize> {
    let mut valid: Vec<usize> = (n.saturating_sub(16)..=n + 16)
        .filter(|&m| m >= 2 && finest_len(m, n1).is_some())
        .collect();
    valid.sort_by_key(|&m| (m.abs_diff(n), m));
    valid.truncate(4);
    valid.sort_unstable();
    valid
}

/// Solves the finest patch length from the target count `n1`, then derives
/// the coarser scales from `extra_alphas` (the implicit first scale factor
/// is 1). Fails when no even patch length reproduces `n1`.
pub fn build_scale_specs(n: usize, n1: usize, extra_alphas: &[usize]) -> Result<Vec<ScaleSpec>> {
    if n < 4 {
        return Err(Error::Config(format!("history length {n} too short to patch")));
    }
    if n1 < 2 {
        return Err(Error::Config(format!("finest patch count {n1} must be at least 2")));
    }
    let l1 = finest_len(n, n1).ok_or_else(|| {
        let nearby = nearby_feasible(n, n1);
        let hint = if nearby.is_empty() {
            String::from("no nearby history length works either")
        } else {
            let list: Vec<String> = nearby.iter().map(|m| m.to_string()).collect();
            format!("nearby valid history lengths: {}", list.join(", "))
        };
        Error::Config(format!(
            "no even patch length L satisfies floor((n - L)/(L/2)) + 2 = {n1} \
             for history length n={n}; {hint}"
        ))
    })?;
    let mut alphas = Vec::with_capacity(extra_alphas.len() + 1);
    alphas.push(1);
    alphas.extend_from_slice(extra_alphas);
    let mut specs = Vec::with_capacity(alphas.len());
    for (i, &alpha) in alphas.iter().enumerate() {
        if alpha == 0 {
            return Err(Error::Config("scale factors must be positive".into()));
        }
        let l = alpha * l1;
        if l > n {
            return Err(Error::Config(format!(
                "scale factor {alpha} gives patch length {l} exceeding history length {n}"
            )));
        }
        specs.push(ScaleSpec {
            s: i + 1,
            alpha,
            patch_len: l,
            stride: l / 2,
            num_patches: patch_count(n, l),
        });
    }
    Ok(specs)
}

/// Sum of per-scale patch counts (the row count seen by the head).
pub fn total_patches(specs: &[ScaleSpec]) -> usize {
    specs.iter().map(|s| s.num_patches).sum()
}

/// Cuts one channel into overlapping patches. The series is padded at the
/// end with `stride` copies of its last value; patch i covers
/// [i·K, i·K + L) of the padded series.
pub fn patchify(x: &[f64], spec: &ScaleSpec) -> Result<Tensor> {
    let n = x.len();
    let (l, k, np) = (spec.patch_len, spec.stride, spec.num_patches);
    if n < l || (n - l) / k + 2 != np {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![n],
            rhs: vec![np, l],
        });
    }
    let last = *x.last().unwrap();
    let mut padded = Vec::with_capacity(n + k);
    padded.extend_from_slice(x);
    padded.resize(n + k, last);
    let mut out = Vec::with_capacity(np * l);
    for i in 0..np {
        out.extend_from_slice(&padded[i * k..i * k + l]);
    }
    Tensor::new(vec![np, l], out)
}

/// Projects each patch row to dimension D and adds the position embedding:
/// patches [N, L] × w_p [D, L] (applied transposed) + w_pos [N, D].
pub fn embed(
    tape: &mut Tape,
    patches: TensorId,
    w_p: TensorId,
    w_pos: TensorId,
) -> Result<TensorId> {
    let projected = tape.matmul_nt(patches, w_p)?;
    tape.add(projected, w_pos)
}
