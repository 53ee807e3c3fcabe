//! Model assembly: configuration, the flat parameter store and its layout,
//! the per-channel forward pass through the progressive mixing chain, the
//! prediction head, per-sample loss gradients, and checkpoint files.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::dataio::{denormalize, instance_normalize, normalize_with, NormStats};
use crate::encoder::{self, build_scale_specs, total_patches, ScaleSpec};
use crate::mixing::{BlockIds, LnIds, MlpIds, SamIds};
use crate::numerics::rng::{self, TAG_INIT};
use crate::numerics::{Tape, Tensor, TensorId};
use crate::ram::{sample_mask, InteractionMask, RamConfig, RamMode};
use crate::variants::{self, Variant};
use crate::{Error, Result};

/// Everything needed to rebuild a model's shape. Immutable once validated.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// History length.
    pub n: usize,
    /// Forecast horizon.
    pub t: usize,
    /// Channels.
    pub c: usize,
    /// Embedding width.
    pub d: usize,
    /// Patch count at the finest scale.
    pub n1: usize,
    /// Width of the integration layer.
    pub integrate: usize,
    /// Scale factors beyond the implicit leading 1.
    pub extra_alphas: Vec<usize>,
    /// Mask disconnect probability.
    pub p: f64,
    /// Registry key of the variant this model was built as.
    pub variant: String,
}

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        t: usize,
        c: usize,
        d: usize,
        n1: usize,
        integrate: usize,
        extra_alphas: Vec<usize>,
        p: f64,
        variant: &str,
    ) -> Result<Self> {
        for (name, v) in [("horizon t", t), ("channels c", c), ("width d", d), ("integration width", integrate)]
        {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        build_scale_specs(n, n1, &extra_alphas)?;
        RamConfig::new(p)?;
        variants::lookup(variant)?;
        Ok(Self {
            n,
            t,
            c,
            d,
            n1,
            integrate,
            extra_alphas,
            p,
            variant: variant.to_string(),
        })
    }

    /// Scale geometry; infallible after construction.
    pub fn specs(&self) -> Vec<ScaleSpec> {
        build_scale_specs(self.n, self.n1, &self.extra_alphas).unwrap()
    }

    pub fn variant(&self) -> &'static dyn Variant {
        variants::lookup(&self.variant).unwrap()
    }

    pub fn total_patches(&self) -> usize {
        total_patches(&self.specs())
    }

    /// Scale factors including the implicit leading 1.
    pub fn alphas(&self) -> Vec<usize> {
        let mut a = Vec::with_capacity(self.extra_alphas.len() + 1);
        a.push(1);
        a.extend_from_slice(&self.extra_alphas);
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    /// U(−b, b) with b = √(1/fan_in), fan_in = last shape dim.
    FanIn,
    /// U(−0.02, 0.02), the position-embedding scale.
    Pos,
    One,
    Zero,
}

/// One named parameter tensor inside the flat store.
#[derive(Debug, Clone)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    init: InitKind,
}

impl ParamDef {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameter tensors in declaration order, which is also checkpoint order:
/// per-scale projection and position pairs, per-block norm and MLP weights
/// (plus attention projections when the variant carries them), the
/// integration affine map, and the predictor affine map.
pub fn build_layout(cfg: &ModelConfig) -> Vec<ParamDef> {
    let specs = cfg.specs();
    let variant = cfg.variant();
    let d = cfg.d;
    let mut defs: Vec<ParamDef> = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>, init: InitKind, defs: &mut Vec<ParamDef>| {
        let len: usize = shape.iter().product();
        defs.push(ParamDef { name, shape, offset, init });
        offset += len;
    };
    for spec in &specs {
        let s = spec.s;
        push(format!("scale{s}.w_p"), vec![d, spec.patch_len], InitKind::FanIn, &mut defs);
        push(format!("scale{s}.w_pos"), vec![spec.num_patches, d], InitKind::Pos, &mut defs);
    }
    for (b, &size) in variant.block_sizes(&specs).iter().enumerate() {
        let b = b + 1;
        push(format!("block{b}.inter_norm.gamma"), vec![d], InitKind::One, &mut defs);
        push(format!("block{b}.inter_norm.beta"), vec![d], InitKind::Zero, &mut defs);
        push(format!("block{b}.inter.w1"), vec![size, size], InitKind::FanIn, &mut defs);
        push(format!("block{b}.inter.b1"), vec![size], InitKind::Zero, &mut defs);
        push(format!("block{b}.inter.w2"), vec![size, size], InitKind::FanIn, &mut defs);
        push(format!("block{b}.inter.b2"), vec![size], InitKind::Zero, &mut defs);
        push(format!("block{b}.intra_norm.gamma"), vec![d], InitKind::One, &mut defs);
        push(format!("block{b}.intra_norm.beta"), vec![d], InitKind::Zero, &mut defs);
        push(format!("block{b}.intra.w1"), vec![d, d], InitKind::FanIn, &mut defs);
        push(format!("block{b}.intra.b1"), vec![d], InitKind::Zero, &mut defs);
        push(format!("block{b}.intra.w2"), vec![d, d], InitKind::FanIn, &mut defs);
        push(format!("block{b}.intra.b2"), vec![d], InitKind::Zero, &mut defs);
        if variant.needs_sam_weights() {
            push(format!("block{b}.wq"), vec![d, d], InitKind::FanIn, &mut defs);
            push(format!("block{b}.wk"), vec![d, d], InitKind::FanIn, &mut defs);
            push(format!("block{b}.wv"), vec![d, d], InitKind::FanIn, &mut defs);
        }
    }
    push("integrate.w".into(), vec![cfg.integrate, d], InitKind::FanIn, &mut defs);
    push("integrate.b".into(), vec![cfg.integrate], InitKind::Zero, &mut defs);
    let flat = total_patches(&specs) * cfg.integrate;
    push("predictor.w".into(), vec![cfg.t, flat], InitKind::FanIn, &mut defs);
    push("predictor.b".into(), vec![cfg.t], InitKind::Zero, &mut defs);
    defs
}

/// A model: its configuration plus one flat parameter vector. The seed
/// that initialized (and trained) it rides along for reporting.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    layout: Vec<ParamDef>,
    data: Vec<f64>,
    seed: u64,
}

/// Tape handles for every parameter of one forward pass, grouped the way
/// the forward code consumes them.
pub struct ModelIds {
    /// Aligned with the layout.
    pub all: Vec<TensorId>,
    pub scales: Vec<ScaleIds>,
    pub blocks: Vec<BlockIds>,
    pub integrate_w: TensorId,
    pub integrate_b: TensorId,
    pub predictor_w: TensorId,
    pub predictor_b: TensorId,
}

pub struct ScaleIds {
    pub w_p: TensorId,
    pub w_pos: TensorId,
}

impl ModelParams {
    /// Fresh parameters. Weight matrices draw from a single seeded stream
    /// in declaration order; constant-initialized tensors consume none of it.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let layout = build_layout(&config);
        let total: usize = layout.iter().map(|d| d.len()).sum();
        let mut data = vec![0.0; total];
        let mut r = rng::stream(seed, &[TAG_INIT]);
        for def in &layout {
            let slot = &mut data[def.offset..def.offset + def.len()];
            match def.init {
                InitKind::FanIn => {
                    let fan_in = *def.shape.last().unwrap() as f64;
                    let b = (1.0 / fan_in).sqrt();
                    let t = Tensor::uniform(&def.shape, -b, b, &mut r);
                    slot.copy_from_slice(t.data());
                }
                InitKind::Pos => {
                    let t = Tensor::uniform(&def.shape, -0.02, 0.02, &mut r);
                    slot.copy_from_slice(t.data());
                }
                InitKind::One => slot.fill(1.0),
                InitKind::Zero => slot.fill(0.0),
            }
        }
        Self { config, layout, data, seed }
    }

    fn from_data(config: ModelConfig, data: Vec<f64>, seed: u64) -> Result<Self> {
        let layout = build_layout(&config);
        let total: usize = layout.iter().map(|d| d.len()).sum();
        if data.len() != total {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match layout size {total}",
                data.len()
            )));
        }
        if let Some(def) = layout.iter().find(|def| {
            data[def.offset..def.offset + def.len()].iter().any(|v| !v.is_finite())
        }) {
            return Err(Error::Checkpoint(format!(
                "non-finite values in parameter {}",
                def.name
            )));
        }
        Ok(Self { config, layout, data, seed })
    }

    pub fn layout(&self) -> &[ParamDef] {
        &self.layout
    }

    /// Seed that initialized this model.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    /// Name of the parameter containing flat index `i`.
    pub fn name_at(&self, i: usize) -> &str {
        let pos = self
            .layout
            .partition_point(|def| def.offset + def.len() <= i)
            .min(self.layout.len() - 1);
        &self.layout[pos].name
    }

    /// Pushes every parameter onto the tape as a gradient-bearing leaf and
    /// groups the handles. Push order equals layout order.
    pub fn push_params(&self, tape: &mut Tape) -> ModelIds {
        let all: Vec<TensorId> = self
            .layout
            .iter()
            .map(|def| {
                let slice = self.data[def.offset..def.offset + def.len()].to_vec();
                tape.leaf(Tensor::new(def.shape.clone(), slice).unwrap())
            })
            .collect();
        let specs = self.config.specs();
        let variant = self.config.variant();
        let mut cursor = all.iter().copied();
        let mut take = || cursor.next().expect("layout and id walk diverged");
        let scales = specs
            .iter()
            .map(|_| ScaleIds { w_p: take(), w_pos: take() })
            .collect();
        let blocks = variant
            .block_sizes(&specs)
            .iter()
            .map(|_| BlockIds {
                ln_inter: LnIds { gamma: take(), beta: take() },
                inter: MlpIds { w1: take(), b1: take(), w2: take(), b2: take() },
                ln_intra: LnIds { gamma: take(), beta: take() },
                intra: MlpIds { w1: take(), b1: take(), w2: take(), b2: take() },
                sam: variant
                    .needs_sam_weights()
                    .then(|| SamIds { wq: take(), wk: take(), wv: take() }),
            })
            .collect();
        let integrate_w = take();
        let integrate_b = take();
        let predictor_w = take();
        let predictor_b = take();
        assert!(cursor.next().is_none(), "layout and id walk diverged");
        ModelIds {
            all,
            scales,
            blocks,
            integrate_w,
            integrate_b,
            predictor_w,
            predictor_b,
        }
    }
}

/// Training draws these per sample, in the variant's block order, shared by
/// all channels of the sample.
pub fn draw_sample_masks(
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<InteractionMask>> {
    let specs = config.specs();
    config
        .variant()
        .mask_sizes(&specs)
        .iter()
        .map(|&n| sample_mask(n, config.p, rng))
        .collect()
}

/// Whether a forward pass runs masked (training) or closed-form (inference).
pub enum ForwardMode<'m> {
    Train { masks: &'m [InteractionMask] },
    Infer,
}

/// Stacked per-scale outputs → integration affine map → row-major flatten →
/// predictor affine map. Returns a [1, t] row.
fn head_forward(tape: &mut Tape, outs: &[TensorId], ids: &ModelIds, cfg: &ModelConfig) -> Result<TensorId> {
    let stacked = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_rows(outs)?
    };
    let integrated = tape.linear(stacked, ids.integrate_w, Some(ids.integrate_b))?;
    let rows = tape.value(integrated).rows();
    let flat = tape.reshape(integrated, &[1, rows * cfg.integrate])?;
    tape.linear(flat, ids.predictor_w, Some(ids.predictor_b))
}

/// One normalized channel through patching, embedding, the variant trunk,
/// and the head. Returns a [1, t] prediction in normalized space.
pub fn channel_forward(
    tape: &mut Tape,
    ids: &ModelIds,
    cfg: &ModelConfig,
    specs: &[ScaleSpec],
    channel: &[f64],
    mode: &mut ForwardMode,
) -> Result<TensorId> {
    let mut embeds = Vec::with_capacity(specs.len());
    for (s, spec) in specs.iter().enumerate() {
        let patches = encoder::patchify(channel, spec)?;
        let p_id = tape.constant(patches);
        embeds.push(encoder::embed(tape, p_id, ids.scales[s].w_p, ids.scales[s].w_pos)?);
    }
    // each channel restarts the mask sequence: masks are shared across channels
    let mut ram_mode = match mode {
        ForwardMode::Train { masks } => RamMode::Masked { masks, next: 0 },
        ForwardMode::Infer => RamMode::Infer,
    };
    let outs = cfg
        .variant()
        .forward_trunk(tape, &embeds, &ids.blocks, specs, cfg.p, &mut ram_mode)?;
    head_forward(tape, &outs, ids, cfg)
}

/// A full-sample prediction with its normalization context.
#[derive(Debug, Clone)]
pub struct Forecast {
    /// t×c row-major, in normalized space.
    pub normalized: Vec<f64>,
    /// t×c row-major, mapped back to the input scale.
    pub denormalized: Vec<f64>,
    pub stats: NormStats,
}

fn channel_column(x: &[f64], rows: usize, c: usize, ch: usize) -> Vec<f64> {
    (0..rows).map(|i| x[i * c + ch]).collect()
}

/// Whole-model forward: instance-normalize the history, run every channel
/// through the shared weights, denormalize with the per-channel stats.
pub fn semixer_forward(
    params: &ModelParams,
    history: &[f64],
    mode: &mut ForwardMode,
) -> Result<Forecast> {
    let cfg = &params.config;
    if history.len() != cfg.n * cfg.c {
        return Err(Error::Shape {
            op: "semixer_forward history",
            lhs: vec![history.len()],
            rhs: vec![cfg.n, cfg.c],
        });
    }
    let specs = cfg.specs();
    let (normed, stats) = instance_normalize(history, cfg.n, cfg.c);
    let mut tape = Tape::new();
    let ids = params.push_params(&mut tape);
    let mut normalized = vec![0.0; cfg.t * cfg.c];
    for ch in 0..cfg.c {
        let col = channel_column(&normed, cfg.n, cfg.c, ch);
        let pred = channel_forward(&mut tape, &ids, cfg, &specs, &col, mode)?;
        let row = tape.value(pred).data();
        for (j, &v) in row.iter().enumerate() {
            normalized[j * cfg.c + ch] = v;
        }
    }
    let denormalized = denormalize(&normalized, &stats);
    Ok(Forecast { normalized, denormalized, stats })
}

/// Inference-mode convenience.
pub fn predict(params: &ModelParams, history: &[f64]) -> Result<Forecast> {
    semixer_forward(params, history, &mut ForwardMode::Infer)
}

/// The single-wide-block ablation forward. The parameters must have been
/// built for the variant that concatenates all scales up front.
pub fn direct_concat_forward(
    params: &ModelParams,
    history: &[f64],
    mode: &mut ForwardMode,
) -> Result<Forecast> {
    if params.config.variant != "no_mpmc" {
        return Err(Error::Config(format!(
            "direct concat forward requires a no_mpmc model, got {:?}",
            params.config.variant
        )));
    }
    semixer_forward(params, history, mode)
}

/// Mean over t·c of squared error for one raw sample, plus the gradient of
/// that loss for every parameter, aligned with the flat store. Loss and
/// gradient live in normalized space.
pub fn sample_loss_and_grad(
    params: &ModelParams,
    history: &[f64],
    target: &[f64],
    masks: &[InteractionMask],
) -> Result<(f64, Vec<f64>)> {
    let cfg = &params.config;
    if target.len() != cfg.t * cfg.c {
        return Err(Error::Shape {
            op: "sample target",
            lhs: vec![target.len()],
            rhs: vec![cfg.t, cfg.c],
        });
    }
    let specs = cfg.specs();
    let (normed, stats) = instance_normalize(history, cfg.n, cfg.c);
    let norm_target = normalize_with(target, &stats);
    let mut tape = Tape::new();
    let ids = params.push_params(&mut tape);
    let mut total: Option<TensorId> = None;
    for ch in 0..cfg.c {
        let col = channel_column(&normed, cfg.n, cfg.c, ch);
        let mut mode = ForwardMode::Train { masks };
        let pred = channel_forward(&mut tape, &ids, cfg, &specs, &col, &mut mode)?;
        let tcol = channel_column(&norm_target, cfg.t, cfg.c, ch);
        let t_id = tape.constant(Tensor::new(vec![1, cfg.t], tcol)?);
        let sse = tape.sse(pred, t_id)?;
        total = Some(match total {
            None => sse,
            Some(acc) => tape.add(acc, sse)?,
        });
    }
    let loss = tape.scale(total.unwrap(), 1.0 / (cfg.t * cfg.c) as f64)?;
    tape.backward(loss)?;
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("sample loss".into()));
    }
    let mut grad = vec![0.0; params.param_count()];
    for (def, &id) in params.layout.iter().zip(&ids.all) {
        if let Some(g) = tape.grad(id) {
            grad[def.offset..def.offset + def.len()].copy_from_slice(g);
        }
    }
    Ok((loss_value, grad))
}

const MAGIC: &[u8; 5] = b"SEMX1";

/// Writes magic, variant tag, the config block, and the raw parameters.
/// Little-endian throughout; exact layout documented in the README.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let cfg = &params.config;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&[cfg.variant().tag()])?;
    let alphas = cfg.alphas();
    for v in [cfg.n, cfg.t, cfg.c, cfg.d, cfg.n1, cfg.integrate, alphas.len()] {
        f.write_all(&(v as u32).to_le_bytes())?;
    }
    for a in alphas {
        f.write_all(&(a as u32).to_le_bytes())?;
    }
    f.write_all(&cfg.p.to_le_bytes())?;
    f.write_all(&params.seed.to_le_bytes())?;
    f.write_all(&(params.param_count() as u64).to_le_bytes())?;
    for v in &params.data {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

fn read_exact_or(f: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    f.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated checkpoint while reading {what}")))
}

fn read_u32(f: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(f, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 5];
    read_exact_or(&mut f, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad checkpoint magic {magic:?} in {}",
            path.display()
        )));
    }
    let mut tag = [0u8; 1];
    read_exact_or(&mut f, &mut tag, "variant tag")?;
    let variant = variants::by_tag(tag[0])?;
    let n = read_u32(&mut f, "n")? as usize;
    let t = read_u32(&mut f, "t")? as usize;
    let c = read_u32(&mut f, "c")? as usize;
    let d = read_u32(&mut f, "d")? as usize;
    let n1 = read_u32(&mut f, "n1")? as usize;
    let integrate = read_u32(&mut f, "integrate")? as usize;
    let s = read_u32(&mut f, "scale count")? as usize;
    if s == 0 || s > 64 {
        return Err(Error::Checkpoint(format!("implausible scale count {s}")));
    }
    let mut alphas = Vec::with_capacity(s);
    for i in 0..s {
        alphas.push(read_u32(&mut f, &format!("alpha {i}"))? as usize);
    }
    if alphas[0] != 1 {
        return Err(Error::Checkpoint(format!(
            "first scale factor must be 1, found {}",
            alphas[0]
        )));
    }
    let mut pb = [0u8; 8];
    read_exact_or(&mut f, &mut pb, "p")?;
    let p = f64::from_le_bytes(pb);
    let mut sb = [0u8; 8];
    read_exact_or(&mut f, &mut sb, "seed")?;
    let seed = u64::from_le_bytes(sb);
    let mut cb = [0u8; 8];
    read_exact_or(&mut f, &mut cb, "parameter count")?;
    let count = u64::from_le_bytes(cb) as usize;
    let config = ModelConfig::new(n, t, c, d, n1, integrate, alphas[1..].to_vec(), p, variant.name())
        .map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;
    let mut data = vec![0.0; count];
    let mut buf = vec![0u8; count.min(1 << 16) * 8];
    let mut read_total = 0;
    while read_total < count {
        let take = (count - read_total).min(1 << 16);
        let bytes = &mut buf[..take * 8];
        read_exact_or(&mut f, bytes, "parameters")?;
        for (i, chunk) in bytes.chunks_exact(8).enumerate() {
            data[read_total + i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        read_total += take;
    }
    let mut extra = [0u8; 1];
    if f.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    ModelParams::from_data(config, data, seed)
}
