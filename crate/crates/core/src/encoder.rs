//! Frozen image encoder, modality-specific adapters and the guidance feature.
//!
//! The stub encoder is a fixed-seed stack of `stages` per-token linear+gelu
//! layers (the first one embeds the input channels into width `d`), followed
//! by a head layer that is never applied. A residual bottleneck adapter
//! `y + up(gelu(down(y)))` follows every stage. Externally computed
//! embeddings can be ingested from MMTF files instead; they are treated as the
//! output of a single frozen stage.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::ParamTree;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct StubEncoder {
    pub seed: u64,
    pub in_dim: usize,
    pub dim: usize,
    pub stages: Vec<Linear>,
    /// Classification layer of the backbone; kept for the census, never run.
    pub head: Linear,
}

crate::param_tree!(StubEncoder { stages, head });

fn frozen_linear(rng: &Rng, name: &str, input: usize, output: usize) -> Linear {
    let bound = (3.0 / input as f64).sqrt();
    Linear {
        w: rng.uniform(&format!("{name}.w"), &[input, output], bound),
        b: rng.uniform(&format!("{name}.b"), &[output], 0.1),
    }
}

impl StubEncoder {
    /// Stage `s >= 1` weights depend only on `(seed, s, dim)`, so two stubs with
    /// different input widths share the backbone past the embedding.
    pub fn new(seed: u64, in_dim: usize, stages: usize, dim: usize) -> Result<Self> {
        if stages == 0 || dim == 0 || in_dim == 0 {
            return Err(Error::Config(format!(
                "stub encoder needs stages, dim, in_dim >= 1 (got {stages}, {dim}, {in_dim})"
            )));
        }
        let rng = Rng::new(seed);
        let mut layers = vec![frozen_linear(&rng, &format!("encoder.embed.c{in_dim}"), in_dim, dim)];
        for s in 1..stages {
            layers.push(frozen_linear(&rng, &format!("encoder.stage{s}"), dim, dim));
        }
        let head = frozen_linear(&rng, "encoder.head", dim, dim);
        Ok(Self { seed, in_dim, dim, stages: layers, head })
    }
}

#[derive(Debug, Clone)]
pub enum FrozenEncoder {
    Stub(StubEncoder),
    /// Per-token embeddings `[T, d]` (or `[th, tw, d]`) stored in an MMTF file.
    File(PathBuf),
    /// Embeddings already in memory, same layout as `File`.
    Embedding(Tensor),
}

impl FrozenEncoder {
    pub fn stub(seed: u64, in_dim: usize, stages: usize, dim: usize) -> Result<Self> {
        Ok(FrozenEncoder::Stub(StubEncoder::new(seed, in_dim, stages, dim)?))
    }

    pub fn file(path: impl AsRef<Path>) -> Self {
        FrozenEncoder::File(path.as_ref().to_path_buf())
    }

    /// Number of adapter insertion points.
    pub fn stage_count(&self) -> usize {
        match self {
            FrozenEncoder::Stub(s) => s.stages.len(),
            FrozenEncoder::File(_) | FrozenEncoder::Embedding(_) => 1,
        }
    }

    /// Frozen parameter count (zero for file-backed embeddings).
    pub fn frozen_count(&self) -> usize {
        match self {
            FrozenEncoder::Stub(s) => s.param_count(),
            FrozenEncoder::File(_) | FrozenEncoder::Embedding(_) => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adapter {
    /// `[d, ceil(d/4)]`
    pub down: Tensor,
    /// `[ceil(d/4), d]`
    pub up: Tensor,
}

crate::param_tree!(Adapter { down, up });

#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub stages: Vec<Adapter>,
}

crate::param_tree!(AdapterParams { stages });

pub fn bottleneck(dim: usize) -> usize {
    dim.div_ceil(4).max(1)
}

impl AdapterParams {
    /// Down-projections small-uniform, up-projections zero, so the adapted
    /// encoder starts out equal to the frozen one.
    pub fn init(rng: &Rng, prefix: &str, stages: usize, dim: usize) -> Self {
        let r = bottleneck(dim);
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            stages: (0..stages)
                .map(|s| Adapter {
                    down: rng.uniform(&format!("{prefix}.{s}.down"), &[dim, r], bound).into_param(),
                    up: Tensor::zeros([r, dim]).into_param(),
                })
                .collect(),
        }
    }

    pub fn count(stages: usize, dim: usize) -> usize {
        stages * 2 * dim * bottleneck(dim)
    }
}

fn apply_adapter<'t>(y: Var<'t>, ad: &Adapter) -> Result<Var<'t>> {
    let tape = y.tape();
    let delta = y.matmul(tape.leaf(&ad.down))?.gelu().matmul(tape.leaf(&ad.up))?;
    y.try_add(delta)
}

fn check_adapters(ad: &AdapterParams, stages: usize, dim: usize) -> Result<()> {
    if ad.stages.len() != stages {
        return Err(Error::Config(format!(
            "encoder has {stages} stages but {} adapters were given",
            ad.stages.len()
        )));
    }
    let r = bottleneck(dim);
    for (s, a) in ad.stages.iter().enumerate() {
        if a.down.shape() != [dim, r] || a.up.shape() != [r, dim] {
            return Err(Error::Config(format!(
                "adapter {s} is {:?}/{:?}, stage width {dim} needs [{dim}, {r}]/[{r}, {dim}]",
                a.down.shape(),
                a.up.shape()
            )));
        }
    }
    Ok(())
}

/// Runs the frozen encoder on `x [T, c]` with an adapter after every stage.
/// For file-backed encoders `x` is ignored and the stored embedding is used.
pub fn encode_with_adapter<'t>(x: Var<'t>, enc: &FrozenEncoder, ad: &AdapterParams) -> Result<Var<'t>> {
    let tape = x.tape();
    match enc {
        FrozenEncoder::Stub(stub) => {
            let s = x.shape();
            if s.len() != 2 || s[1] != stub.in_dim {
                return Err(Error::Config(format!(
                    "encoder expects [T, {}] input, got {s:?}",
                    stub.in_dim
                )));
            }
            check_adapters(ad, stub.stages.len(), stub.dim)?;
            let mut y = x;
            for (layer, adapter) in stub.stages.iter().zip(&ad.stages) {
                y = apply_adapter(layer.forward(y)?.gelu(), adapter)?;
            }
            Ok(y)
        }
        FrozenEncoder::File(path) => {
            let emb = crate::mmtf::read_tensor(path)?;
            adapt_embedding(tape.constant(flatten_embedding(emb, &path.display().to_string())?), ad)
        }
        FrozenEncoder::Embedding(emb) => adapt_embedding(tape.constant(flatten_embedding(emb.clone(), "embedding")?), ad),
    }
}

/// Brings `[th, tw, d]` embeddings to `[th*tw, d]`.
pub fn flatten_embedding(emb: Tensor, what: &str) -> Result<Tensor> {
    match emb.rank() {
        2 => Ok(emb),
        3 => emb.reshape([emb.shape()[0] * emb.shape()[1], emb.shape()[2]]),
        _ => Err(Error::Config(format!(
            "{what}: embeddings must be [T, d] or [th, tw, d], got {:?}",
            emb.shape()
        ))),
    }
}

fn adapt_embedding<'t>(emb: Var<'t>, ad: &AdapterParams) -> Result<Var<'t>> {
    check_adapters(ad, 1, emb.shape()[1])?;
    apply_adapter(emb, &ad.stages[0])
}

/// Token grid for `tokens` encoder outputs resized onto an `h x w` grid.
pub fn token_grid(tokens: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    if tokens == h * w {
        return Ok((h, w));
    }
    let root = (tokens as f64).sqrt().round() as usize;
    if root * root == tokens {
        return Ok((root, root));
    }
    let pairs: Vec<(usize, usize)> = (1..=tokens).filter(|a| tokens.is_multiple_of(*a)).map(|a| (a, tokens / a)).collect();
    if let Some(&p) = pairs.iter().find(|(a, b)| a * w == b * h) {
        return Ok(p);
    }
    let listed: Vec<String> = pairs.iter().map(|(a, b)| format!("{a}x{b}")).collect();
    Err(Error::Config(format!(
        "cannot map {tokens} tokens onto a {h}x{w} grid: need a square count or one of the \
         {h}:{w} grids; factorizations of {tokens} are {}",
        listed.join(", ")
    )))
}

/// Nearest-neighbour source token for each destination token, row-major.
pub fn nearest_index(src: (usize, usize), h: usize, w: usize) -> Vec<usize> {
    let (th, tw) = src;
    (0..h)
        .flat_map(|i| (0..w).map(move |j| (i * th / h) * tw + j * tw / w))
        .collect()
}

/// `Z = proj(concat(resize(y1), resize(y2)))`, shape `[h*w, D]`.
pub fn build_guidance<'t>(y1: Var<'t>, y2: Var<'t>, h: usize, w: usize, proj: &Linear) -> Result<Var<'t>> {
    let (s1, s2) = (y1.shape(), y2.shape());
    if s1 != s2 || s1.len() != 2 {
        return Err(Error::Dimension(format!("guidance inputs differ: {s1:?} vs {s2:?}")));
    }
    let grid = token_grid(s1[0], h, w)?;
    let (r1, r2) = if s1[0] == h * w {
        (y1, y2)
    } else {
        let idx: Arc<Vec<Option<usize>>> = Arc::new(nearest_index(grid, h, w).into_iter().map(Some).collect());
        (y1.gather_rows(Arc::clone(&idx))?, y2.gather_rows(idx)?)
    };
    if proj.w.shape()[0] != 2 * s1[1] {
        return Err(Error::Config(format!(
            "guidance projection takes width {}, features concatenate to {}",
            proj.w.shape()[0],
            2 * s1[1]
        )));
    }
    proj.forward(Var::concat_last(&[r1, r2])?)
}

/// Encoder section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// `stub` or `file`.
    pub kind: String,
    pub stages: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { kind: "stub".into(), stages: 2, dim: 16, seed: 7 }
    }
}
