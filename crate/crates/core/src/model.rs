//! Three-branch fusion network.
//!
//! ```text
//! Y1, Y2 = adapted encoder(X1), adapted encoder(X2)
//! Z      = guide(concat(resize(Y1), resize(Y2)))
//! branch k:  u = stem_k(X_k); repeat depth: u = vss(cross_ss2d(u, Z));  Out_k = u
//! fusion:    v = Out_1 + Out_2; repeat depth: v = vss(v);                Out_f = v
//! logits_k = head_k(Out_k)   (per token: linear, gelu, linear)
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cross::{cross_ss2d_forward, AvgMode, CrossScanParams};
use crate::encoder::{build_guidance, encode_with_adapter, AdapterParams, EncoderConfig, FrozenEncoder};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::ParamTree;
use crate::rng::Rng;
use crate::ss2d::{make_permutations, vss_block, DirectionalPermutations, VssBlockParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub h: usize,
    pub w: usize,
    pub c1: usize,
    pub c2: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub depth: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub avg_mode: AvgMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    /// 32x32 patches, nine blocks per branch.
    pub fn full() -> Self {
        Self {
            h: 32,
            w: 32,
            c1: 2,
            c2: 2,
            d_model: 64,
            d_state: 16,
            depth: 9,
            num_classes: 4,
            avg_mode: AvgMode::Continuous,
            seed: 0,
            encoder: EncoderConfig { kind: "stub".into(), stages: 4, dim: 64, seed: 7 },
        }
    }

    /// 8x8 patches, two blocks per branch, width 16, state 4.
    pub fn toy() -> Self {
        Self {
            h: 8,
            w: 8,
            d_model: 16,
            d_state: 4,
            depth: 2,
            encoder: EncoderConfig { kind: "stub".into(), stages: 2, dim: 16, seed: 7 },
            ..Self::full()
        }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("h", self.h),
            ("w", self.w),
            ("c1", self.c1),
            ("c2", self.c2),
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("depth", self.depth),
            ("encoder.stages", self.encoder.stages),
            ("encoder.dim", self.encoder.dim),
        ] {
            if v == 0 {
                problems.push(format!("model.{name} must be >= 1"));
            }
        }
        if self.num_classes < 2 {
            problems.push(format!("model.num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.encoder.kind != "stub" && self.encoder.kind != "file" {
            problems.push(format!("model.encoder.kind must be stub|file, got `{}`", self.encoder.kind));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn adapter_stages(&self) -> usize {
        if self.encoder.kind == "file" {
            1
        } else {
            self.encoder.stages
        }
    }
}

#[derive(Debug, Clone)]
pub struct BranchBlock {
    pub cross: CrossScanParams,
    pub vss: VssBlockParams,
}

crate::param_tree!(BranchBlock { cross, vss });

#[derive(Debug, Clone)]
pub struct Head {
    pub hidden: Linear,
    pub out: Linear,
}

crate::param_tree!(Head { hidden, out });

impl Head {
    fn init(rng: &Rng, name: &str, d: usize, m: usize) -> Self {
        Self { hidden: Linear::init(rng, &format!("{name}.hidden"), d, d), out: Linear::init(rng, &format!("{name}.out"), d, m) }
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.out.forward(self.hidden.forward(x)?.gelu())
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub adapter1: AdapterParams,
    pub adapter2: AdapterParams,
    pub guide: Linear,
    pub stem1: Linear,
    pub stem2: Linear,
    pub branch1: Vec<BranchBlock>,
    pub branch2: Vec<BranchBlock>,
    pub fusion: Vec<VssBlockParams>,
    pub head1: Head,
    pub head2: Head,
    pub headf: Head,
}

crate::param_tree!(ModelParams {
    adapter1, adapter2, guide, stem1, stem2, branch1, branch2, fusion, head1, head2, headf
});

impl ModelParams {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = Rng::new(cfg.seed);
        let (d, n, m, e) = (cfg.d_model, cfg.d_state, cfg.num_classes, cfg.encoder.dim);
        let branch = |name: &str| -> Vec<BranchBlock> {
            (0..cfg.depth)
                .map(|i| BranchBlock {
                    cross: CrossScanParams::init(&rng, &format!("{name}.{i}.cross"), d, n),
                    vss: VssBlockParams::init(&rng, &format!("{name}.{i}.vss"), d, n),
                })
                .collect()
        };
        Ok(Self {
            adapter1: AdapterParams::init(&rng, "adapter1", cfg.adapter_stages(), e),
            adapter2: AdapterParams::init(&rng, "adapter2", cfg.adapter_stages(), e),
            guide: Linear::init(&rng, "guide", 2 * e, d),
            stem1: Linear::init(&rng, "stem1", cfg.c1, d),
            stem2: Linear::init(&rng, "stem2", cfg.c2, d),
            branch1: branch("branch1"),
            branch2: branch("branch2"),
            fusion: (0..cfg.depth).map(|i| VssBlockParams::init(&rng, &format!("fusion.{i}"), d, n)).collect(),
            head1: Head::init(&rng, "head1", d, m),
            head2: Head::init(&rng, "head2", d, m),
            headf: Head::init(&rng, "headf", d, m),
        })
    }

    /// Closed-form trainable parameter count for `cfg`.
    pub fn count(cfg: &ModelConfig) -> usize {
        let (d, n, m, e) = (cfg.d_model, cfg.d_state, cfg.num_classes, cfg.encoder.dim);
        let adapters = 2 * AdapterParams::count(cfg.adapter_stages(), e);
        let guide = Linear::count(2 * e, d);
        let stems = Linear::count(cfg.c1, d) + Linear::count(cfg.c2, d);
        let block = CrossScanParams::count(d, n) + VssBlockParams::count(d, n);
        let branches = 2 * cfg.depth * block;
        let fusion = cfg.depth * VssBlockParams::count(d, n);
        let heads = 3 * (Linear::count(d, d) + Linear::count(d, m));
        adapters + guide + stems + branches + fusion + heads
    }

    /// Shape of every named tensor `cfg` implies.
    pub fn expected_shapes(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let p = Self::init(cfg)?;
        Ok(p.named().into_iter().map(|(k, t)| (k, t.shape().to_vec())).collect())
    }
}

/// Per-sample model inputs. Images are `[h*w, c]`, tokens row-major.
#[derive(Debug, Clone)]
pub struct SampleInputs {
    pub x1: Tensor,
    pub x2: Tensor,
    /// Precomputed encoder embeddings, used when the encoder kind is `file`.
    pub emb1: Option<Tensor>,
    pub emb2: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct Outputs<'t> {
    pub out1: Var<'t>,
    pub out2: Var<'t>,
    pub outf: Var<'t>,
    pub logits1: Var<'t>,
    pub logits2: Var<'t>,
    pub logitsf: Var<'t>,
}

/// Network structure that is not trained: config, frozen encoders and the
/// scan orders of the token grid.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub perms: DirectionalPermutations,
    enc1: Option<FrozenEncoder>,
    enc2: Option<FrozenEncoder>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let perms = make_permutations(config.h, config.w)?;
        let (enc1, enc2) = if config.encoder.kind == "stub" {
            let e = &config.encoder;
            (
                Some(FrozenEncoder::stub(e.seed, config.c1, e.stages, e.dim)?),
                Some(FrozenEncoder::stub(e.seed, config.c2, e.stages, e.dim)?),
            )
        } else {
            (None, None)
        };
        Ok(Self { config, perms, enc1, enc2 })
    }

    pub fn frozen_count(&self) -> usize {
        self.enc1.as_ref().map_or(0, FrozenEncoder::frozen_count) + self.enc2.as_ref().map_or(0, FrozenEncoder::frozen_count)
    }

    /// The stub encoders, if this model uses them.
    pub fn stub_encoders(&self) -> Option<(&FrozenEncoder, &FrozenEncoder)> {
        Some((self.enc1.as_ref()?, self.enc2.as_ref()?))
    }

    fn encoders(&self, s: &SampleInputs) -> Result<(FrozenEncoder, FrozenEncoder)> {
        match (&self.enc1, &self.enc2) {
            (Some(a), Some(b)) => Ok((a.clone(), b.clone())),
            _ => match (&s.emb1, &s.emb2) {
                (Some(a), Some(b)) => Ok((FrozenEncoder::Embedding(a.clone()), FrozenEncoder::Embedding(b.clone()))),
                _ => Err(Error::Config("encoder kind `file` needs per-sample embedding files".into())),
            },
        }
    }

    fn check_inputs(&self, x1: &[usize], x2: &[usize]) -> Result<()> {
        let c = &self.config;
        if x1 != [c.tokens(), c.c1] || x2 != [c.tokens(), c.c2] {
            return Err(Error::Dimension(format!(
                "model expects inputs [{}, {}] and [{}, {}], got {x1:?} and {x2:?}",
                c.tokens(),
                c.c1,
                c.tokens(),
                c.c2
            )));
        }
        Ok(())
    }

    /// Guidance feature `Z` from both modalities through the adapted encoders.
    pub fn guidance<'t>(&self, tape: &'t Tape, p: &ModelParams, s: &SampleInputs) -> Result<Var<'t>> {
        let (e1, e2) = self.encoders(s)?;
        let y1 = encode_with_adapter(tape.constant(s.x1.clone()), &e1, &p.adapter1)?;
        let y2 = encode_with_adapter(tape.constant(s.x2.clone()), &e2, &p.adapter2)?;
        build_guidance(y1, y2, self.config.h, self.config.w, &p.guide)
    }

    /// Branches, fusion and heads given the guidance `z`.
    pub fn forward<'t>(&self, x1: Var<'t>, x2: Var<'t>, z: Var<'t>, p: &ModelParams) -> Result<Outputs<'t>> {
        self.check_inputs(&x1.shape(), &x2.shape())?;
        if z.shape() != [self.config.tokens(), self.config.d_model] {
            return Err(Error::Dimension(format!(
                "guidance must be [{}, {}], got {:?}",
                self.config.tokens(),
                self.config.d_model,
                z.shape()
            )));
        }
        let mode = self.config.avg_mode;
        let branch = |x: Var<'t>, stem: &Linear, blocks: &[BranchBlock]| -> Result<Var<'t>> {
            let mut u = stem.forward(x)?;
            for b in blocks {
                u = vss_block(cross_ss2d_forward(u, z, &b.cross, &self.perms, mode)?, &b.vss, &self.perms)?;
            }
            Ok(u)
        };
        let out1 = branch(x1, &p.stem1, &p.branch1)?;
        let out2 = branch(x2, &p.stem2, &p.branch2)?;
        let mut v = out1.try_add(out2)?;
        for b in &p.fusion {
            v = vss_block(v, b, &self.perms)?;
        }
        Ok(Outputs {
            out1,
            out2,
            outf: v,
            logits1: p.head1.forward(out1)?,
            logits2: p.head2.forward(out2)?,
            logitsf: p.headf.forward(v)?,
        })
    }

    /// End-to-end forward pass of one sample.
    pub fn forward_sample<'t>(&self, tape: &'t Tape, p: &ModelParams, s: &SampleInputs) -> Result<Outputs<'t>> {
        self.check_inputs(s.x1.shape(), s.x2.shape())?;
        let z = self.guidance(tape, p, s)?;
        self.forward(tape.constant(s.x1.clone()), tape.constant(s.x2.clone()), z, p)
    }
}

/// Row-wise softmax of `[R, m]` logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let m = *logits.shape().last().expect("rank >= 1");
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(m) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(logits.shape().to_vec(), out).expect("softmax of finite logits")
}

/// Per-token argmax; ties go to the smaller class index.
pub fn predict(logits: &Tensor) -> Result<Vec<usize>> {
    let s = logits.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::Dimension(format!("predict needs [T, m>=2] logits, got {s:?}")));
    }
    Ok(logits
        .data()
        .chunks(s[1])
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Binary confidence map: 1 where the top class probability is `>= tau`.
pub fn threshold_map(probs: &Tensor, tau: f64) -> Result<Vec<u8>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    let m = *probs.shape().last().ok_or_else(|| Error::Dimension("threshold_map on a scalar".into()))?;
    Ok(probs
        .data()
        .chunks(m)
        .map(|row| u8::from(row.iter().copied().fold(f64::NEG_INFINITY, f64::max) >= tau))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&t(&[1, 2], &[0.1, 0.9])).unwrap(), vec![1]);
        assert_eq!(predict(&t(&[1, 2], &[0.5, 0.5])).unwrap(), vec![0]);
        let l = t(&[2, 3], &[0.2, -1.0, 0.7, 3.0, 3.0, 1.0]);
        let shifted = l.map(|v| v + 41.5);
        assert_eq!(predict(&l).unwrap(), predict(&shifted).unwrap());
        assert!(predict(&t(&[2, 1], &[0.0, 1.0])).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_map(&Tensor::full([1, 4], 0.25), 0.5).unwrap(), vec![0]);
        assert_eq!(threshold_map(&t(&[1, 3], &[0., 1., 0.]), 0.99).unwrap(), vec![1]);
        assert_eq!(threshold_map(&t(&[1, 2], &[0.5, 0.5]), 0.5).unwrap(), vec![1]);
        assert!(threshold_map(&t(&[1, 2], &[0.5, 0.5]), 1.0).is_err());
        assert!(threshold_map(&t(&[1, 2], &[0.5, 0.5]), 0.0).is_err());
    }

    #[test]
    fn census_matches_closed_form() {
        for cfg in [ModelConfig::toy(), ModelConfig { depth: 1, d_model: 5, d_state: 3, num_classes: 3, ..ModelConfig::toy() }] {
            let p = ModelParams::init(&cfg).unwrap();
            assert_eq!(p.param_count(), ModelParams::count(&cfg));
        }
    }

    #[test]
    fn config_validation_lists_problems() {
        let cfg = ModelConfig { num_classes: 1, depth: 0, ..ModelConfig::toy() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("num_classes") && err.contains("depth"), "{err}");
    }
}
