//! Tape gradients audited against central finite differences.
//!
//! Each case builds a scalar from a parameter tree. Parameters are moved off
//! their initial values by a small random jitter so that no group sits at a
//! degenerate point (zero-initialized adapter up-projections, for example).
//! For every tensor a random subset of coordinates is differenced; the
//! report keeps the worst relative error per parameter group.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::index::sample;

use crate::autodiff::{Tape, Var, VjpRule};
use crate::cross::{cross_ss2d_forward, AvgMode, CrossScanParams};
use crate::error::{Error, Result};
use crate::fd::{rel_error, DEFAULT_STEP};
use crate::model::{Model, ModelConfig, ModelParams, SampleInputs};
use crate::objective::{consistency_loss, supervised_loss, total_loss, LossWeights};
use crate::params::ParamTree;
use crate::rng::Rng;
use crate::scan::{selective_scan, ScanParams};
use crate::ss2d::{make_permutations, vss_block, VssBlockParams};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Tensor,
    Scan,
    Ss2d,
    Cross,
    Model,
    All,
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tensor" => Scope::Tensor,
            "scan" => Scope::Scan,
            "ss2d" => Scope::Ss2d,
            "cross" => Scope::Cross,
            "model" => Scope::Model,
            "all" => Scope::All,
            other => return Err(Error::Config(format!("scope must be tensor|scan|ss2d|cross|model|all, got `{other}`"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seeds: u64,
    pub coords_per_tensor: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Adds a custom op whose backward rule is deliberately wrong.
    pub inject_faulty_vjp: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { seeds: 20, coords_per_tensor: 3, step: DEFAULT_STEP, tolerance: TOLERANCE, inject_faulty_vjp: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub scope: &'static str,
    pub group: String,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    pub max_abs_grad: f64,
    pub coords: usize,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&GroupResult> {
        self.groups.iter().filter(|g| !(g.max_rel_err <= self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

#[derive(Default)]
struct Collector {
    groups: BTreeMap<(&'static str, String), GroupResult>,
}

impl Collector {
    fn record(&mut self, scope: &'static str, group: String, seed: u64, err: f64, grad: f64) {
        let e = self.groups.entry((scope, group.clone())).or_insert(GroupResult {
            scope,
            group,
            max_rel_err: 0.0,
            worst_seed: seed,
            max_abs_grad: 0.0,
            coords: 0,
        });
        e.coords += 1;
        e.max_abs_grad = e.max_abs_grad.max(grad.abs());
        if err > e.max_rel_err || err.is_nan() {
            e.max_rel_err = err;
            e.worst_seed = seed;
        }
    }
}

/// Drops index segments and keeps the first `depth` named ones.
fn group_name(name: &str, depth: usize) -> String {
    name.split('.').filter(|s| s.parse::<usize>().is_err()).take(depth).collect::<Vec<_>>().join(".")
}

fn jitter<P: ParamTree>(p: &mut P, rng: &Rng, scale: f64) {
    p.visit_mut("", &mut |name, t| {
        let noise = rng.uniform(&format!("jitter.{name}"), t.shape(), scale);
        let v: Vec<f64> = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        t.set_data(v);
    });
}

fn set_coord<P: ParamTree>(p: &mut P, target: &str, k: usize, value: f64) {
    p.visit_mut("", &mut |name, t| {
        if name == target {
            let mut v = t.to_vec();
            v[k] = value;
            t.set_data(v);
        }
    });
}

/// Compares tape and finite-difference gradients of `f` at `p`.
#[allow(clippy::too_many_arguments)]
fn audit<P, F>(
    out: &mut Collector,
    scope: &'static str,
    seed: u64,
    p: &P,
    f: F,
    group: impl Fn(&str) -> String,
    rng: &Rng,
    opts: &GradcheckOptions,
) -> Result<()>
where
    P: ParamTree + Clone,
    F: for<'t> Fn(&'t Tape, &P) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let root = f(&tape, p)?;
    let grads = tape.backward(root)?;
    for (name, t) in p.named() {
        let g = grads.wrt(t);
        let n = t.numel();
        let mut s = rng.stream(&format!("coords.{name}"));
        let coords: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut s, n, opts.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for k in coords {
            let base = t.data()[k];
            let eval = |v: f64| -> Result<f64> {
                let mut q = p.clone();
                set_coord(&mut q, &name, k, v);
                let tape = Tape::new();
                Ok(f(&tape, &q)?.value().item())
            };
            let fd = (eval(base + opts.step)? - eval(base - opts.step)?) / (2.0 * opts.step);
            let a = g.data()[k];
            out.record(scope, group(&name), seed, rel_error(a, fd), a);
        }
    }
    Ok(())
}

/// `sum(y * r)` with a fixed random `r` scaled to keep the value near one.
fn project<'t>(y: Var<'t>, rng: &Rng) -> Result<Var<'t>> {
    let shape = y.shape();
    let n = shape.iter().product::<usize>().max(1) as f64;
    let r = rng.normal("projection", &shape, 1.0 / n.sqrt());
    Ok(y.try_mul(y.tape().constant(r))?.sum())
}

struct FaultySquare;

impl VjpRule for FaultySquare {
    fn name(&self) -> &str {
        "faulty_square"
    }

    fn vjp(&self, grad_out: &Tensor, inputs: &[Tensor], _output: &Tensor) -> Vec<Tensor> {
        vec![grad_out.zip_broadcast(&inputs[0], |g, x| 3.0 * x * g).expect("same shape")]
    }
}

fn tensor_cases(out: &mut Collector, seed: u64, opts: &GradcheckOptions) -> Result<()> {
    let rng = Rng::new(seed).child("tensor");
    let mk = |name: &str, shape: &[usize]| rng.uniform(name, shape, 1.0).into_param();

    macro_rules! case {
        ($group:expr, $inputs:expr, |$t:ident, $v:ident| $body:expr) => {{
            let p: Vec<Tensor> = $inputs;
            let r = rng.child($group);
            audit(
                out,
                "tensor",
                seed,
                &p,
                |$t, q: &Vec<Tensor>| {
                    let $v: Vec<Var<'_>> = q.iter().map(|x| $t.leaf(x)).collect();
                    project($body?, &r)
                },
                |_| $group.to_string(),
                &r,
                opts,
            )?;
        }};
    }

    case!("matmul", vec![mk("a", &[2, 3, 4]), mk("b", &[4, 2])], |t, v| v[0].matmul(v[1]));
    case!("add_broadcast", vec![mk("a", &[3, 4]), mk("b", &[4])], |t, v| v[0].try_add(v[1]));
    case!("sub_mul", vec![mk("a", &[3, 1]), mk("b", &[3, 4])], |t, v| v[0].try_sub(v[1])?.try_mul(v[1]));
    case!("exp", vec![mk("a", &[5])], |t, v| Ok::<_, Error>(v[0].exp().scale(0.5)));
    case!("softplus", vec![mk("a", &[5]).map(|x| 4.0 * x).into_param()], |t, v| Ok::<_, Error>(v[0].softplus()));
    case!("gelu", vec![mk("a", &[6]).map(|x| 3.0 * x).into_param()], |t, v| Ok::<_, Error>(v[0].gelu()));
    case!("log_softmax", vec![mk("a", &[3, 4])], |t, v| v[0].log_softmax());
    case!("cosine", vec![mk("a", &[3, 4]), mk("b", &[3, 4])], |t, v| v[0].cosine_last(v[1], 1e-12));
    case!("layer_norm", vec![mk("x", &[3, 5]), mk("g", &[5]), mk("b", &[5])], |t, v| v[0].layer_norm(v[1], v[2], 1e-5));
    case!("gather_rows", vec![mk("a", &[4, 3])], |t, v| v[0].gather_rows(std::sync::Arc::new(vec![Some(2), None, Some(0), Some(2)])));
    case!("concat_slice", vec![mk("a", &[2, 3]), mk("b", &[2, 2])], |t, v| Var::concat_last(&[v[0], v[1]])?.slice_last(1, 4));
    case!("select_last", vec![mk("a", &[3, 4])], |t, v| v[0].select_last(std::sync::Arc::new(vec![3, 0, 1])));
    case!("reshape_mean", vec![mk("a", &[2, 6])], |t, v| Ok::<_, Error>(v[0].reshape([3, 4])?.mean()));
    if opts.inject_faulty_vjp {
        case!("faulty_square", vec![mk("a", &[4])], |t, v| {
            let val = v[0].value().map(|x| x * x);
            Ok::<_, Error>(t.custom(&[v[0]], val, Box::new(FaultySquare)))
        });
    }
    Ok(())
}

#[derive(Clone)]
struct WithInputs<P: Clone> {
    params: P,
    inputs: Vec<Tensor>,
}

impl<P: ParamTree + Clone> ParamTree for WithInputs<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.inputs.visit(&crate::params::join(prefix, "input"), f);
        self.params.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.inputs.visit_mut(&crate::params::join(prefix, "input"), f);
        self.params.visit_mut(prefix, f);
    }
}

const D: usize = 3;
const N: usize = 2;

fn scan_cases(out: &mut Collector, seed: u64, opts: &GradcheckOptions) -> Result<()> {
    let rng = Rng::new(seed).child("scan");
    let mut params = ScanParams::init(&rng, "scan", D, N);
    jitter(&mut params, &rng, 0.3);
    let p = WithInputs { params, inputs: vec![rng.uniform("x", &[6, D], 1.0).into_param()] };
    audit(
        out,
        "scan",
        seed,
        &p,
        |t, q| project(selective_scan(t.leaf(&q.inputs[0]), &q.params)?, &rng),
        |n| group_name(n, 2),
        &rng,
        opts,
    )
}

fn ss2d_cases(out: &mut Collector, seed: u64, opts: &GradcheckOptions) -> Result<()> {
    let rng = Rng::new(seed).child("ss2d");
    let perms = make_permutations(3, 2)?;
    let mut params = VssBlockParams::init(&rng, "vss", D, N);
    jitter(&mut params, &rng, 0.3);
    let p = WithInputs { params, inputs: vec![rng.uniform("x", &[6, D], 1.0).into_param()] };
    audit(
        out,
        "ss2d",
        seed,
        &p,
        |t, q| project(vss_block(t.leaf(&q.inputs[0]), &q.params, &perms)?, &rng),
        |n| group_name(n, 2),
        &rng,
        opts,
    )
}

fn cross_cases(out: &mut Collector, seed: u64, opts: &GradcheckOptions) -> Result<()> {
    let perms = make_permutations(2, 3)?;
    for (mode, label) in [(AvgMode::Continuous, "continuous"), (AvgMode::Discretized, "discretized")] {
        let rng = Rng::new(seed).child("cross").child(label);
        let mut params = CrossScanParams::init(&rng, "cross", D, N);
        jitter(&mut params, &rng, 0.3);
        let p = WithInputs {
            params,
            inputs: vec![rng.uniform("x1", &[6, D], 1.0).into_param(), rng.uniform("x2", &[6, D], 1.0).into_param()],
        };
        audit(
            out,
            "cross",
            seed,
            &p,
            |t, q| project(cross_ss2d_forward(t.leaf(&q.inputs[0]), t.leaf(&q.inputs[1]), &q.params, &perms, mode)?, &rng),
            |n| format!("{label}.{}", group_name(n, 3)),
            &rng,
            opts,
        )?;
    }
    Ok(())
}

/// Small configuration used for the end-to-end audit.
pub fn audit_model_config(seed: u64) -> ModelConfig {
    let mut c = ModelConfig::toy();
    c.h = 2;
    c.w = 3;
    c.c1 = 2;
    c.c2 = 3;
    c.d_model = 3;
    c.d_state = 2;
    c.depth = 1;
    c.num_classes = 3;
    c.encoder.stages = 2;
    c.encoder.dim = 4;
    c.seed = seed;
    c
}

fn model_cases(out: &mut Collector, seed: u64, opts: &GradcheckOptions) -> Result<()> {
    let cfg = audit_model_config(seed);
    let rng = Rng::new(seed).child("model");
    let model = Model::new(cfg.clone())?;
    let mut params = ModelParams::init(&cfg)?;
    jitter(&mut params, &rng, 0.3);
    let t = cfg.tokens();
    let inputs = SampleInputs {
        x1: rng.uniform("x1", &[t, cfg.c1], 1.0),
        x2: rng.uniform("x2", &[t, cfg.c2], 1.0),
        emb1: None,
        emb2: None,
    };
    let labels: Vec<usize> = (0..t).map(|i| (i * 7 + seed as usize) % cfg.num_classes).collect();
    let mask: Vec<bool> = (0..t).map(|i| i % 4 != 1).collect();
    let w = LossWeights::default();
    audit(
        out,
        "model",
        seed,
        &params,
        |tape, q| {
            let o = model.forward_sample(tape, q, &inputs)?;
            let sup = supervised_loss(o.logits1, o.logits2, o.logitsf, &labels, &mask)?;
            let unsup = consistency_loss(o.logits1, o.logits2, o.logitsf, None)?;
            total_loss(sup, unsup, &w)
        },
        |n| group_name(n, 2),
        &rng,
        opts,
    )
}

pub fn run_gradcheck(scope: Scope, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut out = Collector::default();
    let all = scope == Scope::All;
    for seed in 0..opts.seeds {
        if all || scope == Scope::Tensor || opts.inject_faulty_vjp {
            tensor_cases(&mut out, seed, opts)?;
        }
        if all || scope == Scope::Scan {
            scan_cases(&mut out, seed, opts)?;
        }
        if all || scope == Scope::Ss2d {
            ss2d_cases(&mut out, seed, opts)?;
        }
        if all || scope == Scope::Cross {
            cross_cases(&mut out, seed, opts)?;
        }
        if all || scope == Scope::Model {
            model_cases(&mut out, seed, opts)?;
        }
    }
    Ok(GradcheckReport { tolerance: opts.tolerance, groups: out.groups.into_values().collect() })
}
