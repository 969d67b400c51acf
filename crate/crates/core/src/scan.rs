//! One-dimensional selective state-space scan.
//!
//! The state matrix is diagonal per channel: `A` is stored as `a_log[D, n]`
//! with `A = -exp(a_log)`, so every channel `d` carries `n` independent decay
//! rates. For a sequence `x[L, D]`:
//!
//! ```text
//! delta = softplus(x Wd + bd)            [L, D]
//! B, C  = split(x Wbc + bbc)             [L, n] each
//! a_bar[t,d,k] = exp(delta[t,d] A[d,k])
//! b_bar[t,d,k] = delta[t,d] B[t,k]       (first-order form of the ZOH input matrix)
//! h[t]  = a_bar[t] * h[t-1] + b_bar[t] * x[t]
//! y[t,d] = sum_k C[t,k] h[t,d,k] + D[d] x[t,d]
//! ```

use rayon::prelude::*;

use crate::autodiff::{Tape, Var, VjpRule};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Learnable parameters of one scan head.
#[derive(Debug, Clone)]
pub struct ScanParams {
    pub a_log: Tensor,
    pub d_skip: Tensor,
    pub delta_w: Tensor,
    pub delta_b: Tensor,
    pub bc_w: Tensor,
    pub bc_b: Tensor,
}

crate::param_tree!(ScanParams { a_log, d_skip, delta_w, delta_b, bc_w, bc_b });

impl ScanParams {
    /// `-exp(a_log)` spreads geometrically over `[-n, -1]` along the state
    /// axis, `d_skip` starts at one, the step-size bias is the inverse
    /// softplus of a log-uniform draw in `[1e-3, 1e-1]`, and projection
    /// weights are small-uniform.
    pub fn init(rng: &Rng, prefix: &str, channels: usize, state: usize) -> Self {
        let n = state;
        let mut a_log = Vec::with_capacity(channels * n);
        for _ in 0..channels {
            for k in 0..n {
                let frac = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
                a_log.push(frac * (n as f64).ln());
            }
        }
        let bound = 0.5 / (channels as f64).sqrt();
        let dt = rng.uniform(&format!("{prefix}.dt"), &[channels], 1.0);
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let delta_b: Vec<f64> = dt
            .data()
            .iter()
            .map(|u| {
                let dt = (lo + (u + 1.0) * 0.5 * (hi - lo)).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        Self {
            a_log: Tensor::from_parts(vec![channels, n], a_log).into_param(),
            d_skip: Tensor::ones([channels]).into_param(),
            delta_w: rng.uniform(&format!("{prefix}.delta_w"), &[channels, channels], bound).into_param(),
            delta_b: Tensor::from_parts(vec![channels], delta_b).into_param(),
            bc_w: rng.uniform(&format!("{prefix}.bc_w"), &[channels, 2 * n], bound).into_param(),
            bc_b: Tensor::zeros([2 * n]).into_param(),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// Closed-form parameter count for `(D, n)`.
    pub fn count(channels: usize, state: usize) -> usize {
        channels * state + channels + channels * channels + channels + channels * 2 * state + 2 * state
    }
}

/// Input-dependent projections of one sequence.
#[derive(Debug, Clone, Copy)]
pub struct Projected<'t> {
    pub delta: Var<'t>,
    pub b_seq: Var<'t>,
    pub c_seq: Var<'t>,
}

/// `delta = softplus(x Wd + bd)`, `(B, C) = split(x Wbc + bbc)`.
pub fn project_params<'t>(x: Var<'t>, p: &ScanParams) -> Result<Projected<'t>> {
    let tape = x.tape();
    let n = p.state();
    let delta = x.matmul(tape.leaf(&p.delta_w))?.try_add(tape.leaf(&p.delta_b))?.softplus();
    let bc = x.matmul(tape.leaf(&p.bc_w))?.try_add(tape.leaf(&p.bc_b))?;
    Ok(Projected { delta, b_seq: bc.slice_last(0, n)?, c_seq: bc.slice_last(n, 2 * n)? })
}

/// The effective continuous state parameter `-exp(a_log)`.
pub fn effective_a<'t>(tape: &'t Tape, p: &ScanParams) -> Var<'t> {
    -tape.leaf(&p.a_log).exp()
}

/// `a_bar = exp(delta * a)` and `b_bar = delta * B`, both `[L, D, n]`.
pub fn discretize<'t>(delta: Var<'t>, a: Var<'t>, b_seq: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (ds, as_, bs) = (delta.shape(), a.shape(), b_seq.shape());
    if ds.len() != 2 || as_.len() != 2 || bs.len() != 2 || ds[1] != as_[0] || bs[0] != ds[0] || bs[1] != as_[1] {
        return Err(Error::Dimension(format!(
            "discretize expects delta [L,D], a [D,n], b [L,n]; got {ds:?}, {as_:?}, {bs:?}"
        )));
    }
    let (l, d, n) = (ds[0], ds[1], as_[1]);
    let delta3 = delta.reshape([l, d, 1])?;
    let a_bar = delta3.try_mul(a.reshape([1, d, n])?)?.exp();
    let b_bar = delta3.try_mul(b_seq.reshape([l, 1, n])?)?;
    Ok((a_bar, b_bar))
}

/// Discretized sequence ready for a raw scan kernel.
#[derive(Debug, Clone)]
pub struct DiscretizedSeq {
    /// `[L, D, n]`
    pub a_bar: Tensor,
    /// `b_bar * x`, `[L, D, n]`
    pub b_bar_x: Tensor,
    /// `[L, n]`
    pub c_seq: Tensor,
    /// `[D]`
    pub d_skip: Tensor,
}

impl DiscretizedSeq {
    pub fn new(a_bar: Tensor, b_bar_x: Tensor, c_seq: Tensor, d_skip: Tensor) -> Result<Self> {
        let s = a_bar.shape();
        if s.len() != 3
            || b_bar_x.shape() != s
            || c_seq.shape() != [s[0], s[2]]
            || d_skip.shape() != [s[1]]
        {
            return Err(Error::Dimension(format!(
                "inconsistent discretized sequence: a_bar {:?}, b_bar_x {:?}, c {:?}, d {:?}",
                s,
                b_bar_x.shape(),
                c_seq.shape(),
                d_skip.shape()
            )));
        }
        Ok(Self { a_bar, b_bar_x, c_seq, d_skip })
    }

    /// `(L, D, n)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.a_bar.shape();
        (s[0], s[1], s[2])
    }

    fn check(&self, x: &Tensor, h0: &Tensor) -> Result<()> {
        let (l, d, n) = self.dims();
        if x.shape() != [l, d] || h0.shape() != [d, n] {
            return Err(Error::Dimension(format!(
                "scan of ({l},{d},{n}) got x {:?} and h0 {:?}",
                x.shape(),
                h0.shape()
            )));
        }
        Ok(())
    }
}

/// Runs `h[t] = a[t] h[t-1] + u[t]` from `h`, writing `sum_k c[t,k] h[t,d,k]`
/// into `y`. When `states` is given every `h[t]` is recorded. Leaves the final
/// state in `h`.
fn recurrence(
    a: &[f64],
    u: &[f64],
    c: &[f64],
    h: &mut [f64],
    y: &mut [f64],
    mut states: Option<&mut [f64]>,
    d: usize,
    n: usize,
) {
    let dn = d * n;
    let steps = y.len() / d;
    for t in 0..steps {
        let at = &a[t * dn..(t + 1) * dn];
        let ut = &u[t * dn..(t + 1) * dn];
        let ct = &c[t * n..(t + 1) * n];
        for ch in 0..d {
            let hs = &mut h[ch * n..(ch + 1) * n];
            let mut acc = 0.0;
            for k in 0..n {
                let v = at[ch * n + k] * hs[k] + ut[ch * n + k];
                hs[k] = v;
                acc += ct[k] * v;
            }
            y[t * d + ch] = acc;
        }
        if let Some(s) = states.as_deref_mut() {
            s[t * dn..(t + 1) * dn].copy_from_slice(h);
        }
    }
}

fn add_skip(y: &mut [f64], x: &[f64], d_skip: &[f64]) {
    let d = d_skip.len();
    for (i, (yv, xv)) in y.iter_mut().zip(x).enumerate() {
        *yv += d_skip[i % d] * xv;
    }
}

/// Reference left-to-right scan. Returns `(y [L, D], h_L [D, n])`.
pub fn scan_sequential(dseq: &DiscretizedSeq, x: &Tensor, h0: &Tensor) -> Result<(Tensor, Tensor)> {
    dseq.check(x, h0)?;
    let (l, d, n) = dseq.dims();
    let mut h = h0.to_vec();
    let mut y = vec![0.0; l * d];
    recurrence(dseq.a_bar.data(), dseq.b_bar_x.data(), dseq.c_seq.data(), &mut h, &mut y, None, d, n);
    add_skip(&mut y, x.data(), dseq.d_skip.data());
    Ok((Tensor::from_parts(vec![l, d], y), Tensor::from_parts(vec![d, n], h)))
}

/// Chunked scan. Each chunk is first scanned from a zero state while the
/// product of its transitions is accumulated; the chunk entry states are then
/// stitched left to right from `(prod, end_state)` pairs, and every chunk is
/// rescanned from its true entry state. The two chunk passes run on the rayon
/// pool.
pub fn scan_parallel(dseq: &DiscretizedSeq, x: &Tensor, h0: &Tensor, chunk: usize) -> Result<(Tensor, Tensor)> {
    dseq.check(x, h0)?;
    if chunk == 0 {
        return Err(Error::Contract("chunk length must be >= 1".into()));
    }
    let (l, d, n) = dseq.dims();
    let dn = d * n;
    let (a, u, c) = (dseq.a_bar.data(), dseq.b_bar_x.data(), dseq.c_seq.data());
    let n_chunks = l.div_ceil(chunk);

    let summaries: Vec<(Vec<f64>, Vec<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let (t0, t1) = (ci * chunk, ((ci + 1) * chunk).min(l));
            let mut prod = vec![1.0; dn];
            let mut state = vec![0.0; dn];
            for t in t0..t1 {
                let at = &a[t * dn..(t + 1) * dn];
                let ut = &u[t * dn..(t + 1) * dn];
                for i in 0..dn {
                    state[i] = at[i] * state[i] + ut[i];
                    prod[i] *= at[i];
                }
            }
            (prod, state)
        })
        .collect();

    let mut entries = Vec::with_capacity(n_chunks);
    let mut carry = h0.to_vec();
    for (prod, state) in &summaries {
        entries.push(carry.clone());
        for i in 0..dn {
            carry[i] = prod[i] * carry[i] + state[i];
        }
    }

    let mut y = vec![0.0; l * d];
    let finals: Vec<Vec<f64>> = y
        .par_chunks_mut(chunk * d)
        .zip(entries.into_par_iter())
        .enumerate()
        .map(|(ci, (ys, mut h))| {
            let t0 = ci * chunk;
            let t1 = t0 + ys.len() / d;
            recurrence(&a[t0 * dn..t1 * dn], &u[t0 * dn..t1 * dn], &c[t0 * n..t1 * n], &mut h, ys, None, d, n);
            h
        })
        .collect();
    add_skip(&mut y, x.data(), dseq.d_skip.data());
    let h_last = finals.into_iter().last().unwrap_or_else(|| h0.to_vec());
    Ok((Tensor::from_parts(vec![l, d], y), Tensor::from_parts(vec![d, n], h_last)))
}

struct ScanRule {
    states: Vec<f64>,
    dims: (usize, usize, usize),
}

impl VjpRule for ScanRule {
    fn name(&self) -> &str {
        "selective_scan"
    }

    fn vjp(&self, gy: &Tensor, inputs: &[Tensor], _output: &Tensor) -> Vec<Tensor> {
        let (l, d, n) = self.dims;
        let dn = d * n;
        let (a, c, h0) = (inputs[0].data(), inputs[2].data(), inputs[3].data());
        let gy = gy.data();
        let mut gh = vec![0.0; dn];
        let mut ga = vec![0.0; l * dn];
        let mut gu = vec![0.0; l * dn];
        let mut gc = vec![0.0; l * n];
        for t in (0..l).rev() {
            let hs = &self.states[t * dn..(t + 1) * dn];
            let hprev = if t > 0 { &self.states[(t - 1) * dn..t * dn] } else { h0 };
            let ct = &c[t * n..(t + 1) * n];
            for ch in 0..d {
                let g = gy[t * d + ch];
                for k in 0..n {
                    let i = ch * n + k;
                    gh[i] += g * ct[k];
                    gc[t * n + k] += g * hs[i];
                    gu[t * dn + i] = gh[i];
                    ga[t * dn + i] = gh[i] * hprev[i];
                    gh[i] *= a[t * dn + i];
                }
            }
        }
        vec![
            Tensor::from_parts(vec![l, d, n], ga),
            Tensor::from_parts(vec![l, d, n], gu),
            Tensor::from_parts(vec![l, n], gc),
            Tensor::from_parts(vec![d, n], gh),
        ]
    }
}

/// Differentiable scan without the skip term: `y[t,d] = sum_k c[t,k] h[t,d,k]`.
pub fn scan_var<'t>(a_bar: Var<'t>, b_bar_x: Var<'t>, c_seq: Var<'t>, h0: Option<Var<'t>>) -> Result<Var<'t>> {
    let tape = a_bar.tape();
    let s = a_bar.shape();
    if s.len() != 3 || b_bar_x.shape() != s || c_seq.shape() != [s[0], s[2]] {
        return Err(Error::Dimension(format!(
            "scan expects a_bar/b_bar_x [L,D,n] and c [L,n]; got {:?}, {:?}, {:?}",
            s,
            b_bar_x.shape(),
            c_seq.shape()
        )));
    }
    let (l, d, n) = (s[0], s[1], s[2]);
    let h0 = match h0 {
        Some(h) if h.shape() == [d, n] => h,
        Some(h) => return Err(Error::Dimension(format!("h0 must be [{d}, {n}], got {:?}", h.shape()))),
        None => tape.constant(Tensor::zeros([d, n])),
    };
    let (av, uv, cv, hv) = (a_bar.value(), b_bar_x.value(), c_seq.value(), h0.value());
    let mut h = hv.to_vec();
    let mut y = vec![0.0; l * d];
    let mut states = vec![0.0; l * d * n];
    recurrence(av.data(), uv.data(), cv.data(), &mut h, &mut y, Some(&mut states), d, n);
    let rule = ScanRule { states, dims: (l, d, n) };
    Ok(tape.custom(&[a_bar, b_bar_x, c_seq, h0], Tensor::from_parts(vec![l, d], y), Box::new(rule)))
}

/// Stages of one selective scan, kept for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct ScanTrace<'t> {
    pub proj: Projected<'t>,
    pub a_bar: Var<'t>,
    pub b_bar: Var<'t>,
    pub y: Var<'t>,
}

/// Full selective scan of `x [L, D]` with zero initial state.
pub fn selective_scan<'t>(x: Var<'t>, p: &ScanParams) -> Result<Var<'t>> {
    Ok(selective_scan_traced(x, p)?.y)
}

pub fn selective_scan_traced<'t>(x: Var<'t>, p: &ScanParams) -> Result<ScanTrace<'t>> {
    let tape = x.tape();
    let xs = x.shape();
    if xs.len() != 2 || xs[1] != p.channels() {
        return Err(Error::Dimension(format!(
            "scan input must be [L, {}], got {xs:?}",
            p.channels()
        )));
    }
    let proj = project_params(x, p)?;
    let a = effective_a(tape, p);
    let (a_bar, b_bar) = discretize(proj.delta, a, proj.b_seq)?;
    let u = b_bar.try_mul(x.reshape([xs[0], xs[1], 1])?)?;
    let y = scan_var(a_bar, u, proj.c_seq, None)?.try_add(x.try_mul(tape.leaf(&p.d_skip))?)?;
    Ok(ScanTrace { proj, a_bar, b_bar, y })
}

/// Evaluates every stage of a scan on plain tensors.
pub fn discretized_from(x: &Tensor, p: &ScanParams) -> Result<DiscretizedSeq> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let tr = selective_scan_traced(xv, p)?;
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let bx = tr.b_bar.try_mul(xv.reshape([l, d, 1])?)?;
    DiscretizedSeq::new(tr.a_bar.value(), bx.value(), tr.proj.c_seq.value(), p.d_skip.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamTree;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    fn zero_params(d: usize, n: usize) -> ScanParams {
        ScanParams {
            a_log: Tensor::zeros([d, n]),
            d_skip: Tensor::zeros([d]),
            delta_w: Tensor::zeros([d, d]),
            delta_b: Tensor::zeros([d]),
            bc_w: Tensor::zeros([d, 2 * n]),
            bc_b: Tensor::zeros([2 * n]),
        }
    }

    #[test]
    fn constant_projection_gives_softplus_bias() {
        let mut p = zero_params(2, 1);
        p.delta_b = t(&[2], &[0.3, -1.0]);
        let tape = Tape::new();
        let x = tape.constant(Rng::new(1).uniform("x", &[5, 2], 1.0));
        let pr = project_params(x, &p).unwrap();
        let dv = pr.delta.value();
        for row in dv.data().chunks(2) {
            assert!((row[0] - crate::autodiff::softplus(0.3)).abs() < 1e-15);
            assert!((row[1] - crate::autodiff::softplus(-1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn bc_split_order() {
        let mut p = zero_params(1, 3);
        p.bc_b = t(&[6], &[1., 2., 3., 4., 5., 6.]);
        let tape = Tape::new();
        let pr = project_params(tape.constant(Tensor::ones([2, 1])), &p).unwrap();
        assert_eq!(pr.b_seq.value().data(), &[1., 2., 3., 1., 2., 3.]);
        assert_eq!(pr.c_seq.value().data(), &[4., 5., 6., 4., 5., 6.]);
    }

    #[test]
    fn delta_strictly_positive() {
        for seed in 0..100 {
            let rng = Rng::new(seed);
            let mut p = ScanParams::init(&rng, "s", 3, 2);
            p.delta_w = rng.uniform("big", &[3, 3], 5.0);
            let tape = Tape::new();
            let x = tape.constant(rng.uniform("x", &[7, 3], 3.0));
            assert!(project_params(x, &p).unwrap().delta.value().data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn discretize_examples() {
        let tape = Tape::new();
        let delta = tape.constant(t(&[1, 1], &[2f64.ln()]));
        let a = tape.constant(t(&[1, 1], &[1.0]));
        let b = tape.constant(t(&[1, 1], &[3.0]));
        let (ab, _) = discretize(delta, a, b).unwrap();
        assert!((ab.value().item() - 2.0).abs() < 1e-15);

        let delta = tape.constant(t(&[1, 1], &[0.5]));
        let (_, bb) = discretize(delta, a, b).unwrap();
        assert_eq!(bb.value().item(), 1.5);

        let delta = tape.constant(t(&[1, 1], &[1e-12]));
        let a = tape.constant(t(&[1, 1], &[-3.0]));
        let (ab, bb) = discretize(delta, a, b).unwrap();
        assert!((ab.value().item() - 1.0).abs() < 1e-11);
        assert!(bb.value().item().abs() < 1e-11);
    }

    fn cumulative_seq(a: f64, d_skip: f64) -> (DiscretizedSeq, Tensor) {
        let dseq = DiscretizedSeq::new(
            Tensor::full([3, 1, 1], a),
            t(&[3, 1, 1], &[1., 2., 3.]),
            Tensor::ones([3, 1]),
            Tensor::full([1], d_skip),
        )
        .unwrap();
        (dseq, t(&[3, 1], &[1., 2., 3.]))
    }

    #[test]
    fn sequential_examples() {
        let h0 = Tensor::zeros([1, 1]);
        let (s, x) = cumulative_seq(1.0, 0.0);
        assert_eq!(scan_sequential(&s, &x, &h0).unwrap().0.data(), &[1., 3., 6.]);
        let (s, x) = cumulative_seq(1.0, 1.0);
        assert_eq!(scan_sequential(&s, &x, &h0).unwrap().0.data(), &[2., 5., 9.]);
        let (s, x) = cumulative_seq(0.0, 1.0);
        assert_eq!(scan_sequential(&s, &x, &h0).unwrap().0.data(), &[2., 4., 6.]);
    }

    #[test]
    fn parallel_degenerate_chunks() {
        let rng = Rng::new(3);
        let (l, d, n) = (37, 3, 4);
        let dseq = DiscretizedSeq::new(
            rng.uniform("a", &[l, d, n], 0.5).map(|v| v + 0.5),
            rng.uniform("u", &[l, d, n], 1.0),
            rng.uniform("c", &[l, n], 1.0),
            rng.uniform("d", &[d], 1.0),
        )
        .unwrap();
        let x = rng.uniform("x", &[l, d], 1.0);
        let h0 = rng.uniform("h", &[d, n], 1.0);
        let (ys, hs) = scan_sequential(&dseq, &x, &h0).unwrap();
        for chunk in [1, 5, l, l + 10] {
            let (yp, hp) = scan_parallel(&dseq, &x, &h0, chunk).unwrap();
            assert!(ys.max_abs_diff(&yp) <= 1e-12, "chunk {chunk}");
            assert!(hs.max_abs_diff(&hp) <= 1e-12, "chunk {chunk}");
        }
        assert!(scan_parallel(&dseq, &x, &h0, 0).is_err());
    }

    #[test]
    fn tape_scan_matches_kernel() {
        let rng = Rng::new(9);
        let p = ScanParams::init(&rng, "p", 4, 3);
        let x = rng.uniform("x", &[11, 4], 1.0);
        let tape = Tape::new();
        let y = selective_scan(tape.constant(x.clone()), &p).unwrap().value();
        let dseq = discretized_from(&x, &p).unwrap();
        let (yk, _) = scan_sequential(&dseq, &x, &Tensor::zeros([4, 3])).unwrap();
        assert!(y.max_abs_diff(&yk) < 1e-14);
    }

    #[test]
    fn init_spans_expected_decay_range() {
        let p = ScanParams::init(&Rng::new(0), "p", 2, 5);
        let a: Vec<f64> = p.a_log.data().iter().map(|v| -v.exp()).collect();
        assert!((a[0] + 1.0).abs() < 1e-12 && (a[4] + 5.0).abs() < 1e-12);
        assert!(a.iter().all(|&v| v < 0.0));
        assert_eq!(p.param_count(), ScanParams::count(2, 5));
    }
}
