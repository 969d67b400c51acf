//! Length sweeps of the scan kernels.

use std::str::FromStr;
use std::time::Instant;

use crate::autodiff::Tape;
use crate::cross::{cross_ss2d_forward, AvgMode, CrossScanParams};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scan::{scan_parallel, scan_sequential, DiscretizedSeq, ScanParams};
use crate::ss2d::{make_permutations, ss2d_forward};
use crate::tensor::Tensor;

pub const PAR_SEQ_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    ScanSeq,
    ScanPar,
    Ss2d,
    Cross,
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::ScanSeq => "scan-seq",
            Kernel::ScanPar => "scan-par",
            Kernel::Ss2d => "ss2d",
            Kernel::Cross => "cross",
        }
    }
}

impl FromStr for Kernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "scan-seq" => Kernel::ScanSeq,
            "scan-par" => Kernel::ScanPar,
            "ss2d" => Kernel::Ss2d,
            "cross" => Kernel::Cross,
            other => return Err(Error::Config(format!("kernel must be scan-seq|scan-par|ss2d|cross, got `{other}`"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub repeats: usize,
    /// Channels and state size of the raw scan kernels.
    pub channels: usize,
    pub state: usize,
    /// Chunk length of `scan-par`; 0 picks `max(64, L / (4 * threads))`.
    pub chunk: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { repeats: 9, channels: 8, state: 8, chunk: 0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kernel: &'static str,
    pub len: usize,
    pub median_ns: f64,
    pub ns_per_element: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `ln(median_ns)` against `ln(L)`.
    pub slope: f64,
    /// `scan-seq / scan-par` median ratio per length (scan-par only).
    pub speedup: Vec<(usize, f64)>,
    /// Largest `|scan_par - scan_seq|` seen (scan-par only).
    pub max_par_seq_diff: Option<f64>,
}

impl BenchReport {
    pub fn gate_passed(&self) -> bool {
        self.max_par_seq_diff.is_none_or(|d| d <= PAR_SEQ_TOLERANCE)
    }
}

pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn time_median(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_nanos() as f64);
    }
    Ok(median(samples))
}

/// Random stable sequence of length `len`.
pub fn random_sequence(rng: &Rng, len: usize, d: usize, n: usize) -> Result<(DiscretizedSeq, Tensor, Tensor)> {
    let a = rng.uniform("a", &[len, d, n], 1.0).map(|v| 0.5 + 0.45 * v);
    let u = rng.uniform("u", &[len, d, n], 1.0);
    let c = rng.uniform("c", &[len, n], 1.0);
    let skip = rng.uniform("skip", &[d], 1.0);
    let x = rng.uniform("x", &[len, d], 1.0);
    let h0 = rng.uniform("h0", &[d, n], 1.0);
    Ok((DiscretizedSeq::new(a, u, c, skip)?, x, h0))
}

/// Grid `h x w = len` with `h` the largest divisor not above `sqrt(len)`.
pub fn grid_for(len: usize) -> (usize, usize) {
    let mut h = (len as f64).sqrt() as usize;
    while h > 1 && !len.is_multiple_of(h) {
        h -= 1;
    }
    (h.max(1), len / h.max(1))
}

pub fn auto_chunk(len: usize) -> usize {
    (len / (4 * rayon::current_num_threads())).max(64)
}

pub fn bench_kernel(kernel: Kernel, lengths: &[usize], opts: &BenchOptions) -> Result<BenchReport> {
    if lengths.len() < 2 || lengths.contains(&0) {
        return Err(Error::Config("bench needs at least two positive lengths".into()));
    }
    let rng = Rng::new(opts.seed);
    let (d, n) = (opts.channels, opts.state);
    let mut rows = Vec::new();
    let mut speedup = Vec::new();
    let mut max_diff: Option<f64> = None;
    for &len in lengths {
        let r = rng.child(&format!("L{len}"));
        let median_ns = match kernel {
            Kernel::ScanSeq => {
                let (s, x, h0) = random_sequence(&r, len, d, n)?;
                time_median(opts.repeats, || scan_sequential(&s, &x, &h0).map(drop))?
            }
            Kernel::ScanPar => {
                let (s, x, h0) = random_sequence(&r, len, d, n)?;
                let chunk = if opts.chunk == 0 { auto_chunk(len) } else { opts.chunk };
                let (y_seq, h_seq) = scan_sequential(&s, &x, &h0)?;
                let (y_par, h_par) = scan_parallel(&s, &x, &h0, chunk)?;
                let diff = y_seq.max_abs_diff(&y_par).max(h_seq.max_abs_diff(&h_par));
                max_diff = Some(max_diff.map_or(diff, |m: f64| m.max(diff)));
                let par = time_median(opts.repeats, || scan_parallel(&s, &x, &h0, chunk).map(drop))?;
                let seq = time_median(opts.repeats, || scan_sequential(&s, &x, &h0).map(drop))?;
                speedup.push((len, seq / par));
                par
            }
            Kernel::Ss2d => {
                let (h, w) = grid_for(len);
                let perms = make_permutations(h, w)?;
                let scans: [ScanParams; 4] =
                    std::array::from_fn(|k| ScanParams::init(&r, &format!("scan{k}"), d, n));
                let x = r.uniform("x", &[len, d], 1.0);
                time_median(opts.repeats, || {
                    let tape = Tape::new();
                    ss2d_forward(tape.constant(x.clone()), &scans, &perms).map(drop)
                })?
            }
            Kernel::Cross => {
                let (h, w) = grid_for(len);
                let perms = make_permutations(h, w)?;
                let p = CrossScanParams::init(&r, "cross", d, n);
                let x1 = r.uniform("x1", &[len, d], 1.0);
                let x2 = r.uniform("x2", &[len, d], 1.0);
                time_median(opts.repeats, || {
                    let tape = Tape::new();
                    cross_ss2d_forward(tape.constant(x1.clone()), tape.constant(x2.clone()), &p, &perms, AvgMode::Continuous)
                        .map(drop)
                })?
            }
        };
        rows.push(BenchRow { kernel: kernel.name(), len, median_ns, ns_per_element: median_ns / len as f64 });
    }
    let slope = loglog_slope(&rows.iter().map(|r| (r.len as f64, r.median_ns)).collect::<Vec<_>>());
    Ok(BenchReport { rows, slope, speedup, max_par_seq_diff: max_diff })
}
