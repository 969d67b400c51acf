//! Cross-modal selective scan.
//!
//! Two token streams of the same shape are projected with their own scan
//! heads. The state-transition parameters of the two heads are averaged, the
//! input matrices are exchanged, and stream 1 is scanned:
//!
//! ```text
//! continuous:   a_bar = exp(delta1 * (A1 + A2) / 2),            b_bar = delta1 * B2
//! discretized:  a_bar = (exp(delta1 * A1) + exp(delta2 * A2)) / 2, b_bar = delta2 * B2
//! h[t] = a_bar[t] h[t-1] + b_bar[t] x1[t]
//! y1[t] = C1[t] h[t] + D1 x1[t]
//! ```
//!
//! Only `y1` feeds the network. The mirrored stream-2 output is available
//! through [`cross_ss2d_pair`].

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scan::{discretize, effective_a, project_params, scan_var, ScanParams};
use crate::ss2d::DirectionalPermutations;

/// Where the two state-transition parameters are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AvgMode {
    /// Average `A1`, `A2` before discretizing with stream 1's step size.
    #[default]
    Continuous,
    /// Average the already discretized `exp(delta_k A_k)`.
    Discretized,
}

impl std::str::FromStr for AvgMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(AvgMode::Continuous),
            "discretized" => Ok(AvgMode::Discretized),
            other => Err(Error::Config(format!("avg_mode must be continuous|discretized, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrossScanParams {
    /// Stream 1: the unimodal feature path.
    pub p1: ScanParams,
    /// Stream 2: the guidance path.
    pub p2: ScanParams,
}

crate::param_tree!(CrossScanParams { p1, p2 });

impl CrossScanParams {
    pub fn init(rng: &Rng, prefix: &str, channels: usize, state: usize) -> Self {
        Self {
            p1: ScanParams::init(rng, &format!("{prefix}.p1"), channels, state),
            p2: ScanParams::init(rng, &format!("{prefix}.p2"), channels, state),
        }
    }

    pub fn count(channels: usize, state: usize) -> usize {
        2 * ScanParams::count(channels, state)
    }
}

/// Averages the continuous state parameters and hands stream 1 the input
/// projection of stream 2.
pub fn cross_assign<'t>(
    a1: Var<'t>,
    a2: Var<'t>,
    b1_seq: Var<'t>,
    b2_seq: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    if a1.shape() != a2.shape() || b1_seq.shape() != b2_seq.shape() {
        return Err(Error::Dimension(format!(
            "cross assignment of A {:?}/{:?} and B {:?}/{:?}",
            a1.shape(),
            a2.shape(),
            b1_seq.shape(),
            b2_seq.shape()
        )));
    }
    Ok((a1.try_add(a2)?.scale(0.5), b2_seq))
}

/// One-dimensional cross scan of two aligned sequences `[L, D]`. Returns
/// `y1`, plus the mirrored `y2` when `mirrored` is set.
pub fn cross_scan_1d<'t>(
    x1: Var<'t>,
    x2: Var<'t>,
    p: &CrossScanParams,
    mode: AvgMode,
    mirrored: bool,
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    let tape = x1.tape();
    let (s1, s2) = (x1.shape(), x2.shape());
    if s1 != s2 || s1.len() != 2 {
        return Err(Error::Dimension(format!("cross scan streams differ: {s1:?} vs {s2:?}")));
    }
    if p.p1.channels() != p.p2.channels() || p.p1.state() != p.p2.state() || p.p1.channels() != s1[1] {
        return Err(Error::Dimension(format!(
            "cross scan heads ({}, {}) / ({}, {}) for streams of width {}",
            p.p1.channels(),
            p.p1.state(),
            p.p2.channels(),
            p.p2.state(),
            s1[1]
        )));
    }
    let (l, d) = (s1[0], s1[1]);
    let pr1 = project_params(x1, &p.p1)?;
    let pr2 = project_params(x2, &p.p2)?;
    let a1 = effective_a(tape, &p.p1);
    let a2 = effective_a(tape, &p.p2);

    let run = |a_bar: Var<'t>, b_bar: Var<'t>, x: Var<'t>, c: Var<'t>, skip: &ScanParams| -> Result<Var<'t>> {
        let u = b_bar.try_mul(x.reshape([l, d, 1])?)?;
        scan_var(a_bar, u, c, None)?.try_add(x.try_mul(tape.leaf(&skip.d_skip))?)
    };

    match mode {
        AvgMode::Continuous => {
            let (a_f, b_for_1) = cross_assign(a1, a2, pr1.b_seq, pr2.b_seq)?;
            let (a_bar, b_bar) = discretize(pr1.delta, a_f, b_for_1)?;
            let y1 = run(a_bar, b_bar, x1, pr1.c_seq, &p.p1)?;
            let y2 = if mirrored {
                let (a_bar2, b_bar2) = discretize(pr2.delta, a_f, pr1.b_seq)?;
                Some(run(a_bar2, b_bar2, x2, pr2.c_seq, &p.p2)?)
            } else {
                None
            };
            Ok((y1, y2))
        }
        AvgMode::Discretized => {
            let (a_bar1, b_bar1) = discretize(pr1.delta, a1, pr1.b_seq)?;
            let (a_bar2, b_bar2) = discretize(pr2.delta, a2, pr2.b_seq)?;
            let a_avg = a_bar1.try_add(a_bar2)?.scale(0.5);
            let y1 = run(a_avg, b_bar2, x1, pr1.c_seq, &p.p1)?;
            let y2 = if mirrored { Some(run(a_avg, b_bar1, x2, pr2.c_seq, &p.p2)?) } else { None };
            Ok((y1, y2))
        }
    }
}

fn cross_ss2d_impl<'t>(
    x1: Var<'t>,
    x2: Var<'t>,
    p: &CrossScanParams,
    perms: &DirectionalPermutations,
    mode: AvgMode,
    mirrored: bool,
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    if x1.shape() != x2.shape() {
        return Err(Error::Dimension(format!(
            "cross streams differ: {:?} vs {:?}",
            x1.shape(),
            x2.shape()
        )));
    }
    let seq1 = crate::ss2d::directional_sequences(x1, perms)?;
    let seq2 = crate::ss2d::directional_sequences(x2, perms)?;
    let mut acc1: Option<Var<'t>> = None;
    let mut acc2: Option<Var<'t>> = None;
    for k in 0..4 {
        let (y1, y2) = cross_scan_1d(seq1[k], seq2[k], p, mode, mirrored)?;
        let y1 = y1.permute_rows(&perms.inverse[k])?;
        acc1 = Some(match acc1 {
            None => y1,
            Some(a) => a.try_add(y1)?,
        });
        if let Some(y2) = y2 {
            let y2 = y2.permute_rows(&perms.inverse[k])?;
            acc2 = Some(match acc2 {
                None => y2,
                Some(a) => a.try_add(y2)?,
            });
        }
    }
    Ok((acc1.expect("four directions"), acc2))
}

/// Four-direction cross scan; `x1` is the unimodal stream, `x2` the guidance.
pub fn cross_ss2d_forward<'t>(
    x1: Var<'t>,
    x2: Var<'t>,
    p: &CrossScanParams,
    perms: &DirectionalPermutations,
    mode: AvgMode,
) -> Result<Var<'t>> {
    Ok(cross_ss2d_impl(x1, x2, p, perms, mode, false)?.0)
}

/// Both stream outputs `(y1, y2)` of the four-direction cross scan.
pub fn cross_ss2d_pair<'t>(
    x1: Var<'t>,
    x2: Var<'t>,
    p: &CrossScanParams,
    perms: &DirectionalPermutations,
    mode: AvgMode,
) -> Result<(Var<'t>, Var<'t>)> {
    let (y1, y2) = cross_ss2d_impl(x1, x2, p, perms, mode, true)?;
    Ok((y1, y2.expect("mirrored output requested")))
}
