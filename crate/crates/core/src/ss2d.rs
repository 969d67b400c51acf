//! Four-direction 2D selective scanning and the VSS block built on it.
//!
//! Tokens of an `h x w` grid are indexed row-major. The four traversal orders
//! are row-major, reversed row-major, column-major and reversed column-major.
//! Each direction runs its own 1-D selective scan; outputs are mapped back to
//! grid order and summed in direction order.

use std::sync::Arc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::rng::Rng;
use crate::scan::{selective_scan, ScanParams};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionalPermutations {
    pub h: usize,
    pub w: usize,
    /// `forward[k][t]` is the grid token visited at step `t` of direction `k`.
    pub forward: [Vec<usize>; 4],
    /// `inverse[k][token]` is the step at which direction `k` visits `token`.
    pub inverse: [Vec<usize>; 4],
}

pub fn make_permutations(h: usize, w: usize) -> Result<DirectionalPermutations> {
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("token grid must be at least 1x1, got {h}x{w}")));
    }
    let row_major: Vec<usize> = (0..h * w).collect();
    let col_major: Vec<usize> = (0..w).flat_map(|j| (0..h).map(move |i| i * w + j)).collect();
    let rev = |v: &Vec<usize>| v.iter().rev().copied().collect::<Vec<_>>();
    let forward = [row_major.clone(), rev(&row_major), col_major.clone(), rev(&col_major)];
    let inverse = forward.clone().map(|p| {
        let mut inv = vec![0; p.len()];
        for (t, &tok) in p.iter().enumerate() {
            inv[tok] = t;
        }
        inv
    });
    Ok(DirectionalPermutations { h, w, forward, inverse })
}

impl DirectionalPermutations {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    fn check<'t>(&self, x: &Var<'t>) -> Result<()> {
        let s = x.shape();
        if s.len() != 2 || s[0] != self.tokens() {
            return Err(Error::Dimension(format!(
                "expected [{}, D] tokens for a {}x{} grid, got {s:?}",
                self.tokens(),
                self.h,
                self.w
            )));
        }
        Ok(())
    }

    /// Index tables for a zero-padded 3x3 neighbourhood, tap order `(dy, dx)`
    /// row-major over `{-1, 0, 1}^2`.
    pub fn conv_taps(&self) -> Vec<Arc<Vec<Option<usize>>>> {
        let (h, w) = (self.h as isize, self.w as isize);
        let mut taps = Vec::with_capacity(9);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let idx = (0..h)
                    .flat_map(|i| (0..w).map(move |j| (i + dy, j + dx)))
                    .map(|(i, j)| (i >= 0 && i < h && j >= 0 && j < w).then(|| (i * w + j) as usize))
                    .collect();
                taps.push(Arc::new(idx));
            }
        }
        taps
    }
}

/// The four directional token sequences of `x`.
pub fn directional_sequences<'t>(x: Var<'t>, perms: &DirectionalPermutations) -> Result<[Var<'t>; 4]> {
    perms.check(&x)?;
    Ok([
        x.permute_rows(&perms.forward[0])?,
        x.permute_rows(&perms.forward[1])?,
        x.permute_rows(&perms.forward[2])?,
        x.permute_rows(&perms.forward[3])?,
    ])
}

/// Scans each direction with its own head, maps back to grid order and sums.
pub fn ss2d_forward<'t>(x: Var<'t>, scans: &[ScanParams; 4], perms: &DirectionalPermutations) -> Result<Var<'t>> {
    let seqs = directional_sequences(x, perms)?;
    let mut merged: Option<Var<'t>> = None;
    for (k, seq) in seqs.into_iter().enumerate() {
        let y = selective_scan(seq, &scans[k])?.permute_rows(&perms.inverse[k])?;
        merged = Some(match merged {
            None => y,
            Some(acc) => acc.try_add(y)?,
        });
    }
    Ok(merged.expect("four directions"))
}

#[derive(Debug, Clone)]
pub struct VssBlockParams {
    pub in_proj: Linear,
    /// Depthwise 3x3 taps, `[9, D]`.
    pub dw_w: Tensor,
    pub dw_b: Tensor,
    pub scans: [ScanParams; 4],
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub gate: Linear,
    pub out_proj: Linear,
}

crate::param_tree!(VssBlockParams { in_proj, dw_w, dw_b, scans, ln_gamma, ln_beta, gate, out_proj });

impl VssBlockParams {
    pub fn init(rng: &Rng, prefix: &str, channels: usize, state: usize) -> Self {
        let scan = |k: usize| ScanParams::init(rng, &format!("{prefix}.scans.{k}"), channels, state);
        Self {
            in_proj: Linear::init(rng, &format!("{prefix}.in_proj"), channels, channels),
            dw_w: rng.uniform(&format!("{prefix}.dw_w"), &[9, channels], 1.0 / 3.0).into_param(),
            dw_b: Tensor::zeros([channels]).into_param(),
            scans: [scan(0), scan(1), scan(2), scan(3)],
            ln_gamma: Tensor::ones([channels]).into_param(),
            ln_beta: Tensor::zeros([channels]).into_param(),
            gate: Linear::init(rng, &format!("{prefix}.gate"), channels, channels),
            out_proj: Linear::init(rng, &format!("{prefix}.out_proj"), channels, channels),
        }
    }

    pub fn count(channels: usize, state: usize) -> usize {
        let d = channels;
        3 * Linear::count(d, d) + 9 * d + d + 4 * ScanParams::count(d, state) + 2 * d
    }
}

/// Depthwise 3x3 convolution over the token grid with zero padding.
pub fn depthwise_conv<'t>(x: Var<'t>, w: &Tensor, b: &Tensor, perms: &DirectionalPermutations) -> Result<Var<'t>> {
    perms.check(&x)?;
    let tape = x.tape();
    let wv = tape.leaf(w);
    let mut acc = tape.leaf(b);
    for (k, tap) in perms.conv_taps().into_iter().enumerate() {
        let shifted = x.gather_rows(tap)?;
        let wk = wv.gather_rows(Arc::new(vec![Some(k)]))?;
        acc = shifted.try_mul(wk)?.try_add(acc)?;
    }
    Ok(acc)
}

/// `y = x + out_proj(norm(ss2d(gelu(dwconv(in_proj(x))))) * gelu(gate(x)))`
pub fn vss_block<'t>(x: Var<'t>, p: &VssBlockParams, perms: &DirectionalPermutations) -> Result<Var<'t>> {
    perms.check(&x)?;
    let tape = x.tape();
    let inner = depthwise_conv(p.in_proj.forward(x)?, &p.dw_w, &p.dw_b, perms)?.gelu();
    let scanned = ss2d_forward(inner, &p.scans, perms)?;
    let normed = scanned.layer_norm(tape.leaf(&p.ln_gamma), tape.leaf(&p.ln_beta), LN_EPS)?;
    let gated = normed.try_mul(p.gate.forward(x)?.gelu())?;
    x.try_add(p.out_proj.forward(gated)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::ParamTree;

    #[test]
    fn permutations_single_token() {
        let p = make_permutations(1, 1).unwrap();
        for k in 0..4 {
            assert_eq!(p.forward[k], vec![0]);
        }
    }

    #[test]
    fn permutations_two_by_two() {
        let p = make_permutations(2, 2).unwrap();
        assert_eq!(p.forward[0], vec![0, 1, 2, 3]);
        assert_eq!(p.forward[1], vec![3, 2, 1, 0]);
        assert_eq!(p.forward[2], vec![0, 2, 1, 3]);
        assert_eq!(p.forward[3], vec![3, 1, 2, 0]);
    }

    #[test]
    fn permutations_two_by_three_column_major() {
        let p = make_permutations(2, 3).unwrap();
        assert_eq!(p.forward[2], vec![0, 3, 1, 4, 2, 5]);
        assert!(make_permutations(0, 3).is_err());
    }

    #[test]
    fn inverse_composes_to_identity() {
        let p = make_permutations(3, 5).unwrap();
        for k in 0..4 {
            for tok in 0..15 {
                assert_eq!(p.forward[k][p.inverse[k][tok]], tok);
            }
        }
    }

    #[test]
    fn conv_taps_center_is_identity() {
        let p = make_permutations(2, 3).unwrap();
        let taps = p.conv_taps();
        assert_eq!(*taps[4], (0..6).map(Some).collect::<Vec<_>>());
        // (dy, dx) = (-1, -1): only tokens with a top-left neighbour
        assert_eq!(*taps[0], vec![None, None, None, None, Some(0), Some(1)]);
    }

    #[test]
    fn block_count_matches_census() {
        let p = VssBlockParams::init(&Rng::new(0), "b", 5, 3);
        assert_eq!(p.param_count(), VssBlockParams::count(5, 3));
    }

    #[test]
    fn wrong_token_count_is_rejected() {
        let p = VssBlockParams::init(&Rng::new(0), "b", 2, 1);
        let perms = make_permutations(2, 2).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([5, 2]));
        assert!(matches!(vss_block(x, &p, &perms), Err(Error::Dimension(_))));
    }
}
