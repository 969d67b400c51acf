//! Fixtures shared by the kernel benchmarks.

use crossfuse::cross::CrossScanParams;
use crossfuse::kernel_bench::{grid_for, random_sequence};
use crossfuse::scan::{DiscretizedSeq, ScanParams};
use crossfuse::ss2d::{make_permutations, DirectionalPermutations};
use crossfuse::{Result, Rng, Tensor};

/// Sequence lengths swept by every benchmark group.
pub const LENGTHS: [usize; 4] = [256, 1024, 4096, 8192];
pub const CHANNELS: usize = 8;
pub const STATE: usize = 8;

pub struct RawScan {
    pub seq: DiscretizedSeq,
    pub x: Tensor,
    pub h0: Tensor,
}

pub fn raw_scan(len: usize) -> Result<RawScan> {
    let (seq, x, h0) = random_sequence(&Rng::new(len as u64), len, CHANNELS, STATE)?;
    Ok(RawScan { seq, x, h0 })
}

pub struct GridScan {
    pub perms: DirectionalPermutations,
    pub heads: [ScanParams; 4],
    pub cross: CrossScanParams,
    pub x1: Tensor,
    pub x2: Tensor,
}

/// Token grid of `len` tokens with random inputs and scan heads.
pub fn grid_scan(len: usize) -> Result<GridScan> {
    let (h, w) = grid_for(len);
    let rng = Rng::new(len as u64);
    Ok(GridScan {
        perms: make_permutations(h, w)?,
        heads: std::array::from_fn(|k| ScanParams::init(&rng, &format!("scan{k}"), CHANNELS, STATE)),
        cross: CrossScanParams::init(&rng, "cross", CHANNELS, STATE),
        x1: rng.uniform("x1", &[len, CHANNELS], 1.0),
        x2: rng.uniform("x2", &[len, CHANNELS], 1.0),
    })
}
