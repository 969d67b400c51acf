use crossfuse::autodiff::Tape;
use crossfuse::cross::{cross_assign, cross_scan_1d, cross_ss2d_forward, CrossScanParams};
use crossfuse::scan::{discretize, effective_a, project_params, selective_scan, ScanParams};
use crossfuse::ss2d::{directional_sequences, make_permutations, ss2d_forward, vss_block, VssBlockParams};
use crossfuse::{AvgMode, Rng, Tensor};
use proptest::prelude::*;

/// Scan head with every field drawn at random, biases included.
fn random_head(rng: &Rng, name: &str, d: usize, n: usize) -> ScanParams {
    let u = |field: &str, shape: &[usize], b: f64| rng.uniform(&format!("{name}.{field}"), shape, b);
    ScanParams {
        a_log: u("a_log", &[d, n], 1.0),
        d_skip: u("d_skip", &[d], 1.0),
        delta_w: u("delta_w", &[d, d], 1.0),
        delta_b: u("delta_b", &[d], 1.0),
        bc_w: u("bc_w", &[d, 2 * n], 1.0),
        bc_b: u("bc_b", &[2 * n], 0.5),
    }
}

fn softplus(v: f64) -> f64 {
    v.exp().ln_1p()
}

/// Row `t` of `x W + b` for `x: [L, i]`, `W: [i, o]`.
fn affine(x: &Tensor, t: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    (0..o).map(|j| b.data()[j] + (0..i).map(|k| x.data()[t * i + k] * w.data()[k * o + j]).sum::<f64>()).collect()
}

/// Both time steps of the fused recurrence written out by hand.
fn two_step_oracle(x1: &Tensor, x2: &Tensor, p1: &ScanParams, p2: &ScanParams, mode: AvgMode) -> Vec<f64> {
    let (d, n) = (p1.a_log.shape()[0], p1.a_log.shape()[1]);
    let a1: Vec<f64> = p1.a_log.data().iter().map(|v| -v.exp()).collect();
    let a2: Vec<f64> = p2.a_log.data().iter().map(|v| -v.exp()).collect();
    let mut h = vec![0.0; d * n];
    let mut y = Vec::new();
    for t in 0..2 {
        let dt1: Vec<f64> = affine(x1, t, &p1.delta_w, &p1.delta_b).into_iter().map(softplus).collect();
        let dt2: Vec<f64> = affine(x2, t, &p2.delta_w, &p2.delta_b).into_iter().map(softplus).collect();
        let bc1 = affine(x1, t, &p1.bc_w, &p1.bc_b);
        let bc2 = affine(x2, t, &p2.bc_w, &p2.bc_b);
        let c1 = &bc1[n..];
        let b2 = &bc2[..n];
        for c in 0..d {
            let xv = x1.data()[t * d + c];
            let mut acc = 0.0;
            for k in 0..n {
                let i = c * n + k;
                let (a_bar, b_bar) = match mode {
                    AvgMode::Continuous => ((dt1[c] * 0.5 * (a1[i] + a2[i])).exp(), dt1[c] * b2[k]),
                    AvgMode::Discretized => (0.5 * ((dt1[c] * a1[i]).exp() + (dt2[c] * a2[i]).exp()), dt2[c] * b2[k]),
                };
                h[i] = a_bar * h[i] + b_bar * xv;
                acc += c1[k] * h[i];
            }
            y.push(acc + p1.d_skip.data()[c] * xv);
        }
    }
    y
}

const MODES: [AvgMode; 2] = [AvgMode::Continuous, AvgMode::Discretized];

#[test]
fn two_step_recurrence_matches_hand_unrolling() {
    for (n, d) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        for seed in 0..20u64 {
            let rng = Rng::new(seed);
            let p = CrossScanParams { p1: random_head(&rng, "p1", d, n), p2: random_head(&rng, "p2", d, n) };
            let x1 = rng.uniform("x1", &[2, d], 1.0);
            let x2 = rng.uniform("x2", &[2, d], 1.0);
            for mode in MODES {
                let tape = Tape::new();
                let (y, _) = cross_scan_1d(tape.constant(x1.clone()), tape.constant(x2.clone()), &p, mode, false).unwrap();
                let want = two_step_oracle(&x1, &x2, &p.p1, &p.p2, mode);
                let got = y.value();
                for (a, b) in got.data().iter().zip(&want) {
                    assert!((a - b).abs() <= 1e-12, "n={n} d={d} seed={seed} {mode:?}: {a} vs {b}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn permutations_round_trip(h in 1usize..7, w in 1usize..7, seed in 0u64..1000) {
        let perms = make_permutations(h, w).unwrap();
        let x = Rng::new(seed).uniform("x", &[h * w, 3], 1.0);
        let tape = Tape::new();
        let seqs = directional_sequences(tape.constant(x.clone()), &perms).unwrap();
        for (k, s) in seqs.into_iter().enumerate() {
            let back = s.permute_rows(&perms.inverse[k]).unwrap().value();
            prop_assert_eq!(back.data(), x.data());
        }
    }

    #[test]
    fn constant_grid_scans_alike_in_every_direction(h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
        let rng = Rng::new(seed);
        let perms = make_permutations(h, w).unwrap();
        let p = random_head(&rng, "p", 2, 3);
        let row = rng.uniform("row", &[1, 2], 1.0);
        let x = Tensor::new([h * w, 2], row.data().repeat(h * w)).unwrap();
        let tape = Tape::new();
        let outs: Vec<Tensor> = directional_sequences(tape.constant(x), &perms)
            .unwrap()
            .into_iter()
            .map(|s| selective_scan(s, &p).unwrap().value())
            .collect();
        for o in &outs[1..] {
            prop_assert_eq!(o.data(), outs[0].data());
        }
    }

    #[test]
    fn vss_block_with_zero_output_projection_is_identity(seed in 0u64..1000) {
        let rng = Rng::new(seed);
        let perms = make_permutations(3, 4).unwrap();
        let mut p = VssBlockParams::init(&rng, "b", 4, 2);
        p.out_proj.w = Tensor::zeros([4, 4]);
        p.out_proj.b = Tensor::zeros([4]);
        let x = rng.uniform("x", &[12, 4], 2.0);
        let tape = Tape::new();
        let y = vss_block(tape.constant(x.clone()), &p, &perms).unwrap().value();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn cross_scan_on_coinciding_streams_is_ss2d(seed in 0u64..1000, h in 1usize..5, w in 1usize..5) {
        let rng = Rng::new(seed);
        let perms = make_permutations(h, w).unwrap();
        let head = random_head(&rng, "shared", 3, 2);
        let p = CrossScanParams { p1: head.clone(), p2: head.clone() };
        let x = rng.uniform("x", &[h * w, 3], 1.0);
        let tape = Tape::new();
        let plain = ss2d_forward(tape.constant(x.clone()), &[head.clone(), head.clone(), head.clone(), head], &perms).unwrap().value();
        for mode in MODES {
            let fused = cross_ss2d_forward(tape.constant(x.clone()), tape.constant(x.clone()), &p, &perms, mode).unwrap().value();
            prop_assert!(fused.max_abs_diff(&plain) <= 1e-12, "{:?}", mode);
        }
    }

    #[test]
    fn only_the_guidance_input_projection_drives_the_state(seed in 0u64..1000, bump in 0.1f64..2.0) {
        let rng = Rng::new(seed);
        let (d, n) = (3, 2);
        let p = CrossScanParams { p1: random_head(&rng, "p1", d, n), p2: random_head(&rng, "p2", d, n) };
        let x1 = rng.uniform("x1", &[5, d], 1.0);
        let x2 = rng.uniform("x2", &[5, d], 1.0);
        let bump_b_half = |head: &ScanParams| {
            let mut h = head.clone();
            let mut w = h.bc_w.to_vec();
            for r in 0..d {
                for k in 0..n {
                    w[r * 2 * n + k] += bump;
                }
            }
            h.bc_w = Tensor::new([d, 2 * n], w).unwrap();
            h
        };
        for mode in MODES {
            let run = |p: &CrossScanParams| {
                let tape = Tape::new();
                cross_scan_1d(tape.constant(x1.clone()), tape.constant(x2.clone()), p, mode, false).unwrap().0.value()
            };
            let base = run(&p);
            let own = run(&CrossScanParams { p1: bump_b_half(&p.p1), p2: p.p2.clone() });
            let guide = run(&CrossScanParams { p1: p.p1.clone(), p2: bump_b_half(&p.p2) });
            prop_assert_eq!(own.data(), base.data());
            prop_assert!(guide.max_abs_diff(&base) > 1e-9);
        }
    }

    #[test]
    fn averaged_transition_stays_contractive(seed in 0u64..1000, spread in 0.0f64..6.0) {
        let rng = Rng::new(seed);
        let p1 = random_head(&rng, "p1", 2, 3);
        let mut p2 = random_head(&rng, "p2", 2, 3);
        p2.a_log = p2.a_log.map(|v| spread * v);
        let x = rng.uniform("x", &[6, 2], 1.0);
        let tape = Tape::new();
        let pr1 = project_params(tape.constant(x.clone()), &p1).unwrap();
        let pr2 = project_params(tape.constant(x), &p2).unwrap();
        let (a_f, b) = cross_assign(effective_a(&tape, &p1), effective_a(&tape, &p2), pr1.b_seq, pr2.b_seq).unwrap();
        let (a_bar, _) = discretize(pr1.delta, a_f, b).unwrap();
        prop_assert!(a_bar.value().data().iter().all(|&a| a > 0.0 && a < 1.0));
    }
}
