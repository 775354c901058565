//! Masking procedures: action split, tube geometry, span coverage, and
//! structural invariants under random inputs.

use icode::masking::{
    mask_language, pullback_mask, span_mask, span_mask_plan, tube_mask, tube_mask_plan, MaskAction, MaskingConfig,
};
use icode::numkit::{Rng, Tensor};
use proptest::prelude::*;

const VOCAB: usize = 256;
const MASK_ID: usize = 1;

#[test]
fn mlm_action_split_over_100k_draws() {
    let tokens: Vec<usize> = (100..110).collect();
    let pad = [false; 10];
    let mut counts = [0usize; 3];
    let mut total = 0;
    let mut call = 0u64;
    while total < 100_000 {
        let mut rng = Rng::keyed(17, &[call]);
        let (_, plan) = mask_language(&tokens, &pad, &mut rng, 0.3, VOCAB, MASK_ID).unwrap();
        for a in plan.actions {
            counts[match a {
                MaskAction::MaskToken => 0,
                MaskAction::Random => 1,
                MaskAction::Keep => 2,
            }] += 1;
            total += 1;
        }
        call += 1;
    }
    let frac: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    for (f, want) in frac.iter().zip([0.8, 0.1, 0.1]) {
        assert!((f - want).abs() <= 0.005, "split {frac:?}");
    }
}

#[test]
fn tube_count_and_per_frame_pattern_on_16x16x4() {
    let cfg = MaskingConfig::default();
    for seed in 0..200 {
        let mut rng = Rng::new(seed);
        let plan = tube_mask_plan(16, 16, 4, &mut rng, &cfg).unwrap();
        let frame = |k: usize| -> Vec<bool> { (0..256).map(|c| plan.positions[c * 4 + k]).collect() };
        let active: Vec<usize> = (0..4).filter(|&k| frame(k).iter().any(|&m| m)).collect();
        assert!(active.len() >= 2, "tube length {} below ceil(T'/2)", active.len());
        assert!(active.windows(2).all(|w| w[1] == w[0] + 1), "tube not contiguous: {active:?}");
        let pattern = frame(active[0]);
        assert_eq!(pattern.iter().filter(|&&m| m).count(), 128);
        for &k in &active {
            assert_eq!(frame(k), pattern, "seed {seed} frame {k}");
        }
    }
}

#[test]
fn tube_mask_writes_embedding_into_masked_cells_only() {
    let grid = Tensor::new(vec![4, 4, 2, 3], (0..96).map(|v| v as f64).collect()).unwrap();
    let fill = [-1.0, -2.0, -3.0];
    let mut rng = Rng::new(5);
    let (out, plan) = tube_mask(&grid, &mut rng, &MaskingConfig::default(), &fill).unwrap();
    for (r, &m) in plan.positions.iter().enumerate() {
        let row = &out.data()[r * 3..r * 3 + 3];
        if m {
            assert_eq!(row, fill);
        } else {
            assert_eq!(row, &grid.data()[r * 3..r * 3 + 3]);
        }
    }
}

/// Exact expected coverage by brute force: average over every set of
/// `starts` distinct starts of the fraction of steps covered.
fn enumerated_span_coverage(f: usize, starts: usize, len: usize) -> f64 {
    fn walk(f: usize, len: usize, from: usize, left: usize, chosen: &mut Vec<usize>, acc: &mut (f64, u64)) {
        if left == 0 {
            let mut cov = vec![false; f];
            for &s in chosen.iter() {
                for c in cov.iter_mut().skip(s).take(len) {
                    *c = true;
                }
            }
            acc.0 += cov.iter().filter(|&&c| c).count() as f64 / f as f64;
            acc.1 += 1;
            return;
        }
        for s in from..f {
            chosen.push(s);
            walk(f, len, s + 1, left - 1, chosen, acc);
            chosen.pop();
        }
    }
    let mut acc = (0.0, 0);
    walk(f, len, 0, starts, &mut Vec::new(), &mut acc);
    acc.0 / acc.1 as f64
}

/// Exact expected coverage in closed form: step `t` stays unmasked only if
/// none of the `min(t + 1, len)` starts that reach it is drawn.
fn closed_form_span_coverage(f: usize, starts: usize, len: usize) -> f64 {
    let choose = |n: usize, k: usize| -> f64 {
        if k > n {
            return 0.0;
        }
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    };
    let all = choose(f, starts);
    (0..f)
        .map(|t| 1.0 - choose(f - (t + 1).min(len), starts) / all)
        .sum::<f64>()
        / f as f64
}

#[test]
fn span_coverage_matches_reference() {
    const REFERENCE: f64 = 0.5608324636236144;
    for (f, starts, len) in [(50, 4, 10), (30, 3, 7), (12, 5, 3)] {
        let brute = enumerated_span_coverage(f, starts, len);
        let closed = closed_form_span_coverage(f, starts, len);
        assert!((brute - closed).abs() < 1e-12, "{f}/{starts}/{len}: {brute} vs {closed}");
    }
    let exact = closed_form_span_coverage(100, 8, 10);
    assert!((exact - REFERENCE).abs() < 1e-12, "closed form {exact}");
    let draws = 20_000;
    let mean = (0..draws)
        .map(|i| {
            let mut rng = Rng::keyed(99, &[i]);
            let plan = span_mask_plan(100, &mut rng, 0.08, 10).unwrap();
            plan.num_masked() as f64 / 100.0
        })
        .sum::<f64>()
        / draws as f64;
    assert!((mean - REFERENCE).abs() <= 0.003, "mean coverage {mean}");
}

#[test]
fn span_edge_cases() {
    let mut rng = Rng::new(1);
    let plan = span_mask_plan(5, &mut rng, 1.0, 10).unwrap();
    assert_eq!(plan.num_masked(), 5);
    assert!(span_mask_plan(0, &mut rng, 0.08, 10).is_err());
    let feats = Tensor::new(vec![3, 2], vec![0.0f32; 6]).unwrap();
    assert!(span_mask(&feats, &mut rng, 0.5, 2, &[1.0]).is_err());
}

fn language_case() -> impl Strategy<Value = (Vec<usize>, Vec<bool>, f64, u64)> {
    (1usize..40).prop_flat_map(|n| {
        (
            proptest::collection::vec(4usize..VOCAB, n),
            proptest::collection::vec(any::<bool>(), n),
            0.0f64..=1.0,
            any::<u64>(),
        )
    })
}

proptest! {
    #[test]
    fn language_mask_invariants((tokens, mut pad, ratio, seed) in language_case()) {
        pad[0] = false;
        let mut rng = Rng::new(seed);
        let (out, plan) = mask_language(&tokens, &pad, &mut rng, ratio, VOCAB, MASK_ID).unwrap();
        let live = pad.iter().filter(|&&p| !p).count();
        let want = ((ratio * live as f64).round() as usize).clamp(1, live);
        prop_assert_eq!(plan.num_masked(), want);
        prop_assert_eq!(plan.actions.len(), want);
        let idx = plan.masked_indices();
        for (j, &i) in idx.iter().enumerate() {
            prop_assert!(!pad[i]);
            prop_assert_eq!(plan.targets[j], tokens[i]);
            match plan.actions[j] {
                MaskAction::MaskToken => prop_assert_eq!(out[i], MASK_ID),
                MaskAction::Keep => prop_assert_eq!(out[i], tokens[i]),
                MaskAction::Random => prop_assert!(out[i] < VOCAB),
            }
        }
        for i in (0..tokens.len()).filter(|i| !plan.positions[*i]) {
            prop_assert_eq!(out[i], tokens[i]);
        }
    }

    #[test]
    fn language_mask_is_deterministic((tokens, pad, ratio, seed) in language_case()) {
        let mut pad = pad;
        pad[0] = false;
        let a = mask_language(&tokens, &pad, &mut Rng::new(seed), ratio, VOCAB, MASK_ID).unwrap();
        let b = mask_language(&tokens, &pad, &mut Rng::new(seed), ratio, VOCAB, MASK_ID).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn tube_invariants(w in 1usize..10, h in 2usize..10, t in 1usize..6, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let cfg = MaskingConfig { tube_ratio: ratio, ..MaskingConfig::default() };
        let plan = tube_mask_plan(w, h, t, &mut Rng::new(seed), &cfg).unwrap();
        let cells = ((ratio * (w * h) as f64).round() as usize).min(w * h);
        let per_cell: Vec<usize> = (0..w * h).map(|c| (0..t).filter(|&k| plan.positions[c * t + k]).count()).collect();
        let masked_cells = per_cell.iter().filter(|&&n| n > 0).count();
        prop_assert_eq!(masked_cells, cells);
        if cells > 0 {
            let len = *per_cell.iter().max().unwrap();
            prop_assert!(per_cell.iter().all(|&n| n == 0 || n == len));
            prop_assert!(len >= t.div_ceil(2) && len <= t);
            prop_assert_eq!(plan.num_masked(), cells * len);
        }
    }

    #[test]
    fn span_invariants(f in 1usize..200, p in 0.0f64..=1.0, len in 1usize..20, seed in any::<u64>()) {
        let plan = span_mask_plan(f, &mut Rng::new(seed), p, len).unwrap();
        let starts = ((p * f as f64).round() as usize).min(f);
        let n = plan.num_masked();
        prop_assert!(n <= (starts * len).min(f));
        if starts > 0 {
            prop_assert!(n >= starts.min(f));
        } else {
            prop_assert_eq!(n, 0);
        }
    }

    #[test]
    fn pullback_of_full_and_empty_masks(pw in 1usize..9, ph in 1usize..9, pt in 1usize..5, tw in 1usize..9, th in 1usize..9, tt in 1usize..9) {
        let n = pw * ph * pt;
        let all = pullback_mask(&vec![true; n], pw, ph, pt, tw, th, tt).unwrap();
        prop_assert!(all.iter().all(|&m| m));
        let none = pullback_mask(&vec![false; n], pw, ph, pt, tw, th, tt).unwrap();
        prop_assert!(none.iter().all(|&m| !m));
        prop_assert_eq!(all.len(), tw * th * tt);
    }
}
