mod common;

use cascade_core::autodiff::{Graph, Var};
use cascade_core::loss::{
    apply_roi_mask, combined_loss, cross_entropy, dice_loss_binary, soft_dice_region, LossConfig, Reduction, DICE_EPSILON,
};
use cascade_core::metrics::Region;
use cascade_core::tensor::Tensor;
use cascade_core::volume::{LabelVolume, Mask};
use proptest::prelude::*;
use rand::Rng;

const EPS: f64 = DICE_EPSILON;

/// Random per-voxel distributions over `c` channels, `[1, c, 1, 1, n]`.
fn random_probs(seed: u64, c: usize, n: usize) -> Tensor<f64> {
    let mut rng = common::rng(seed);
    let mut data = vec![0.0; c * n];
    for i in 0..n {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for ch in 0..c {
            data[ch * n + i] = raw[ch] / s;
        }
    }
    Tensor::from_vec(&[1, c, 1, 1, n], data).unwrap()
}

fn one_hot(labels: &[u8]) -> Tensor<f64> {
    let n = labels.len();
    let mut data = vec![0.0; 4 * n];
    for (i, &l) in labels.iter().enumerate() {
        let ch = [0, 1, 2, 4].iter().position(|&x| x == l).unwrap();
        data[ch * n + i] = 1.0;
    }
    Tensor::from_vec(&[1, 4, 1, 1, n], data).unwrap()
}

fn labels(v: &[u8]) -> LabelVolume {
    LabelVolume::from_vec([1, 1, v.len()], v.to_vec()).unwrap()
}

fn value(f: impl FnOnce(&mut Graph<f64>) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).item()
}

#[test]
fn full_mask_is_a_no_op() {
    let p = random_probs(1, 4, 10);
    let mut g = Graph::new();
    let v = g.constant(p.clone());
    let out = apply_roi_mask(&mut g, v, &Mask::full([1, 1, 10])).unwrap();
    assert_eq!(g.value(out), &p);
}

#[test]
fn empty_mask_gives_background_and_blocks_every_gradient() {
    let p = random_probs(2, 4, 6);
    let mut g = Graph::new();
    let v = g.param(p);
    let out = apply_roi_mask(&mut g, v, &Mask::empty([1, 1, 6])).unwrap();
    let expect = one_hot(&[0; 6]);
    assert_eq!(g.value(out), &expect);
    let roi = Mask::full([1, 1, 6]);
    let loss = combined_loss(&mut g, out, &labels(&[4, 2, 1, 0, 4, 2]), &roi, &LossConfig::default()).unwrap();
    g.backward(loss.total).unwrap();
    assert!(g.grad(v).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn half_split_mask_matches_elementwise_construction() {
    let n = 8;
    let p = random_probs(3, 4, n);
    let mask = Mask::new([1, 1, n], (0..n).map(|i| i < n / 2).collect()).unwrap();
    let mut g = Graph::new();
    let v = g.constant(p.clone());
    let out = apply_roi_mask(&mut g, v, &mask).unwrap();
    let got = g.value(out).data();
    for ch in 0..4 {
        for i in 0..n {
            let want = if i < n / 2 {
                p.data()[ch * n + i]
            } else if ch == 0 {
                1.0
            } else {
                0.0
            };
            assert_eq!(got[ch * n + i].to_bits(), want.to_bits(), "channel {ch} voxel {i}");
        }
    }
}

#[test]
fn mask_shape_mismatch_is_rejected() {
    let mut g = Graph::new();
    let v = g.constant(random_probs(4, 4, 6));
    assert!(apply_roi_mask(&mut g, v, &Mask::full([1, 1, 5])).is_err());
}

fn binary_loss(p: &[f64], l: &[bool], eps: f64) -> f64 {
    let n = p.len();
    value(|g| {
        let t = g.constant(Tensor::from_vec(&[1, 1, 1, 1, n], p.to_vec()).unwrap());
        let lm = Mask::new([1, 1, n], l.to_vec()).unwrap();
        dice_loss_binary(g, t, &lm, &Mask::full([1, 1, n]), eps).unwrap()
    })
}

#[test]
fn binary_dice_examples() {
    assert!(binary_loss(&[1.0, 0.0, 1.0, 0.0], &[true, false, true, false], EPS).abs() < 1e-12);
    assert!((binary_loss(&[1.0, 0.0, 0.0, 0.0], &[false, true, false, false], EPS) - 1.0).abs() < 1e-5);
    assert!((binary_loss(&[0.5; 4], &[true, false, false, false], 0.0) - 2.0 / 3.0).abs() < 1e-12);
    // empty prediction and empty labels
    assert_eq!(binary_loss(&[0.0; 4], &[false; 4], EPS), 0.0);
}

fn region_loss(p: &Tensor<f64>, l: &[u8], r: Region) -> f64 {
    let n = l.len();
    value(|g| {
        let v = g.constant(p.clone());
        soft_dice_region(g, v, &labels(l), r, &Mask::full([1, 1, n]), EPS).unwrap()
    })
}

#[test]
fn region_dice_examples() {
    let l = [0, 1, 2, 4, 4, 0];
    for r in Region::ALL {
        assert!(region_loss(&one_hot(&l), &l, r).abs() < 1e-12, "{r:?}");
        assert_eq!(region_loss(&one_hot(&[0; 6]), &[0; 6], r), 0.0, "{r:?}");
    }
    // labels (4, 2), prediction one-hot (4, 4)
    let p = one_hot(&[4, 4]);
    let et = region_loss(&p, &[4, 2], Region::Enhancing);
    assert!((et - (1.0 - (2.0 + EPS) / (3.0 + EPS))).abs() < 1e-15);
    assert!((et - 1.0 / 3.0).abs() < 1e-5);
    assert_eq!(region_loss(&p, &[4, 2], Region::Whole), 0.0);
}

#[test]
fn cross_entropy_examples() {
    let l = [0, 1, 2, 4, 2];
    let roi = Mask::full([1, 1, 5]);
    let xe = |p: Tensor<f64>| value(|g| {
        let v = g.constant(p);
        cross_entropy(g, v, &labels(&l), &roi, Reduction::Mean).unwrap()
    });
    assert!(xe(one_hot(&l)).abs() < 1e-12);
    let uniform = Tensor::full(&[1, 4, 1, 1, 5], 0.25);
    assert!((xe(uniform) - 4f64.ln()).abs() < 1e-12);

    let n = 40;
    let p = random_probs(5, 4, n);
    let mut rng = common::rng(6);
    let lv: Vec<u8> = (0..n).map(|_| [0, 1, 2, 4][rng.random_range(0..4)]).collect();
    let roi = Mask::new([1, 1, n], (0..n).map(|_| rng.random_bool(0.6)).collect()).unwrap();
    let mut sum = 0.0;
    for i in 0..n {
        if roi.bits()[i] {
            let ch = [0, 1, 2, 4].iter().position(|&x| x == lv[i]).unwrap();
            sum -= p.data()[ch * n + i].max(1e-12).ln();
        }
    }
    let got = value(|g| {
        let v = g.constant(p.clone());
        cross_entropy(g, v, &labels(&lv), &roi, Reduction::Mean).unwrap()
    });
    assert!((got - sum / roi.count() as f64).abs() < 1e-6);
    let total = value(|g| {
        let v = g.constant(p.clone());
        cross_entropy(g, v, &labels(&lv), &roi, Reduction::Sum).unwrap()
    });
    assert!((total - sum).abs() < 1e-9);
}

#[test]
fn cross_entropy_rejects_an_empty_roi() {
    let mut g = Graph::new();
    let v = g.constant(one_hot(&[0, 1]));
    assert!(cross_entropy(&mut g, v, &labels(&[0, 1]), &Mask::empty([1, 1, 2]), Reduction::Mean).is_err());
}

#[test]
fn combined_loss_is_the_weighted_sum_of_its_terms() {
    let l = [0, 1, 2, 4];
    let roi = Mask::full([1, 1, 4]);
    let total = |p: Tensor<f64>, l: &[u8], cfg: &LossConfig| value(|g| {
        let v = g.constant(p);
        combined_loss(g, v, &labels(l), &roi, cfg).unwrap().total
    });
    assert!(total(one_hot(&l), &l, &LossConfig::default()).abs() < 1e-9);

    // uniform prediction on background-only labels, term by term
    let uniform = Tensor::full(&[1, 4, 1, 1, 4], 0.25);
    let bg = [0u8; 4];
    let dice_sum: f64 = Region::ALL.iter().map(|&r| region_loss(&uniform, &bg, r)).sum();
    // each region has q = 0, so its loss is 1 - eps / (sum p + eps)
    let hand: f64 = [0.25 * 4.0, 0.75 * 4.0, 0.5 * 4.0].iter().map(|s| 1.0 - EPS / (s + EPS)).sum();
    assert!((dice_sum - hand).abs() < 1e-12);
    let got = total(uniform.clone(), &bg, &LossConfig::default());
    assert!((got - (4f64.ln() + 0.5 * hand)).abs() < 1e-12);

    let p = random_probs(7, 4, 4);
    let no_dice = LossConfig {
        dice_weight: 0.0,
        ..LossConfig::default()
    };
    let xe = value(|g| {
        let v = g.constant(p.clone());
        cross_entropy(g, v, &labels(&l), &roi, Reduction::Mean).unwrap()
    });
    assert_eq!(total(p, &l, &no_dice), xe);
}

#[test]
fn losses_match_finite_differences() {
    let n = 12;
    let mut rng = common::rng(8);
    let lv: Vec<u8> = (0..n).map(|_| [0, 1, 2, 4][rng.random_range(0..4)]).collect();
    let roi = Mask::new([1, 1, n], (0..n).map(|i| i % 5 != 0).collect()).unwrap();
    let lab = labels(&lv);
    let p = random_probs(9, 4, n);
    let report = common::grad_check(&[p.clone()], 1e-6, 1e-4, 1e-8, |g, v| {
        let masked = apply_roi_mask(g, v[0], &roi).unwrap();
        combined_loss(g, masked, &lab, &roi, &LossConfig::default()).unwrap().total
    });
    assert!(report.failures.is_empty(), "worst {}", report.worst);
    assert!(report.checked > 0);

    let tumor = random_probs(10, 1, n);
    let target = lab.indicator(&[1, 2, 4]);
    let report = common::grad_check(&[tumor], 1e-6, 1e-4, 1e-8, |g, v| {
        dice_loss_binary(g, v[0], &target, &roi, EPS).unwrap()
    });
    assert!(report.failures.is_empty(), "worst {}", report.worst);
}

fn permute(t: &[f64], c: usize, n: usize, perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    for ch in 0..c {
        for (i, &j) in perm.iter().enumerate() {
            out[ch * n + i] = t[ch * n + j];
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_losses_ignore_voxel_order(seed in any::<u64>(), n in 2usize..30, perm_seed in any::<u64>()) {
        let p = random_probs(seed, 4, n);
        let mut rng = common::rng(seed ^ 0x55);
        let lv: Vec<u8> = (0..n).map(|_| [0, 1, 2, 4][rng.random_range(0..4)]).collect();
        let roi: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut prng = common::rng(perm_seed);
        for i in (1..n).rev() {
            perm.swap(i, prng.random_range(0..=i));
        }
        let pp = Tensor::from_vec(&[1, 4, 1, 1, n], permute(p.data(), 4, n, &perm)).unwrap();
        let lp: Vec<u8> = perm.iter().map(|&j| lv[j]).collect();
        let rp: Vec<bool> = perm.iter().map(|&j| roi[j]).collect();
        let eval = |p: &Tensor<f64>, l: &[u8], r: &[bool], region: Region| value(|g| {
            let v = g.constant(p.clone());
            soft_dice_region(g, v, &labels(l), region, &Mask::new([1, 1, n], r.to_vec()).unwrap(), EPS).unwrap()
        });
        for region in Region::ALL {
            let a = eval(&p, &lv, &roi, region);
            let b = eval(&pp, &lp, &rp, region);
            prop_assert!((a - b).abs() < 1e-12, "{region:?}: {a} vs {b}");
        }
    }

    #[test]
    fn raising_tumor_probability_on_tumor_never_hurts(seed in any::<u64>(), n in 2usize..20, bump in 0.0f64..1.0) {
        let p = random_probs(seed, 2, n);
        let mut rng = common::rng(seed ^ 0xaa);
        let l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let Some(k) = l.iter().position(|&x| x) else { return Ok(()); };
        let tumor: Vec<f64> = p.data()[n..].to_vec();
        let mut raised = tumor.clone();
        // renormalised two-class softmax: background takes the remainder
        raised[k] += bump * (1.0 - raised[k]);
        let before = binary_loss(&tumor, &l, EPS);
        let after = binary_loss(&raised, &l, EPS);
        prop_assert!(after <= before + 1e-12, "{before} -> {after}");
    }
}
