//! Loss and optimizer values checked against closed forms and hand iteration.

use indexmap::IndexMap;

use nestedformer::autodiff::Graph;
use nestedformer::metrics::SegmentationMask;
use nestedformer::params::ParamStore;
use nestedformer::training::{adamw_step, combined_loss, cross_entropy_loss, soft_dice_loss, OptimState, TrainConfig};
use nestedformer::Tensor;

fn mask(labels: Vec<u8>, extents: [usize; 3], classes: usize) -> SegmentationMask {
    SegmentationMask::new(labels, extents, classes).unwrap()
}

#[test]
fn uniform_logits_give_ln_k_cross_entropy() {
    for k in [2usize, 3, 4, 7] {
        let m = mask((0..8).map(|i| (i % k) as u8).collect(), [2, 2, 2], k);
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![2, 2, 2, k]));
        let ce = cross_entropy_loss(&mut g, logits, &m).unwrap();
        assert!((g.value(ce).data()[0] - (k as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn soft_dice_matches_hand_computation() {
    // Two classes, uniform probabilities 0.5: per class 2·0.5·n_c/(0.5·N + n_c).
    let m = mask(vec![0, 0, 0, 1, 1, 1, 1, 1], [2, 2, 2], 2);
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(vec![2, 2, 2, 2]));
    let loss = soft_dice_loss(&mut g, logits, &m, 0.0).unwrap();
    let d0 = 2.0 * 0.5 * 3.0 / (4.0 + 3.0);
    let d1 = 2.0 * 0.5 * 5.0 / (4.0 + 5.0);
    assert!((g.value(loss).data()[0] - (1.0 - (d0 + d1) / 2.0)).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_have_near_zero_loss() {
    let labels: Vec<u8> = (0..27).map(|i| (i % 3) as u8).collect();
    let m = mask(labels.clone(), [3, 3, 3], 3);
    let mut data = vec![-30.0; 27 * 3];
    for (i, &l) in labels.iter().enumerate() {
        data[i * 3 + l as usize] = 30.0;
    }
    let mut g = Graph::new();
    let logits = g.constant(Tensor::new(vec![3, 3, 3, 3], data).unwrap());
    let t = combined_loss(&mut g, logits, &m, 1.0, 1.0, 1e-5).unwrap();
    assert!(g.value(t.total).data()[0] < 1e-9);
}

#[test]
fn combined_loss_is_linear_in_lambdas() {
    let m = mask(vec![0, 1, 2, 1, 0, 2, 2, 1], [2, 2, 2], 3);
    let data: Vec<f64> = (0..24).map(|i| ((i * 7919) % 13) as f64 / 5.0 - 1.0).collect();
    let eval = |ld: f64, lc: f64| {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![2, 2, 2, 3], data.clone()).unwrap());
        let t = combined_loss(&mut g, logits, &m, ld, lc, 1e-5).unwrap();
        [t.total, t.dice, t.ce].map(|v| g.value(v).data()[0])
    };
    let [_, dice, ce] = eval(1.0, 1.0);
    for (ld, lc) in [(0.0, 1.0), (1.0, 0.0), (0.3, 2.5), (4.0, 0.25)] {
        let [total, ..] = eval(ld, lc);
        assert!((total - (ld * dice + lc * ce)).abs() < 1e-12);
    }
}

#[test]
fn class_count_mismatch_is_rejected() {
    let m = mask(vec![0; 8], [2, 2, 2], 3);
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(vec![2, 2, 2, 4]));
    assert!(soft_dice_loss(&mut g, logits, &m, 1e-5).is_err());
}

#[test]
fn adamw_matches_hand_iteration() {
    let cfg = TrainConfig {
        lr: 0.1,
        weight_decay: 0.01,
        ..TrainConfig::default()
    };
    let grads_seq = [0.5, -1.0, 2.0, 0.0, 0.25];
    let mut params = ParamStore::new();
    params
        .insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())
        .unwrap();
    let mut state = OptimState::new(&params);

    let (b1, b2) = (0.9f64, 0.999f64);
    let mut want = [1.0f64, -2.0];
    let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
    for (t, &gv) in grads_seq.iter().enumerate() {
        let g = [gv, -3.0 * gv];
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![2], g.to_vec()).unwrap());
        adamw_step(&mut params, &grads, &mut state, &cfg).unwrap();

        let t = (t + 1) as i32;
        for i in 0..2 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            want[i] = want[i] * (1.0 - 0.1 * 0.01) - 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        let got = params.get("w").unwrap().data();
        for i in 0..2 {
            assert!((got[i] - want[i]).abs() < 1e-12, "step {t}: {} vs {}", got[i], want[i]);
        }
    }
    assert_eq!(state.step, grads_seq.len() as u64);
}

#[test]
fn adamw_rejects_non_finite_gradients_without_mutation() {
    let mut params = ParamStore::new();
    params.insert("a", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    params.insert("b", Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
    let before = params.clone();
    let mut state = OptimState::new(&params);
    let mut grads = IndexMap::new();
    grads.insert("a".to_string(), Tensor::new(vec![1], vec![1.0]).unwrap());
    grads.insert("b".to_string(), Tensor::new(vec![1], vec![f64::NAN]).unwrap());
    let err = adamw_step(&mut params, &grads, &mut state, &TrainConfig::default()).unwrap_err();
    assert!(err.to_string().contains("'b'"));
    assert_eq!(params, before);
    assert_eq!(state.step, 0);
}
