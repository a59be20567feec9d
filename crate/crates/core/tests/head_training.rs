use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamdet_core::head::{HeadConfig, HeadParams, HeadTensors, SgdConfig, SgdState};
use streamdet_core::targets::RoiTarget;
use streamdet_core::{BoundingBox, ClassId};

fn target(class: u32, deltas: Option<[f64; 4]>) -> RoiTarget {
    RoiTarget {
        bbox: BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap(),
        class_id: ClassId(class),
        deltas,
        matched_gt: None,
    }
}

fn flat(t: &HeadTensors) -> Vec<f64> {
    t.values()
}

fn flat_mut(t: &mut HeadTensors) -> Vec<&mut f64> {
    t.values_mut()
}

#[test]
fn analytic_gradients_match_central_differences() {
    let cfg = HeadConfig { hidden: 6, pool_bins: [2, 1] };
    let params = HeadParams::new(&cfg, 2, &[ClassId(1), ClassId(2), ClassId(3)], 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch: Vec<(Vec<f64>, RoiTarget)> = (0..6)
        .map(|i| {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let class = (i % 4) as u32;
            let d = (class > 0).then(|| [0.3, -0.2, 0.1, 0.05 * i as f64]);
            (x, target(class, d))
        })
        .collect();
    let (_, grads) = params.loss_and_grads(&batch).unwrap();
    let analytic = flat(&grads);

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for idx in 0..analytic.len() {
        let mut plus = params.clone();
        *flat_mut(&mut plus.tensors)[idx] += h;
        let mut minus = params.clone();
        *flat_mut(&mut minus.tensors)[idx] -= h;
        let lp = plus.loss_and_grads(&batch).unwrap().0;
        let lm = minus.loss_and_grads(&batch).unwrap().0;
        let numeric = (lp - lm) / (2.0 * h);
        let denom = analytic[idx].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[idx] - numeric).abs() / denom);
    }
    assert!(worst < 1e-4, "worst relative gradient error {worst}");
}

#[test]
fn separable_toy_problem_is_learned() {
    // three well separated clusters in the pooled space, class 0 is background
    let cfg = HeadConfig { hidden: 16, pool_bins: [1, 1] };
    let mut params = HeadParams::new(&cfg, 4, &[ClassId(1), ClassId(2)], 3).unwrap();
    let mut sgd = SgdState::new(SgdConfig { learning_rate: 0.05, momentum: 0.9, weight_decay: 5e-4 }, &params);
    let centers = [[2.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0], [0.0, 0.0, 2.0, 0.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sample = |rng: &mut ChaCha8Rng| -> (Vec<f64>, RoiTarget) {
        let c = rng.random_range(0..3usize);
        let x = centers[c].iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        (x, target(c as u32, (c > 0).then_some([0.0; 4])))
    };
    let test: Vec<_> = (0..300).map(|_| sample(&mut rng)).collect();
    let accuracy = |p: &HeadParams| {
        test.iter()
            .filter(|(x, t)| {
                let (probs, _) = p.predict(x).unwrap();
                let best = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
                best == t.class_id.0 as usize
            })
            .count() as f64
            / test.len() as f64
    };
    let mut reached = None;
    for step in 0..500 {
        let batch: Vec<_> = (0..16).map(|_| sample(&mut rng)).collect();
        let (_, g) = params.loss_and_grads(&batch).unwrap();
        params.sgd_step(&mut sgd, &g).unwrap();
        if accuracy(&params) == 1.0 {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some(), "toy accuracy {}", accuracy(&params));
}
