use std::collections::BTreeSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use streamdet_bench::fixture_dataset;
use streamdet_core::eval::{nms, MAX_DETECTIONS, NMS_IOU};
use streamdet_core::head::{roi_pool, HeadConfig, HeadParams, SgdConfig, SgdState};
use streamdet_core::pq::{all_locations, train_pq, PqConfig};
use streamdet_core::slda::{l2_normalize, SldaLabel, SldaModel};
use streamdet_core::targets::{label_proposals, sample_minibatch, TargetConfig};
use streamdet_core::{iou, ClassId, Detection};

fn quantizer(c: &mut Criterion) {
    let ds = fixture_dataset(10);
    let maps: Vec<_> = ds.images.values().map(|r| r.features.clone()).collect();
    let samples: Vec<Vec<f32>> = maps.iter().take(40).flat_map(all_locations).collect();
    let pq = train_pq(&samples, &PqConfig { num_codebooks: 8, codebook_size: 256, iters: 10, seed: 1 }).unwrap();
    let codes = pq.encode(&maps[0]).unwrap();
    c.bench_function("pq_encode_5x5x64", |b| b.iter(|| pq.encode(black_box(&maps[0])).unwrap()));
    c.bench_function("pq_decode_5x5x64", |b| b.iter(|| pq.decode(black_box(&codes)).unwrap()));
}

fn suppression(c: &mut Criterion) {
    let ds = fixture_dataset(2);
    let rec = ds.images.values().next().unwrap();
    let dets: Vec<Detection> = rec
        .proposals
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| Detection::new(*b, ClassId(1 + (i % 4) as u32), (i * 37 % 101) as f64 / 101.0).unwrap())
        .collect();
    let (a, b) = (rec.proposals.boxes[0], rec.proposals.boxes[1]);
    c.bench_function("iou", |bench| bench.iter(|| iou(black_box(&a), black_box(&b))));
    c.bench_function("nms_100_boxes_4_classes", |bench| bench.iter(|| nms(black_box(&dets), NMS_IOU, MAX_DETECTIONS)));
}

fn head_step(c: &mut Criterion) {
    let ds = fixture_dataset(4);
    let classes: Vec<ClassId> = (1..=10).map(ClassId).collect();
    let visible: BTreeSet<ClassId> = classes.iter().copied().collect();
    let cfg = HeadConfig { hidden: 64, pool_bins: [2, 2] };
    let mut params = HeadParams::new(&cfg, 64, &classes, 3).unwrap();
    let mut sgd = SgdState::new(SgdConfig::default(), &params);
    // four images of 64 regions each, as in one replay update
    let mut batch = Vec::new();
    for (i, rec) in ds.images.values().take(4).enumerate() {
        let labeled = label_proposals(&rec.proposals, &rec.annotation, 0.5, &visible).unwrap();
        for t in sample_minibatch(&labeled, &TargetConfig::default(), i as u64).targets {
            let (w, h) = (rec.annotation.image_w as f64, rec.annotation.image_h as f64);
            batch.push((roi_pool(&rec.features, &t.bbox, w, h, cfg.pool_bins).unwrap(), t));
        }
    }
    c.bench_function("head_sgd_step_256_regions", |b| {
        b.iter(|| {
            let (_, grads) = params.loss_and_grads(black_box(&batch)).unwrap();
            params.sgd_step(&mut sgd, &grads).unwrap();
        })
    });
}

fn slda_update(c: &mut Criterion) {
    let ds = fixture_dataset(2);
    let mut xs: Vec<Vec<f64>> = ds
        .images
        .values()
        .map(|r| r.features.values().iter().take(256).map(|&v| v as f64).collect())
        .collect();
    for x in &mut xs {
        l2_normalize(x).unwrap();
    }
    let mut model = SldaModel::new(256).unwrap();
    model.add_class(ClassId(1)).unwrap();
    let mut i = 0;
    c.bench_function("slda_fit_d256", |b| {
        b.iter(|| {
            model.fit(black_box(&xs[i % xs.len()]), SldaLabel::Class(ClassId(1)), true).unwrap();
            i += 1;
        })
    });
}

criterion_group!(benches, quantizer, suppression, head_step, slda_update);
criterion_main!(benches);
