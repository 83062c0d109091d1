use advdef_core::evaluation::success_auc_of;
use advdef_core::geometry::{decode_box, encode};
use advdef_core::{iou, BBox};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn boxes() -> Vec<BBox> {
    (0..1000)
        .map(|i| {
            let f = i as f64;
            BBox::new(f % 97.0, (f * 7.0) % 89.0, 10.0 + f % 13.0, 12.0 + f % 11.0).unwrap()
        })
        .collect()
}

fn geometry(c: &mut Criterion) {
    let bs = boxes();
    c.bench_function("iou_1000_pairs", |b| {
        b.iter(|| bs.windows(2).map(|w| iou(&w[0], &w[1])).sum::<f64>())
    });
    c.bench_function("encode_decode_1000", |b| {
        b.iter(|| {
            bs.windows(2)
                .map(|w| decode_box(&w[0], encode(&w[0], &w[1])).w)
                .sum::<f64>()
        })
    });
    let ious: Vec<f64> = (0..10_000).map(|i| (i % 101) as f64 / 100.0).collect();
    c.bench_function("success_auc_10k_frames", |b| b.iter(|| success_auc_of(black_box(&ious))));
}

criterion_group!(benches, geometry);
criterion_main!(benches);
