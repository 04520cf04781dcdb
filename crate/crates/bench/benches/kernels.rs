use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use geocd_core::confidence::scene_confidence;
use geocd_core::dataset::NormStats;
use geocd_core::model::{FcnConfig, FcnModel};
use geocd_core::raster::Raster;
use geocd_core::tensor::{Tape, Tensor4};
use geocd_core::unsup::{cva_magnitude, otsu_threshold};

fn ramp(shape: [usize; 4]) -> Tensor4<f32> {
    let n = shape.iter().product();
    Tensor4::new(
        shape,
        (0..n).map(|i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0).collect(),
    )
    .unwrap()
}

fn raster(h: usize, w: usize, c: usize, phase: usize) -> Raster {
    let data = (0..h * w * c)
        .map(|i| (((i + phase) * 2654435761) % 4096) as f32 / 4096.0)
        .collect();
    Raster::new(h, w, c, data).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = ramp([8, 16, 32, 32]);
    let k = ramp([16, 16, 3, 3]);
    let b = ramp([1, 16, 1, 1]);
    c.bench_function("conv2d forward 8x16x32x32", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (xv, kv, bv) = (t.input(x.clone()), t.input(k.clone()), t.input(b.clone()));
            black_box(t.conv2d(xv, kv, bv).unwrap());
        })
    });
    c.bench_function("conv2d forward+backward 8x16x32x32", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let kv = t.param(k.clone());
            let bv = t.param(b.clone());
            let y = t.conv2d(xv, kv, bv).unwrap();
            let seed = vec![1.0f32; t.value(y).len()];
            t.backward_with(y, &seed).unwrap();
            black_box(t.grad(kv).unwrap()[0]);
        })
    });
}

fn network(c: &mut Criterion) {
    let model = FcnModel::init(FcnConfig {
        base_channels: 8,
        depth: 2,
        ..FcnConfig::new(4, 2)
    })
    .unwrap();
    let (pre, post) = (raster(128, 128, 4, 0), raster(128, 128, 4, 1));
    c.bench_function("fcn forward 128x128 base 8 depth 2", |bench| {
        bench.iter(|| black_box(model.forward_logits(&pre, &post).unwrap()))
    });
    let logits = model.forward_logits(&pre, &post).unwrap();
    c.bench_function("scene confidence 128x128", |bench| {
        bench.iter(|| black_box(scene_confidence("s", &logits, None).unwrap()))
    });
}

fn fallback(c: &mut Criterion) {
    let (pre, post) = (raster(256, 256, 4, 0), raster(256, 256, 4, 3));
    let stats = NormStats::identity(4);
    c.bench_function("cva magnitude 256x256x4", |bench| {
        bench.iter(|| black_box(cva_magnitude(&pre, &post, &stats).unwrap()))
    });
    let m = cva_magnitude(&pre, &post, &stats).unwrap();
    c.bench_function("otsu threshold 65536 values", |bench| {
        bench.iter_batched(
            || m.values().to_vec(),
            |v| black_box(otsu_threshold(&v).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, conv, network, fallback);
criterion_main!(benches);
