use criterion::{criterion_group, criterion_main, Criterion};
use ifa_bench::desk_model;
use ifa_core::synth::gen_synth;
use ifa_core::AlignerKind;

fn bench_decode(c: &mut Criterion) {
    let sample = gen_synth(0, 0, 5, 64, 64);

    let ifa = desk_model(AlignerKind::Ifa);
    let pyr = ifa.pyramid(&sample.image).unwrap();
    let head = ifa.head.as_ref().unwrap();
    c.bench_function("ifa_decode_map_64", |b| {
        b.iter(|| head.decode_map(&ifa.store, &pyr, 64, 64).unwrap())
    });
    c.bench_function("ifa_decode_map_96", |b| {
        b.iter(|| head.decode_map(&ifa.store, &pyr, 96, 96).unwrap())
    });

    for kind in [AlignerKind::Bilinear, AlignerKind::UpsampleModule] {
        let model = desk_model(kind);
        c.bench_function(&format!("{}_forward_64", kind.name()), |b| {
            b.iter(|| model.predict(&sample.image, 64, 64).unwrap())
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_decode
}
criterion_main!(benches);
