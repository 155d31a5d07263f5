use agcm_bench::{agcm_fixture, network_fixture, random};
use agcm_core::tensor::ConvGeometry;
use agcm_core::training::{bce_loss, TrainConfig, Trainer};
use agcm_core::Tape;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for (channels, size) in [(8, 64), (32, 16), (64, 8)] {
        let x = random(&[channels, size, size], 0);
        let k = random(&[channels, channels, 3, 3], 1);
        let geom = ConvGeometry::new(1, 1, 1);
        group.bench_with_input(BenchmarkId::new("forward", format!("{channels}x{size}")), &(), |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
                black_box(tape.conv2d(xv, kv, geom).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("backward", format!("{channels}x{size}")), &(), |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, kv) = (tape.param(x.clone()), tape.param(k.clone()));
                let y = tape.conv2d(xv, kv, geom).unwrap();
                let s = tape.sum_all(y).unwrap();
                tape.backward(s).unwrap();
                black_box(tape.grad(kv));
            })
        });
    }
    group.finish();
}

fn agcm(c: &mut Criterion) {
    let mut group = c.benchmark_group("agcm");
    for (channels, size) in [(32, 4), (64, 2), (16, 16)] {
        let (module, store, input) = agcm_fixture(channels, size);
        let id = format!("{channels}x{size}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let params = store.bind_frozen(&mut tape);
                let x = tape.constant(input.clone());
                black_box(module.forward(&mut tape, &params, x).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", &id), &(), |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let params = store.bind(&mut tape);
                let x = tape.constant(input.clone());
                let y = module.forward(&mut tape, &params, x).unwrap();
                let s = tape.sum_all(y).unwrap();
                tape.backward(s).unwrap();
                black_box(params.grads(&tape));
            })
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let (net, store, samples) = network_fixture(4);
    let sample = &samples[0];
    let mut group = c.benchmark_group("model_64x64");
    group.sample_size(20);
    group.bench_function("predict", |b| b.iter(|| black_box(net.predict(&store, &sample.image).unwrap())));
    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let params = store.bind(&mut tape);
            let x = tape.constant(sample.image.clone());
            let y = net.forward(&mut tape, &params, x).unwrap();
            let loss = bce_loss(&mut tape, y, &sample.mask).unwrap();
            tape.backward(loss).unwrap();
            black_box(params.grads(&tape));
        })
    });
    let trainer = Trainer::new(&net, TrainConfig { batch_size: 4, ..TrainConfig::default() }, &samples).unwrap();
    group.bench_function("train_step_batch4", |b| {
        let mut state = trainer.init_state().unwrap();
        b.iter(|| black_box(trainer.train_step(&mut state, &[0, 1, 2, 3]).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, conv2d, agcm, model);
criterion_main!(benches);
