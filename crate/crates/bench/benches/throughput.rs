use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use unet_denoise::dsp::{stft_magnitude, StftResolution};
use unet_denoise::loss::{total_loss, LossMode, MstftConfig};
use unet_denoise::{new_stream, Graph, Model, ModelConfig, Tensor};

fn signal(n: usize) -> Vec<f32> {
    (0..n).map(|i| ((i as f32) * 0.013).sin() * 0.3 + ((i * 7919 % 101) as f32 / 101.0 - 0.5) * 0.1).collect()
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    let x = signal(16000);
    for blocks in [3, 5] {
        let model = Model::<f32>::build(ModelConfig::full(64, blocks), 0).unwrap();
        let t = Tensor::new([1, x.len()], x.clone()).unwrap();
        group.throughput(Throughput::Elements(x.len() as u64));
        group.bench_with_input(BenchmarkId::new("full_1s", blocks), &t, |b, t| b.iter(|| model.forward(t).unwrap()));
    }
    group.finish();
}

fn stream_chunks(c: &mut Criterion) {
    let mut group = c.benchmark_group("stream");
    group.sample_size(10);
    let model = Model::<f32>::build(ModelConfig::full(64, 5), 0).unwrap();
    let x = signal(16000);
    for chunk in [256, 4096] {
        group.throughput(Throughput::Elements(x.len() as u64));
        group.bench_with_input(BenchmarkId::new("full_1s", chunk), &chunk, |b, &chunk| {
            b.iter(|| {
                let mut st = new_stream(&model);
                let mut n = 0;
                for part in x.chunks(chunk) {
                    n += st.feed(part).unwrap().len();
                }
                n + st.flush().unwrap().len()
            })
        });
    }
    group.finish();
}

fn stft(c: &mut Criterion) {
    let x = signal(16000);
    let mut group = c.benchmark_group("stft");
    for res in StftResolution::standard_set() {
        group.bench_with_input(BenchmarkId::from_parameter(res.n_fft()), &res, |b, &res| b.iter(|| stft_magnitude(&x, res).unwrap()));
    }
    group.finish();
}

fn loss_backward(c: &mut Criterion) {
    let x = signal(16000);
    let y: Vec<f32> = x.iter().map(|v| v * 0.9 + 0.01).collect();
    let cfg = MstftConfig::default();
    c.bench_function("loss/l1_full_backward_1s", |b| {
        b.iter(|| {
            let g = Graph::<f32>::new();
            let r = g.constant(Tensor::new([1, x.len()], x.clone()).unwrap());
            let e = g.leaf(Tensor::new([1, y.len()], y.clone()).unwrap());
            let (l, _) = total_loss(&g, &r, &e, LossMode::L1Full, &cfg, 0.5).unwrap();
            g.backward(&l).unwrap()
        })
    });
}

criterion_group!(benches, forward, stream_chunks, stft, loss_backward);
criterion_main!(benches);
