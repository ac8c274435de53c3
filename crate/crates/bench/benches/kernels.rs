use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cyclese_bench::{noise_wave, random_tensor};
use cyclese_core::attention::{ATFAModule, AttentionSwitches, AttentionTrace};
use cyclese_core::layers::Bind;
use cyclese_core::models::{Generator, GeneratorConfig};
use cyclese_core::numerics::ConvGeometry;
use cyclese_core::signal::{compress, istft, reconstruct, stft};
use cyclese_core::{Graph, ParamStore};

fn signal(c: &mut Criterion) {
    let w = noise_wave(16000, 1);
    c.bench_function("stft_1s", |b| b.iter(|| stft(black_box(&w)).unwrap()));
    let spec = stft(&w).unwrap();
    let (mag, phase) = compress(&spec, 0.5).unwrap();
    c.bench_function("reconstruct_istft_1s", |b| b.iter(|| istft(&reconstruct(black_box(&mag), &phase).unwrap()).unwrap()));
}

fn conv(c: &mut Criterion) {
    let geom = ConvGeometry::new((3, 5), (1, 2), (1, 2));
    let mut group = c.benchmark_group("conv2d_fwd_bwd");
    for cin in [8usize, 16, 32] {
        let x = random_tensor(&[2, 64, 65, cin], 2);
        let w = random_tensor(&[3, 5, cin, 2 * cin], 3);
        group.bench_with_input(BenchmarkId::from_parameter(cin), &cin, |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.leaf(x.clone());
                let wv = g.leaf(w.clone());
                let y = g.conv2d(xv, wv, None, geom).unwrap();
                let l = g.mean_all(y);
                g.backward(l).unwrap()
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let m = ATFAModule::new(&mut store, "atfa", 32, AttentionSwitches::default(), &mut rng).unwrap();
    let x = random_tensor(&[2, 108, 33, 32], 5);
    c.bench_function("atfa_forward_108x33x32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            m.forward(&mut g, Bind::frozen(&store), xv, &mut AttentionTrace::default()).unwrap()
        })
    });
}

fn generator(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = GeneratorConfig {
        channels: 32,
        depth: 2,
        ..GeneratorConfig::default()
    };
    let (gen, store) = Generator::new(cfg, &mut rng).unwrap();
    let x = random_tensor(&[1, 108, 257, 1], 7);
    let mut group = c.benchmark_group("generator");
    group.sample_size(10);
    group.bench_function("forward_c32_d2", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            gen.forward(&mut g, Bind::frozen(&store), xv).unwrap().0
        })
    });
    group.finish();
}

criterion_group!(benches, signal, conv, attention, generator);
criterion_main!(benches);
