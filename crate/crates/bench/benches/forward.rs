use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fsmn_core::layers::{forward, memory_block_dfsmn, Model};
use fsmn_core::stream::StreamState;
use fsmn_core::tensor::{rand_init, InitScheme, Matrix, SeedRng};
use fsmn_core::topology::parse_topology;

const TOPOLOGY: &str = "dfsmn:3*24-4x[256-64(10;10;2;1)]-2x256-64-128";

fn bench_forward(c: &mut Criterion) {
    let spec = parse_topology(TOPOLOGY).unwrap();
    let model: Model<f32> = Model::init(spec.clone(), 1).unwrap();
    let mut rng = SeedRng::new(1);
    let mut group = c.benchmark_group("forward");
    for frames in [64usize, 256] {
        let x: Matrix<f32> = rand_init(
            &mut rng,
            frames,
            spec.stacked_input(),
            InitScheme::Gaussian { mean: 0.0, std: 1.0 },
        )
        .unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(frames), &x, |b, x| {
            b.iter(|| forward(&model, x).unwrap())
        });
    }
    group.finish();
}

fn bench_memory_block(c: &mut Criterion) {
    let mut rng = SeedRng::new(2);
    let p: Matrix<f32> = rand_init(&mut rng, 256, 512, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
    let params = fsmn_core::layers::MemoryBlockParams {
        a: rand_init(&mut rng, 21, 512, InitScheme::Uniform { lo: -0.1, hi: 0.1 }).unwrap(),
        c: rand_init(&mut rng, 20, 512, InitScheme::Uniform { lo: -0.1, hi: 0.1 }).unwrap(),
        s1: 2,
        s2: 1,
        skip: fsmn_core::topology::Skip::None,
    };
    c.bench_function("memory_block_256x512_taps41", |b| {
        b.iter(|| memory_block_dfsmn(&p, None, &params).unwrap())
    });
}

fn bench_stream_push(c: &mut Criterion) {
    let spec = parse_topology(TOPOLOGY).unwrap();
    let model: Model<f32> = Model::init(spec, 3).unwrap();
    let mut rng = SeedRng::new(3);
    let frames: Matrix<f32> =
        rand_init(&mut rng, 512, 24, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
    c.bench_function("stream_push_steady_state", |b| {
        b.iter(|| {
            let mut stream = StreamState::open(&model);
            let mut emitted = 0;
            for t in 0..frames.rows() {
                emitted += stream.push(frames.row(t)).unwrap().len();
            }
            emitted += stream.flush().unwrap().len();
            emitted
        })
    });
}

criterion_group!(benches, bench_forward, bench_memory_block, bench_stream_push);
criterion_main!(benches);
