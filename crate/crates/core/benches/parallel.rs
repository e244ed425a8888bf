//! Sequential vs rayon execution of the per-video loops.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use talforge::bmn::{sample_gradients, ProposalNet};
use talforge::config::PipelineConfig;
use talforge::eval::{mean_map, EvalConfig, Subset};
use talforge::exec::Exec;
use talforge::pipeline::{self, Dataset, Models};
use talforge::synthetic::gen_synthetic;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn setup() -> (PipelineConfig, Dataset) {
    let mut cfg = PipelineConfig::toy();
    cfg.synthetic.n_videos = 32;
    cfg.synthetic.n_eval = 32;
    let ds = gen_synthetic(&cfg.synthetic).unwrap().into();
    (cfg, ds)
}

fn bench_inference(c: &mut Criterion) {
    let (cfg, ds) = setup();
    let params = Models::new(&cfg).unwrap().init(&cfg);
    let mut group = c.benchmark_group("infer_32_videos");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| pipeline::infer(&cfg, &params, &ds, Subset::Validation, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_gradients(c: &mut Criterion) {
    let (cfg, ds) = setup();
    let net = ProposalNet::new(&cfg.model).unwrap();
    let params = net.init(cfg.train.seed);
    let samples = pipeline::training_samples(&cfg, &ds, Subset::Training).unwrap();
    let mut group = c.benchmark_group("gradients_32_samples");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| exec.map(&samples, |s| sample_gradients(&net, &params, s, &cfg.loss).unwrap()))
        });
    }
    group.finish();
}

fn bench_eval(c: &mut Criterion) {
    let (cfg, ds) = setup();
    let params = Models::new(&cfg).unwrap().init(&cfg);
    let props = pipeline::infer(&cfg, &params, &ds, Subset::Validation, Exec::Parallel).unwrap();
    let dets = pipeline::postprocess(&cfg, &props, &ds.class_scores).unwrap();
    let gts = ds.annotations.subset(Subset::Validation);
    let mut group = c.benchmark_group("mean_map");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| mean_map(black_box(&dets), &gts, &EvalConfig::default(), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_inference, bench_gradients, bench_eval);
criterion_main!(benches);
