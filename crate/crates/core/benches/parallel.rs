use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sttran_core::config::{Mode, ModelConfig};
use sttran_core::data::{synth_generate, SynthSpec};
use sttran_core::eval::{frame_evals, strategy_recall};
use sttran_core::graphgen::{Strategy, StrategyConfig};
use sttran_core::model::Sttran;
use sttran_core::par::Exec;

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench(c: &mut Criterion) {
    let spec = SynthSpec {
        n_videos: 16,
        frames: 6,
        ..SynthSpec::default()
    };
    let videos = synth_generate(&spec).unwrap();
    let cfg = ModelConfig::desk();
    let model = Sttran::new(cfg.clone()).unwrap();

    let mut g = c.benchmark_group("predict_many");
    for (name, exec) in POLICIES {
        g.bench_function(name, |b| b.iter(|| black_box(model.predict_many(&videos, exec))));
    }
    g.finish();

    let outputs: Vec<_> = model
        .predict_many(&videos, Exec::Parallel)
        .into_iter()
        .map(Result::unwrap)
        .collect();
    let frames = frame_evals(&outputs, &videos, cfg.predicate_sizes, Exec::Parallel);
    let semi = StrategyConfig::new(Strategy::Semi, cfg.semi_threshold).unwrap();

    let mut g = c.benchmark_group("eval");
    for (name, exec) in POLICIES {
        g.bench_function(format!("frame_evals/{name}"), |b| {
            b.iter(|| black_box(frame_evals(&outputs, &videos, cfg.predicate_sizes, exec)))
        });
        g.bench_function(format!("semi_recall/{name}"), |b| {
            b.iter(|| black_box(strategy_recall(&frames, semi, 20, Mode::PredCls, exec)))
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench
}
criterion_main!(benches);
