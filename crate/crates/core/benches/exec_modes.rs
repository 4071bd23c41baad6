//! Sequential vs. data-parallel execution of the hot loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flexdepth::correspondence::{build_pair_set, sample_all_matches};
use flexdepth::io::PipelineConfig;
use flexdepth::par::Exec;
use flexdepth::pipeline::{consistency_masks, filter_project, synthesize, SynthOutput};
use flexdepth::solver::{evaluate_cost, init_params, Problem};
use flexdepth::synthgen::{gen_scene, CorruptionSpec, RenderedVideo, SceneSpec};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn scene() -> SceneSpec {
    SceneSpec {
        n_frames: 12,
        ..SceneSpec::default()
    }
}

fn project(cfg: &PipelineConfig) -> SynthOutput {
    let corruption = CorruptionSpec {
        amplitude: 0.2,
        noise_sigma: 0.01,
        ..Default::default()
    };
    let mut synth = synthesize(&scene(), &corruption, Exec::Parallel).unwrap();
    consistency_masks(&mut synth.inputs.flows, cfg, Exec::Parallel).unwrap();
    synth
}

fn bench(c: &mut Criterion) {
    let cfg = PipelineConfig::default();
    let synth = project(&cfg);
    let data = &synth.inputs;
    let pairs = build_pair_set(data.depths.len()).unwrap();
    let matches = sample_all_matches(&data.flows, &pairs, &data.dyn_masks, cfg.min_match_dist, cfg.seed, Exec::Parallel).unwrap();
    let problem = Problem::new(&matches, &data.depths, data.dyn_masks.clone()).unwrap();
    let params = init_params(&data.depths, cfg.focal_prior).unwrap();
    let spec = scene();

    let mut g = c.benchmark_group("residuals");
    for (name, exec) in MODES {
        let opts = cfg.solve_options(exec);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_cost(&problem, &params, &opts, &cfg.reg_weights()).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("fb_masks");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut flows = data.flows.clone();
                consistency_masks(&mut flows, &cfg, exec).unwrap();
                flows
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("filter");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| filter_project(data, &params, &cfg, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("render");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| RenderedVideo::new(gen_scene(&spec).unwrap(), exec).n_frames())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
