//! Restoration sweeps on one thread versus the rayon pool.
//!
//! Built with `--no-default-features` both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use routelens_core::engine::ComponentId;
use routelens_core::interventions::{restoration_sweep, PatchPositions};
use routelens_core::model::ModelBundle;
use routelens_core::parallel::with_jobs;
use routelens_core::planted::{self, random_bundle, RandomSpec};
use routelens_core::promptkit::{build_corpus, PromptPair, TemplateKind};

fn workloads() -> Vec<(&'static str, ModelBundle, Vec<PromptPair>)> {
    let toy = planted::planted_bundle().expand_vocab_with_pad().unwrap();
    let pairs = build_corpus(&planted::planted_corpus(), &toy, None, TemplateKind::Toy).unwrap();
    // Same token ids, wider random model.
    let mut spec = RandomSpec::gpt2(4, 8, 16, toy.arch.vocab_size);
    spec.max_positions = 64;
    let wide = random_bundle(&spec, 3);
    vec![("planted", toy, pairs.clone()), ("random_4x8", wide, pairs)]
}

fn bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("restoration_sweep");
    group.sample_size(10);
    for (name, bundle, pairs) in workloads() {
        let comps = ComponentId::all(&bundle);
        for (mode, jobs) in [("sequential", Some(1)), ("parallel", None)] {
            group.bench_with_input(BenchmarkId::new(mode, name), &jobs, |b, &jobs| {
                b.iter(|| with_jobs(jobs, || restoration_sweep(&bundle, &pairs, &comps, PatchPositions::All).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
