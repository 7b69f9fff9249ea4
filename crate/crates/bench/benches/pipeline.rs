use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use msstyle_bench::Fixture;
use msstyle_core::acoustic::{Mode, Targets};
use msstyle_core::autograd::Graph;
use msstyle_core::evaluation::dtw_align;
use msstyle_core::synthesis::{synthesize_sentence, StyleSource};
use msstyle_core::tensor::Tensor;
use msstyle_core::training::{acoustic_loss_var, truth_terms, MelLoss};

fn random_mel(rows: usize, bins: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, bins, (0..rows * bins).map(|_| rng.gen_range(-4.0..0.0)).collect()).unwrap()
}

fn dtw(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random_mel(200, 20, &mut rng);
    let b = random_mel(240, 20, &mut rng);
    c.bench_function("dtw_align 200x240x20", |bench| {
        bench.iter(|| dtw_align(black_box(&a), black_box(&b)).unwrap())
    });
}

fn styles(c: &mut Criterion) {
    let f = Fixture::new(2, 6).unwrap();
    let doc = f.corpus.documents[0].id.clone();
    c.bench_function("predict_styles (L=2)", |bench| {
        bench.iter(|| f.model.predict_styles(&f.corpus, &doc, 3).unwrap())
    });
    c.bench_function("extract_styles (L=2)", |bench| {
        bench.iter(|| f.model.extract_styles(&f.corpus, &doc, 3).unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let f = Fixture::new(2, 6).unwrap();
    let doc = f.corpus.documents[0].id.clone();
    let u = f.corpus.utterance(&doc, 3).unwrap();
    let ids = f.model.spec.acoustic.phoneme_ids(&u.phonemes).unwrap();
    let (pitch, energy) = (u.phone_pitch(), u.phone_energy());
    let truth = truth_terms(&f.model, u);
    let window = f.corpus.build_context_window(&doc, 3, f.model.radius()).unwrap();
    c.bench_function("forward+backward, one utterance", |bench| {
        bench.iter(|| {
            let mut g = Graph::training(&f.model.store);
            let styles = f.model.predict(&mut g, &window).unwrap();
            let t = Targets {
                durations: &u.durations,
                pitch: &pitch,
                energy: &energy,
            };
            let v = f
                .model
                .acoustic
                .synthesize(&mut g, &ids, &u.subword_of(), Some(&styles), Mode::TeacherForced(&t))
                .unwrap();
            let [mel, p, e, d] = acoustic_loss_var(&mut g, &v, &truth, MelLoss::Mae).unwrap();
            let a = g.add(mel, p);
            let b = g.add(e, d);
            let loss = g.add(a, b);
            g.backward(loss);
            g.param_grads().len()
        })
    });
}

fn synthesis(c: &mut Criterion) {
    let f = Fixture::new(2, 6).unwrap();
    let doc = f.corpus.documents[1].id.clone();
    c.bench_function("synthesize_sentence (predicted)", |bench| {
        bench.iter(|| synthesize_sentence(&f.model, &f.corpus, &doc, 2, StyleSource::Predicted).unwrap())
    });
}

criterion_group!(benches, dtw, styles, training_step, synthesis);
criterion_main!(benches);
