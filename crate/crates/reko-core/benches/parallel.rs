//! Compares the rayon-parallel and sequential paths of the data-parallel
//! helpers on representative workloads. Build with and without the
//! `parallel` feature to compare:
//!
//! ```text
//! cargo bench -p reko-core --bench parallel
//! cargo bench -p reko-core --bench parallel --no-default-features
//! ```

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use reko_core::config::ModelConfig;
use reko_core::models::Generator;
use reko_core::synth::{generate_sample, Dataset};
use reko_core::{eval, Graph};

fn bench_dataset_generation(c: &mut Criterion) {
    c.bench_function("dataset_generate_32", |b| {
        b.iter(|| Dataset::generate(11, 24, 8).unwrap());
    });
}

fn bench_sample_generation(c: &mut Criterion) {
    let mut seed = 0u64;
    c.bench_function("sample_generate", |b| {
        b.iter(|| {
            seed += 1;
            generate_sample(seed)
        });
    });
}

fn bench_generator_forward(c: &mut Criterion) {
    let model = ModelConfig::default();
    let teacher = Generator::build(model.teacher_spec(), 1).unwrap();
    let student = Generator::build(model.student_spec(), 2).unwrap();
    let sample = generate_sample(3);
    c.bench_function("teacher_forward", |b| {
        b.iter(|| teacher.run(&sample.input).unwrap());
    });
    c.bench_function("student_forward", |b| {
        b.iter(|| student.run(&sample.input).unwrap());
    });
}

fn bench_forward_backward(c: &mut Criterion) {
    let model = ModelConfig::default();
    let teacher = Generator::build(model.teacher_spec(), 1).unwrap();
    let sample = generate_sample(3);
    c.bench_function("teacher_forward_backward", |b| {
        b.iter_batched(
            Graph::new,
            |mut g| {
                let x = g
                    .constant(sample.input.clone(), &[3, 64, 64])
                    .unwrap();
                let target = g
                    .constant(sample.target.clone(), &[3, 64, 64])
                    .unwrap();
                let bound = teacher.bind(&mut g, true).unwrap();
                let (out, _) = teacher.forward(&mut g, &bound, x).unwrap();
                let loss = reko_core::losses::hinton_l1(&mut g, out, target).unwrap();
                g.backward(loss).unwrap();
            },
            BatchSize::SmallInput,
        );
    });
}

fn bench_batch_eval(c: &mut Criterion) {
    let model = ModelConfig::default();
    let student = Generator::build(model.student_spec(), 2).unwrap();
    let data = Dataset::generate(5, 4, 16).unwrap();
    c.bench_function("eval_16_samples", |b| {
        b.iter(|| eval::quality_metrics(&student, &data.eval).unwrap());
    });
}

criterion_group!(
    benches,
    bench_dataset_generation,
    bench_sample_generation,
    bench_generator_forward,
    bench_forward_backward,
    bench_batch_eval
);
criterion_main!(benches);
