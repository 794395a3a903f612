use reko_core::config::ModelConfig;
use reko_core::models::Generator;
use reko_core::synth::generate_sample;
use reko_core::{losses, Graph};
use std::time::Instant;

fn step_time(width: usize, label: &str) {
    let model = ModelConfig { teacher_width: width, ..ModelConfig::default() };
    let gen = Generator::build(model.teacher_spec(), 1).unwrap();
    let sample = generate_sample(3);
    // forward only
    let t0 = Instant::now();
    let reps = 8;
    for _ in 0..reps {
        gen.run(&sample.input).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    // forward + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let x = g.constant(sample.input.clone(), &[3, 64, 64]).unwrap();
        let target = g.constant(sample.target.clone(), &[3, 64, 64]).unwrap();
        let bound = gen.bind(&mut g, true).unwrap();
        let (out, _) = gen.forward(&mut g, &bound, x).unwrap();
        let loss = losses::hinton_l1(&mut g, out, target).unwrap();
        g.backward(loss).unwrap();
    }
    let fb = t0.elapsed().as_secs_f64() / reps as f64;
    println!("{label}: params={} fwd={:.1}ms fwd+bwd={:.1}ms | 512x30 steps = {:.1}min", gen.param_count(), fwd*1e3, fb*1e3, fb*512.0*30.0/60.0);
}

fn main() {
    for (w, l) in [(32, "w32"), (16, "w16"), (8, "w8"), (4, "w4")] {
        step_time(w, l);
    }
}
