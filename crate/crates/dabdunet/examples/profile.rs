// Scratch profiler: times forward / backward / optimizer on the default
// configuration. (Not part of the deliverable surface; run by hand.)

use std::time::Instant;

use dabdunet::data::{generate_dataset, DatasetSpec};
use dabdunet::model::{Model, ModelConfig};
use dabdunet::tensor::{Tape, Tensor};
use dabdunet::train::soft_dice_loss;

fn main() {
    let cfg = ModelConfig::default();
    let model = Model::build(&cfg).unwrap();
    let ds = generate_dataset(&DatasetSpec { n_train: 4, n_val: 1, ..DatasetSpec::default() }).unwrap();
    let mut imgs = Vec::new();
    let mut masks = Vec::new();
    for s in &ds.train {
        imgs.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    let x = Tensor::from_vec(imgs, &[4, 1, 32, 32]).unwrap();
    let y = Tensor::from_vec(masks, &[4, 1, 32, 32]).unwrap();

    for _ in 0..2 {
        let t0 = Instant::now();
        let mut traces = Vec::new();
        for _ in 0..5 {
            let tape = Tape::new();
            let trace = model.run(&tape, &x, &Default::default()).unwrap();
            traces.push((tape, trace));
        }
        let fwd = t0.elapsed().as_secs_f64() / 5.0;

        let t1 = Instant::now();
        for (tape, trace) in &traces {
            let loss = soft_dice_loss(tape, &trace.prob, &y).unwrap();
            tape.backward(&loss).unwrap();
        }
        let bwd = t1.elapsed().as_secs_f64() / 5.0;

        let t2 = Instant::now();
        for (tape, trace) in &traces {
            for leaf in &trace.param_leaves {
                let _ = tape.grad(leaf);
            }
        }
        let grads = t2.elapsed().as_secs_f64() / 5.0;
        println!("forward {fwd:.4}s  backward {bwd:.4}s  grad-read {grads:.4}s  per-batch {:.4}s", fwd + bwd + grads);
    }
}
