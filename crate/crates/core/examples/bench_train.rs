//! Times one optimizer step of the default desk-scale model, for sizing
//! training budgets on a new machine.

use std::time::Instant;
use svphw_core::data::{generate_sequence, SpriteWorldConfig};
use svphw_core::model::{stack_batch, Model, ModelConfig};
use svphw_core::optim::Adam;
use svphw_core::tensor::Tensor;

fn main() {
    let cfg = ModelConfig::desk_default();
    let world = SpriteWorldConfig::default_world(7);
    let seqs: Vec<_> = (0..8).map(|i| generate_sequence(&world, i).unwrap()).collect();
    let mut model = Model::<f32>::new(cfg.clone()).unwrap();
    let mut opt = Adam::new(cfg.learning_rate);

    let need = cfg.cond_frames + cfg.pred_frames;
    let mut frames: Vec<Tensor<f32>> = Vec::new();
    for t in 0..need {
        let batch: Vec<Tensor<f32>> = (0..cfg.batch_size).map(|b| seqs[b].frame(t)).collect();
        frames.push(stack_batch(&batch).unwrap());
    }

    // warm up allocator etc.
    for s in 0..3 {
        model.train_step(&frames, &mut opt, s).unwrap();
    }
    let t0 = Instant::now();
    let n = 15;
    let mut last = 0.0;
    for s in 0..n {
        last = model.train_step(&frames, &mut opt, 100 + s).unwrap().total;
    }
    let per = t0.elapsed().as_secs_f64() / n as f64;
    println!("batch={} per-step {:.3}s -> 2000 steps = {:.1} min (loss {last:.2})", cfg.batch_size, per, per * 2000.0 / 60.0);
}
