//! Trains the toy model on synthetic scenes and reports AP as it goes.
//!
//! `cargo run --release -p oft-core --example overfit -- [scenes] [steps] [topdown_layers]`

use std::ops::ControlFlow;
use std::time::Instant;

use oft::config::RunConfig;
use oft::network::Model;
use oft::synth::generate_scenes;
use oft::train::{evaluate, train};

fn main() -> oft::error::Result<()> {
    let arg = |i: usize, default: usize| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let mut cfg = RunConfig::default();
    let scenes = arg(1, 20);
    cfg.train.steps = arg(2, cfg.train.steps);
    cfg.model.topdown_layers = arg(3, cfg.model.topdown_layers);
    cfg.validate()?;

    let samples = generate_scenes(&cfg.scene, &cfg.model.classes, scenes)?;
    let mut model = Model::<f32>::new(cfg.model.clone())?;
    let start = Instant::now();
    let mut window = 0.0;
    train(&mut model, &samples, &cfg.train, &cfg.augment, &cfg.loss, |r, m| {
        window += r.loss.total();
        if r.step % 100 == 0 {
            let ap = evaluate(m, &samples, &cfg.decode, &cfg.eval)?;
            println!(
                "step {:5}  loss {:8.2}  AP_BEV@0.5 {:.3}  {:6.1}s",
                r.step,
                window / 100.0,
                ap.ap,
                start.elapsed().as_secs_f64()
            );
            window = 0.0;
        }
        Ok(ControlFlow::Continue(()))
    })
}
