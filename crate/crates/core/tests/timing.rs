//! Wall-clock micro-probe for the training hot path. Run explicitly:
//! `cargo test -p texparse-core --test timing -- --ignored --nocapture`

use std::time::Instant;

use texparse_core::losses::{matched_mask_loss, sample_points, LossWeights};
use texparse_core::synth::{generate_synthetic_dataset, SynthOptions, Vocab};
use texparse_core::{head, RunConfig, Tape, Trainer};

#[test]
#[ignore = "timing probe; prints component costs"]
fn component_timings() {
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.head.n_queries = 8;
    cfg.data.resize = 64;
    cfg.data.vocab = "basic".to_string();
    cfg.data.hflip = false;
    cfg.data.vflip = false;
    cfg.loss.points = 1024;
    cfg.loss.aux = false;
    cfg.optimizer.learning_rate = 1e-3;

    let opts = SynthOptions {
        size: 64,
        vocab: Vocab::Basic,
    };
    let samples = generate_synthetic_dataset(8, 1, &opts).unwrap();

    // Backbone feature extraction, once per (sample, flip) thanks to the cache.
    let backbone = texparse_core::Backbone::from_provider(cfg.backbone.clone(), None).unwrap();
    let schedule = cfg.backbone.build_schedule().unwrap();
    let t0 = Instant::now();
    let bundle = backbone
        .extract_features(&samples[0].image, &schedule, 100, 42)
        .unwrap();
    println!("extract_features 64px: {:?}", t0.elapsed());

    // Head forward alone, then forward+backward, on the cached features.
    let params = texparse_core::HeadParams::init(&cfg.head, 3).unwrap();
    let t0 = Instant::now();
    let tape = Tape::new();
    let vars = params.tape_vars(&tape);
    let out = head::forward(&tape, &cfg.head, &vars, &bundle.f).unwrap();
    println!("head forward 32x32 grid: {:?}", t0.elapsed());

    let gt = ndarray::Array3::from_elem((5, 64, 64), 0.0);
    let points = sample_points(1024, 9);
    let t0 = Instant::now();
    let loss = matched_mask_loss(
        &tape,
        out.final_set().logits,
        &gt,
        &points,
        &LossWeights::default(),
    )
    .unwrap();
    println!("matched_mask_loss 1024 pts: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let total = tape.add(loss.bce, loss.dice);
    let _grads = tape.backward(total);
    println!("backward: {:?}", t0.elapsed());

    // Whole training steps at several batch sizes.
    for batch in [1usize, 2, 4, 8] {
        cfg.optimizer.batch_size = batch;
        let mut trainer = Trainer::new(&cfg, &samples, None).unwrap();
        let t0 = Instant::now();
        trainer.run(2).unwrap(); // includes feature-cache warmup
        let warm = Instant::now();
        trainer.run(3).unwrap();
        println!(
            "batch {batch}: first 2 steps (warmup) {:?}, then per-step {:?}",
            t0.elapsed() - (warm.elapsed()),
            warm.elapsed() / 3
        );
    }
}
