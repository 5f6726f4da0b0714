//! Ablations that must reduce exactly to simpler models.

use crate::common::*;
use popmap_core::autodiff::Tape;
use popmap_core::grid::WindowSample;
use popmap_core::pada::{pada_finetune, PadaConfig};
use popmap_core::stnet::{Stnet, StnetConfig};
use popmap_core::train::{train_stnet, TrainOptions};
use popmap_core::Tensor;
use rand::Rng;

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn config(temporal: bool) -> StnetConfig {
    StnetConfig { seq_len: 6, time_stride: 2, base_channels: 4, time_channels: 3, block_width: 3, upscale: 2, temporal }
}

pub fn zeroed_merges_reduce_stnet_to_snet() {
    let mut r = rng(300);
    for seed in 0..8u64 {
        let mut model = Stnet::<f64>::new(&config(true), seed).unwrap();
        jitter_biases(&mut model.store, seed);
        model.zero_temporal_merges();
        let x = uniform(&[3, 6, 4, 3], 0.0, 80.0, &mut r);
        for training in [false, true] {
            let buffers = model.store.buffers();
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let full = model.forward_mode(&mut tape, xv, training, true).unwrap();
            model.store.restore_buffers(&buffers);
            let spatial = model.forward_mode(&mut tape, xv, training, false).unwrap();
            model.store.restore_buffers(&buffers);
            assert_eq!(bits(tape.value(full)), bits(tape.value(spatial)), "seed {seed} training {training}");
        }
    }
}

pub fn zeroed_merges_match_last_frame_only_forward() {
    let mut r = rng(301);
    let mut model = Stnet::<f64>::new(&config(true), 4).unwrap();
    model.zero_temporal_merges();
    let x = uniform(&[2, 6, 3, 3], 0.0, 50.0, &mut r);
    let last: Vec<f64> = (0..2).flat_map(|b| x.data()[(b * 6 + 5) * 9..(b * 6 + 6) * 9].to_vec()).collect();
    let full = model.infer(&x).unwrap();
    let mut tape = Tape::new();
    let lv = tape.constant(Tensor::new(&[2, 1, 3, 3], last).unwrap());
    let spatial = model.snet_forward(&mut tape, lv, false).unwrap();
    assert_eq!(bits(&full), bits(tape.value(spatial)));
}

pub fn unzeroed_merges_do_use_the_history() {
    let mut r = rng(302);
    let mut model = Stnet::<f64>::new(&config(true), 5).unwrap();
    let x = uniform(&[1, 6, 3, 3], 1.0, 50.0, &mut r);
    let mut y = x.clone();
    y.data_mut()[0] += 25.0;
    assert_ne!(model.infer(&x).unwrap(), model.infer(&y).unwrap());
}

fn windows(count: usize, r: &mut impl Rng) -> Vec<WindowSample<f64>> {
    (0..count)
        .map(|k| {
            let coarse_seq = uniform(&[6, 3, 3], 0.0, 60.0, r);
            let fine_target = uniform(&[1, 6, 6], 0.0, 15.0, r);
            WindowSample { coarse_seq, fine_target, t_of_day: k % 48, slot: k }
        })
        .collect()
}

pub fn pada_without_source_or_adversary_is_plain_finetuning() {
    let mut r = rng(303);
    let target = windows(7, &mut r);
    let target: Vec<&WindowSample<f64>> = target.iter().collect();
    for (seed, temporal) in [(0u64, true), (1, false), (9, true)] {
        let cfg = PadaConfig { adv_weight: 0.0, steps: 12, target_batch: 3, lr: 2e-3, ..PadaConfig::default() };
        let base = Stnet::<f64>::new(&config(temporal), 40 + seed).unwrap();

        let mut adapted = base.clone();
        pada_finetune(&mut adapted, &[], &target, &cfg, seed).unwrap();

        let mut tuned = base.clone();
        let opts = TrainOptions { steps: cfg.steps, batch_size: cfg.target_batch, lr: cfg.lr, eval_every: 0, patience: 1 };
        train_stnet(&mut tuned, &target, &[], &opts, seed).unwrap();

        assert!(adapted.store != base.store, "fine-tuning changed nothing");
        for id in adapted.store.ids() {
            let (a, b) = (adapted.store.get(id), tuned.store.get(id));
            assert_eq!(bits(a), bits(b), "seed {seed}: {} differs", adapted.store.name(id));
        }
    }
}

pub fn adversary_without_source_is_inert() {
    // A positive weight has nothing to confuse without source windows.
    let mut r = rng(304);
    let target = windows(5, &mut r);
    let target: Vec<&WindowSample<f64>> = target.iter().collect();
    let base = Stnet::<f64>::new(&config(true), 3).unwrap();
    let run = |adv_weight| {
        let mut m = base.clone();
        let cfg = PadaConfig { adv_weight, steps: 6, target_batch: 2, ..PadaConfig::default() };
        pada_finetune(&mut m, &[], &target, &cfg, 11).unwrap();
        m.store
    };
    assert!(run(0.0) == run(0.7));
}
