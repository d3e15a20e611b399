use howlkit::neural_kalman::{NetSizes, Nets};
use howlkit::scene::{SamplerConfig, SceneSampler, Split};
use howlkit::trainer::{train_scene, Optimizer, TrainConfig, TrainSetup};

/// About 200 optimizer steps of repeated passes over one 2 s scene.
#[test]
fn overfits_a_single_scene() {
    let sampler = SceneSampler::new(SamplerConfig { duration: 2.0, ..Default::default() }, 3).unwrap();
    let draw = sampler.fixed_set(Split::Train, 1, 0)[0];
    let scene = sampler.build_with_gain(&draw, 1.5).unwrap();
    let cfg = TrainConfig { duration: 2.0, ..Default::default() };
    let setup = TrainSetup::default();
    let mut nets = Nets::new(65, &NetSizes { mask_hidden: 8, mask_layers: 2, cov_hidden: 65 }, 1).unwrap();
    let mut opt = Optimizer::new(&cfg, nets.param_count());
    let mut passes = Vec::new();
    while opt.steps() < 200 {
        let ev = train_scene(&mut nets, &mut opt, &scene, &cfg, &setup).unwrap();
        assert!(!ev.howl_abort && ev.nan_guard == 0);
        passes.push(ev);
    }
    // the same window of audio, on the first pass and on the last
    let (first, last) = (&passes[0], passes.last().unwrap());
    assert!(last.window_losses[0] < 0.5 * first.window_losses[0], "{} vs {}", last.window_losses[0], first.window_losses[0]);
    assert!(last.loss.unwrap() < first.loss.unwrap());
}
