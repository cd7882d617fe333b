use albf_core::beamform::{BeamformerSet, Method};
use albf_core::geometry::{delay_compensate, DelayedTensor, ImageGrid};
use albf_core::neural::{Mode, Model, Tensor4, TrainConfig, TrainTarget, UNet, UNetConfig};
use albf_core::phantom::ProbeConfig;
use albf_core::session::{FrameSource, SimulatedSource, SimulatedSourceConfig};
use proptest::prelude::*;

fn desk_frame(seed: u64) -> DelayedTensor {
    let probe = ProbeConfig::default();
    let grid = ImageGrid::desk(&probe).unwrap();
    let mut source = SimulatedSource::new(SimulatedSourceConfig { seed, ..Default::default() });
    let (frame, _) = source.next_frame(&grid).unwrap().unwrap();
    delay_compensate(&frame, &grid).unwrap()
}

fn target(t: &DelayedTensor, method: Method) -> TrainTarget {
    TrainTarget::from_beamformed(&BeamformerSet::for_channels(t.num_channels()).run(method, t).unwrap(), 60.0).unwrap()
}

#[test]
fn fixed_seed_gives_a_bit_identical_trajectory() {
    let t = desk_frame(1);
    let goal = target(&t, Method::Mvdr);
    let run = || {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        pool.install(|| {
            let mut model = Model::<f64>::new(UNetConfig::desk(), TrainConfig::default()).unwrap();
            let losses: Vec<u64> = (0..3).map(|_| model.train_step(&t, &goal).unwrap().loss.to_bits()).collect();
            (losses, model.checkpoint_id(), model.to_bytes())
        })
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_reload_reproduces_forward_and_training_exactly() {
    let t = desk_frame(2);
    let goal = target(&t, Method::Gcf);
    let cfg = UNetConfig::desk();
    let mut model = Model::<f64>::new(cfg, TrainConfig::default()).unwrap();
    model.train_step(&t, &goal).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.albf");
    let id = model.save(&path).unwrap();
    let mut loaded = Model::<f64>::load(&path, &cfg).unwrap();
    assert_eq!(loaded.checkpoint_id(), id);
    assert_eq!(loaded.beamform(&t).unwrap(), model.beamform(&t).unwrap());

    let a = model.train_step(&t, &goal).unwrap();
    let b = loaded.train_step(&t, &goal).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(model.checkpoint_id(), loaded.checkpoint_id());
}

#[test]
fn two_hundred_steps_on_a_fixed_das_target_cut_the_loss_tenfold() {
    let t = desk_frame(3);
    let goal = target(&t, Method::Das);
    let mut model = Model::<f64>::new(UNetConfig::desk(), TrainConfig::default()).unwrap();
    let losses: Vec<f64> = (0..200).map(|_| model.train_step(&t, &goal).unwrap().loss).collect();
    let first = losses[0];
    let last = *losses.last().unwrap();
    println!("DAS target: {first:.4e} -> {last:.4e} ({:.1}%)", 100.0 * last / first);
    assert!(last <= 0.1 * first);
    let means: Vec<f64> = losses.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(means[1] < means[0], "{means:?}");
}

#[test]
fn parallel_schedule_keeps_the_forward_pass_within_rounding() {
    let mut rng_seed = 0u64;
    let x = Tensor4::<f64>::from_fn(16, 32, 16, |c, h, w| {
        rng_seed = rng_seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((rng_seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * (1.0 + (c + h + w) as f64 * 0.01)
    });
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| UNet::<f64>::new(UNetConfig::desk()).unwrap().forward(&x, Mode::Train).unwrap())
    };
    let (a, b) = (run(1), run(3));
    let worst = a.data.iter().zip(&b.data).fold(0.0f64, |m, (p, q)| m.max((p - q).abs() / p.abs().max(1.0)));
    assert!(worst <= 1e-12, "{worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_shape_equals_input_shape(h in 1usize..=6, w in 1usize..=4, channels in 1usize..=6, stem in 1usize..=3) {
        let cfg = UNetConfig { in_channels: channels, stem_channels: 2 * stem, out_channels: channels, seed: 1 };
        let mut net = UNet::<f32>::new(cfg).unwrap();
        let x = Tensor4::<f32>::zeros(channels, 8 * h, 8 * w);
        let y = net.forward(&x, Mode::Eval).unwrap();
        prop_assert_eq!((y.channels, y.height, y.width), (channels, 8 * h, 8 * w));
    }
}
