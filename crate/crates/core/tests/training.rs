use card_core::car::CarConfig;
use card_core::centers::LabelField;
use card_core::model::{
    build_loss_graph, load_checkpoint, save_checkpoint, train_step, Model, ModelConfig, Sample, Sgd, StepMetrics,
    TrainConfig, Upsampler,
};
use card_core::nn::{Binder, Mode};
use card_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-class toy: a bright noisy square on a dark noisy background.
fn toy_batch(seed: u64, n: usize) -> Vec<Sample> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (y0, x0) = (r.random_range(0..16), r.random_range(0..16));
            let mut labels = vec![0u8; 32 * 32];
            let mut pixels = Vec::with_capacity(32 * 32 * 3);
            for i in 0..32 {
                for j in 0..32 {
                    let fg = (y0..y0 + 14).contains(&i) && (x0..x0 + 14).contains(&j);
                    labels[i * 32 + j] = fg as u8;
                    let base = if fg { 0.8 } else { 0.2 };
                    for _ in 0..3 {
                        pixels.push(base + 0.1 * (r.random::<f64>() - 0.5));
                    }
                }
            }
            Sample {
                image: Tensor::new(&[32, 32, 3], pixels).unwrap(),
                labels: LabelField::new(32, 32, 2, labels).unwrap(),
            }
        })
        .collect()
}

fn run(seed: u64, car: &CarConfig, iters: usize) -> (Model, Vec<StepMetrics>) {
    let mut model = Model::new(ModelConfig::toy(2), seed).unwrap();
    let mut opt = Sgd::new();
    let tc = TrainConfig {
        max_iter: iters,
        base_lr: 0.02,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let data = toy_batch(seed, 8);
    let log = (0..iters)
        .map(|it| {
            let start = (it * 2) % data.len();
            train_step(&mut model, &mut opt, &data[start..start + 2], car, &tc, it).unwrap()
        })
        .collect();
    (model, log)
}

#[test]
fn same_seed_gives_identical_loss_streams() {
    let (ma, a) = run(4, &CarConfig::default(), 15);
    let (mb, b) = run(4, &CarConfig::default(), 15);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn zero_car_weights_reproduce_plain_ce() {
    let zero = CarConfig {
        eps0: 0.1,
        eps1: 0.9,
        ..CarConfig::disabled()
    };
    let (_, plain) = run(2, &CarConfig::disabled(), 10);
    let (_, zeroed) = run(2, &zero, 10);
    assert_eq!(plain, zeroed);
}

#[test]
fn loss_trends_down_over_training() {
    let (_, log) = run(1, &CarConfig::default(), 200);
    let window = |s: &[StepMetrics]| s.iter().map(|m| m.total).sum::<f64>() / s.len() as f64;
    let early = window(&log[..20]);
    let late = window(&log[180..]);
    assert!(late < 0.5 * early, "early {early}, late {late}");
    for pair in log.chunks(40).collect::<Vec<_>>().windows(2) {
        assert!(window(pair[1]) < window(pair[0]));
    }
}

#[test]
fn car_does_not_change_the_forward_graph() {
    let model = Model::new(ModelConfig::toy(2), 8).unwrap();
    let batch = toy_batch(8, 2);
    let tc = TrainConfig::default();
    let graphs: Vec<_> = [CarConfig::default(), CarConfig::disabled()]
        .iter()
        .map(|car| {
            let mut b = Binder::new(&model.params, true, Mode::Train);
            build_loss_graph(&model, &mut b, &batch, car, &tc).unwrap()
        })
        .collect();
    let prefix = |i: usize| {
        let lg = &graphs[i];
        let end = lg.forward.logits.index() + 1;
        (lg.graph.trace()[..end].to_vec(), lg.graph.value(lg.forward.logits).clone())
    };
    assert_eq!(prefix(0), prefix(1));
    assert!(graphs[0].graph.len() > graphs[1].graph.len());
}

#[test]
fn checkpoint_roundtrip_keeps_predictions() {
    let (model, _) = run(5, &CarConfig::default(), 5);
    let mut buf = Vec::new();
    save_checkpoint(&model, &mut buf).unwrap();
    let back = load_checkpoint(&mut buf.as_slice(), &model.cfg).unwrap();
    let images: Vec<Tensor> = toy_batch(9, 2).into_iter().map(|s| s.image).collect();
    let a = model.infer(&images).unwrap().logits;
    let b = back.infer(&images).unwrap().logits;
    // parameters go through f32
    assert!(a.max_abs_diff(&b) < 1e-4);
}

#[test]
fn dilated_variant_trains() {
    let cfg = ModelConfig {
        upsampler: Upsampler::DilatedOs8,
        ..ModelConfig::toy(2)
    };
    let mut model = Model::new(cfg, 0).unwrap();
    let mut opt = Sgd::new();
    let batch = toy_batch(0, 2);
    let m = train_step(&mut model, &mut opt, &batch, &CarConfig::default(), &TrainConfig::default(), 0).unwrap();
    assert!(m.total.is_finite() && m.intra > 0.0);
}
