//! End-to-end acceptance checks. Runs sequentially (timing criteria are
//! measured wall-clock) and prints one PASS/FAIL line per criterion.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use card_core::autodiff::kernels::{multiply_count, reset_multiply_counter};
use card_core::car::{car_parts, inter_c2c_loss, CarConfig};
use card_core::centers::{batch_centers, flatten_pair, LabelField, IGNORE};
use card_core::ejpu::{ejpu_forward, init as init_ejpu, jpu_branch, EjpuConfig, FeaturePyramid};
use card_core::gradcheck::{run_cases, GradCheckConfig};
use card_core::model::{build_loss_graph, Model, ModelConfig, TrainConfig};
use card_core::nn::{Binder, Mode, ParamStore};
use card_core::saa::{attention_flops, dense_attention_core, synced_axial_core, AttentionConfig, AttentionVariant};
use card_core::{Graph, Tensor};
use card_harness::config::RunConfig;
use card_harness::dataset::gen_dataset;
use card_harness::run::experiment;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_labels(r: &mut ChaCha8Rng, n: usize, n_class: usize) -> Vec<u8> {
    (0..n)
        .map(|_| if r.random::<f64>() < 0.1 { IGNORE } else { r.random_range(0..n_class) as u8 })
        .collect()
}

fn indices(labels: &[u8]) -> Vec<Option<usize>> {
    labels.iter().map(|&l| (l != IGNORE).then_some(l as usize)).collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..20).collect();
    let results = run_cases(&seeds, &GradCheckConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let required = ["intra_c2p", "inter_c2c", "inter_c2p", "saa", "ejpu", "matmul", "softmax", "conv2d"];
    for name in required {
        check(results.iter().any(|r| r.name == name), || format!("no `{name}` case"))?;
    }
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed: Vec<_> = results.iter().filter(|r| !(r.max_rel_error < 1e-4)).map(|r| r.name).collect();
    check(failed.is_empty(), || format!("rel. err >= 1e-4 for {failed:?}"))?;
    check(elapsed < Duration::from_secs(120), || format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "{} ops x 20 seeds, worst {} at {:.2e}, {elapsed:.1?}",
        results.len(),
        worst.name,
        worst.max_rel_error
    ))
}

fn oracle_suite() -> Outcome {
    let mut worst = [0.0f64; 3];
    for seed in 0..10 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c, n_class) = (5, 4, 3, 4);
        let mut g = Graph::new();
        let (mut pairs, mut all_x, mut all_l) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..3 {
            let x = Tensor::uniform(&[h, w, c], -2.0, 2.0, &mut r);
            let labels = random_labels(&mut r, h * w, n_class);
            all_x.extend_from_slice(x.data());
            all_l.extend(indices(&labels));
            let xv = g.constant(x);
            let field = LabelField::new(h, w, n_class, labels).map_err(|e| e.to_string())?;
            pairs.push(flatten_pair(&mut g, xv, &field).map_err(|e| e.to_string())?);
        }
        let centers = batch_centers(&mut g, &pairs, false).map_err(|e| e.to_string())?;
        let (mu, _) = oracle::centers(&all_x, c, &all_l, n_class);
        let flat: Vec<f64> = mu.concat();
        worst[0] = worst[0].max(max_diff(g.value(centers.mu).data(), &flat));
    }
    check(worst[0] <= 1e-12, || format!("centers off by {:.2e}", worst[0]))?;

    let cfg = AttentionConfig::new(6, 2).map_err(|e| e.to_string())?;
    for seed in 0..5 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for (h, w) in [(1, 7), (5, 1)] {
            let t = |r: &mut ChaCha8Rng| Tensor::uniform(&[1, h, w, 6], -1.5, 1.5, r);
            let (q, k, v) = (t(&mut r), t(&mut r), t(&mut r));
            let want = oracle::attention(q.data(), k.data(), v.data(), h * w, 2, 3);
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
            let out = synced_axial_core(&mut g, qv, kv, vv, &cfg).map_err(|e| e.to_string())?.out;
            worst[1] = worst[1].max(max_diff(g.value(out).data(), &want));
        }
    }
    check(worst[1] <= 1e-10, || format!("SAA off by {:.2e}", worst[1]))?;

    for seed in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let (h, w, c, n_class) = (6, 6, 4, 3);
        let x = Tensor::uniform(&[h, w, c], -1.0, 1.0, &mut r);
        let labels = random_labels(&mut r, h * w, n_class);
        let idx = indices(&labels);
        let cfg = CarConfig {
            eps0: r.random_range(0.0..1.0),
            eps1: r.random_range(0.0..1.0),
            ..CarConfig::default()
        };
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let field = LabelField::new(h, w, n_class, labels).map_err(|e| e.to_string())?;
        let pair = flatten_pair(&mut g, xv, &field).map_err(|e| e.to_string())?;
        let (_, parts) = car_parts(&mut g, &pair, &cfg).map_err(|e| e.to_string())?;
        let [intra, c2c, c2p] = parts.values(&g);
        let d = [
            (intra - oracle::intra_loss(x.data(), c, &idx, n_class)).abs(),
            (c2c - oracle::c2c_loss(x.data(), c, &idx, n_class, cfg.eps0)).abs(),
            (c2p - oracle::c2p_loss(x.data(), c, &idx, n_class, cfg.eps1)).abs(),
        ];
        worst[2] = worst[2].max(d.into_iter().fold(0.0, f64::max));
    }
    check(worst[2] <= 1e-10, || format!("losses off by {:.2e}", worst[2]))?;
    Ok(format!(
        "centers {:.1e}, SAA {:.1e}, losses {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

fn margin_boundary() -> Outcome {
    let value = |eps0: f64| -> Result<f64, String> {
        let mut g = Graph::new();
        // two pixels, one per class, with the same feature: identical centers
        let x = g.constant(Tensor::new(&[1, 2, 3], vec![0.3, -1.2, 0.7, 0.3, -1.2, 0.7]).unwrap());
        let field = LabelField::new(1, 2, 2, vec![0, 1]).map_err(|e| e.to_string())?;
        let pair = flatten_pair(&mut g, x, &field).map_err(|e| e.to_string())?;
        let centers = batch_centers(&mut g, &[pair], false).map_err(|e| e.to_string())?;
        let cfg = CarConfig {
            eps0,
            ..CarConfig::default()
        };
        let loss = inter_c2c_loss(&mut g, &centers, &cfg).map_err(|e| e.to_string())?;
        Ok(g.value(loss.value).item())
    };
    let (at_half, at_zero) = (value(0.5)?, value(0.0)?);
    check(at_half == 0.0, || format!("eps0=0.5 gave {at_half}"))?;
    check(at_zero == 0.25, || format!("eps0=0 gave {at_zero}"))?;
    Ok(format!("eps0=0.5 -> {at_half}, eps0=0 -> {at_zero}"))
}

fn zero_overhead() -> Outcome {
    let model = Model::new(ModelConfig::toy(4), 8).map_err(|e| e.to_string())?;
    let spec = card_harness::dataset::BiasSpec {
        image_size: 32,
        n_train: 2,
        n_test: 1,
        ..Default::default()
    };
    let ds = gen_dataset(&spec, 8).map_err(|e| e.to_string())?;
    let batch: Vec<_> = ds.train.iter().map(|e| e.sample.clone()).collect();
    let tc = TrainConfig::default();
    let mut prefixes = Vec::new();
    let mut sizes = Vec::new();
    for car in [CarConfig::default(), CarConfig::disabled()] {
        let mut b = Binder::new(&model.params, true, Mode::Train);
        let lg = build_loss_graph(&model, &mut b, &batch, &car, &tc).map_err(|e| e.to_string())?;
        let end = lg.forward.logits.index() + 1;
        prefixes.push((lg.graph.trace()[..end].to_vec(), lg.graph.value(lg.forward.logits).clone()));
        sizes.push(lg.graph.len());
    }
    check(prefixes[0].0 == prefixes[1].0, || "op traces differ".into())?;
    check(prefixes[0].1 == prefixes[1].1, || "logits differ".into())?;
    let inf = model.infer(&[batch[0].image.clone()]).map_err(|e| e.to_string())?;
    Ok(format!(
        "{} forward ops identical, logits bit-equal; CAR adds {} training-only ops; inference graph {} ops",
        prefixes[0].0.len(),
        sizes[0] - sizes[1],
        inf.trace.len()
    ))
}

fn flop_audit() -> Outcome {
    for (h, w, c) in [(8, 8, 8), (64, 64, 64), (17, 5, 12), (128, 256, 32)] {
        let dense = attention_flops(h, w, c, AttentionVariant::Dense).map_err(|e| e.to_string())?;
        let saa = attention_flops(h, w, c, AttentionVariant::Saa).map_err(|e| e.to_string())?;
        // saa / dense == (h + w) / (h w), compared without rounding
        check(saa as u128 * (h * w) as u128 == dense as u128 * (h + w) as u128, || {
            format!("{h}x{w}x{c}: {saa}/{dense}")
        })?;
    }
    let (h, w, c) = (8, 8, 16);
    let cfg = AttentionConfig::new(c, 4).map_err(|e| e.to_string())?;
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let mut t = || g.constant(Tensor::uniform(&[1, h, w, c], -1.0, 1.0, &mut r));
    let (q, k, v) = (t(), t(), t());
    reset_multiply_counter();
    synced_axial_core(&mut g, q, k, v, &cfg).map_err(|e| e.to_string())?;
    let saa = multiply_count();
    reset_multiply_counter();
    dense_attention_core(&mut g, q, k, v, &cfg).map_err(|e| e.to_string())?;
    let dense = multiply_count();
    let want = (
        attention_flops(h, w, c, AttentionVariant::Saa).unwrap(),
        attention_flops(h, w, c, AttentionVariant::Dense).unwrap(),
    );
    check((saa, dense) == want, || format!("counted {saa}/{dense}, analytic {want:?}"))?;
    check(saa < dense, || "SAA not cheaper".into())?;
    let big = (
        attention_flops(64, 64, 64, AttentionVariant::Saa).unwrap(),
        attention_flops(64, 64, 64, AttentionVariant::Dense).unwrap(),
    );
    Ok(format!(
        "8x8: counted saa {saa} dense {dense} = analytic; 64x64x64 ratio 1/{}",
        big.1 / big.0
    ))
}

fn generalization() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let (mut held_on, mut held_off) = (Vec::new(), Vec::new());
    let mut dep_ok = true;
    for seed in 0..3 {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        let ds = gen_dataset(&cfg.data, seed).map_err(|e| e.to_string())?;
        let mut res = Vec::new();
        for car_on in [true, false] {
            cfg.car_on = car_on;
            let (_, report) = experiment(&cfg, &ds).map_err(|e| e.to_string())?;
            let held = report.eval.held_out.as_ref().map_or(f64::NAN, |r| r.mean);
            res.push((report.dependency.off_diagonal_mean(), held));
        }
        dep_ok &= res[0].0 < res[1].0;
        held_on.push(res[0].1);
        held_off.push(res[1].1);
        lines.push(format!(
            "seed {seed}: dep {:.4}/{:.4} held-out {:.4}/{:.4}",
            res[0].0, res[1].0, res[0].1, res[1].1
        ));
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (m_on, m_off) = (median(&mut held_on), median(&mut held_off));
    let elapsed = start.elapsed();
    let detail = format!(
        "[on/off] {}; median held-out {m_on:.4}/{m_off:.4}; {elapsed:.0?}",
        lines.join("; ")
    );
    check(dep_ok, || format!("(a) dependency not lower with CAR in every seed: {detail}"))?;
    check(m_on > m_off, || format!("(b) median held-out mIOU not higher with CAR: {detail}"))?;
    check(elapsed < Duration::from_secs(600), || format!("over 10 min: {detail}"))?;
    Ok(detail)
}

fn ejpu_contract() -> Outcome {
    let chans = [4, 5, 6];
    let pyramid = |g: &mut Graph, seed: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let levels = chans
            .iter()
            .enumerate()
            .map(|(i, &c)| g.leaf(Tensor::randn(&[1, 8 >> i, 8 >> i, c], 1.0, &mut r)))
            .collect();
        FeaturePyramid { levels }
    };
    let store = |cfg: &EjpuConfig| {
        let mut s = ParamStore::new();
        init_ejpu(&mut s, "ejpu", &chans, cfg, &mut ChaCha8Rng::seed_from_u64(9));
        s
    };

    // the JPU branch alone gives the top level no gradient, lower levels some
    let cfg = EjpuConfig {
        width: 2,
        out_channels: 6,
        ..EjpuConfig::default()
    };
    let s = store(&cfg);
    let mut g = Graph::new();
    let p = pyramid(&mut g, 1);
    let mut b = Binder::new(&s, false, Mode::Train);
    let jpu = jpu_branch(&mut g, &mut b, "ejpu", &p, &cfg).map_err(|e| e.to_string())?;
    let weights = g.constant(Tensor::randn(g.shape(jpu), 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
    let weighted = g.mul(jpu, weights).map_err(|e| e.to_string())?;
    let loss = g.sum(weighted);
    let grads = g.backward(loss).map_err(|e| e.to_string())?;
    let top = grads.get_or_zeros(p.top(), g.shape(p.top()));
    let low = grads.get_or_zeros(p.base(), g.shape(p.base()));
    check(top.data().iter().all(|&v| v == 0.0), || "top level receives JPU gradient".into())?;
    check(low.norm() > 0.0, || "base level receives no gradient".into())?;

    // zero-initialised calibration: output is exactly the bilinear upsample
    let zero = EjpuConfig {
        calibration_std: 0.0,
        ..cfg
    };
    let s = store(&zero);
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new();
        let p = pyramid(&mut g, 3);
        let mut b = Binder::new(&s, false, mode);
        let y = ejpu_forward(&mut g, &mut b, "ejpu", &p, &zero).map_err(|e| e.to_string())?;
        let up = g.bilinear_resize(p.top(), 8, 8).map_err(|e| e.to_string())?;
        check(g.value(y) == g.value(up), || format!("{mode:?}: not bit-identical to bilinear"))?;
    }
    Ok(format!("top-level JPU grad exactly 0 (base grad norm {:.3}); zero init bit-exact in train and eval", low.norm()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "image_size = 32\nn_train = 8\nn_test = 4\niters = 25\nbatch_size = 4\nmap_row = 5\nmap_col = 20\n").unwrap();
    let run = |out: &Path| -> Result<(), String> {
        for args in [
            vec!["train", "--seed", "11"],
            vec!["maps", "--seed", "11"],
            vec!["flops", "--h", "8", "--w", "8", "--c", "16"],
        ] {
            let o = Command::new(env!("CARGO_BIN_EXE_card"))
                .args(&args)
                .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
                .output()
                .map_err(|e| e.to_string())?;
            check(o.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))?;
        }
        Ok(())
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a)?;
    run(&b)?;
    let mut compared = Vec::new();
    for entry in std::fs::read_dir(&a).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let n = name.to_string_lossy().into_owned();
        if !n.ends_with(".csv") {
            continue;
        }
        let x = std::fs::read(a.join(&name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(&name)).map_err(|e| format!("{n}: {e}"))?;
        check(x == y, || format!("{n} differs"))?;
        compared.push(n);
    }
    compared.sort();
    check(compared.len() >= 5, || format!("only {compared:?}"))?;
    Ok(format!("byte-identical: {}", compared.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("oracle suite", oracle_suite),
        ("margin boundary", margin_boundary),
        ("zero inference overhead", zero_overhead),
        ("FLOP audit", flop_audit),
        ("directional generalization", generalization),
        ("EJPU contract", ejpu_contract),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {} {name}: {tag} - {detail}", i + 1);
    }
    println!("acceptance: {} of {} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
