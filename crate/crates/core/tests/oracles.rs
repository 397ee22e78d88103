#[path = "support/oracle.rs"]
mod oracle;

use card_core::car::{car_parts, CarConfig};
use card_core::centers::{batch_centers, flatten_pair, LabelField, IGNORE};
use card_core::model::ce_loss;
use card_core::nn::{Binder, Mode, ParamStore};
use card_core::saa::{dense_attention_core, saa_forward, synced_axial_core, AttentionConfig, SaaWeights};
use card_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_labels(r: &mut ChaCha8Rng, n: usize, n_class: usize) -> Vec<u8> {
    (0..n)
        .map(|_| if r.random::<f64>() < 0.1 { IGNORE } else { r.random_range(0..n_class) as u8 })
        .collect()
}

fn indices(labels: &[u8]) -> Vec<Option<usize>> {
    labels.iter().map(|&l| (l != IGNORE).then_some(l as usize)).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn batch_centers_match_double_loop_means() {
    for seed in 0..10 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c, n_class) = (5, 4, 3, 4);
        let mut g = Graph::new();
        let mut pairs = Vec::new();
        let mut all_x = Vec::new();
        let mut all_l = Vec::new();
        for _ in 0..3 {
            let x = Tensor::uniform(&[h, w, c], -2.0, 2.0, &mut r);
            let labels = random_labels(&mut r, h * w, n_class);
            all_x.extend_from_slice(x.data());
            all_l.extend(indices(&labels));
            let xv = g.constant(x);
            pairs.push(flatten_pair(&mut g, xv, &LabelField::new(h, w, n_class, labels).unwrap()).unwrap());
        }
        let centers = batch_centers(&mut g, &pairs, false).unwrap();
        let (mu, counts) = oracle::centers(&all_x, c, &all_l, n_class);
        assert_eq!(centers.counts, counts);
        for k in 0..n_class {
            assert_eq!(centers.present[k], counts[k] > 0);
            close(&g.value(centers.mu).data()[k * c..(k + 1) * c], &mu[k], 1e-12);
        }
    }
}

#[test]
fn car_losses_match_scalar_reimplementation() {
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
        let pair = flatten_pair(&mut g, xv, &LabelField::new(h, w, n_class, labels).unwrap()).unwrap();
        let (_, parts) = car_parts(&mut g, &pair, &cfg).unwrap();
        let [intra, c2c, c2p] = parts.values(&g);
        assert!((intra - oracle::intra_loss(x.data(), c, &idx, n_class)).abs() <= 1e-10);
        assert!((c2c - oracle::c2c_loss(x.data(), c, &idx, n_class, cfg.eps0)).abs() <= 1e-10);
        assert!((c2p - oracle::c2p_loss(x.data(), c, &idx, n_class, cfg.eps1)).abs() <= 1e-10);
    }
}

#[test]
fn car_losses_with_absent_class_match_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let (h, w, c, n_class) = (6, 6, 3, 3);
    let x = Tensor::uniform(&[h, w, c], -1.0, 1.0, &mut r);
    // class 2 never appears; the margin still uses N_class = 3
    let labels: Vec<u8> = (0..h * w).map(|i| if i % 7 == 0 { IGNORE } else { (i % 2) as u8 }).collect();
    let idx = indices(&labels);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let pair = flatten_pair(&mut g, xv, &LabelField::new(h, w, n_class, labels).unwrap()).unwrap();
    let cfg = CarConfig::default();
    let (_, parts) = car_parts(&mut g, &pair, &cfg).unwrap();
    let [intra, c2c, c2p] = parts.values(&g);
    assert!((intra - oracle::intra_loss(x.data(), c, &idx, n_class)).abs() <= 1e-10);
    assert!((c2c - oracle::c2c_loss(x.data(), c, &idx, n_class, cfg.eps0)).abs() <= 1e-10);
    assert!((c2p - oracle::c2p_loss(x.data(), c, &idx, n_class, cfg.eps1)).abs() <= 1e-10);
}

#[test]
fn cross_entropy_matches_scalar_reimplementation() {
    for seed in 0..5 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::uniform(&[1, 4, 5, 3], -3.0, 3.0, &mut r);
        let labels = random_labels(&mut r, 20, 3);
        let idx = indices(&labels);
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let ce = ce_loss(&mut g, l, &[LabelField::new(4, 5, 3, labels).unwrap()]).unwrap();
        let expected = oracle::cross_entropy(logits.data(), 3, &idx);
        assert!((g.value(ce.value).item() - expected).abs() <= 1e-12);
    }
}

fn projected_qkv(r: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> [Tensor; 3] {
    [
        Tensor::uniform(&[n, h, w, c], -1.5, 1.5, r),
        Tensor::uniform(&[n, h, w, c], -1.5, 1.5, r),
        Tensor::uniform(&[n, h, w, c], -1.5, 1.5, r),
    ]
}

#[test]
fn axial_core_on_single_row_or_column_is_dense_attention() {
    let cfg = AttentionConfig::new(6, 2).unwrap();
    for seed in 0..5 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for (h, w) in [(1, 7), (5, 1)] {
            let [q, k, v] = projected_qkv(&mut r, 1, h, w, 6);
            let expected = oracle::attention(q.data(), k.data(), v.data(), h * w, 2, 3);
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
            let axial = synced_axial_core(&mut g, qv, kv, vv, &cfg).unwrap().out;
            let dense = dense_attention_core(&mut g, qv, kv, vv, &cfg).unwrap();
            close(g.value(axial).data(), &expected, 1e-10);
            close(g.value(dense).data(), &expected, 1e-10);
        }
    }
}

#[test]
fn dense_core_matches_oracle_on_grid() {
    let cfg = AttentionConfig::new(4, 2).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let [q, k, v] = projected_qkv(&mut r, 1, 3, 4, 4);
    let expected = oracle::attention(q.data(), k.data(), v.data(), 12, 2, 2);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let dense = dense_attention_core(&mut g, qv, kv, vv, &cfg).unwrap();
    close(g.value(dense).data(), &expected, 1e-10);
}

#[test]
fn full_mixer_on_single_row_matches_loop_pipeline() {
    let (w, c, heads) = (6, 4, 2);
    let cfg = AttentionConfig::new(c, heads).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    SaaWeights::init(&mut store, "m", &cfg, &mut r);
    let x = Tensor::uniform(&[1, w, c], -1.0, 1.0, &mut r);

    let get = |n: &str| store.get(&format!("m.{n}")).unwrap().data().to_vec();
    let (pos, _, _) = oracle::conv2d(x.data(), 1, w, c, &get("cpe"), 3, c, 1, 1, c);
    let xp: Vec<f64> = x.data().iter().zip(&pos).map(|(a, b)| a + b).collect();
    let proj = |k: &[f64], inp: &[f64]| oracle::conv2d(inp, 1, w, c, k, 1, c, 1, 1, 1).0;
    let (q, k, v) = (proj(&get("query"), &xp), proj(&get("key"), &xp), proj(&get("value"), &xp));
    let attended = oracle::attention(&q, &k, &v, w, heads, c / heads);
    let expected = proj(&get("out"), &attended);

    let mut g = Graph::new();
    let mut b = Binder::new(&store, false, Mode::Eval);
    let weights = SaaWeights::bind(&mut b, &mut g, "m").unwrap();
    let xv = g.constant(x);
    let out = saa_forward(&mut g, xv, &weights, &cfg).unwrap().out;
    close(g.value(out).data(), &expected, 1e-10);
}

#[test]
fn conv_matches_nested_loops() {
    let configs = [(3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 2, 1), (3, 1, 1, 2), (1, 1, 1, 1), (3, 2, 3, 4)];
    for (i, &(k, stride, dilation, groups)) in configs.iter().enumerate() {
        let mut r = ChaCha8Rng::seed_from_u64(i as u64);
        let (h, w, cin, cout) = (7, 6, 4, 4);
        let x = Tensor::uniform(&[1, h, w, cin], -1.0, 1.0, &mut r);
        let kern = Tensor::uniform(&[k, k, cin / groups, cout], -1.0, 1.0, &mut r);
        let (expected, ho, wo) = oracle::conv2d(x.data(), h, w, cin, kern.data(), k, cout, stride, dilation, groups);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x), g.constant(kern));
        let y = g.conv2d(xv, kv, stride, dilation, groups).unwrap();
        assert_eq!(g.shape(y), &[1, ho, wo, cout]);
        close(g.value(y).data(), &expected, 1e-12);
    }
}

#[test]
fn conv_all_ones_interior_is_nine() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[5, 5, 1]));
    let k = g.constant(Tensor::ones(&[3, 3, 1, 1]));
    let y = g.conv2d(x, k, 1, 1, 1).unwrap();
    assert_eq!(g.value(y).at(&[2, 2, 0]), 9.0);
    assert_eq!(g.value(y).at(&[0, 0, 0]), 4.0);
}

#[test]
fn bilinear_matches_interpolation_oracle() {
    let mut g = Graph::new();
    let x = Tensor::new(&[2, 2, 1], vec![0., 1., 2., 3.]).unwrap();
    let xv = g.constant(x.clone());
    let y = g.bilinear_resize(xv, 4, 4).unwrap();
    close(g.value(y).data(), &oracle::bilinear(x.data(), 2, 2, 1, 4, 4), 1e-15);
    // first row: clamp, quarter steps, clamp
    close(&g.value(y).data()[..4], &[0.0, 0.25, 0.75, 1.0], 1e-15);

    let mut r = ChaCha8Rng::seed_from_u64(5);
    for (h, w, ho, wo) in [(3, 5, 7, 2), (6, 6, 3, 3), (4, 3, 4, 3)] {
        let x = Tensor::uniform(&[h, w, 2], -1.0, 1.0, &mut r);
        let xv = g.constant(x.clone());
        let y = g.bilinear_resize(xv, ho, wo).unwrap();
        close(g.value(y).data(), &oracle::bilinear(x.data(), h, w, 2, ho, wo), 1e-13);
    }
}

#[test]
fn matmul_and_softmax_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);

    let s = g.constant(Tensor::new(&[2], vec![2f64.ln(), 0.0]).unwrap());
    let y = g.softmax(s, 0).unwrap();
    close(g.value(y).data(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15);
    close(g.value(y).data(), &oracle::softmax(&[2f64.ln(), 0.0]), 1e-15);
}
