use super::*;
use crate::graph::build_graph;
use ndarray::{array, Array1};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(n: usize, edge_prob: f64, dim: usize, classes: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < edge_prob {
                edges.push((u, v));
            }
        }
    }
    let feats = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0));
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let train: Vec<bool> = (0..n).map(|v| v % 3 != 0).collect();
    let test: Vec<bool> = train.iter().map(|t| !t).collect();
    build_graph(&edges, feats, labels)
        .unwrap()
        .with_num_classes(classes)
        .unwrap()
        .with_masks(train, test)
        .unwrap()
}

fn small_params(dim: usize, hidden: usize, classes: usize, seed: u64) -> ModelParams {
    ModelParams::glorot(dim, classes, GatHyper { hidden_dim: hidden, leaky_slope: 0.2 }, seed)
}

/// Dense oracle: full n×n attention with an adjacency mask.
fn dense_layer(h: &Array2<f64>, g: &Graph, w: &Array2<f64>, a: &Array1<f64>, act: Activation, slope: f64) -> (Array2<f64>, Array2<f64>) {
    let n = g.num_nodes();
    let f = w.nrows();
    let mut z = Array2::<f64>::zeros((n, f));
    for u in 0..n {
        for i in 0..f {
            z[[u, i]] = (0..w.ncols()).map(|j| w[[i, j]] * h[[u, j]]).sum();
        }
    }
    let mut mask = Array2::from_elem((n, n), false);
    for v in 0..n {
        mask[[v, v]] = true;
        for &u in g.neighbors(v).unwrap() {
            mask[[u, v]] = true;
        }
    }
    let mut alpha = Array2::<f64>::zeros((n, n));
    for v in 0..n {
        let mut e = vec![f64::NEG_INFINITY; n];
        for u in 0..n {
            if mask[[u, v]] {
                let mut s = 0.0f64;
                for i in 0..f {
                    s += a[i] * z[[u, i]] + a[f + i] * z[[v, i]];
                }
                e[u] = if s > 0.0 { s } else { slope * s };
            }
        }
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = e.iter().map(|x| (x - m).exp()).sum();
        for u in 0..n {
            alpha[[u, v]] = (e[u] - m).exp() / total;
        }
    }
    let mut out = Array2::<f64>::zeros((n, f));
    for v in 0..n {
        for i in 0..f {
            let s: f64 = (0..n).map(|u| alpha[[u, v]] * z[[u, i]]).sum();
            out[[v, i]] = match act {
                Activation::Elu if s <= 0.0 => s.exp() - 1.0,
                _ => s,
            };
        }
    }
    (out, alpha)
}

#[test]
fn attention_logit_examples() {
    let w = Array2::eye(2);
    let a = Array1::ones(4);
    let h = array![1.0, 0.0];
    assert_eq!(attention_logits(h.view(), h.view(), w.view(), a.view(), 0.2).unwrap(), 2.0);
    let h = array![-0.5, 0.0];
    let e = attention_logits(h.view(), h.view(), w.view(), a.view(), 0.2).unwrap();
    assert!((e + 0.2).abs() < 1e-15);
    let short = Array1::ones(3);
    assert!(attention_logits(h.view(), h.view(), w.view(), short.view(), 0.2).is_err());
}

#[test]
fn attention_logit_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let w = Array2::from_shape_fn((3, 5), |_| rng.random_range(-2.0..2.0));
        let a = Array1::from_shape_fn(6, |_| rng.random_range(-2.0..2.0));
        let hu = Array1::from_shape_fn(5, |_| rng.random_range(-2.0..2.0));
        let hv = Array1::from_shape_fn(5, |_| rng.random_range(-2.0..2.0));
        let mut s = 0.0;
        for i in 0..3 {
            let zu: f64 = (0..5).map(|j| w[[i, j]] * hu[j]).sum();
            let zv: f64 = (0..5).map(|j| w[[i, j]] * hv[j]).sum();
            s += a[i] * zu + a[3 + i] * zv;
        }
        let expected = if s > 0.0 { s } else { 0.2 * s };
        let got = attention_logits(hu.view(), hv.view(), w.view(), a.view(), 0.2).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }
}

#[test]
fn isolated_node_attends_to_itself() {
    let g = build_graph(&[(0, 1)], array![[1.0, -2.0], [0.0, 1.0], [-1.5, 0.5]], vec![0, 0, 0]).unwrap();
    let w = array![[1.0, 2.0], [0.5, -1.0]];
    let a = Array1::from(vec![0.3, -0.1, 0.2, 0.4]);
    let t = layer_forward(g.features(), &g, &w, &a, Activation::Elu, 0.2).unwrap();
    let (src, alpha) = t.attention_of(2);
    assert_eq!(src, &[2]);
    assert_eq!(alpha, &[1.0]);
    let wx = w.dot(&g.features().row(2));
    for i in 0..2 {
        assert!((t.output[[2, i]] - Activation::Elu.apply(wx[i])).abs() < 1e-15);
    }
}

#[test]
fn identical_features_split_attention_evenly() {
    let g = build_graph(&[(0, 1)], array![[0.7, 0.2], [0.7, 0.2]], vec![0, 1]).unwrap();
    let p = small_params(2, 3, 2, 1);
    let t = layer_forward(g.features(), &g, &p.w1, &p.a1, Activation::Elu, 0.2).unwrap();
    for v in 0..2 {
        let (_, alpha) = t.attention_of(v);
        assert!(alpha.iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }
}

#[test]
fn layer_matches_dense_oracle_on_random_graph() {
    for seed in 0..5 {
        let g = random_graph(20, 0.2, 4, 2, seed);
        let p = small_params(4, 6, 2, seed + 100);
        for (w, a, act) in [(&p.w1, &p.a1, Activation::Elu)] {
            let t = layer_forward(g.features(), &g, w, a, act, 0.2).unwrap();
            let (dense_out, dense_alpha) = dense_layer(g.features(), &g, w, a, act, 0.2);
            for v in 0..20 {
                let (src, alpha) = t.attention_of(v);
                assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (&u, &al) in src.iter().zip(alpha) {
                    assert!((al - dense_alpha[[u, v]]).abs() < 1e-12);
                }
            }
            let diff = (&t.output - &dense_out).mapv(f64::abs).fold(0.0, |m: f64, &x| m.max(x));
            assert!(diff < 1e-10, "max diff {diff}");
        }
    }
}

#[test]
fn zero_model_gives_uniform_softmax() {
    let g = random_graph(10, 0.3, 4, 2, 3);
    let g = g.clone().with_features(Array2::zeros((10, 4))).unwrap();
    let p = ModelParams::zeros(4, 2, GatHyper::default());
    let t = model_forward(&g, &p).unwrap();
    assert!(t.logits().iter().all(|&x| x == 0.0));
    let loss = masked_loss(&t, g.labels(), g.train_mask()).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn forward_is_permutation_equivariant() {
    let g = random_graph(15, 0.25, 5, 3, 8);
    let p = small_params(5, 7, 3, 9);
    let mut perm: Vec<usize> = (0..15).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    use rand::seq::SliceRandom;
    perm.shuffle(&mut rng);
    let gp = g.permute(&perm).unwrap();
    let a = model_forward(&g, &p).unwrap();
    let b = model_forward(&gp, &p).unwrap();
    for v in 0..15 {
        for c in 0..3 {
            assert!((a.logits()[[v, c]] - b.logits()[[perm[v], c]]).abs() < 1e-12);
        }
    }
}

#[test]
fn large_inputs_stay_finite() {
    let mut g = random_graph(20, 0.3, 4, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    g = g.with_features(Array2::from_shape_fn((20, 4), |_| rng.random_range(-10.0..10.0))).unwrap();
    let p = small_params(4, 64, 2, 7);
    let t = model_forward(&g, &p).unwrap();
    assert!(t.hidden_states().iter().all(|x| x.is_finite()));
    assert!(t.logits().iter().all(|x| x.is_finite()));
}

#[test]
fn loss_examples() {
    let g = build_graph(&[], Array2::zeros((1, 2)), vec![0]).unwrap();
    let p = ModelParams::zeros(2, 2, GatHyper { hidden_dim: 2, leaky_slope: 0.2 });
    let mut t = model_forward(&g, &p).unwrap();
    t.output.output = array![[20.0, -20.0]];
    assert!(masked_loss(&t, &[0], &[true]).unwrap() < 1e-8);
    assert_eq!(masked_loss(&t, &[0], &[false]), Err(GatError::EmptyMask));
}

#[test]
fn loss_matches_scalar_oracle() {
    let g = random_graph(12, 0.3, 3, 3, 11);
    let p = small_params(3, 4, 3, 12);
    let t = model_forward(&g, &p).unwrap();
    let mut total = 0.0;
    let mut count = 0.0;
    for v in 0..12 {
        if g.train_mask()[v] {
            let z: Vec<f64> = t.logits().row(v).to_vec();
            let denom: f64 = z.iter().map(|x| x.exp()).sum();
            total += -(z[g.labels()[v]].exp() / denom).ln();
            count += 1.0;
        }
    }
    let got = masked_loss(&t, g.labels(), g.train_mask()).unwrap();
    assert!((got - total / count).abs() < 1e-12);
}

fn max_relative_fd_error(g: &Graph, p: &ModelParams, coords: &[usize]) -> f64 {
    let nodes = g.train_nodes();
    let (_, grad) = loss_and_gradient(g, p, g.labels(), &nodes).unwrap();
    let base = p.flatten();
    let h = 1e-5;
    let loss_at = |flat: &[f64]| {
        let q = p.unflatten(flat).unwrap();
        loss_over(&model_forward(g, &q).unwrap(), g.labels(), &nodes).unwrap()
    };
    coords
        .iter()
        .map(|&i| {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6)
        })
        .fold(0.0, f64::max)
}

#[test]
fn gradient_matches_finite_differences_on_12_node_graph() {
    let g = random_graph(12, 0.3, 4, 3, 21);
    let p = small_params(4, 5, 3, 22);
    let coords: Vec<usize> = (0..p.param_count()).collect();
    let err = max_relative_fd_error(&g, &p, &coords);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn saturated_predictions_have_vanishing_gradient() {
    let labels = vec![0, 1, 1, 0];
    let feats = Array2::from_shape_fn((4, 2), |(v, j)| if labels[v] == j { 1.0 } else { 0.0 });
    let g = build_graph(&[], feats, labels.clone())
        .unwrap()
        .with_masks(vec![true; 4], vec![false; 4])
        .unwrap();
    let hyper = GatHyper { hidden_dim: 2, leaky_slope: 0.2 };
    let mut p = ModelParams::zeros(2, 2, hyper);
    p.w1 = Array2::eye(2);
    p.w2 = Array2::eye(2) * 60.0;
    let grad = backward(&g, &p, &labels, g.train_mask()).unwrap();
    let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm < 1e-6, "norm {norm}");
}

#[test]
fn duplicated_isolated_node_adds_its_own_gradient() {
    let base = random_graph(8, 0.4, 3, 2, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let iso: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let iso_label = 1;
    let build = |copies: usize| {
        let n = 8 + copies;
        let mut feats = Array2::zeros((n, 3));
        feats.slice_mut(ndarray::s![..8, ..]).assign(base.features());
        for c in 0..copies {
            for j in 0..3 {
                feats[[8 + c, j]] = iso[j];
            }
        }
        let mut labels = base.labels().to_vec();
        labels.extend(std::iter::repeat(iso_label).take(copies));
        let mut train = base.train_mask().to_vec();
        train.extend(std::iter::repeat(true).take(copies));
        let test: Vec<bool> = train.iter().map(|t| !t).collect();
        build_graph(&base.edges(), feats, labels)
            .unwrap()
            .with_num_classes(2)
            .unwrap()
            .with_masks(train, test)
            .unwrap()
    };
    let p = small_params(3, 4, 2, 33);
    let sum_grad = |g: &Graph| {
        let nodes = g.train_nodes();
        let (_, grad) = loss_and_gradient(g, &p, g.labels(), &nodes).unwrap();
        grad.into_iter().map(|x| x * nodes.len() as f64).collect::<Vec<_>>()
    };
    let one = sum_grad(&build(1));
    let two = sum_grad(&build(2));
    let single = build_graph(&[], Array2::from_shape_vec((1, 3), iso.clone()).unwrap(), vec![iso_label])
        .unwrap()
        .with_num_classes(2)
        .unwrap()
        .with_masks(vec![true], vec![false])
        .unwrap();
    let alone = sum_grad(&single);
    for i in 0..one.len() {
        assert!((two[i] - (one[i] + alone[i])).abs() < 1e-12, "coordinate {i}");
    }
}

#[test]
fn sgd_step_examples() {
    let p = small_params(3, 4, 2, 1);
    let grad: Vec<f64> = (0..p.param_count()).map(|i| (i as f64).sin()).collect();
    assert_eq!(sgd_step(&p, &grad, 0.0).unwrap(), p);
    let zero = ModelParams::zeros(3, 2, p.hyper);
    let ones = vec![1.0; p.param_count()];
    assert!(sgd_step(&zero, &ones, 0.005).unwrap().flatten().iter().all(|&x| x == -0.005));
    let half = sgd_step(&sgd_step(&p, &grad, 0.0025).unwrap(), &grad, 0.0025).unwrap();
    let full = sgd_step(&p, &grad, 0.005).unwrap();
    for (a, b) in half.flatten().iter().zip(full.flatten()) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(sgd_step(&p, &ones[1..], 0.1).is_err());
}

#[test]
fn predict_breaks_ties_low() {
    assert_eq!(predict(&array![[0.0, 0.0], [1.0, 2.0], [3.0, 3.0]]), vec![0, 1, 0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn attention_rows_normalize(seed in any::<u64>(), n in 1usize..25, prob in 0.0f64..0.6) {
        let g = random_graph(n, prob, 3, 2, seed);
        let p = small_params(3, 4, 2, seed ^ 1);
        let t = model_forward(&g, &p).unwrap();
        for layer in [&t.hidden, &t.output] {
            for v in 0..n {
                let (_, alpha) = layer.attention_of(v);
                prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
