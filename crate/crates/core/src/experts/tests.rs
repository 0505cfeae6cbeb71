use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::connectivity::WpliAdjacency;
use crate::diff::{check_param_gradients, Graph, ParamStore, Tensor, BN_EPS};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_wpli(r: &mut ChaCha8Rng, c: usize) -> WpliAdjacency {
    let mut a = WpliAdjacency::zeros(c);
    for i in 0..c {
        for j in i + 1..c {
            let v = r.random_range(0.0..1.0);
            a.values[i * c + j] = v;
            a.values[j * c + i] = v;
        }
    }
    a
}

fn batch_of(r: &mut ChaCha8Rng, b: usize, c: usize, t: usize) -> (RegionBatch, Vec<WpliAdjacency>) {
    let x = uniform(r, &[b, c, t]);
    let adj: Vec<WpliAdjacency> = (0..b).map(|_| random_wpli(r, c)).collect();
    let flat = adj.iter().flat_map(normalized_adjacency).collect();
    (RegionBatch { x, adjacency: flat }, adj)
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

/// Column-wise biased batch norm followed by ReLU, gamma = 1, beta = 0.
fn naive_bn_relu(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for j in 0..cols {
        let col: Vec<f64> = (0..rows).map(|i| x[i * cols + j]).collect();
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        for i in 0..rows {
            out[i * cols + j] = ((col[i] - mean) / (var + BN_EPS).sqrt()).max(0.0);
        }
    }
    out
}

fn small_cfg() -> GlDnetConfig {
    GlDnetConfig::default()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    let worst = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= tol, "max deviation {worst:e} > {tol:e}");
}

#[test]
fn normalized_adjacency_matches_matrix_oracle() {
    let mut r = rng(1);
    let a = random_wpli(&mut r, 4);
    let c = 4;
    let mut with_loops = a.values.clone();
    for i in 0..c {
        with_loops[i * c + i] += 1.0;
    }
    let mut d = vec![0.0; c * c];
    for i in 0..c {
        d[i * c + i] = 1.0 / with_loops[i * c..(i + 1) * c].iter().sum::<f64>().sqrt();
    }
    let oracle = naive_matmul(&naive_matmul(&d, &with_loops, c, c, c), &d, c, c, c);
    assert_close(&normalized_adjacency(&a), &oracle, 1e-14);
    let eye = normalized_adjacency(&WpliAdjacency::zeros(3));
    assert_eq!(eye, Tensor::identity(3).into_data());
}

#[test]
fn gcn_matches_dense_oracle() {
    let mut r = rng(2);
    let (b, c, t) = (2, 4, 8);
    let mut store = ParamStore::new();
    let net = GlDnet::new(&mut store, "e", c, t, &small_cfg(), &mut r);
    let (batch, _) = batch_of(&mut r, b, c, t);
    let mut g = Graph::new();
    let h1 = net.gcn_layer(&mut g, &store, &batch, Mode::Train).unwrap();
    assert_eq!(g.shape(h1), &[b * c, 32]);

    let w = store.get(net.gcn_params()[0].0).value.data().to_vec();
    let mut hw = Vec::new();
    for s in 0..b {
        let a = &batch.adjacency[s * c * c..(s + 1) * c * c];
        let x = &batch.x.data()[s * c * t..(s + 1) * c * t];
        hw.extend(naive_matmul(&naive_matmul(a, x, c, c, t), &w, c, t, 32));
    }
    assert_close(g.value(h1).data(), &naive_bn_relu(&hw, b * c, 32), 1e-10);
}

#[test]
fn gcn_without_edges_is_per_node_transform() {
    let mut r = rng(3);
    let (b, c, t) = (3, 4, 8);
    let mut store = ParamStore::new();
    let net = GlDnet::new(&mut store, "e", c, t, &small_cfg(), &mut r);
    let x = uniform(&mut r, &[b, c, t]);
    let adjacency = (0..b)
        .flat_map(|_| normalized_adjacency(&WpliAdjacency::zeros(c)))
        .collect();
    let batch = RegionBatch {
        x: x.clone(),
        adjacency,
    };
    let mut g = Graph::new();
    let h1 = net.gcn_layer(&mut g, &store, &batch, Mode::Train).unwrap();

    let (w, bn) = &net.gcn_params()[0];
    let mut g2 = Graph::new();
    let xc = g2.constant(x.reshaped(vec![b * c, t]).unwrap());
    let wv = g2.param(&store, *w);
    let xw = g2.matmul(xc, wv).unwrap();
    let n = bn.apply(&mut g2, &store, xw, Mode::Train).unwrap();
    let direct = g2.relu(n);
    assert_eq!(g.value(h1), g2.value(direct));
}

#[test]
fn gcn_symmetric_pair_gives_identical_rows() {
    let mut r = rng(4);
    let (b, c, t) = (2, 2, 8);
    let mut store = ParamStore::new();
    let net = GlDnet::new(&mut store, "e", c, t, &small_cfg(), &mut r);
    let row = uniform(&mut r, &[t]).into_data();
    let mut data = Vec::new();
    for _ in 0..b * c {
        data.extend(&row);
    }
    // Second sample differs so batch statistics are non-degenerate.
    for v in &mut data[c * t..] {
        *v *= -0.5;
    }
    let pair = WpliAdjacency {
        channels: 2,
        values: vec![0.0, 1.0, 1.0, 0.0],
    };
    let adjacency = (0..b).flat_map(|_| normalized_adjacency(&pair)).collect();
    let batch = RegionBatch {
        x: Tensor::new(vec![b, c, t], data).unwrap(),
        adjacency,
    };
    let mut g = Graph::new();
    let h1 = net.gcn_layer(&mut g, &store, &batch, Mode::Train).unwrap();
    let v = g.value(h1);
    assert_eq!(v.row(0), v.row(1));
    assert_eq!(v.row(2), v.row(3));
}

#[test]
fn stacked_gcn_layers_run() {
    let mut r = rng(5);
    let cfg = GlDnetConfig {
        gcn_layers: 2,
        ..small_cfg()
    };
    let mut store = ParamStore::new();
    let net = GlDnet::new(&mut store, "e", 3, 8, &cfg, &mut r);
    let (batch, _) = batch_of(&mut r, 2, 3, 8);
    let mut g = Graph::new();
    let h = net.gcn_layer(&mut g, &store, &batch, Mode::Train).unwrap();
    assert_eq!(g.shape(h), &[6, 32]);
    assert!(g.value(h).is_finite());
}

#[test]
fn residual_concat_slices_are_branch_outputs() {
    let mut r = rng(6);
    let (b, c, t) = (2, 3, 8);
    let mut store = ParamStore::new();
    let net = GlDnet::new(&mut store, "e", c, t, &small_cfg(), &mut r);
    let (batch, _) = batch_of(&mut r, b, c, t);
    let mut g = Graph::new();
    let h1 = net.gcn_layer(&mut g, &store, &batch, Mode::Train).unwrap();
    let h2 = net.residual_concat(&mut g, &store, &batch, h1).unwrap();
    assert_eq!(g.shape(h2), &[b * c, 64]);

    let (l0, l1) = net.residual_mlp_params();
    let x = batch.x.data();
    let hidden: Vec<f64> = naive_matmul(x, store.get(l0.weight).value.data(), b * c, t, 64)
        .chunks(64)
        .flat_map(|row| {
            row.iter()
                .zip(store.get(l0.bias).value.data())
                .map(|(v, bb)| (v + bb).max(0.0))
        })
        .collect();
    let mlp: Vec<f64> = naive_matmul(&hidden, store.get(l1.weight).value.data(), b * c, 64, 32)
        .chunks(32)
        .flat_map(|row| row.iter().zip(store.get(l1.bias).value.data()).map(|(v, bb)| v + bb))
        .collect();
    let out = g.value(h2);
    for i in 0..b * c {
        assert_eq!(&out.row(i)[..32], g.value(h1).row(i));
        assert_close(&out.row(i)[32..], &mlp[i * 32..(i + 1) * 32], 1e-12);
    }

    let zero_h1 = g.constant(Tensor::zeros(&[b * c, 32]));
    let h2z = net.residual_concat(&mut g, &store, &batch, zero_h1).unwrap();
    assert!((0..b * c).all(|i| g.value(h2z).row(i)[..32].iter().all(|&v| v == 0.0)));

    for id in [l1.weight, l1.bias] {
        store.get_mut(id).value.data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let h1 = zero_h1_in(&mut g, b * c);
    let h2 = net.residual_concat(&mut g, &store, &batch, h1).unwrap();
    assert!(g.value(h2).data().iter().all(|&v| v == 0.0));
}

fn zero_h1_in(g: &mut Graph, rows: usize) -> crate::diff::Var {
    g.constant(Tensor::zeros(&[rows, 32]))
}

fn attention_oracle(h2: &[f64], c: usize, d: usize, heads: usize, w: [&[f64]; 4]) -> Vec<f64> {
    let dk = d / heads;
    let q = naive_matmul(h2, w[0], c, d, d);
    let k = naive_matmul(h2, w[1], c, d, d);
    let v = naive_matmul(h2, w[2], c, d, d);
    let mut cat = vec![0.0; c * d];
    for h in 0..heads {
        for i in 0..c {
            let scores: Vec<f64> = (0..c)
                .map(|j| {
                    (0..dk)
                        .map(|p| q[i * d + h * dk + p] * k[j * d + h * dk + p])
                        .sum::<f64>()
                        / (dk as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for p in 0..dk {
                cat[i * d + h * dk + p] = (0..c).map(|j| e[j] / z * v[j * d + h * dk + p]).sum();
            }
        }
    }
    naive_matmul(&cat, w[3], c, d, d)
        .iter()
        .zip(h2)
        .map(|(a, b)| a + b)
        .collect()
}

#[test]
fn attention_matches_per_head_oracle() {
    let mut r = rng(7);
    let (b, c) = (2, 3);
    let mut store = ParamStore::new();
    let net = GlDnet::new(&mut store, "e", c, 8, &small_cfg(), &mut r);
    let h2v = uniform(&mut r, &[b * c, 64]);
    let mut g = Graph::new();
    let h2 = g.constant(h2v.clone());
    let hg = net.attention(&mut g, &store, h2, b).unwrap();
    let w = net.attention_params().map(|id| store.get(id).value.data().to_vec());
    for s in 0..b {
        let oracle = attention_oracle(
            &h2v.data()[s * c * 64..(s + 1) * c * 64],
            c,
            64,
            4,
            [&w[0], &w[1], &w[2], &w[3]],
        );
        assert_close(&g.value(hg).data()[s * c * 64..(s + 1) * c * 64], &oracle, 1e-10);
    }
}

#[test]
fn attention_zero_projection_is_residual_and_uniform_rows_stay_uniform() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let net = GlDnet::new(&mut store, "e", 4, 8, &small_cfg(), &mut r);

    let row = uniform(&mut r, &[64]).into_data();
    let same = Tensor::new(vec![4, 64], row.repeat(4)).unwrap();
    let mut g = Graph::new();
    let h2 = g.constant(same);
    let hg = net.attention(&mut g, &store, h2, 1).unwrap();
    let v = g.value(hg);
    assert!((1..4).all(|i| v.row(i) == v.row(0)));

    for id in net.attention_params() {
        store.get_mut(id).value.data_mut().fill(0.0);
    }
    let h2v = uniform(&mut r, &[8, 64]);
    let mut g = Graph::new();
    let h2 = g.constant(h2v.clone());
    let hg = net.attention(&mut g, &store, h2, 2).unwrap();
    assert_eq!(g.value(hg), &h2v);
}

#[test]
fn local_branch_matches_stepwise_oracle() {
    let mut r = rng(9);
    let (b, c, t) = (2, 3, 10);
    let mut store = ParamStore::new();
    let net = GlDnet::new(&mut store, "e", c, t, &small_cfg(), &mut r);
    let (batch, _) = batch_of(&mut r, b, c, t);
    let mut g = Graph::new();
    let out = net.local_branch(&mut g, &store, &batch, Mode::Train).unwrap();
    assert_eq!(g.shape(out), &[b, 16]);

    let (kid, bid, _, ffn) = net.local_params();
    let k = store.get(kid).value.data();
    let bias = store.get(bid).value.data();
    let x = batch.x.data();
    let (n, oc, w) = (b * c, 16, 7);
    let mut conv = vec![0.0; n * oc * t];
    for row in 0..n {
        for o in 0..oc {
            for s in 0..t {
                let mut acc = bias[o];
                for j in 0..w {
                    let src = s as isize + j as isize - 3;
                    if (0..t as isize).contains(&src) {
                        acc += k[o * w + j] * x[row * t + src as usize];
                    }
                }
                conv[(row * oc + o) * t + s] = acc;
            }
        }
    }
    let mut pooled = vec![0.0; b * oc];
    for o in 0..oc {
        let vals: Vec<f64> = (0..n)
            .flat_map(|row| conv[(row * oc + o) * t..(row * oc + o + 1) * t].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for row in 0..n {
            let m: f64 = conv[(row * oc + o) * t..(row * oc + o + 1) * t]
                .iter()
                .map(|v| ((v - mean) / (var + BN_EPS).sqrt()).max(0.0))
                .sum::<f64>()
                / t as f64;
            pooled[(row / c) * oc + o] += m / c as f64;
        }
    }
    let fw = store.get(ffn.weight).value.data();
    let fb = store.get(ffn.bias).value.data();
    let oracle: Vec<f64> = naive_matmul(&pooled, fw, b, oc, oc)
        .chunks(oc)
        .flat_map(|row| row.iter().zip(fb).map(|(v, bb)| (v + bb).max(0.0)).collect::<Vec<_>>())
        .collect();
    assert_close(g.value(out).data(), &oracle, 1e-10);
}

#[test]
fn local_branch_zero_input_gives_zero() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let net = GlDnet::new(&mut store, "e", 3, 8, &small_cfg(), &mut r);
    let (_, bid, _, ffn) = net.local_params();
    for id in [bid, ffn.bias] {
        store.get_mut(id).value.data_mut().fill(0.0);
    }
    let batch = RegionBatch {
        x: Tensor::zeros(&[2, 3, 8]),
        adjacency: (0..2)
            .flat_map(|_| normalized_adjacency(&WpliAdjacency::zeros(3)))
            .collect(),
    };
    let mut g = Graph::new();
    let out = net.local_branch(&mut g, &store, &batch, Mode::Train).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn constant_head_ignores_input() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let net = GlDnet::new(&mut store, "e", 3, 8, &small_cfg(), &mut r);
    store.get_mut(net.head().weight).value.data_mut().fill(0.0);
    store
        .get_mut(net.head().bias)
        .value
        .data_mut()
        .copy_from_slice(&[0.7, -1.3]);
    let (batch, _) = batch_of(&mut r, 3, 3, 8);
    let mut g = Graph::new();
    let y = net.forward(&mut g, &store, &batch, Mode::Train).unwrap();
    assert_eq!(g.value(y).data(), &[0.7, -1.3, 0.7, -1.3, 0.7, -1.3]);
}

#[test]
fn logits_invariant_under_channel_permutation() {
    let mut r = rng(12);
    let (b, c, t) = (3, 5, 16);
    let mut store = ParamStore::new();
    let net = GlDnet::new(&mut store, "e", c, t, &small_cfg(), &mut r);
    let (batch, adj) = batch_of(&mut r, b, c, t);
    let perm = [3, 0, 4, 1, 2];
    let mut x = Vec::new();
    let mut adjacency = Vec::new();
    for s in 0..b {
        for &p in &perm {
            x.extend_from_slice(&batch.x.data()[(s * c + p) * t..(s * c + p + 1) * t]);
        }
        let mut a = WpliAdjacency::zeros(c);
        for i in 0..c {
            for j in 0..c {
                a.values[i * c + j] = adj[s].get(perm[i], perm[j]);
            }
        }
        adjacency.extend(normalized_adjacency(&a));
    }
    let permuted = RegionBatch {
        x: Tensor::new(vec![b, c, t], x).unwrap(),
        adjacency,
    };
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new();
        let y = net.forward(&mut g, &store, &batch, mode).unwrap();
        let mut g2 = Graph::new();
        let y2 = net.forward(&mut g2, &store, &permuted, mode).unwrap();
        assert_close(g.value(y).data(), g2.value(y2).data(), 1e-9);
    }
}

fn weighted_sum(g: &mut Graph, y: crate::diff::Var, seed: u64) -> crate::diff::Var {
    let mut r = rng(seed);
    let w = uniform(&mut r, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum_all(p)
}

#[test]
fn gldnet_parameter_gradients() {
    let mut r = rng(13);
    let (b, c, t) = (4, 3, 16);
    let mut store = ParamStore::new();
    let net = GlDnet::new(&mut store, "e", c, t, &small_cfg(), &mut r);
    let (batch, _) = batch_of(&mut r, b, c, t);
    let err = check_param_gradients(
        &mut store,
        |g, s| {
            let y = net.forward(g, s, &batch, Mode::Train)?;
            Ok(weighted_sum(g, y, 99))
        },
        6,
        1,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn running_stats_update_and_eval_mode() {
    let mut r = rng(14);
    let mut store = ParamStore::new();
    let net = GlDnet::new(&mut store, "e", 3, 8, &small_cfg(), &mut r);
    let (batch, _) = batch_of(&mut r, 4, 3, 8);
    let mut g = Graph::new();
    net.forward(&mut g, &store, &batch, Mode::Train).unwrap();
    let observed = g.observed_stats().to_vec();
    assert_eq!(observed.len(), 2);
    let (_, stats) = &observed[0];
    update_running_stats(&mut store, &observed, BN_MOMENTUM);
    let rm = store.get(net.gcn_params()[0].1.running_mean).value.data();
    for (r, m) in rm.iter().zip(&stats.mean) {
        assert!((r - 0.1 * m).abs() < 1e-15);
    }
    let rv = store.get(net.gcn_params()[0].1.running_var).value.data();
    for (r, v) in rv.iter().zip(&stats.var) {
        assert!((r - (0.9 + 0.1 * v)).abs() < 1e-15);
    }
    // Eval mode works for a single sample and records nothing.
    let single = RegionBatch {
        x: Tensor::new(vec![1, 3, 8], batch.x.data()[..24].to_vec()).unwrap(),
        adjacency: batch.adjacency[..9].to_vec(),
    };
    let mut g = Graph::new();
    let y = net.forward(&mut g, &store, &single, Mode::Eval).unwrap();
    assert_eq!(g.shape(y), &[1, 2]);
    assert!(g.observed_stats().is_empty());
}

#[test]
fn gldnet_config_validation() {
    assert!(small_cfg().validate().is_ok());
    assert_eq!(small_cfg().attention_model_dim(), 64);
    let bad = GlDnetConfig {
        attention_heads: 5,
        ..small_cfg()
    };
    assert!(bad.validate().is_err());
    let even = GlDnetConfig {
        local_conv_kernel: 6,
        ..small_cfg()
    };
    assert!(even.validate().is_err());
}

#[test]
fn mslkc_constant_path() {
    let mut r = rng(20);
    let mut store = ParamStore::new();
    let net = Mslkc::new(&mut store, "p", 8, &MslkcConfig::default(), &mut r);
    for br in &net.branches {
        store.get_mut(br.kernel).value.data_mut().fill(0.0);
        store.get_mut(br.bias).value.data_mut().fill(0.0);
    }
    store.get_mut(net.mlp_hidden.bias).value.data_mut().fill(0.0);
    store
        .get_mut(net.mlp_out.bias)
        .value
        .data_mut()
        .copy_from_slice(&[2.0, -0.5]);
    let x = uniform(&mut r, &[3, 8, 32]);
    let mut g = Graph::new();
    let y = net.forward(&mut g, &store, &x, Mode::Train).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, -0.5, 2.0, -0.5, 2.0, -0.5]);
}

#[test]
fn mslkc_branch_swap_symmetry() {
    let mut r = rng(21);
    let mut store = ParamStore::new();
    let cfg = MslkcConfig::default();
    let net = Mslkc::new(&mut store, "p", 4, &cfg, &mut r);
    let mut store2 = ParamStore::new();
    let swapped_cfg = MslkcConfig {
        branch_kernels: vec![11, 15],
        ..cfg
    };
    let net2 = Mslkc::new(&mut store2, "p", 4, &swapped_cfg, &mut r);
    let copy = |src: &ParamStore, dst: &mut ParamStore, a, b| {
        dst.get_mut(b).value = src.get(a).value.clone();
    };
    for (i, j) in [(0, 1), (1, 0)] {
        let (a, b) = (&net.branches[i], &net2.branches[j]);
        copy(&store, &mut store2, a.kernel, b.kernel);
        copy(&store, &mut store2, a.bias, b.bias);
        copy(&store, &mut store2, a.bn.gamma, b.bn.gamma);
        copy(&store, &mut store2, a.bn.beta, b.bn.beta);
    }
    // Swap the two 16-row blocks of the first MLP weight to follow the concat order.
    let w = store.get(net.mlp_hidden.weight).value.data().to_vec();
    let half = 16 * 32;
    let mut ws = w[half..].to_vec();
    ws.extend_from_slice(&w[..half]);
    store2
        .get_mut(net2.mlp_hidden.weight)
        .value
        .data_mut()
        .copy_from_slice(&ws);
    copy(&store, &mut store2, net.mlp_hidden.bias, net2.mlp_hidden.bias);
    copy(&store, &mut store2, net.mlp_out.weight, net2.mlp_out.weight);
    copy(&store, &mut store2, net.mlp_out.bias, net2.mlp_out.bias);

    let x = uniform(&mut r, &[3, 4, 32]);
    let mut g = Graph::new();
    let y = net.forward(&mut g, &store, &x, Mode::Train).unwrap();
    let mut g2 = Graph::new();
    let y2 = net2.forward(&mut g2, &store2, &x, Mode::Train).unwrap();
    assert_close(g.value(y).data(), g2.value(y2).data(), 1e-12);
}

#[test]
fn mslkc_parameter_gradients() {
    let mut r = rng(22);
    let mut store = ParamStore::new();
    let net = Mslkc::new(&mut store, "p", 3, &MslkcConfig::default(), &mut r);
    let x = uniform(&mut r, &[4, 3, 24]);
    let err = check_param_gradients(
        &mut store,
        |g, s| {
            let y = net.forward(g, s, &x, Mode::Train)?;
            Ok(weighted_sum(g, y, 5))
        },
        6,
        2,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn mslkc_config_validation() {
    assert!(MslkcConfig::default().validate().is_ok());
    let even = MslkcConfig {
        branch_kernels: vec![15, 10],
        ..MslkcConfig::default()
    };
    assert!(even.validate().is_err());
}
