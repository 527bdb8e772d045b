use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::params::Adam;
use crate::testutil::check_param_grads_tol;

// ---- straight-line oracles -------------------------------------------------

fn conv_oracle(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    wt: &[f64],
    (o, k): (usize, usize),
    stride: usize,
    pad: usize,
    bias: Option<&[f64]>,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for i in 0..ho {
            for j in 0..wo {
                let mut s = bias.map_or(0.0, |b| b[oc]);
                for ic in 0..c {
                    for di in 0..k {
                        for dj in 0..k {
                            let y = (i * stride + di) as isize - pad as isize;
                            let xx = (j * stride + dj) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            s += wt[((oc * c + ic) * k + di) * k + dj] * x[(ic * h + y as usize) * w + xx as usize];
                        }
                    }
                }
                out[(oc * ho + i) * wo + j] = s;
            }
        }
    }
    (out, ho, wo)
}

fn bn_oracle(x: &mut [f64], c: usize, hw: usize, store: &ParamStore, p: &BatchNormParams) {
    for ch in 0..c {
        let (g, b) = (store.get(p.gamma).data()[ch], store.get(p.beta).data()[ch]);
        let (m, v) = (
            store.get(p.running_mean).data()[ch],
            store.get(p.running_var).data()[ch],
        );
        for e in &mut x[ch * hw..(ch + 1) * hw] {
            *e = (*e - m) / (v + p.eps).sqrt() * g + b;
        }
    }
}

fn linear_oracle(x: &[f64], rows: usize, store: &ParamStore, d: &Dense) -> Vec<f64> {
    let w = store.get(d.w);
    let (fi, fo) = (w.dim(0), w.dim(1));
    let mut out = vec![0.0; rows * fo];
    for r in 0..rows {
        for o in 0..fo {
            let mut s = d.b.map_or(0.0, |b| store.get(b).data()[o]);
            for i in 0..fi {
                s += x[r * fi + i] * w.data()[i * fo + o];
            }
            out[r * fo + o] = s;
        }
    }
    out
}

fn mnl_oracle(x: &[f64], rows: usize, store: &ParamStore, m: &Mnl) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in m.layers.iter().enumerate() {
        if i > 0 {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = linear_oracle(&h, rows, store, l);
    }
    h
}

fn softmax_rows(x: &mut [f64], n: usize) {
    for row in x.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - m).exp() / s);
    }
}

fn layer_norm_rows(x: &mut [f64], d: usize, g: &[f64], b: &[f64]) {
    for row in x.chunks_mut(d) {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mu) / (var + 1e-5).sqrt() * g[i] + b[i];
        }
    }
}

/// One encoder layer for a single sequence `y` of `n` tokens.
fn encoder_oracle(y: &[f64], n: usize, dim: usize, store: &ParamStore, l: &TransformerLayer) -> Vec<f64> {
    let mut heads = Vec::new();
    for h in &l.heads {
        let q = linear_oracle(y, n, store, &h.q);
        let k = linear_oracle(y, n, store, &h.k);
        let v = linear_oracle(y, n, store, &h.v);
        let gm = l.gamma;
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] = (0..gm).map(|t| q[i * gm + t] * k[j * gm + t]).sum::<f64>() / (gm as f64).sqrt();
            }
        }
        softmax_rows(&mut s, n);
        let mut o = vec![0.0; n * gm];
        for i in 0..n {
            for t in 0..gm {
                o[i * gm + t] = (0..n).map(|j| s[i * n + j] * v[j * gm + t]).sum();
            }
        }
        heads.push(o);
    }
    let width = l.heads.len() * l.gamma;
    let mut a = vec![0.0; n * width];
    for i in 0..n {
        for (hi, o) in heads.iter().enumerate() {
            a[i * width + hi * l.gamma..i * width + (hi + 1) * l.gamma]
                .copy_from_slice(&o[i * l.gamma..(i + 1) * l.gamma]);
        }
    }
    let Some(out) = &l.out else { return a };
    let a = linear_oracle(&a, n, store, out);
    let mut h: Vec<f64> = y.iter().zip(&a).map(|(p, q)| p + q).collect();
    let (g1, b1) = l.norm1.unwrap();
    layer_norm_rows(&mut h, dim, store.get(g1).data(), store.get(b1).data());
    let f = mnl_oracle(&h, n, store, l.ffn.as_ref().unwrap());
    let mut h2: Vec<f64> = h.iter().zip(&f).map(|(p, q)| p + q).collect();
    let (g2, b2) = l.norm2.unwrap();
    layer_norm_rows(&mut h2, dim, store.get(g2).data(), store.get(b2).data());
    h2
}

fn block_oracle(x: &[f64], (c, h, w): (usize, usize, usize), store: &ParamStore, b: &ResidualBlock) -> Vec<f64> {
    let cout = store.get(b.conv1.w).dim(0);
    let (mut y, ho, wo) = conv_oracle(
        x,
        (c, h, w),
        store.get(b.conv1.w).data(),
        (cout, 3),
        b.conv1.stride,
        1,
        None,
    );
    bn_oracle(&mut y, cout, ho * wo, store, &b.bn1);
    y.iter_mut().for_each(|v| *v = v.max(0.0));
    let (mut y, _, _) = conv_oracle(&y, (cout, ho, wo), store.get(b.conv2.w).data(), (cout, 3), 1, 1, None);
    bn_oracle(&mut y, cout, ho * wo, store, &b.bn2);
    let s = match &b.shortcut {
        Some(sc) => {
            let bias = sc.b.map(|id| store.get(id).data().to_vec());
            conv_oracle(
                x,
                (c, h, w),
                store.get(sc.w).data(),
                (cout, 1),
                sc.stride,
                0,
                bias.as_deref(),
            )
            .0
        }
        None => x.to_vec(),
    };
    y.iter().zip(&s).map(|(a, b)| a + b).collect()
}

// ---- helpers -----------------------------------------------------------------

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let is_var = store.param(id).name.ends_with("running_var");
        for v in store.get_mut(id).data_mut() {
            *v = if is_var {
                rng.random_range(0.5..2.0)
            } else {
                rng.random_range(-0.5..0.5)
            };
        }
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        grid: (6, 6),
        stem_channels: 3,
        stem_stride: 1,
        stem_pool: 1,
        stage_channels: vec![3],
        blocks_per_stage: 1,
        model_dim: 4,
        pre_hidden: vec![],
        layers: 1,
        heads: 1,
        gamma: 4,
        ffn_dim: 5,
        post_hidden: vec![],
        branch_dim: 3,
        fusion_hidden: vec![],
        fused_dim: 4,
        projection_hidden: vec![],
        projection_dim: 3,
        num_classes: 2,
        ..ModelConfig::default()
    }
}

// ---- residual blocks -------------------------------------------------------------

#[test]
fn zero_residual_branch_is_identity() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = ResidualBlock::new(&mut store, "b", 3, 3, 1, 0.1, 1e-5, &mut rng);
    store.get_mut(b.conv1.w).data_mut().fill(0.0);
    store.get_mut(b.conv2.w).data_mut().fill(0.0);
    let x = rand_tensor(&[2, 3, 5, 5], 2).map(|v| v - 0.5);
    for training in [false, true] {
        let mut g = if training {
            Graph::new(&store)
        } else {
            Graph::inference(&store)
        };
        let xv = g.input(x.clone());
        let y = b.forward(&mut g, xv);
        assert_eq!(g.value(y), &x);
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = ResidualBlock::new(&mut store, "b", 4, 4, 1, 0.1, 1e-5, &mut rng);
    let mut g = Graph::inference(&store);
    let xv = g.input(Tensor::zeros(&[1, 4, 6, 6]));
    let y = b.forward(&mut g, xv);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn residual_block_matches_loop_oracle() {
    for (cin, cout, stride) in [(4, 4, 1), (4, 6, 2)] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = ResidualBlock::new(&mut store, "b", cin, cout, stride, 0.1, 1e-5, &mut rng);
        randomize(&mut store, 5);
        let x = rand_tensor(&[2, cin, 8, 8], 6);
        let mut g = Graph::inference(&store);
        let xv = g.input(x.clone());
        let y = b.forward(&mut g, xv);
        let got = g.value(y).data();
        let per = got.len() / 2;
        for bi in 0..2 {
            let want = block_oracle(&x.data()[bi * cin * 64..(bi + 1) * cin * 64], (cin, 8, 8), &store, &b);
            for (a, e) in got[bi * per..(bi + 1) * per].iter().zip(&want) {
                assert!((a - e).abs() < 1e-6, "{a} vs {e}");
            }
        }
    }
}

#[test]
fn gap_of_constant_planes_and_shapes() {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let mut data = Vec::new();
    for v in [1.5, -2.0, 0.25] {
        data.extend(std::iter::repeat_n(v, 12));
    }
    let x = g.input(Tensor::new(&[1, 3, 3, 4], data));
    let z = g.global_avg_pool(x);
    assert_eq!(g.value(z).data(), &[1.5, -2.0, 0.25]);
    for (h, w) in [(1, 1), (5, 2), (7, 9)] {
        let x = g.input(Tensor::zeros(&[2, 5, h, w]));
        let z = g.global_avg_pool(x);
        assert_eq!(g.shape(z), &[2, 5]);
    }
}

#[test]
fn identical_inputs_give_identical_texture_rows() {
    let model = EmbeddingModel::new(tiny_config(), 7).unwrap();
    let one = rand_tensor(&[1, 1, 6, 6], 8);
    let mut both = one.data().to_vec();
    both.extend_from_slice(one.data());
    let mut g = Graph::inference(&model.store);
    let x = g.input(Tensor::new(&[2, 1, 6, 6], both));
    let z = model.texture.forward(&mut g, x);
    let v = g.value(z);
    assert_eq!(v.row(0), v.row(1));
    assert_eq!(v.shape(), &[2, 3]);
}

// ---- positional encoding and attention ------------------------------------------

#[test]
fn positional_table_closed_forms() {
    let pe = PositionalEncoding::new(10, 8);
    for g in 0..8 {
        assert_eq!(pe.table.data()[g], if g % 2 == 0 { 0.0 } else { 1.0 });
    }
    assert_eq!(PositionalEncoding::theta(0, 8), 1.0);
    for n in 0..10 {
        assert_eq!(pe.table.data()[n * 8], (n as f64).sin());
    }
    for g in 1..8 {
        assert!(PositionalEncoding::theta(g, 8) < PositionalEncoding::theta(g - 1, 8));
    }
    assert!(pe.table.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(pe.rows(11).is_none());
}

#[test]
fn encoding_zeros_returns_table() {
    let pe = PositionalEncoding::new(5, 4);
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let x = g.input(Tensor::zeros(&[2, 5, 4]));
    let e = pe.encode(&mut g, x);
    let y = g.value(e).clone();
    assert_eq!(&y.data()[..20], pe.table.data());
    assert_eq!(&y.data()[20..], pe.table.data());
}

fn layer(dim: usize, gamma: usize, heads: usize, sublayers: bool, seed: u64) -> (ParamStore, TransformerLayer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = TransformerLayer::new(&mut store, "enc", dim, gamma, heads, 6, sublayers, &mut rng);
    randomize(&mut store, seed + 1);
    (store, l)
}

#[test]
fn single_token_attention_weight_is_one() {
    let (store, l) = layer(4, 4, 1, false, 10);
    let y = rand_tensor(&[3, 1, 4], 11);
    let mut g = Graph::inference(&store);
    let yv = g.input(y.clone());
    let w = l.heads[0].weights(&mut g, yv, 4);
    assert!(g.value(w).data().iter().all(|&v| v == 1.0));
    let out = l.forward(&mut g, yv);
    let want = linear_oracle(y.data(), 3, &store, &l.heads[0].v);
    for (a, b) in g.value(out).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_sum_to_one_and_ignore_row_shifts() {
    let (store, l) = layer(5, 3, 1, true, 12);
    let mut g = Graph::inference(&store);
    let yv = g.input(rand_tensor(&[2, 7, 5], 13));
    let w = l.heads[0].weights(&mut g, yv, 3);
    for row in g.value(w).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-7);
    }
    let scores = rand_tensor(&[1, 2, 4], 14);
    let mut shifted = scores.clone();
    shifted.data_mut()[..4].iter_mut().for_each(|v| *v += 3.7);
    let a = g.input(scores);
    let b = g.input(shifted);
    let (sa, sb) = (g.softmax(a), g.softmax(b));
    for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
        assert!((x - y).abs() < 1e-7);
    }
}

#[test]
fn encoder_layer_matches_matrix_oracle() {
    for (dim, gamma, heads, sub) in [(4, 4, 1, false), (4, 4, 1, true), (6, 2, 3, false), (5, 3, 2, true)] {
        let (store, l) = layer(dim, gamma, heads, sub, 20 + dim as u64);
        let y = rand_tensor(&[2, 3, dim], 21);
        let mut g = Graph::inference(&store);
        let yv = g.input(y.clone());
        let out = l.forward(&mut g, yv);
        let got = g.value(out).data();
        for b in 0..2 {
            let want = encoder_oracle(&y.data()[b * 3 * dim..(b + 1) * 3 * dim], 3, dim, &store, &l);
            for (a, e) in got[b * 3 * dim..(b + 1) * 3 * dim].iter().zip(&want) {
                assert!((a - e).abs() < 1e-6, "{a} vs {e}");
            }
        }
    }
}

// ---- position branches, fusion, forward ------------------------------------------

#[test]
fn frequency_branch_is_time_branch_on_transpose() {
    let model = EmbeddingModel::new(
        ModelConfig {
            grid: (5, 5),
            ..tiny_config()
        },
        30,
    )
    .unwrap();
    let freq = model.freq.as_ref().unwrap();
    let x = rand_tensor(&[2, 5, 5], 31);
    let mut xt = x.clone();
    for b in 0..2 {
        for i in 0..5 {
            for j in 0..5 {
                xt.data_mut()[b * 25 + j * 5 + i] = x.data()[b * 25 + i * 5 + j];
            }
        }
    }
    let mut g = Graph::inference(&model.store);
    let xv = g.input(x);
    let xtv = g.input(xt);
    let a = freq.forward(&mut g, xv);
    let b = freq.forward_tokens(&mut g, xtv);
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn zero_layers_reduce_to_post_of_encoded_pre() {
    let cfg = ModelConfig {
        layers: 0,
        ..tiny_config()
    };
    let mut model = EmbeddingModel::new(cfg, 32).unwrap();
    randomize(&mut model.store, 33);
    let t = model.time.as_ref().unwrap();
    let x = rand_tensor(&[1, 6, 6], 34);
    let mut g = Graph::inference(&model.store);
    let xv = g.input(x.clone());
    let out = t.forward(&mut g, xv);
    let pre = mnl_oracle(x.data(), 6, &model.store, &t.pre);
    let enc: Vec<f64> = pre.iter().zip(t.encoding.table.data()).map(|(a, b)| a + b).collect();
    let want = mnl_oracle(&enc, 1, &model.store, &t.post);
    assert_eq!(g.shape(out), &[1, 3]);
    for (a, e) in g.value(out).data().iter().zip(&want) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn identity_fusion_returns_concatenation() {
    let cfg = ModelConfig {
        fused_dim: 9,
        ..tiny_config()
    };
    assert_eq!(cfg.concat_dim(), 3 + 3 + 3);
    let mut model = EmbeddingModel::new(cfg, 35).unwrap();
    let l = &model.fusion.layers[0];
    let (w, b) = (l.w, l.b.unwrap());
    let mut eye = Tensor::zeros(&[9, 9]);
    for i in 0..9 {
        eye.data_mut()[i * 9 + i] = 1.0;
    }
    model.store.set(w, eye);
    model.store.set(b, Tensor::zeros(&[9]));
    let mut g = Graph::inference(&model.store);
    let xv = g.input(rand_tensor(&[3, 6, 6], 36));
    let c = model.branches(&mut g, xv);
    let z = model.fuse(&mut g, c);
    assert_eq!(g.value(c), g.value(z));
}

#[test]
fn batch_permutation_permutes_outputs() {
    let model = EmbeddingModel::new(tiny_config(), 37).unwrap();
    let x = rand_tensor(&[3, 6, 6], 38);
    let mut perm = Vec::new();
    for b in [2, 0, 1] {
        perm.extend_from_slice(&x.data()[b * 36..(b + 1) * 36]);
    }
    let run = |t: Tensor| {
        let mut g = Graph::inference(&model.store);
        let f = model.forward(&mut g, &t).unwrap();
        g.value(f.fused).clone()
    };
    let a = run(x);
    let b = run(Tensor::new(&[3, 6, 6], perm));
    for (i, src) in [2, 0, 1].into_iter().enumerate() {
        assert_eq!(b.row(i), a.row(src));
    }
}

#[test]
fn projections_are_unit_and_inference_is_deterministic() {
    let model = EmbeddingModel::new(tiny_config(), 39).unwrap();
    let x = rand_tensor(&[4, 6, 6], 40);
    let run = || {
        let mut g = Graph::inference(&model.store);
        let f = model.forward(&mut g, &x).unwrap();
        (g.value(f.projection).clone(), g.value(f.logits).clone())
    };
    let (p, l) = run();
    for r in 0..4 {
        let n: f64 = p.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    assert_eq!(run(), (p, l));
}

#[test]
fn tiny_model_logits_match_straight_line_oracle() {
    let mut model = EmbeddingModel::new(tiny_config(), 41).unwrap();
    randomize(&mut model.store, 42);
    let x = rand_tensor(&[2, 6, 6], 43);
    let mut g = Graph::inference(&model.store);
    let f = model.forward(&mut g, &x).unwrap();
    let got = g.value(f.logits).clone();
    let s = &model.store;
    for b in 0..2 {
        let img = &x.data()[b * 36..(b + 1) * 36];
        // texture
        let stem = &model.texture.stem;
        let (mut h, ho, wo) = conv_oracle(img, (1, 6, 6), s.get(stem.w).data(), (3, 3), 1, 1, None);
        bn_oracle(&mut h, 3, ho * wo, s, &model.texture.stem_bn);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let h = block_oracle(&h, (3, ho, wo), s, &model.texture.blocks[0]);
        let mut cat: Vec<f64> = h
            .chunks(ho * wo)
            .map(|c| c.iter().sum::<f64>() / (ho * wo) as f64)
            .collect();
        // position branches
        for (branch, transpose) in [
            (model.time.as_ref().unwrap(), false),
            (model.freq.as_ref().unwrap(), true),
        ] {
            let mut tokens = img.to_vec();
            if transpose {
                for i in 0..6 {
                    for j in 0..6 {
                        tokens[j * 6 + i] = img[i * 6 + j];
                    }
                }
            }
            let pre = mnl_oracle(&tokens, 6, s, &branch.pre);
            let mut y: Vec<f64> = pre
                .iter()
                .zip(branch.encoding.table.data())
                .map(|(a, b)| a + b)
                .collect();
            for l in &branch.layers {
                y = encoder_oracle(&y, 6, 4, s, l);
            }
            cat.extend(mnl_oracle(&y, 1, s, &branch.post));
        }
        let fused = mnl_oracle(&cat, 1, s, &model.fusion);
        let logits = linear_oracle(&fused, 1, s, &model.head);
        for (a, e) in got.row(b).iter().zip(&logits) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }
}

// ---- gradients and freezing ----------------------------------------------------------

#[test]
fn tiny_model_gradients_match_finite_differences() {
    let mut model = EmbeddingModel::new(tiny_config(), 44).unwrap();
    randomize(&mut model.store, 45);
    assert!(model.num_parameters() <= 5000);
    let x = rand_tensor(&[4, 6, 6], 46);
    check_param_grads_tol(
        &model.store,
        |g| {
            let f = model.forward(g, &x).unwrap();
            let ce = g.cross_entropy(f.logits, &[0, 1, 1, 0]);
            let p = g.sum(f.projection);
            let p = g.scale(p, 0.3);
            g.add(ce, p)
        },
        1e-5,
        1e-4,
    );
}

#[test]
fn unused_head_gets_no_gradient() {
    let model = EmbeddingModel::new(tiny_config(), 47).unwrap();
    let x = rand_tensor(&[2, 6, 6], 48);
    let mut g = Graph::new(&model.store);
    let f = model.forward(&mut g, &x).unwrap();
    let l = g.cross_entropy(f.logits, &[0, 1]);
    let grads = g.backward(l);
    for id in model.projection_ids() {
        assert!(grads.param(id).is_none());
    }
    for id in model.head_ids() {
        assert!(grads.param(id).is_some());
    }
}

#[test]
fn frozen_features_are_not_stepped() {
    let mut model = EmbeddingModel::new(tiny_config(), 49).unwrap();
    model.set_features_frozen(true);
    let before = model.feature_hash();
    let head_before = model.store.hash_of(&model.head_ids());
    let mut opt = Adam::new(&model.store, &model.store.ids().collect::<Vec<_>>());
    let x = rand_tensor(&[2, 6, 6], 50);
    for _ in 0..3 {
        let grads = {
            let mut g = Graph::inference(&model.store);
            let f = model.forward(&mut g, &x).unwrap();
            let l = g.cross_entropy(f.logits, &[0, 1]);
            g.backward(l)
        };
        opt.step(&mut model.store, &grads, 1e-2);
    }
    assert_eq!(model.feature_hash(), before);
    assert_ne!(model.store.hash_of(&model.head_ids()), head_before);
}

#[test]
fn head_reset_changes_class_count() {
    let mut model = EmbeddingModel::new(tiny_config(), 51).unwrap();
    model.reset_head(3, 52);
    let x = rand_tensor(&[2, 6, 6], 53);
    let mut g = Graph::inference(&model.store);
    let f = model.forward(&mut g, &x).unwrap();
    assert_eq!(g.shape(f.logits), &[2, 3]);
    assert_eq!(model.num_classes(), 3);
}

#[test]
fn texture_only_model_has_no_position_branches() {
    let cfg = ModelConfig {
        texture_only: true,
        ..tiny_config()
    };
    assert_eq!(cfg.concat_dim(), 3);
    let model = EmbeddingModel::new(cfg, 54).unwrap();
    assert!(model.time.is_none() && model.freq.is_none());
    let mut g = Graph::inference(&model.store);
    let f = model.forward(&mut g, &rand_tensor(&[2, 6, 6], 55)).unwrap();
    assert_eq!(g.shape(f.fused), &[2, 4]);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(ModelConfig {
        sublayers: false,
        gamma: 3,
        ..tiny_config()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        grid: (2, 2),
        stem_pool: 4,
        ..tiny_config()
    }
    .validate()
    .is_err());
    let model = EmbeddingModel::new(tiny_config(), 56).unwrap();
    let mut g = Graph::inference(&model.store);
    assert!(model.forward(&mut g, &Tensor::zeros(&[1, 5, 6])).is_err());
}

#[test]
fn desk_model_shapes() {
    let model = EmbeddingModel::new(
        ModelConfig {
            num_classes: 6,
            ..ModelConfig::default()
        },
        57,
    )
    .unwrap();
    let x = rand_tensor(&[2, 64, 64], 58);
    let mut g = Graph::inference(&model.store);
    let f = model.forward(&mut g, &x).unwrap();
    assert_eq!(g.shape(f.fused), &[2, 128]);
    assert_eq!(g.shape(f.projection), &[2, 32]);
    assert_eq!(g.shape(f.logits), &[2, 6]);
    assert_eq!(model.texture.blocks.len(), 8);
    ModelConfig::paper().validate().unwrap();
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut model = EmbeddingModel::new(tiny_config(), 59).unwrap();
    model.reset_head(3, 60);
    let state = TrainingState {
        version: CHECKPOINT_VERSION,
        stage: "pretrain".into(),
        epoch: 4,
        seed: 59,
        config_hash: config_hash(&model.config),
        model: model.config.clone(),
    };
    save_checkpoint(&path, &model, &state).unwrap();
    let (back, st) = load_checkpoint(&path).unwrap();
    assert_eq!(st, state);
    for (id, p) in model.store.iter() {
        let q = back.store.get(id);
        assert_eq!(q.shape(), p.value.shape());
        for (a, b) in p.value.data().iter().zip(q.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
