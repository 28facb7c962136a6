//! Network building blocks on top of the tape: dense layers, convolution
//! stacks, LSTM cell, GRU gating, layer norm, and multi-head attention.
//!
//! Each block comes as a pair: an `init_*` function registering parameters
//! under a name prefix, and a forward function wiring tape ops.

use rand::Rng;

use super::params::{Graph, ParamStore};
use super::tape::Id;
use super::tensor::Tensor;

pub fn init_dense<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, d_in: usize, d_out: usize) {
    store.add(
        &format!("{prefix}/w"),
        Tensor::xavier(vec![d_in, d_out], d_in, d_out, rng),
    );
    store.add(&format!("{prefix}/b"), Tensor::zeros(vec![d_out]));
}

pub fn dense(g: &mut Graph, prefix: &str, x: Id) -> Id {
    let w = g.param(&format!("{prefix}/w"));
    let b = g.param(&format!("{prefix}/b"));
    let y = g.tape.matmul(x, w);
    g.tape.add_row(y, b)
}

pub fn dense_relu(g: &mut Graph, prefix: &str, x: Id) -> Id {
    let y = dense(g, prefix, x);
    g.tape.relu(y)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.add(&format!("{prefix}/gain"), Tensor::full(vec![dim], 1.0));
    store.add(&format!("{prefix}/bias"), Tensor::zeros(vec![dim]));
}

pub fn layer_norm(g: &mut Graph, prefix: &str, x: Id) -> Id {
    let gain = g.param(&format!("{prefix}/gain"));
    let bias = g.param(&format!("{prefix}/bias"));
    g.tape.layer_norm(x, gain, bias)
}

pub fn init_conv<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    let fan_in = c_in * k * k;
    let fan_out = c_out * k * k;
    store.add(
        &format!("{prefix}/w"),
        Tensor::xavier(vec![c_out, c_in, k, k], fan_in, fan_out, rng),
    );
    store.add(&format!("{prefix}/b"), Tensor::zeros(vec![c_out]));
}

pub fn conv_relu(g: &mut Graph, prefix: &str, x: Id) -> Id {
    let w = g.param(&format!("{prefix}/w"));
    let b = g.param(&format!("{prefix}/b"));
    let y = g.tape.conv2d_same(x, w, b);
    g.tape.relu(y)
}

/// LSTM parameters: input and recurrent weights for the four gates packed
/// as [., 4H] in (input, forget, cell, output) order. Forget bias starts
/// at 1.
pub fn init_lstm<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, d_in: usize, hidden: usize) {
    store.add(
        &format!("{prefix}/w"),
        Tensor::xavier(vec![d_in, 4 * hidden], d_in, hidden, rng),
    );
    store.add(
        &format!("{prefix}/u"),
        Tensor::xavier(vec![hidden, 4 * hidden], hidden, hidden, rng),
    );
    let mut b = Tensor::zeros(vec![4 * hidden]);
    for v in &mut b.data_mut()[hidden..2 * hidden] {
        *v = 1.0;
    }
    store.add(&format!("{prefix}/b"), b);
}

/// One LSTM step: returns (h', c').
pub fn lstm_cell(g: &mut Graph, prefix: &str, x: Id, h: Id, c: Id) -> (Id, Id) {
    let hidden = g.value(h).cols();
    let w = g.param(&format!("{prefix}/w"));
    let u = g.param(&format!("{prefix}/u"));
    let b = g.param(&format!("{prefix}/b"));
    let zx = g.tape.matmul(x, w);
    let zh = g.tape.matmul(h, u);
    let z = g.tape.add(zx, zh);
    let z = g.tape.add_row(z, b);
    let zi = g.tape.slice_cols(z, 0, hidden);
    let zf = g.tape.slice_cols(z, hidden, hidden);
    let zg = g.tape.slice_cols(z, 2 * hidden, hidden);
    let zo = g.tape.slice_cols(z, 3 * hidden, hidden);
    let i = g.tape.sigmoid(zi);
    let f = g.tape.sigmoid(zf);
    let gg = g.tape.tanh(zg);
    let o = g.tape.sigmoid(zo);
    let fc = g.tape.mul(f, c);
    let ig = g.tape.mul(i, gg);
    let c_new = g.tape.add(fc, ig);
    let tc = g.tape.tanh(c_new);
    let h_new = g.tape.mul(o, tc);
    (h_new, c_new)
}

/// GRU gate replacing a residual connection. `bias_init` > 0 keeps the gate
/// mostly closed at initialization so the sublayer input passes through.
pub fn init_gru_gate<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, dim: usize, bias_init: f64) {
    for name in ["wr", "ur", "wz", "uz", "wh", "uh"] {
        store.add(
            &format!("{prefix}/{name}"),
            Tensor::xavier(vec![dim, dim], dim, dim, rng),
        );
    }
    store.add(&format!("{prefix}/bg"), Tensor::full(vec![dim], bias_init));
}

/// x is the sublayer input (treated as the hidden state), y the sublayer
/// output: r = sigma(Wr y + Ur x), z = sigma(Wz y + Uz x - bg),
/// hhat = tanh(Wh y + Uh (r*x)), out = (1-z)*x + z*hhat.
pub fn gru_gate(g: &mut Graph, prefix: &str, x: Id, y: Id) -> Id {
    assert_eq!(
        g.value(x).shape(),
        g.value(y).shape(),
        "gru_gate operand shapes"
    );
    let wr = g.param(&format!("{prefix}/wr"));
    let ur = g.param(&format!("{prefix}/ur"));
    let wz = g.param(&format!("{prefix}/wz"));
    let uz = g.param(&format!("{prefix}/uz"));
    let wh = g.param(&format!("{prefix}/wh"));
    let uh = g.param(&format!("{prefix}/uh"));
    let bg = g.param(&format!("{prefix}/bg"));

    let ry = g.tape.matmul(y, wr);
    let rx = g.tape.matmul(x, ur);
    let r_pre = g.tape.add(ry, rx);
    let r = g.tape.sigmoid(r_pre);

    let zy = g.tape.matmul(y, wz);
    let zx = g.tape.matmul(x, uz);
    let z_pre = g.tape.add(zy, zx);
    let neg_bg = g.tape.mul_scalar(bg, -1.0);
    let z_pre = g.tape.add_row(z_pre, neg_bg);
    let z = g.tape.sigmoid(z_pre);

    let hy = g.tape.matmul(y, wh);
    let rx2 = g.tape.mul(r, x);
    let hx = g.tape.matmul(rx2, uh);
    let h_pre = g.tape.add(hy, hx);
    let hhat = g.tape.tanh(h_pre);

    let neg_z = g.tape.mul_scalar(z, -1.0);
    let one_minus_z = g.tape.add_scalar(neg_z, 1.0);
    let keep = g.tape.mul(one_minus_z, x);
    let update = g.tape.mul(z, hhat);
    g.tape.add(keep, update)
}

pub fn init_attention<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_model: usize,
    n_heads: usize,
    d_k: usize,
) {
    for h in 0..n_heads {
        store.add(
            &format!("{prefix}/h{h}/wq"),
            Tensor::xavier(vec![d_model, d_k], d_model, d_k, rng),
        );
        store.add(
            &format!("{prefix}/h{h}/wk"),
            Tensor::xavier(vec![d_model, d_k], d_model, d_k, rng),
        );
        store.add(
            &format!("{prefix}/h{h}/wv"),
            Tensor::xavier(vec![d_model, d_k], d_model, d_k, rng),
        );
    }
    store.add(
        &format!("{prefix}/wo"),
        Tensor::xavier(vec![n_heads * d_k, d_model], n_heads * d_k, d_model, rng),
    );
}

/// Multi-head self-attention over the rows of `x` ([n, d_model]). The mask,
/// when given, is [n, n] row-major with true = may attend; the diagonal is
/// always forced open so no row ends up fully masked.
pub fn multihead_attention(
    g: &mut Graph,
    prefix: &str,
    x: Id,
    n_heads: usize,
    d_k: usize,
    mask: Option<&[bool]>,
) -> Id {
    let n = g.value(x).rows();
    let mask_owned: Option<Vec<bool>> = mask.map(|m| {
        assert_eq!(m.len(), n * n, "attention mask must be n x n");
        let mut m = m.to_vec();
        for i in 0..n {
            m[i * n + i] = true;
        }
        m
    });
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let wq = g.param(&format!("{prefix}/h{h}/wq"));
        let wk = g.param(&format!("{prefix}/h{h}/wk"));
        let wv = g.param(&format!("{prefix}/h{h}/wv"));
        let q = g.tape.matmul(x, wq);
        let k = g.tape.matmul(x, wk);
        let v = g.tape.matmul(x, wv);
        let scores = g.tape.matmul_t(q, k);
        let scores = g.tape.mul_scalar(scores, scale);
        let alpha = g.tape.softmax(scores, mask_owned.as_deref());
        // Sorted contraction keeps the fused output bit-exactly equivariant
        // under agent permutations.
        heads.push(g.tape.matmul_sorted(alpha, v));
    }
    let cat = g.tape.concat_cols(&heads);
    let wo = g.param(&format!("{prefix}/wo"));
    g.tape.matmul(cat, wo)
}

pub fn init_ffn<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, d_model: usize, d_ff: usize) {
    init_dense(store, rng, &format!("{prefix}/in"), d_model, d_ff);
    init_dense(store, rng, &format!("{prefix}/out"), d_ff, d_model);
}

pub fn ffn(g: &mut Graph, prefix: &str, x: Id) -> Id {
    let h = dense_relu(g, &format!("{prefix}/in"), x);
    dense(g, &format!("{prefix}/out"), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(2024)
    }

    /// Stores the test input as a parameter so grad_check covers it too.
    fn add_input(store: &mut ParamStore, name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng) {
        store.add(name, Tensor::uniform(shape, 1.0, rng));
    }

    #[test]
    fn dense_grad_check() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        init_dense(&mut store, &mut rng, "fc", 4, 3);
        add_input(&mut store, "x", vec![2, 4], &mut rng);
        let report = grad_check(
            &store,
            |g| {
                let x = g.param("x");
                let y = dense(g, "fc", x);
                let sq = g.tape.mul(y, y);
                g.tape.sum_all(sq)
            },
            1e-5,
        );
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn layer_norm_grad_check() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        init_layer_norm(&mut store, "ln", 5);
        add_input(&mut store, "x", vec![3, 5], &mut rng);
        let report = grad_check(
            &store,
            |g| {
                let x = g.param("x");
                let y = layer_norm(g, "ln", x);
                let sq = g.tape.mul(y, y);
                g.tape.sum_all(sq)
            },
            1e-5,
        );
        assert!(report.passes(1e-5), "{report:?}");
    }

    #[test]
    fn lstm_cell_grad_check() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        init_lstm(&mut store, &mut rng, "lstm", 3, 4);
        add_input(&mut store, "x", vec![2, 3], &mut rng);
        add_input(&mut store, "h", vec![2, 4], &mut rng);
        add_input(&mut store, "c", vec![2, 4], &mut rng);
        let report = grad_check(
            &store,
            |g| {
                let x = g.param("x");
                let h = g.param("h");
                let c = g.param("c");
                let (h2, c2) = lstm_cell(g, "lstm", x, h, c);
                let cat = g.tape.concat_cols(&[h2, c2]);
                let sq = g.tape.mul(cat, cat);
                g.tape.sum_all(sq)
            },
            1e-5,
        );
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn gru_gate_grad_check() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        init_gru_gate(&mut store, &mut rng, "gate", 4, 2.0);
        add_input(&mut store, "x", vec![2, 4], &mut rng);
        add_input(&mut store, "y", vec![2, 4], &mut rng);
        let report = grad_check(
            &store,
            |g| {
                let x = g.param("x");
                let y = g.param("y");
                let out = gru_gate(g, "gate", x, y);
                let sq = g.tape.mul(out, out);
                g.tape.sum_all(sq)
            },
            1e-5,
        );
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn gru_gate_closed_passes_input_through() {
        // Huge bias drives z to 0, so the output is the sublayer input.
        let mut rng = rng();
        let mut store = ParamStore::new();
        init_gru_gate(&mut store, &mut rng, "gate", 4, 50.0);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::uniform(vec![3, 4], 1.0, &mut rng));
        let y = g.input(Tensor::uniform(vec![3, 4], 1.0, &mut rng));
        let out = gru_gate(&mut g, "gate", x, y);
        for (a, b) in g.value(out).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-9, "gate-closed output should equal x");
        }
    }

    #[test]
    fn gru_gate_open_outputs_candidate() {
        // Strongly negative bias drives z to 1: output equals hhat, which no
        // longer depends on x through the convex blend.
        let mut rng = rng();
        let mut store = ParamStore::new();
        init_gru_gate(&mut store, &mut rng, "gate", 4, -50.0);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::uniform(vec![3, 4], 1.0, &mut rng));
        let y = g.input(Tensor::uniform(vec![3, 4], 1.0, &mut rng));
        let out = gru_gate(&mut g, "gate", x, y);
        // Recompute hhat by hand from the same parameters.
        let mut g2 = Graph::new(&store);
        let x2 = g2.input(g.value(x).clone());
        let y2 = g2.input(g.value(y).clone());
        let wr = g2.param("gate/wr");
        let ur = g2.param("gate/ur");
        let wh = g2.param("gate/wh");
        let uh = g2.param("gate/uh");
        let ry = g2.tape.matmul(y2, wr);
        let rx = g2.tape.matmul(x2, ur);
        let rp = g2.tape.add(ry, rx);
        let r = g2.tape.sigmoid(rp);
        let hy = g2.tape.matmul(y2, wh);
        let rx2 = g2.tape.mul(r, x2);
        let hx = g2.tape.matmul(rx2, uh);
        let hp = g2.tape.add(hy, hx);
        let hhat = g2.tape.tanh(hp);
        for (a, b) in g.value(out).data().iter().zip(g2.value(hhat).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_and_pool_grad_check() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        init_conv(&mut store, &mut rng, "conv", 2, 3, 3);
        add_input(&mut store, "x", vec![1, 2, 4, 4], &mut rng);
        let report = grad_check(
            &store,
            |g| {
                let x = g.param("x");
                let y = conv_relu(g, "conv", x);
                let p = g.tape.maxpool2d(y);
                let sq = g.tape.mul(p, p);
                g.tape.sum_all(sq)
            },
            1e-5,
        );
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn attention_grad_check() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        init_attention(&mut store, &mut rng, "attn", 6, 2, 3);
        add_input(&mut store, "x", vec![3, 6], &mut rng);
        let report = grad_check(
            &store,
            |g| {
                let x = g.param("x");
                let y = multihead_attention(g, "attn", x, 2, 3, None);
                let sq = g.tape.mul(y, y);
                g.tape.sum_all(sq)
            },
            1e-5,
        );
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn attention_single_agent_weight_is_one() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        init_attention(&mut store, &mut rng, "attn", 4, 2, 2);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::uniform(vec![1, 4], 1.0, &mut rng));
        // With one agent, attention output must equal concat(Wv x) Wo exactly.
        let y = multihead_attention(&mut g, "attn", x, 2, 2, None);
        let mut g2 = Graph::new(&store);
        let x2 = g2.input(g.value(x).clone());
        let wv0 = g2.param("attn/h0/wv");
        let wv1 = g2.param("attn/h1/wv");
        let v0 = g2.tape.matmul(x2, wv0);
        let v1 = g2.tape.matmul(x2, wv1);
        let cat = g2.tape.concat_cols(&[v0, v1]);
        let wo = g2.param("attn/wo");
        let expect = g2.tape.matmul(cat, wo);
        assert_eq!(g.value(y).data(), g2.value(expect).data());
    }

    #[test]
    fn attention_permutation_equivariance() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        init_attention(&mut store, &mut rng, "attn", 6, 2, 3);
        let x = Tensor::uniform(vec![4, 6], 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let mut xp_data = vec![0.0; 24];
        for (i, &p) in perm.iter().enumerate() {
            xp_data[i * 6..(i + 1) * 6].copy_from_slice(&x.data()[p * 6..(p + 1) * 6]);
        }
        let mut g = Graph::new(&store);
        let xi = g.input(x);
        let y = multihead_attention(&mut g, "attn", xi, 2, 3, None);
        let mut g2 = Graph::new(&store);
        let xi2 = g2.input(Tensor::new(vec![4, 6], xp_data));
        let yp = multihead_attention(&mut g2, "attn", xi2, 2, 3, None);
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(
                &g2.value(yp).data()[i * 6..(i + 1) * 6],
                &g.value(y).data()[p * 6..(p + 1) * 6],
                "row {i} should equal unpermuted row {p}"
            );
        }
    }

    #[test]
    fn attention_all_true_mask_matches_unmasked() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        init_attention(&mut store, &mut rng, "attn", 6, 2, 3);
        let x = Tensor::uniform(vec![4, 6], 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let xi = g.input(x.clone());
        let y = multihead_attention(&mut g, "attn", xi, 2, 3, None);
        let mut g2 = Graph::new(&store);
        let xi2 = g2.input(x);
        let mask = vec![true; 16];
        let ym = multihead_attention(&mut g2, "attn", xi2, 2, 3, Some(&mask));
        assert_eq!(g.value(y).data(), g2.value(ym).data());
    }

    #[test]
    fn attention_uniform_messages_uniform_weights() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        init_attention(&mut store, &mut rng, "attn", 4, 1, 4);
        let row = Tensor::uniform(vec![1, 4], 1.0, &mut rng);
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(row.data());
        }
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![3, 4], data));
        let wq = g.param("attn/h0/wq");
        let wk = g.param("attn/h0/wk");
        let q = g.tape.matmul(x, wq);
        let k = g.tape.matmul(x, wk);
        let scores = g.tape.matmul_t(q, k);
        let scores = g.tape.mul_scalar(scores, 0.5);
        let alpha = g.tape.softmax(scores, None);
        for &v in g.value(alpha).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_grad_check() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        add_input(&mut store, "x", vec![2, 5], &mut rng);
        let report = grad_check(
            &store,
            |g| {
                let x = g.param("x");
                let y = g.tape.softmax(x, None);
                let sq = g.tape.mul(y, y);
                g.tape.sum_all(sq)
            },
            1e-5,
        );
        assert!(report.passes(1e-6), "{report:?}");
    }
}
