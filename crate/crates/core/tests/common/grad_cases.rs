//! Finite-difference cases for every differentiable op and a tiny network.

use super::{grad_check, random_off_kink, random_tensor, rel_err, rng, GradCheck};
use gradepipe::densenet::{self, DenseNetConfig};
use gradepipe::nn::{Graph, ParamStore, Tensor, Var};

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

/// Projects an output onto fixed random weights so every element carries a
/// distinct gradient.
fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let dims = g.value(v).dims().to_vec();
    let w = random_tensor(&mut rng(seed), &dims, -1.0, 1.0);
    g.dot(v, w).unwrap()
}

pub fn conv3x3() -> GradCheck {
    let mut r = rng(10);
    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&mut r, &[2, 3, 5, 5], -1.0, 1.0)).unwrap();
    s.insert("w", random_tensor(&mut r, &[4, 3, 3, 3], -1.0, 1.0)).unwrap();
    s.insert("b", random_tensor(&mut r, &[4], -1.0, 1.0)).unwrap();
    grad_check(&s, H, |g, s| {
        let (x, w, b) = (g.param(s, "x").unwrap(), g.param(s, "w").unwrap(), g.param(s, "b").unwrap());
        let y = g.conv2d(x, w, Some(b), 1).unwrap();
        project(g, y, 1)
    })
}

/// Multi-part 3×3 and 1×1 convolutions, a strided convolution and channel
/// concatenation.
pub fn conv_parts_strided_concat() -> GradCheck {
    let mut r = rng(11);
    let mut s = ParamStore::new();
    s.insert("a", random_tensor(&mut r, &[1, 2, 4, 4], -1.0, 1.0)).unwrap();
    s.insert("c", random_tensor(&mut r, &[1, 3, 4, 4], -1.0, 1.0)).unwrap();
    s.insert("w3", random_tensor(&mut r, &[2, 5, 3, 3], -1.0, 1.0)).unwrap();
    s.insert("w1", random_tensor(&mut r, &[3, 5, 1, 1], -1.0, 1.0)).unwrap();
    s.insert("ws", random_tensor(&mut r, &[2, 2, 3, 3], -1.0, 1.0)).unwrap();
    grad_check(&s, H, |g, s| {
        let a = g.param(s, "a").unwrap();
        let c = g.param(s, "c").unwrap();
        let w3 = g.param(s, "w3").unwrap();
        let w1 = g.param(s, "w1").unwrap();
        let ws = g.param(s, "ws").unwrap();
        let y3 = g.conv2d_concat(&[a, c], w3, None, 1).unwrap();
        let y1 = g.conv2d_concat(&[a, c], w1, None, 1).unwrap();
        let ys = g.conv2d(a, ws, None, 2).unwrap();
        let l3 = project(g, y3, 2);
        let l1 = project(g, y1, 3);
        let ls = project(g, ys, 4);
        let both = g.concat_channels(&[y3, y1]).unwrap();
        let lc = project(g, both, 5);
        let a = g.add(l3, l1).unwrap();
        let b = g.add(ls, lc).unwrap();
        g.add(a, b).unwrap()
    })
}

pub fn prelu_off_kink() -> GradCheck {
    let mut r = rng(12);
    let mut s = ParamStore::new();
    s.insert("x", random_off_kink(&mut r, &[2, 3, 3, 3], 0.05, 2.0)).unwrap();
    s.insert("a", random_tensor(&mut r, &[3], 0.0, 0.5)).unwrap();
    grad_check(&s, H, |g, s| {
        let (x, a) = (g.param(s, "x").unwrap(), g.param(s, "a").unwrap());
        let y = g.prelu(x, a).unwrap();
        project(g, y, 6)
    })
}

pub fn relu_and_pools() -> GradCheck {
    let mut r = rng(13);
    let mut s = ParamStore::new();
    s.insert("x", random_off_kink(&mut r, &[2, 2, 4, 6], 0.05, 2.0)).unwrap();
    grad_check(&s, H, |g, s| {
        let x = g.param(s, "x").unwrap();
        let a = g.relu(x);
        let p = g.avg_pool2x2(a).unwrap();
        let q = g.global_avg_pool(p).unwrap();
        let l1 = project(g, p, 7);
        let l2 = project(g, q, 8);
        g.add(l1, l2).unwrap()
    })
}

fn fc_store() -> (ParamStore, Tensor) {
    let mut r = rng(14);
    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&mut r, &[3, 5], -1.0, 1.0)).unwrap();
    s.insert("w", random_tensor(&mut r, &[4, 5], -1.0, 1.0)).unwrap();
    s.insert("b", random_tensor(&mut r, &[4], -1.0, 1.0)).unwrap();
    let mut y = Tensor::zeros(&[3, 4]);
    for (i, c) in [2usize, 0, 3].into_iter().enumerate() {
        y.data_mut()[i * 4 + c] = 1.0;
    }
    (s, y)
}

/// Fully connected layer into the fused softmax + cross-entropy.
pub fn fc_softmax_cross_entropy() -> GradCheck {
    let (s, y) = fc_store();
    grad_check(&s, H, |g, s| {
        let (x, w, b) = (g.param(s, "x").unwrap(), g.param(s, "w").unwrap(), g.param(s, "b").unwrap());
        let z = g.fully_connected(x, w, Some(b)).unwrap();
        let p = g.softmax(z).unwrap();
        g.cross_entropy(p, y.clone()).unwrap()
    })
}

/// Softmax on its own, with the scalar helpers `scale`, `square` and `sum`.
pub fn softmax_and_scalar_ops() -> GradCheck {
    let (s, _) = fc_store();
    grad_check(&s, H, |g, s| {
        let (x, w) = (g.param(s, "x").unwrap(), g.param(s, "w").unwrap());
        let z = g.fully_connected(x, w, None).unwrap();
        let p = g.softmax(z).unwrap();
        let l = project(g, p, 9);
        let sq = g.square(z);
        let total = g.sum(sq);
        let small = g.scale(total, 0.25);
        g.add(l, small).unwrap()
    })
}

/// Cross-entropy on probabilities that do not come from a softmax node.
/// Finite differences would leave the simplex, so the analytic gradient is
/// compared with the closed form `−y / (N·p)` instead.
pub fn unfused_cross_entropy() -> GradCheck {
    let mut r = rng(15);
    let mut probs = random_tensor(&mut r, &[2, 4], 0.1, 1.0);
    for row in probs.data_mut().chunks_mut(4) {
        let t: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= t);
    }
    let mut s = ParamStore::new();
    s.insert("p", probs.clone()).unwrap();
    let mut y = Tensor::zeros(&[2, 4]);
    y.data_mut()[1] = 1.0;
    y.data_mut()[6] = 1.0;
    let mut g = Graph::new();
    let p = g.param(&s, "p").unwrap();
    let l = g.cross_entropy(p, y.clone()).unwrap();
    g.backward(l, &mut s).unwrap();
    let grad = s.get("p").unwrap().grad.clone().unwrap();
    let mut out = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for i in 0..8 {
        let want = -y.data()[i] / (2.0 * probs.data()[i]);
        let e = rel_err(grad.data()[i], want);
        out.checked += 1;
        if e > out.max_rel {
            out.max_rel = e;
            out.worst = format!("p[{i}]: analytic {} closed form {want}", grad.data()[i]);
        }
    }
    out
}

/// Every parameter of a small densenet (8 px, one block pair, growth 2).
pub fn tiny_network() -> GradCheck {
    let cfg = DenseNetConfig {
        growth_rate: 2,
        block_pairs: 1,
        input_px: 8,
        ..DenseNetConfig::default()
    };
    let net = densenet::build(cfg, 3).unwrap();
    let mut r = rng(16);
    let x = random_tensor(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
    let mut y = Tensor::zeros(&[2, 4]);
    y.data_mut()[3] = 1.0;
    y.data_mut()[5] = 1.0;
    grad_check(&net.params, H, |g, s| {
        let p = densenet::forward_graph(&cfg, s, g, x.clone()).unwrap();
        g.cross_entropy(p, y.clone()).unwrap()
    })
}

pub type Case = (&'static str, fn() -> GradCheck);

pub const ALL: [Case; 8] = [
    ("conv3x3", conv3x3),
    ("conv parts/strided/concat", conv_parts_strided_concat),
    ("prelu", prelu_off_kink),
    ("relu/pools", relu_and_pools),
    ("fc+softmax+cross-entropy", fc_softmax_cross_entropy),
    ("softmax/scalar ops", softmax_and_scalar_ops),
    ("unfused cross-entropy", unfused_cross_entropy),
    ("tiny densenet", tiny_network),
];
