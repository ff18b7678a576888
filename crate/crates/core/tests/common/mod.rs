#![allow(dead_code)]

pub mod grad_cases;

use gradepipe::nn::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform draws in ±[min_abs, max_abs], keeping values off the ReLU/PReLU kink.
pub fn random_off_kink(rng: &mut ChaCha8Rng, dims: &[usize], min_abs: f64, max_abs: f64) -> Tensor {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(min_abs..max_abs);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Relative error with a small floor so exact zeros compare sensibly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare every parameter gradient produced by `backward` with central
/// differences of step `h`.
pub fn grad_check(store: &ParamStore, h: f64, f: impl Fn(&mut Graph, &ParamStore) -> Var) -> GradCheck {
    let mut analytic = store.clone();
    analytic.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &analytic);
    g.backward(loss, &mut analytic).unwrap();

    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = f(&mut g, s);
        g.value(l).data()[0]
    };

    let mut probe = store.clone();
    let mut out = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for p in analytic.params() {
        let grad = p.grad.as_ref().map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; p.value.len()]);
        for i in 0..p.value.len() {
            let orig = probe.value(&p.name).unwrap().data()[i];
            probe.get_mut(&p.name).unwrap().value.data_mut()[i] = orig + h;
            let up = eval(&probe);
            probe.get_mut(&p.name).unwrap().value.data_mut()[i] = orig - h;
            let down = eval(&probe);
            probe.get_mut(&p.name).unwrap().value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(grad[i], numeric);
            out.checked += 1;
            if e > out.max_rel {
                out.max_rel = e;
                out.worst = format!("{}[{i}]: analytic {} numeric {}", p.name, grad[i], numeric);
            }
        }
    }
    out
}

/// Direct six-loop cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.nchw().unwrap();
    let (o, _, k, _) = w.nchw().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map(|b| b.data()[oc]).unwrap_or(0.0);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((s * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Majority vote inside a disk of radius `disk / 2`, out-of-bounds counted
/// as background, ties to background.
pub fn naive_median(mask: &[bool], w: usize, h: usize, disk: usize) -> Vec<bool> {
    let r = disk as f64 / 2.0;
    let ri = r.floor() as isize;
    let mut out = vec![false; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut fg, mut total) = (0usize, 0usize);
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if ((dx * dx + dy * dy) as f64) > r * r {
                        continue;
                    }
                    total += 1;
                    let (sx, sy) = (x + dx, y + dy);
                    if sx >= 0 && sy >= 0 && sx < w as isize && sy < h as isize && mask[sy as usize * w + sx as usize] {
                        fg += 1;
                    }
                }
            }
            out[y as usize * w + x as usize] = 2 * fg > total;
        }
    }
    out
}
