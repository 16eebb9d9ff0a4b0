//! Plain-loop reference implementations over row-major matrices.
#![allow(dead_code)]

use loconet_core::lscm::{AttentionLayer, Sim};
use loconet_tensor::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention, LAYER_NORM_EPS};
use loconet_tensor::{ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Splits a `[S, T, C]` tensor into `S` matrices of `T` rows.
pub fn speakers(t: &Tensor) -> Vec<Mat> {
    let (s, n, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..s).map(|i| (0..n).map(|j| t.data()[(i * n + j) * c..(i * n + j + 1) * c].to_vec()).collect()).collect()
}

pub fn flatten(ms: &[Mat]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.iter().flat_map(|r| r.iter().copied())).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn linear(x: &Mat, store: &ParamStore, l: &Linear) -> Mat {
    let w = store.get(l.weight).data();
    let b = store.get(l.bias).data();
    x.iter()
        .map(|row| {
            (0..l.out_dim)
                .map(|o| {
                    let mut acc = b[o];
                    for (i, v) in row.iter().enumerate() {
                        acc += v * w[i * l.out_dim + o];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, store: &ParamStore, ln: &LayerNorm) -> Mat {
    let gain = store.get(ln.gain).data();
    let bias = store.get(ln.bias).data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) * rs * gain[i] + bias[i]).collect()
        })
        .collect()
}

pub fn mlp(x: &Mat, store: &ParamStore, m: &Mlp) -> Mat {
    let h: Mat = linear(x, store, &m.fc1).into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    linear(&h, store, &m.fc2)
}

/// Scaled dot-product attention of `q` rows over `kv` rows; `allowed(i, j)`
/// decides whether query `i` may see key `j`.
pub fn mha(q: &Mat, kv: &Mat, store: &ParamStore, a: &MultiHeadAttention, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
    let (qp, kp, vp) = (linear(q, store, &a.q), linear(kv, store, &a.k), linear(kv, store, &a.v));
    let d = a.head_dim();
    let mut ctx = vec![vec![0.0; a.dim]; q.len()];
    for h in 0..a.heads {
        for i in 0..q.len() {
            let keys: Vec<usize> = (0..kv.len()).filter(|&j| allowed(i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| (0..d).map(|e| qp[i][h * d + e] * kp[j][h * d + e]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (n, &j) in keys.iter().enumerate() {
                for e in 0..d {
                    ctx[i][h * d + e] += exps[n] / z * vp[j][h * d + e];
                }
            }
        }
    }
    linear(&ctx, store, &a.out)
}

/// Post-norm layer on one speaker's rows.
pub fn attention_layer(q: &Mat, kv: &Mat, store: &ParamStore, l: &AttentionLayer) -> Mat {
    let h = layer_norm(&add(&mha(q, kv, store, &l.mha, &|_, _| true), q), store, &l.ln1);
    layer_norm(&add(&mlp(&h, store, &l.mlp), &h), store, &l.ln2)
}

/// Zero-padded cross-correlation over the speaker × time grid.
pub fn grid_conv(u: &[Mat], store: &ParamStore, sim: &Sim) -> Vec<Mat> {
    let w = store.get(sim.conv_weight.unwrap()).data();
    let b = store.get(sim.conv_bias.unwrap()).data();
    let (s, t, c) = (u.len(), u[0].len(), u[0][0].len());
    let (ks, kt) = (sim.s, sim.k);
    let mut out = vec![vec![vec![0.0; c]; t]; s];
    for i in 0..s {
        for j in 0..t {
            for o in 0..c {
                let mut acc = b[o];
                for a in 0..ks {
                    for bb in 0..kt {
                        let (si, tj) = (i as isize + a as isize - (ks / 2) as isize, j as isize + bb as isize - (kt / 2) as isize);
                        if si < 0 || tj < 0 || si >= s as isize || tj >= t as isize {
                            continue;
                        }
                        for ci in 0..c {
                            acc += w[((a * kt + bb) * c + ci) * c + o] * u[si as usize][tj as usize][ci];
                        }
                    }
                }
                out[i][j][o] = acc;
            }
        }
    }
    out
}

/// `MLP(LN(mix)) + u` applied speaker by speaker.
pub fn sim_tail(mixed: &[Mat], u: &[Mat], store: &ParamStore, sim: &Sim) -> Vec<Mat> {
    mixed.iter().zip(u).map(|(m, x)| add(&mlp(&layer_norm(m, store, &sim.ln), store, &sim.mlp), x)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
