use loconet_tensor::gradcheck::{check_inputs, check_params, GradCheck};
use loconet_tensor::nn::{LayerNorm, Linear, MultiHeadAttention};
use loconet_tensor::rng::derive_rng;
use loconet_tensor::{Graph, ParamStore, Result, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Contracts `y` against fixed random weights so every output coordinate
/// carries a distinct gradient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = derive_rng(seed, &[0xbeef]);
    let r = random(&mut rng, g.shape(y));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn check<F>(name: &str, tol: f64, seed: u64, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = check_inputs(GradCheck::default(), inputs, |g, v| {
        let y = f(g, v)?;
        probe(g, y, seed)
    })
    .unwrap();
    assert!(report.rel_error < tol, "{name} seed {seed}: rel error {:.3e}", report.rel_error);
}

#[test]
fn elementwise_ops() {
    for seed in 0..SEEDS {
        let mut rng = derive_rng(seed, &[1]);
        let shape = [rng.gen_range(1..4), rng.gen_range(1..6)];
        let a = random(&mut rng, &shape);
        let b = random(&mut rng, &shape);
        let bias = random(&mut rng, &shape[1..]);
        check("add", 1e-5, seed, &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
        check("sub", 1e-5, seed, &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
        check("mul", 1e-5, seed, &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
        check("scale", 1e-5, seed, &[a.clone()], |g, v| Ok(g.scale(v[0], -1.7)));
        check("relu", 1e-5, seed, &[a.clone()], |g, v| Ok(g.relu(v[0])));
        check("add_bias", 1e-5, seed, &[a.clone(), bias], |g, v| g.add_bias(v[0], v[1]));
        check("mean", 1e-5, seed, &[a], |g, v| Ok(g.mean(v[0])));
    }
}

#[test]
fn matmul_random_shapes() {
    for seed in 0..SEEDS {
        let mut rng = derive_rng(seed, &[2]);
        let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        check("matmul", 1e-6, seed, &[a, b], |g, v| g.matmul(v[0], v[1]));
        let a = random(&mut rng, &[2, 1, m, k]);
        let b = random(&mut rng, &[3, k, n]);
        check("matmul broadcast", 1e-6, seed, &[a, b], |g, v| g.matmul(v[0], v[1]));
        let a = random(&mut rng, &[3, m, k]);
        let b = random(&mut rng, &[k, n]);
        check("matmul shared rhs", 1e-6, seed, &[a, b], |g, v| g.matmul(v[0], v[1]));
    }
}

#[test]
fn matmul_three_by_four_times_four_by_two() {
    let mut rng = derive_rng(7, &[]);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    check("matmul 3x4x2", 1e-6, 7, &[a, b], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn shape_ops() {
    for seed in 0..SEEDS {
        let mut rng = derive_rng(seed, &[3]);
        let shape = [rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(1..4)];
        let x = random(&mut rng, &shape);
        let y = random(&mut rng, &shape);
        check("reshape", 1e-5, seed, &[x.clone()], |g, v| g.reshape(v[0], &[shape[0] * shape[1], shape[2]]));
        check("permute", 1e-5, seed, &[x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
        check("permute inner", 1e-5, seed, &[x.clone()], |g, v| g.permute(v[0], &[1, 0, 2]));
        check("concat", 1e-5, seed, &[x.clone(), y], |g, v| g.concat(&[v[0], v[1], v[0]], 1));
        check("narrow", 1e-5, seed, &[x.clone()], |g, v| g.narrow(v[0], 1, 1, shape[1] - 1));
        check("pad", 1e-5, seed, &[x.clone()], |g, v| g.pad(v[0], 1, 2, 1));
        check("repeat", 1e-5, seed, &[x], |g, v| g.repeat(v[0], 3));
    }
}

#[test]
fn softmax_random_axes() {
    for seed in 0..SEEDS {
        let mut rng = derive_rng(seed, &[4]);
        let v5 = random(&mut rng, &[5]);
        check("softmax 5-vector", 1e-6, seed, &[v5], |g, v| g.softmax(v[0], 0));
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4)];
        let axis = rng.gen_range(0..3);
        let x = random(&mut rng, &shape);
        check("softmax", 1e-6, seed, &[x], |g, v| g.softmax(v[0], axis));
    }
}

#[test]
fn layer_norm_random_rows() {
    for seed in 0..SEEDS {
        let mut rng = derive_rng(seed, &[5]);
        let x8 = random(&mut rng, &[8]);
        let gain = random(&mut rng, &[8]);
        let bias = random(&mut rng, &[8]);
        check("layer_norm 8", 1e-5, seed, &[x8, gain, bias], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
        let c = rng.gen_range(2..7);
        let rows = rng.gen_range(1..4);
        let x = random(&mut rng, &[rows, c]);
        let gain = random(&mut rng, &[c]);
        let bias = random(&mut rng, &[c]);
        check("layer_norm rows", 1e-5, seed, &[x, gain, bias], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    }
}

#[test]
fn convolutions_and_pooling() {
    for seed in 0..SEEDS {
        let mut rng = derive_rng(seed, &[6]);
        let (h, w) = (rng.gen_range(3..6), rng.gen_range(3..6));
        let (ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3));
        let stride = rng.gen_range(1..3);
        let x = random(&mut rng, &[2, h, w, ci]);
        let k = random(&mut rng, &[3, 3, ci, co]);
        let b = random(&mut rng, &[co]);
        check("conv2d", 1e-4, seed, &[x.clone(), k, b], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), (stride, stride), (1, 1))
        });
        check("max_pool2d", 1e-4, seed, &[x.clone()], |g, v| g.max_pool2d(v[0], (2, 2), (2, 2)));
        check("mean_pool2d", 1e-4, seed, &[x], |g, v| g.mean_pool2d(v[0]));

        let (t, c) = (rng.gen_range(2..7), rng.gen_range(1..4));
        let kt = [1, 3, 5][rng.gen_range(0..3)];
        let x = random(&mut rng, &[2, t, c]);
        let wk = random(&mut rng, &[kt, c]);
        let bk = random(&mut rng, &[c]);
        check("depthwise_conv1d", 1e-4, seed, &[x.clone(), wk, bk], |g, v| g.depthwise_conv1d(v[0], v[1], v[2]));

        let s = rng.gen_range(1..4);
        let kk = rng.gen_range(1..4);
        let co = rng.gen_range(1..4);
        let wt = random(&mut rng, &[kk, c, co]);
        let bt = random(&mut rng, &[co]);
        check("conv_transpose1d", 1e-4, seed, &[x, wt, bt], |g, v| g.conv_transpose1d(v[0], v[1], v[2], s));
    }
}

#[test]
fn cross_entropy_random_frames() {
    for seed in 0..SEEDS {
        let mut rng = derive_rng(seed, &[7]);
        let t = rng.gen_range(1..6);
        let logits = random(&mut rng, &[t, 2]);
        let labels: Vec<usize> = (0..t).map(|_| rng.gen_range(0..2)).collect();
        let r = check_inputs(GradCheck::default(), &[logits], |g, v| g.cross_entropy(v[0], &labels)).unwrap();
        assert!(r.rel_error < 1e-4, "seed {seed}: {:.3e}", r.rel_error);
    }
}

#[test]
fn attention_block_parameters() {
    for seed in 0..SEEDS {
        let mut rng = derive_rng(seed, &[8]);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng).unwrap();
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        let lin = Linear::new(&mut store, "lin", 4, 2, &mut rng).unwrap();
        let x = random(&mut rng, &[1, 3, 4]);
        let kv = random(&mut rng, &[1, 3, 4]);
        let r = check_params(GradCheck::default(), &mut store, |g, s| {
            let q = g.constant(x.clone());
            let k = g.constant(kv.clone());
            let a = mha.forward(g, s, q, k, k)?;
            let h = g.add(a, q)?;
            let h = ln.forward(g, s, h)?;
            let y = lin.forward(g, s, h)?;
            probe(g, y, seed)
        })
        .unwrap();
        assert!(r.rel_error < 1e-5, "seed {seed}: {:.3e}", r.rel_error);
    }
}

#[test]
fn attention_inputs_b1_t3_c4_h2() {
    let mut rng = derive_rng(99, &[]);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng).unwrap();
    let q = random(&mut rng, &[1, 3, 4]);
    let k = random(&mut rng, &[1, 3, 4]);
    let v = random(&mut rng, &[1, 3, 4]);
    let r = check_inputs(GradCheck::default(), &[q, k, v], |g, x| {
        let y = mha.forward(g, &store, x[0], x[1], x[2])?;
        probe(g, y, 99)
    })
    .unwrap();
    assert!(r.rel_error < 1e-5, "{:.3e}", r.rel_error);
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = derive_rng(5, &[]);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 4, &mut rng).unwrap();
    let x = random(&mut rng, &[2, 5, 8]);
    let run = || {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone().with_requires_grad(true));
        let y = mha.forward(&mut g, &store, xv, xv, xv).unwrap();
        let l = probe(&mut g, y, 5).unwrap();
        let grads = g.backward(l).unwrap();
        let mut all = grads.get(xv).unwrap().to_vec();
        for (_, p) in grads.params() {
            all.extend_from_slice(p);
        }
        all
    };
    let (a, b) = (run(), run());
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
