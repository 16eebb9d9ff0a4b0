use loconet_core::encoders::{AudioConfig, AudioEncoder, VisualConfig, VisualEncoder};
use loconet_core::Error;
use loconet_tensor::gradcheck::{check_inputs, check_params, GradCheck};
use loconet_tensor::rng::derive_rng;
use loconet_tensor::{Graph, ParamStore, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn wrap(e: Error) -> TensorError {
    TensorError::Usage(e.to_string())
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn probe(g: &mut Graph, y: Var, w: &Tensor) -> loconet_tensor::Result<Var> {
    let r = g.constant(w.clone());
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Pooling halves with floor, except the third pool, whose input is padded to
/// an even length first; the transposed convolution doubles.
fn ladder(t: usize) -> [usize; 8] {
    let input = 4 * t;
    let block1 = input / 2;
    let block2 = block1 / 2;
    let tap = block2;
    let block3 = (tap + tap % 2) / 2;
    let block4 = block3;
    [input, block1, block2, tap, block3, block4, 2 * block4, t]
}

#[test]
fn audio_length_ladder_matches_stride_arithmetic() {
    let mut store = ParamStore::new();
    let enc = AudioEncoder::new(&mut store, "a", AudioConfig::desk(16), &mut derive_rng(0, &[])).unwrap();
    for t in [8usize, 16, 64, 200, 1, 7, 25] {
        let mut g = Graph::inference();
        let mel = g.constant(Tensor::from_fn([4 * t, 40], |i| ((i * 31) % 17) as f64 / 17.0));
        let (y, tr) = enc.forward_traced(&mut g, &store, mel).unwrap();
        assert_eq!(g.shape(y), &[t, 16]);
        let got = [tr.input, tr.block1, tr.block2, tr.block3_tap, tr.block3, tr.block4, tr.upsampled, tr.output];
        assert_eq!(got, ladder(t), "T = {t}");
    }
}

#[test]
fn audio_encoder_gradients() {
    for seed in 0..20 {
        let mut rng = derive_rng(seed, &[1]);
        let cfg = AudioConfig { mel_bins: 16, widths: [2, 3, 3, 2], channels: 4 };
        let mut store = ParamStore::new();
        let enc = AudioEncoder::new(&mut store, "a", cfg, &mut rng).unwrap();
        let t = [3, 4][seed as usize % 2];
        let mel = random(&mut rng, &[4 * t, 16], -1.0, 1.0);
        let w = random(&mut rng, &[t, 4], -1.0, 1.0);
        let r = check_inputs(GradCheck::default(), &[mel.clone()], |g, v| {
            let y = enc.forward(g, &store, v[0]).map_err(wrap)?;
            probe(g, y, &w)
        })
        .unwrap();
        assert!(r.rel_error < 1e-4, "input seed {seed}: {:e}", r.rel_error);
        let r = check_params(GradCheck { max_coords: Some(8), ..GradCheck::default() }, &mut store, |g, st| {
            let m = g.constant(mel.clone());
            let y = enc.forward(g, st, m).map_err(wrap)?;
            probe(g, y, &w)
        })
        .unwrap();
        assert!(r.rel_error < 1e-4, "params seed {seed}: {:e}", r.rel_error);
    }
}

#[test]
fn visual_encoder_gradients() {
    for seed in 0..20 {
        let mut rng = derive_rng(seed, &[2]);
        let cfg = VisualConfig { crop: 16, front_width: 4, stage_widths: vec![6, 16], tcn_blocks: 2, tcn_kernel: 3 };
        let mut store = ParamStore::new();
        let enc = VisualEncoder::new(&mut store, "v", cfg, &mut rng).unwrap();
        let video = random(&mut rng, &[1, 4, 16, 16, 1], 0.0, 1.0);
        let w = random(&mut rng, &[1, 4, 16], -1.0, 1.0);
        let r = check_params(GradCheck { max_coords: Some(6), ..GradCheck::default() }, &mut store, |g, st| {
            let y = enc.forward(g, st, &video).map_err(wrap)?;
            probe(g, y, &w)
        })
        .unwrap();
        assert!(r.rel_error < 1e-4, "seed {seed}: {:e}", r.rel_error);
    }
}

#[test]
fn batched_visual_encoding_equals_per_track() {
    let mut rng = derive_rng(3, &[]);
    let mut store = ParamStore::new();
    let enc = VisualEncoder::new(&mut store, "v", VisualConfig::desk(16, 8), &mut rng).unwrap();
    let video = random(&mut rng, &[3, 5, 16, 16, 1], 0.0, 1.0);
    let mut g = Graph::inference();
    let all = enc.forward(&mut g, &store, &video).unwrap();
    let all = g.data(all).to_vec();
    let per = 5 * 16 * 16;
    for b in 0..3 {
        let one = Tensor::new(vec![1, 5, 16, 16, 1], video.data()[b * per..(b + 1) * per].to_vec()).unwrap();
        let mut g = Graph::inference();
        let y = enc.forward(&mut g, &store, &one).unwrap();
        assert_eq!(g.data(y), &all[b * 40..(b + 1) * 40]);
    }
}

#[test]
fn encoders_reject_wrong_inputs() {
    let mut store = ParamStore::new();
    let mut rng = derive_rng(4, &[]);
    let v = VisualEncoder::new(&mut store, "v", VisualConfig::desk(16, 8), &mut rng).unwrap();
    let a = AudioEncoder::new(&mut store, "a", AudioConfig::desk(8), &mut rng).unwrap();
    let mut g = Graph::inference();
    assert!(matches!(v.forward(&mut g, &store, &Tensor::zeros([1, 4, 16, 16, 3])), Err(Error::Shape(_))));
    let wrong_bins = g.constant(Tensor::zeros([16, 32]));
    assert!(matches!(a.forward(&mut g, &store, wrong_bins), Err(Error::Shape(_))));
    let mut bad = VisualConfig::desk(16, 8);
    bad.tcn_kernel = 4;
    assert!(matches!(VisualEncoder::new(&mut store, "w", bad, &mut rng), Err(Error::Config(_))));
}
