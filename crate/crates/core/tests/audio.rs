use loconet_core::audio::{mel_centers, stft_magnitude, MelConfig, MelFrontend, Waveform, ROWS_PER_FRAME, SAMPLE_RATE};
use proptest::prelude::*;
use std::f64::consts::PI;

fn tone(hz: f64, samples: usize, amp: f64) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    Waveform::new((0..samples).map(|i| amp * (2.0 * PI * hz * i as f64 / sr).sin()).collect(), SAMPLE_RATE).unwrap()
}

/// Mirror index without edge repetition, by walking back and forth.
fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Direct DFT of one centred, Hann-windowed frame.
fn dft_frame(x: &[f64], frame: usize, win: usize, hop: usize, fft: usize) -> Vec<f64> {
    let start = (frame * hop) as isize - (win / 2) as isize;
    let w: Vec<f64> = (0..win)
        .map(|i| {
            let h = (PI * i as f64 / win as f64).sin();
            h * h * x[mirror(start + i as isize, x.len())]
        })
        .collect();
    (0..=fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in w.iter().enumerate() {
                let a = -2.0 * PI * (k * n) as f64 / fft as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

#[test]
fn bin_centred_tone_concentrates_in_main_lobe() {
    let (win, fft) = (512, 512);
    for bin in [10usize, 37, 100, 200] {
        let hz = bin as f64 * SAMPLE_RATE as f64 / fft as f64;
        let mag = stft_magnitude(&tone(hz, 8000, 0.5), win, 160, fft).unwrap();
        let bins = mag.shape()[1];
        let row = &mag.data()[20 * bins..21 * bins];
        let peak = (0..bins).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        assert_eq!(peak, bin);
        let total: f64 = row.iter().map(|v| v * v).sum();
        let lobe: f64 = row[bin - 2..=bin + 2].iter().map(|v| v * v).sum();
        assert!(lobe / total >= 0.99, "bin {bin}: {}", lobe / total);
    }
}

#[test]
fn stft_matches_direct_dft() {
    let cfg = MelConfig::default();
    let x: Vec<f64> = (0..3000).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
    let w = Waveform::new(x.clone(), SAMPLE_RATE).unwrap();
    let mag = stft_magnitude(&w, cfg.win_len, cfg.hop_len, cfg.fft_size).unwrap();
    let bins = mag.shape()[1];
    assert_eq!(mag.shape()[0], 3000usize.div_ceil(cfg.hop_len));
    for frame in [0, 1, 9, 18] {
        let want = dft_frame(&x, frame, cfg.win_len, cfg.hop_len, cfg.fft_size);
        for (k, (a, b)) in mag.data()[frame * bins..(frame + 1) * bins].iter().zip(&want).enumerate() {
            assert!((a - b).abs() < 1e-9 * (1.0 + b), "frame {frame} bin {k}: {a} vs {b}");
        }
    }
}

#[test]
fn mel_peak_sits_at_nearest_filter_centre() {
    let cfg = MelConfig::default();
    let frontend = MelFrontend::new(cfg).unwrap();
    let centres = mel_centers(&cfg);
    for (m, &c) in centres.iter().enumerate().skip(6).take(30) {
        let mel = frontend.spectrogram(&tone(c, 6400, 0.3), 10).unwrap();
        let row = &mel.data()[20 * cfg.mel_bins..21 * cfg.mel_bins];
        let argmax = (0..cfg.mel_bins).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        assert_eq!(argmax, m, "tone at {c:.1} Hz");
    }
}

#[test]
fn spectrogram_has_four_rows_per_frame() {
    let frontend = MelFrontend::new(MelConfig::default()).unwrap();
    for t in [1usize, 8, 25, 64] {
        for samples in [t * 640 - 160, t * 640, t * 640 + 160] {
            let mel = frontend.spectrogram(&tone(440.0, samples, 0.2), t).unwrap();
            assert_eq!(mel.shape(), &[ROWS_PER_FRAME * t, 40]);
        }
    }
}

#[test]
fn wav_round_trip_keeps_sixteen_bit_precision() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    let w = tone(300.0, 1600, 0.7);
    w.write_wav(&path).unwrap();
    let back = Waveform::read_wav(&path).unwrap();
    assert_eq!(back.len(), w.len());
    let err = back.samples().iter().zip(w.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1.0 / 32768.0, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scaling_shifts_log_mel_by_twice_log_gain(hz in 100.0f64..6000.0, gain in 1.0f64..8.0) {
        let frontend = MelFrontend::new(MelConfig::default()).unwrap();
        let a = frontend.spectrogram(&tone(hz, 3200, 0.1), 5).unwrap();
        let b = frontend.spectrogram(&tone(hz, 3200, 0.1 * gain), 5).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!(y >= x);
            if *x > 1e-8f64.ln() + 1.0 {
                prop_assert!((y - x - 2.0 * gain.ln()).abs() < 1e-9);
            }
        }
    }
}
