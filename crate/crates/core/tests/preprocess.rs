//! Preprocessing against spectral and statistical oracles.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use reptile_core::data::{bandpass, downsample, ems, ems_signal, SubjectDataset, EMS_INIT_BLOCK};
use reptile_core::{seed, Error};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn one_channel(x: &[f64], fs: f64) -> SubjectDataset {
    let data = x.iter().map(|&v| v as f32).collect();
    SubjectDataset::new("s", data, (1, 1, x.len()), vec![0], fs, vec!["a".into()]).unwrap()
}

fn sine(f: f64, fs: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect()
}

/// Frequency of the largest non-DC FFT bin and its single-sided amplitude.
fn fft_peak(x: &[f64], fs: f64) -> (f64, f64) {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    let (k, mag) = buf[1..buf.len() / 2]
        .iter()
        .enumerate()
        .map(|(i, c)| (i + 1, c.norm()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    (k as f64 * fs / x.len() as f64, 2.0 * mag / x.len() as f64)
}

fn series(ds: &SubjectDataset) -> Vec<f64> {
    ds.epoch(0).iter().map(|&v| v as f64).collect()
}

#[test]
fn passband_sinusoid_keeps_its_amplitude() {
    // 2500 samples at 250 Hz: 20 Hz falls exactly on a bin of the trimmed window.
    let fs = 250.0;
    let out = series(&bandpass(&one_channel(&sine(20.0, fs, 2500), fs), 4.0, 38.0).unwrap());
    let (f, amp) = fft_peak(&out[125..2375], fs);
    assert!((f - 20.0).abs() < 1e-9);
    assert!((amp - 1.0).abs() <= 0.02, "amplitude {amp}");
}

#[test]
fn stopband_sinusoid_is_attenuated() {
    let fs = 250.0;
    let out = series(&bandpass(&one_channel(&sine(1.0, fs, 2500), fs), 4.0, 38.0).unwrap());
    let peak = out[125..2375].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(peak < 0.10, "residual amplitude {peak}");
}

#[test]
fn bandpass_rejects_bad_bands() {
    let ds = one_channel(&sine(10.0, 250.0, 500), 250.0);
    assert!(matches!(bandpass(&ds, 38.0, 4.0), Err(Error::InvalidBand { .. })));
    assert!(matches!(bandpass(&ds, 4.0, 130.0), Err(Error::NyquistViolation { .. })));
}

#[test]
fn ems_of_white_noise_has_unit_scale() {
    let mut rng = seed::rng(17, &[]);
    let x: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
    let y = ems_signal(&x, 0.001, EMS_INIT_BLOCK).unwrap();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    assert!((0.8..=1.2).contains(&std), "std {std}");
}

#[test]
fn ems_is_scale_invariant_after_the_initial_block() {
    let mut rng = seed::rng(18, &[]);
    let x: Vec<f64> = (0..4000).map(|i| (i as f64 * 0.01).sin() + rng.sample::<f64, _>(StandardNormal)).collect();
    let scaled: Vec<f64> = x.iter().map(|v| 10.0 * v).collect();
    let a = ems_signal(&x, 0.001, EMS_INIT_BLOCK).unwrap();
    let b = ems_signal(&scaled, 0.001, EMS_INIT_BLOCK).unwrap();
    for (u, v) in a[EMS_INIT_BLOCK..].iter().zip(&b[EMS_INIT_BLOCK..]) {
        assert!((u - v).abs() <= 1e-6);
    }
}

#[test]
fn ems_of_constant_is_zero() {
    let y = ems_signal(&vec![3.5; 2000], 0.001, EMS_INIT_BLOCK).unwrap();
    assert!(y.iter().all(|&v| v == 0.0));
    let ds = one_channel(&[1.0; 10], 250.0);
    assert!(matches!(ems(&ds, 1.0, 5), Err(Error::InvalidFactor(_))));
}

#[test]
fn decimation_keeps_the_spectral_peak() {
    let ds = one_channel(&sine(10.0, 1000.0, 1000), 1000.0);
    let out = downsample(&ds, 250.0).unwrap();
    assert_eq!(out.times(), 250);
    assert_eq!(out.sample_rate_hz(), 250.0);
    let (f, _) = fft_peak(&series(&out), 250.0);
    assert!((f - 10.0).abs() < 1e-9);
    assert_eq!(downsample(&ds, 1000.0).unwrap(), ds);
    assert!(matches!(downsample(&ds, 300.0), Err(Error::NonIntegerFactor { .. })));
}
