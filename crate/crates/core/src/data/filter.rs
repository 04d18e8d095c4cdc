//! Butterworth band-pass design (bilinear transform, second-order sections)
//! and zero-phase forward-backward filtering.

use std::f64::consts::PI;

use nalgebra::Complex;

use crate::error::{Error, Result};

/// One second-order section, `a[0] == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex<f64>) -> Complex<f64> {
        let z2 = z_inv * z_inv;
        let num = self.b[0] + z_inv * self.b[1] + z2 * self.b[2];
        let den = self.a[0] + z_inv * self.a[1] + z2 * self.a[2];
        num / den
    }

    /// Steady-state transposed direct-form II state for a unit step input.
    fn step_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let rhs0 = b1 - a1 * b0;
        let rhs1 = b2 - a2 * b0;
        let z0 = (rhs0 + rhs1) / (1.0 + a1 + a2);
        [z0, rhs1 - a2 * z0]
    }

    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    sections: Vec<Biquad>,
}

/// Digital Butterworth band-pass of the given prototype order (`2 * order`
/// poles), unit gain at the band's geometric centre.
pub fn butterworth_bandpass(order: usize, low_hz: f64, high_hz: f64, sample_rate_hz: f64) -> Result<SosFilter> {
    if !(low_hz > 0.0 && high_hz > low_hz && low_hz.is_finite() && high_hz.is_finite()) {
        return Err(Error::InvalidBand { low: low_hz, high: high_hz });
    }
    let nyquist = sample_rate_hz / 2.0;
    if high_hz >= nyquist {
        return Err(Error::NyquistViolation { high: high_hz, nyquist });
    }
    if order == 0 {
        return Err(Error::BadConfig("filter order must be positive".into()));
    }
    let fs2 = 2.0 * sample_rate_hz;
    let w1 = fs2 * (PI * low_hz / sample_rate_hz).tan();
    let w2 = fs2 * (PI * high_hz / sample_rate_hz).tan();
    let bw = w2 - w1;
    let w0sq = w1 * w2;

    let mut poles = Vec::with_capacity(2 * order);
    for k in 0..order {
        let theta = PI * (2 * k + 1 + order) as f64 / (2 * order) as f64;
        let p = Complex::from_polar(1.0, theta) * bw;
        let disc = (p * p - 4.0 * w0sq).sqrt();
        for s in [(p + disc) / 2.0, (p - disc) / 2.0] {
            poles.push((fs2 + s) / (fs2 - s));
        }
    }

    let tol = 1e-12;
    let mut sections = Vec::with_capacity(order);
    let mut reals: Vec<f64> = Vec::new();
    for z in &poles {
        if z.im > tol {
            sections.push(Biquad { b: [1.0, 0.0, -1.0], a: [1.0, -2.0 * z.re, z.norm_sqr()] });
        } else if z.im.abs() <= tol {
            reals.push(z.re);
        }
    }
    reals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for pair in reals.chunks(2) {
        let (r1, r2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push(Biquad { b: [1.0, 0.0, -1.0], a: [1.0, -(r1 + r2), r1 * r2] });
    }

    let mut filter = SosFilter { sections };
    let center = 2.0 * (w0sq.sqrt() / fs2).atan();
    let gain = filter.response_at(center).norm();
    let per_section = gain.powf(-1.0 / filter.sections.len() as f64);
    for s in &mut filter.sections {
        for b in &mut s.b {
            *b *= per_section;
        }
    }
    Ok(filter)
}

impl SosFilter {
    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    fn response_at(&self, omega: f64) -> Complex<f64> {
        let z_inv = Complex::from_polar(1.0, -omega);
        self.sections.iter().fold(Complex::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    /// Single-pass magnitude response at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        self.response_at(2.0 * PI * freq_hz / sample_rate_hz).norm()
    }

    fn run(&self, x: &[f64], state: &mut [[f64; 2]]) -> Vec<f64> {
        let mut y = x.to_vec();
        for (s, z) in self.sections.iter().zip(state.iter_mut()) {
            for v in y.iter_mut() {
                let xin = *v;
                let out = s.b[0] * xin + z[0];
                z[0] = s.b[1] * xin - s.a[1] * out + z[1];
                z[1] = s.b[2] * xin - s.a[2] * out;
                *v = out;
            }
        }
        y
    }

    /// Causal filtering from a zero state.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut state = vec![[0.0; 2]; self.sections.len()];
        self.run(x, &mut state)
    }

    fn steady_state(&self, level: f64) -> Vec<[f64; 2]> {
        let mut scale = level;
        self.sections
            .iter()
            .map(|s| {
                let [z0, z1] = s.step_state();
                let out = [z0 * scale, z1 * scale];
                scale *= s.dc_gain();
                out
            })
            .collect()
    }

    /// Zero-phase forward-backward filtering with odd-extension padding and
    /// steady-state initial conditions at both ends.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((0..pad).map(|i| 2.0 * x[0] - x[pad - i]));
        ext.extend_from_slice(x);
        ext.extend((0..pad).map(|i| 2.0 * x[n - 1] - x[n - 2 - i]));

        let mut state = self.steady_state(ext[0]);
        let mut y = self.run(&ext, &mut state);
        y.reverse();
        let mut state = self.steady_state(y[0]);
        let mut y = self.run(&y, &mut state);
        y.reverse();
        y[pad..pad + n].to_vec()
    }
}
