//! Pre-filtered waveform variants for the travel-time dependent pulse
//! deformation.
//!
//! The bank holds the base pulse and progressively low-passed copies of it.
//! A continuous cutoff is served by blending the two nearest variants, and a
//! continuous time by linear interpolation inside each variant.

use crate::acquisition::Waveform;
use std::f64::consts::PI;

/// Number of variants in a default bank.
pub const DEFAULT_VARIANTS: usize = 8;
/// Lowest cutoff of a default bank, as a fraction of the RF Nyquist frequency.
pub const DEFAULT_MIN_CUTOFF: f64 = 0.1;
/// Tails below this fraction of the base peak are trimmed from every variant.
const TRIM_THRESHOLD: f64 = 1e-5;

/// Low-passed copies of one transmit pulse on a shared time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformBank {
    /// `variants[0]` is the base pulse; all variants share one length.
    pub variants: Vec<Vec<f64>>,
    /// Normalized cutoffs (fraction of RF Nyquist), strictly decreasing.
    pub cutoffs: Vec<f64>,
    pub sample_rate: f64,
    pub start_time: f64,
}

/// Value of the bank at a point together with its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WaveSample {
    pub value: f64,
    /// d value / d t
    pub d_time: f64,
    /// d value / d cutoff
    pub d_cutoff: f64,
}

/// Windowed-sinc (Blackman) linear-phase low-pass kernel, unit DC gain.
/// `cutoff` is in cycles per sample, `half_len` taps on each side of center.
pub fn lowpass_kernel(cutoff: f64, half_len: usize) -> Vec<f64> {
    let m = half_len as f64;
    let mut taps: Vec<f64> = (0..=2 * half_len)
        .map(|i| {
            let n = i as f64 - m;
            let x = 2.0 * cutoff * n;
            let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
            let phase = PI * (n + m) / m.max(1.0);
            let window = 0.42 - 0.5 * phase.cos() + 0.08 * (2.0 * phase).cos();
            2.0 * cutoff * sinc * window
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

impl WaveformBank {
    /// Bank with [`DEFAULT_VARIANTS`] cutoffs spaced geometrically from the RF
    /// Nyquist frequency down to [`DEFAULT_MIN_CUTOFF`] of it.
    pub fn new(waveform: &Waveform, rf_sampling_frequency: f64) -> Self {
        Self::with_grid(waveform, rf_sampling_frequency, DEFAULT_VARIANTS, DEFAULT_MIN_CUTOFF)
    }

    pub fn with_grid(
        waveform: &Waveform,
        rf_sampling_frequency: f64,
        n_variants: usize,
        min_cutoff: f64,
    ) -> Self {
        assert!(n_variants >= 1, "bank needs at least one variant");
        assert!(min_cutoff > 0.0 && min_cutoff < 1.0);
        let cutoffs: Vec<f64> = (0..n_variants)
            .map(|k| {
                if n_variants == 1 {
                    1.0
                } else {
                    min_cutoff.powf(k as f64 / (n_variants - 1) as f64)
                }
            })
            .collect();

        // Cutoff in cycles per waveform sample; variant 0 is left unfiltered.
        let to_cycles = |c: f64| (c * rf_sampling_frequency / 2.0 / waveform.sample_rate).min(0.5);
        let half_lens: Vec<usize> = cutoffs
            .iter()
            .map(|&c| (2.0 / to_cycles(c)).ceil() as usize)
            .collect();
        let pad = if n_variants > 1 {
            *half_lens[1..].iter().max().unwrap()
        } else {
            0
        };

        let n = waveform.samples.len();
        let len = n + 2 * pad;
        let mut variants = Vec::with_capacity(n_variants);
        let mut base = vec![0.0; len];
        base[pad..pad + n].copy_from_slice(&waveform.samples);
        variants.push(base);
        for k in 1..n_variants {
            let cycles = to_cycles(cutoffs[k]);
            let taps = if cycles >= 0.5 {
                vec![1.0]
            } else {
                lowpass_kernel(cycles, half_lens[k])
            };
            let h = (taps.len() - 1) / 2;
            let mut out = vec![0.0; len];
            // Centered ("same") convolution: zero group delay.
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, &tap) in taps.iter().enumerate() {
                    let src = i as isize + h as isize - j as isize - pad as isize;
                    if src >= 0 && (src as usize) < n {
                        acc += tap * waveform.samples[src as usize];
                    }
                }
                *o = acc;
            }
            variants.push(out);
        }

        let peak = waveform.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let threshold = TRIM_THRESHOLD * peak;
        let significant = |i: usize| variants.iter().any(|v| v[i].abs() > threshold);
        let first = (0..len).find(|&i| significant(i)).unwrap_or(pad);
        let last = (0..len).rev().find(|&i| significant(i)).unwrap_or(pad + n - 1);
        // Never trim inside the base support.
        let first = first.min(pad);
        let last = last.max(pad + n - 1);
        let variants: Vec<Vec<f64>> = variants.into_iter().map(|v| v[first..=last].to_vec()).collect();

        Self {
            variants,
            cutoffs,
            sample_rate: waveform.sample_rate,
            start_time: waveform.start_time - (pad - first) as f64 / waveform.sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.variants[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants[0].is_empty()
    }

    /// Time of the last stored sample.
    pub fn end_time(&self) -> f64 {
        self.start_time + (self.len() as f64 - 1.0) / self.sample_rate
    }

    /// Maps a cutoff to `(variant, blend fraction, d fraction / d cutoff)`.
    /// Cutoffs outside the grid clamp to the end variants with zero slope.
    #[inline]
    fn locate_cutoff(&self, cutoff: f64) -> (usize, f64, f64) {
        let k_last = self.cutoffs.len() - 1;
        if k_last == 0 || cutoff > self.cutoffs[0] {
            return (0, 0.0, 0.0);
        }
        if cutoff <= self.cutoffs[k_last] {
            return (k_last, 0.0, 0.0);
        }
        // cutoffs[k] >= cutoff > cutoffs[k + 1]
        let mut k = 0;
        while self.cutoffs[k + 1] >= cutoff {
            k += 1;
        }
        let span = self.cutoffs[k] - self.cutoffs[k + 1];
        ((k), (self.cutoffs[k] - cutoff) / span, -1.0 / span)
    }

    /// Locates time `t` on the sample axis: `(index, fraction)` or `None`
    /// outside the support.
    #[inline]
    fn locate_time(&self, t: f64) -> Option<(usize, f64)> {
        let u = (t - self.start_time) * self.sample_rate;
        let last = (self.len() - 1) as f64;
        if !(u >= 0.0 && u <= last) {
            return None;
        }
        let i = (u.floor() as usize).min(self.len() - 2);
        Some((i, u - i as f64))
    }

    /// Value at time `t` for a continuous cutoff; zero outside the support.
    pub fn value(&self, t: f64, cutoff: f64) -> f64 {
        let Some((i, ft)) = self.locate_time(t) else {
            return 0.0;
        };
        let (k, fk, _) = self.locate_cutoff(cutoff);
        let v = &self.variants[k];
        let a = v[i] + ft * (v[i + 1] - v[i]);
        if fk == 0.0 {
            return a;
        }
        let w = &self.variants[k + 1];
        let b = w[i] + ft * (w[i + 1] - w[i]);
        a + fk * (b - a)
    }

    /// Value of the unfiltered base pulse at time `t`.
    pub fn base_value(&self, t: f64) -> f64 {
        let Some((i, ft)) = self.locate_time(t) else {
            return 0.0;
        };
        let v = &self.variants[0];
        v[i] + ft * (v[i + 1] - v[i])
    }

    /// Value and partial derivatives. At interpolation nodes the slope of
    /// the segment to the right (later time, stronger filter) is used.
    pub fn sample(&self, t: f64, cutoff: f64) -> WaveSample {
        let Some((i, ft)) = self.locate_time(t) else {
            return WaveSample::default();
        };
        let (k, fk, dfk) = self.locate_cutoff(cutoff);
        let v = &self.variants[k];
        let a = v[i] + ft * (v[i + 1] - v[i]);
        let sa = (v[i + 1] - v[i]) * self.sample_rate;
        if fk == 0.0 && dfk == 0.0 {
            return WaveSample {
                value: a,
                d_time: sa,
                d_cutoff: 0.0,
            };
        }
        let w = &self.variants[k + 1];
        let b = w[i] + ft * (w[i + 1] - w[i]);
        let sb = (w[i + 1] - w[i]) * self.sample_rate;
        WaveSample {
            value: a + fk * (b - a),
            d_time: sa + fk * (sb - sa),
            d_cutoff: (b - a) * dfk,
        }
    }

    /// Base-pulse value and time derivative (deformation disabled).
    pub fn base_sample(&self, t: f64) -> WaveSample {
        let Some((i, ft)) = self.locate_time(t) else {
            return WaveSample::default();
        };
        let v = &self.variants[0];
        WaveSample {
            value: v[i] + ft * (v[i + 1] - v[i]),
            d_time: (v[i + 1] - v[i]) * self.sample_rate,
            d_cutoff: 0.0,
        }
    }
}

/// Pulse value at time `t` after a total travel time `round_trip_time`, with
/// the effective cutoff `xi_a + xi_b * round_trip_time`. `t` is measured
/// from the firing of the element, so the pulse is read at
/// `t - round_trip_time`.
pub fn waveform_value(bank: &WaveformBank, t: f64, round_trip_time: f64, xi_a: f64, xi_b: f64) -> f64 {
    bank.value(t - round_trip_time, xi_a + xi_b * round_trip_time)
}
