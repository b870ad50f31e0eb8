//! Channel and receiver impairments.
//!
//! [`impair`] applies fading → CFO → phase → IQ imbalance → AWGN. The SNR
//! reference is the mean power at the AWGN input.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::sigsynth::{mean_power, IqSignal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FadingKind {
    None,
    Rayleigh,
    Rician,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ChannelError {
    #[error("fading kind NONE has no channel taps")]
    NoFading,
    #[error("impairment out of range: {0}")]
    OutOfRange(String),
}

/// One draw of every impairment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentConfig {
    /// `f64::INFINITY` disables noise.
    pub snr_db: f64,
    pub phase_offset_rad: f64,
    pub freq_offset_hz: f64,
    pub iq_imbalance_db: f64,
    pub fading: FadingKind,
    pub seed: u64,
}

impl Default for ImpairmentConfig {
    fn default() -> Self {
        ImpairmentConfig {
            snr_db: f64::INFINITY,
            phase_offset_rad: 0.0,
            freq_offset_hz: 0.0,
            iq_imbalance_db: 0.0,
            fading: FadingKind::None,
            seed: 0,
        }
    }
}

impl ImpairmentConfig {
    pub fn awgn_only(snr_db: f64, seed: u64) -> Self {
        ImpairmentConfig {
            snr_db,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(ChannelError::OutOfRange(format!("snr_db {}", self.snr_db)));
        }
        if !(-PI..=PI).contains(&self.phase_offset_rad) {
            return Err(ChannelError::OutOfRange(format!(
                "phase offset {} rad",
                self.phase_offset_rad
            )));
        }
        if !(-5000.0..=5000.0).contains(&self.freq_offset_hz) {
            return Err(ChannelError::OutOfRange(format!(
                "frequency offset {} Hz",
                self.freq_offset_hz
            )));
        }
        if !(0.0..=3.0).contains(&self.iq_imbalance_db) {
            return Err(ChannelError::OutOfRange(format!(
                "IQ imbalance {} dB",
                self.iq_imbalance_db
            )));
        }
        Ok(())
    }
}

// Sub-streams of the impairment seed.
const STREAM_NOISE: u64 = 11;
const STREAM_FADING: u64 = 12;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Circular complex Gaussian noise with variance P_sig / 10^(snr/10).
pub fn add_awgn(sig: &IqSignal, snr_db: f64, seed: u64) -> IqSignal {
    if snr_db == f64::INFINITY {
        return sig.clone();
    }
    let variance = mean_power(&sig.samples) / 10f64.powf(snr_db / 10.0);
    let sd = (variance / 2.0).sqrt();
    let mut rng = rng_for(seed, STREAM_NOISE);
    let samples = sig
        .samples
        .iter()
        .map(|s| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            s + Complex64::new(re * sd, im * sd)
        })
        .collect();
    IqSignal::new(samples, sig.sample_rate_hz)
}

/// samples[k] · exp(j2π·Δf·k/fs)
pub fn apply_cfo(sig: &IqSignal, freq_offset_hz: f64) -> IqSignal {
    if freq_offset_hz == 0.0 {
        return sig.clone();
    }
    let w = 2.0 * PI * freq_offset_hz / sig.sample_rate_hz;
    let samples = sig
        .samples
        .iter()
        .enumerate()
        .map(|(k, s)| s * Complex64::from_polar(1.0, w * k as f64))
        .collect();
    IqSignal::new(samples, sig.sample_rate_hz)
}

pub fn apply_phase(sig: &IqSignal, phase_offset_rad: f64) -> IqSignal {
    if phase_offset_rad == 0.0 {
        return sig.clone();
    }
    let rot = Complex64::from_polar(1.0, phase_offset_rad);
    let samples = sig.samples.iter().map(|s| s * rot).collect();
    IqSignal::new(samples, sig.sample_rate_hz)
}

/// Amplitude-only imbalance on the Q rail: Re(s) + j·g·Im(s), g = 10^(dB/20).
pub fn apply_iq_imbalance(sig: &IqSignal, imbalance_db: f64) -> IqSignal {
    let g = 10f64.powf(imbalance_db / 20.0);
    let samples = sig
        .samples
        .iter()
        .map(|s| Complex64::new(s.re, g * s.im))
        .collect();
    IqSignal::new(samples, sig.sample_rate_hz)
}

pub const FADING_DELAYS: [usize; 3] = [0, 5, 12];
pub const FADING_POWERS_DB: [f64; 3] = [0.0, -3.0, -6.0];
pub const RICIAN_K_DB: f64 = 4.0;

/// Static 3-tap channel realization, normalized to unit total power.
pub fn fading_taps(kind: FadingKind, seed: u64) -> Result<[Complex64; 3], ChannelError> {
    if kind == FadingKind::None {
        return Err(ChannelError::NoFading);
    }
    let mut rng = rng_for(seed, STREAM_FADING);
    let mut taps = [Complex64::new(0.0, 0.0); 3];
    for (i, tap) in taps.iter_mut().enumerate() {
        let p = 10f64.powf(FADING_POWERS_DB[i] / 10.0);
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        let scatter = Complex64::new(re, im) * (p / 2.0).sqrt();
        *tap = if i == 0 && kind == FadingKind::Rician {
            let k = 10f64.powf(RICIAN_K_DB / 10.0);
            let los = Complex64::from_polar((p * k / (k + 1.0)).sqrt(), rng.random_range(-PI..PI));
            los + scatter / (k + 1.0).sqrt()
        } else {
            scatter
        };
    }
    let total: f64 = taps.iter().map(|t| t.norm_sqr()).sum();
    let g = 1.0 / total.sqrt();
    taps.iter_mut().for_each(|t| *t *= g);
    Ok(taps)
}

/// Causal block-fading FIR; output keeps the input length.
pub fn apply_fading(sig: &IqSignal, kind: FadingKind, seed: u64) -> Result<IqSignal, ChannelError> {
    let taps = fading_taps(kind, seed)?;
    let x = &sig.samples;
    let samples = (0..x.len())
        .map(|k| {
            FADING_DELAYS
                .iter()
                .zip(&taps)
                .filter(|(d, _)| **d <= k)
                .map(|(d, h)| x[k - d] * h)
                .sum()
        })
        .collect();
    Ok(IqSignal::new(samples, sig.sample_rate_hz))
}

/// Full impairment chain in fixed order.
pub fn impair(sig: &IqSignal, cfg: &ImpairmentConfig) -> Result<IqSignal, ChannelError> {
    cfg.validate()?;
    let mut out = match cfg.fading {
        FadingKind::None => sig.clone(),
        kind => apply_fading(sig, kind, cfg.seed)?,
    };
    out = apply_cfo(&out, cfg.freq_offset_hz);
    out = apply_phase(&out, cfg.phase_offset_rad);
    if cfg.iq_imbalance_db != 0.0 {
        out = apply_iq_imbalance(&out, cfg.iq_imbalance_db);
    }
    Ok(add_awgn(&out, cfg.snr_db, cfg.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigsynth::{generate, ModulationScheme, SignalSpec, WaveformClass};
    use proptest::prelude::*;

    fn test_signal(seed: u64) -> IqSignal {
        generate(&SignalSpec::desk(WaveformClass::Ofdm, Some(ModulationScheme::Qam16), seed)).unwrap()
    }

    fn tone(bin: usize, n: usize, fs: f64) -> IqSignal {
        let samples = (0..n)
            .map(|k| Complex64::from_polar(1.0, 2.0 * PI * bin as f64 * k as f64 / n as f64))
            .collect();
        IqSignal::new(samples, fs)
    }

    fn max_diff(a: &IqSignal, b: &IqSignal) -> f64 {
        a.samples
            .iter()
            .zip(&b.samples)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn infinite_snr_is_identity() {
        let x = test_signal(1);
        assert_eq!(add_awgn(&x, f64::INFINITY, 3), x);
    }

    #[test]
    fn zero_db_noise_power() {
        let x = test_signal(2);
        let y = add_awgn(&x, 0.0, 4);
        let noise: Vec<Complex64> = y.samples.iter().zip(&x.samples).map(|(a, b)| a - b).collect();
        assert!((mean_power(&noise) - 1.0).abs() < 0.05);
    }

    #[test]
    fn cfo_round_trip_and_peak_shift() {
        let x = test_signal(3);
        let back = apply_cfo(&apply_cfo(&x, 3125.0), -3125.0);
        assert!(max_diff(&x, &back) < 1e-9);
        assert_eq!(apply_cfo(&x, 0.0), x);

        // Tone at bin 40 of a 16384-point grid; shift by exactly 3 bins.
        let n = 16_384;
        let fs = 1e8;
        let bin_hz = fs / n as f64;
        let t = tone(40, n, fs);
        let shifted = apply_cfo(&t, 3.0 * bin_hz);
        let mut buf = shifted.samples.clone();
        rustfft::FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let peak = (0..n).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
        assert_eq!(peak, 43);
    }

    #[test]
    fn phase_rotation() {
        let x = test_signal(4);
        assert_eq!(apply_phase(&x, 0.0), x);
        let neg = apply_phase(&x, PI);
        for (a, b) in neg.samples.iter().zip(&x.samples) {
            assert!((a + b).norm() < 1e-12);
        }
    }

    #[test]
    fn iq_imbalance_cases() {
        let x = test_signal(5);
        assert_eq!(apply_iq_imbalance(&x, 0.0), x);
        let q = IqSignal::new((0..1000).map(|k| Complex64::new(0.0, (k as f64 * 0.1).sin())).collect(), 1e8);
        let y = apply_iq_imbalance(&q, 3.0);
        let gain_db = 10.0 * (mean_power(&y.samples) / mean_power(&q.samples)).log10();
        assert!((gain_db - 3.0).abs() < 0.01);
        let real = IqSignal::new((0..100).map(|k| Complex64::new(k as f64, 0.0)).collect(), 1e8);
        assert_eq!(apply_iq_imbalance(&real, 2.5), real);
        let back = apply_iq_imbalance(&apply_iq_imbalance(&x, 2.0), -2.0);
        assert!(max_diff(&x, &back) < 1e-9);
    }

    #[test]
    fn fading_preserves_power_on_average() {
        for kind in [FadingKind::Rayleigh, FadingKind::Rician] {
            let mut ratio_db = 0.0;
            for trial in 0..100 {
                let x = test_signal(trial);
                let y = apply_fading(&x, kind, 1000 + trial).unwrap();
                ratio_db += 10.0 * (y.mean_power() / x.mean_power()).log10();
            }
            ratio_db /= 100.0;
            assert!(ratio_db.abs() < 0.1, "{kind:?}: {ratio_db} dB");
        }
    }

    #[test]
    fn fading_rejects_none_and_is_deterministic() {
        let x = test_signal(6);
        assert_eq!(apply_fading(&x, FadingKind::None, 1), Err(ChannelError::NoFading));
        assert_eq!(fading_taps(FadingKind::Rician, 9).unwrap(), fading_taps(FadingKind::Rician, 9).unwrap());
        assert_eq!(apply_fading(&x, FadingKind::Rayleigh, 9).unwrap(), apply_fading(&x, FadingKind::Rayleigh, 9).unwrap());
    }

    #[test]
    fn neutral_impairment_is_identity() {
        let x = test_signal(7);
        assert_eq!(impair(&x, &ImpairmentConfig::default()).unwrap(), x);
        let only_snr = ImpairmentConfig::awgn_only(-3.0, 77);
        assert_eq!(impair(&x, &only_snr).unwrap(), add_awgn(&x, -3.0, 77));
    }

    #[test]
    fn full_chain_is_deterministic() {
        let x = test_signal(8);
        let cfg = ImpairmentConfig {
            snr_db: 4.0,
            phase_offset_rad: 1.1,
            freq_offset_hz: -2200.0,
            iq_imbalance_db: 1.5,
            fading: FadingKind::Rician,
            seed: 31,
        };
        assert_eq!(impair(&x, &cfg).unwrap(), impair(&x, &cfg).unwrap());
        let bad = ImpairmentConfig { freq_offset_hz: 6000.0, ..cfg };
        assert!(impair(&x, &bad).is_err());
    }

    proptest! {
        #[test]
        fn invertible_impairments_round_trip(
            cfo in -5000.0f64..5000.0,
            phase in -PI..PI,
            iq in 0.0f64..3.0,
            seed in 0u64..1000,
        ) {
            let x = test_signal(seed);
            let y = apply_iq_imbalance(&apply_phase(&apply_cfo(&x, cfo), phase), iq);
            let back = apply_cfo(&apply_phase(&apply_iq_imbalance(&y, -iq), -phase), -cfo);
            prop_assert!(max_diff(&x, &back) < 1e-9);
        }
    }
}
