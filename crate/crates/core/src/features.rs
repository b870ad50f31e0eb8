//! Network input features: magnitude FFT and Welch PSD in dB, each min-max
//! normalized per signal to [0, 1].

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::sigsynth::IqSignal;

pub const SUPPORTED_NFFT: [usize; 3] = [4096, 8192, 16384];
pub const PSD_FLOOR_DB: f64 = -120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    FftMag,
    PsdDb,
}

impl FeatureKind {
    pub fn id(self) -> u8 {
        match self {
            FeatureKind::FftMag => 0,
            FeatureKind::PsdDb => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(FeatureKind::FftMag),
            1 => Some(FeatureKind::PsdDb),
            _ => None,
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::FftMag => "fft_mag",
            FeatureKind::PsdDb => "psd_db",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fft_mag" => Ok(FeatureKind::FftMag),
            "psd_db" => Ok(FeatureKind::PsdDb),
            _ => Err(format!("unknown feature kind `{s}`")),
        }
    }
}

/// PSD estimator. Welch is the default; the single periodogram is kept for
/// ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsdMethod {
    #[default]
    Welch,
    Periodogram,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("empty input")]
    EmptyInput,
    #[error("insufficient samples: need {needed}, have {have}")]
    InsufficientSamples { needed: usize, have: usize },
    #[error("nfft must be a power of two ≥ 2, got {0}")]
    BadNfft(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub kind: FeatureKind,
    pub values: Vec<f32>,
}

impl FeatureVector {
    pub fn nfft(&self) -> usize {
        self.values.len()
    }
}

fn check_nfft(nfft: usize) -> Result<(), FeatureError> {
    if nfft < 2 || !nfft.is_power_of_two() {
        return Err(FeatureError::BadNfft(nfft));
    }
    Ok(())
}

/// (v − min)/(max − min); all zeros when the vector is constant.
pub fn minmax_normalize(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| ((x - lo) / span).clamp(0.0, 1.0)).collect()
}

/// |DFT| of the first `nfft` samples (zero-padded), not normalized.
pub fn fft_magnitude_raw(sig: &IqSignal, nfft: usize) -> Result<Vec<f64>, FeatureError> {
    check_nfft(nfft)?;
    if sig.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    let n = sig.len().min(nfft);
    buf[..n].copy_from_slice(&sig.samples[..n]);
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    Ok(buf.iter().map(|v| v.norm()).collect())
}

pub fn fft_mag(sig: &IqSignal, nfft: usize) -> Result<FeatureVector, FeatureError> {
    let raw = fft_magnitude_raw(sig, nfft)?;
    Ok(FeatureVector {
        kind: FeatureKind::FftMag,
        values: minmax_normalize(&raw).into_iter().map(|v| v as f32).collect(),
    })
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// PSD in dB per bin (natural DFT order), floored at −120 dB.
pub fn psd_db_raw(sig: &IqSignal, nfft: usize, method: PsdMethod) -> Result<Vec<f64>, FeatureError> {
    check_nfft(nfft)?;
    if sig.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    if sig.len() < nfft {
        return Err(FeatureError::InsufficientSamples {
            needed: nfft,
            have: sig.len(),
        });
    }
    let window = match method {
        PsdMethod::Welch => hann(nfft),
        PsdMethod::Periodogram => vec![1.0; nfft],
    };
    let step = match method {
        PsdMethod::Welch => nfft / 2,
        PsdMethod::Periodogram => sig.len(),
    };
    let w_energy: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let mut acc = vec![0.0f64; nfft];
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    let mut segments = 0usize;
    let mut start = 0;
    while start + nfft <= sig.len() {
        for ((b, x), w) in buf.iter_mut().zip(&sig.samples[start..start + nfft]).zip(&window) {
            *b = x * w;
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        segments += 1;
        start += step;
    }
    let scale = 1.0 / (segments as f64 * w_energy);
    Ok(acc
        .iter()
        .map(|p| (10.0 * (p * scale).log10()).max(PSD_FLOOR_DB))
        .collect())
}

pub fn psd_db(sig: &IqSignal, nfft: usize) -> Result<FeatureVector, FeatureError> {
    psd_db_with(sig, nfft, PsdMethod::Welch)
}

pub fn psd_db_with(sig: &IqSignal, nfft: usize, method: PsdMethod) -> Result<FeatureVector, FeatureError> {
    let raw = psd_db_raw(sig, nfft, method)?;
    Ok(FeatureVector {
        kind: FeatureKind::PsdDb,
        values: minmax_normalize(&raw).into_iter().map(|v| v as f32).collect(),
    })
}

pub fn extract(sig: &IqSignal, kind: FeatureKind, nfft: usize) -> Result<FeatureVector, FeatureError> {
    match kind {
        FeatureKind::FftMag => fft_mag(sig, nfft),
        FeatureKind::PsdDb => psd_db(sig, nfft),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::apply_phase;
    use crate::sigsynth::{generate, gen_unknown, ModulationScheme, SignalSpec, UnknownKind, WaveformClass};
    use proptest::prelude::*;

    fn tone(bin: f64, n: usize, nfft: usize) -> IqSignal {
        IqSignal::new(
            (0..n)
                .map(|k| Complex64::from_polar(1.0, 2.0 * PI * bin * k as f64 / nfft as f64))
                .collect(),
            1e8,
        )
    }

    #[test]
    fn impulse_gives_flat_spectrum() {
        let mut x = vec![Complex64::new(0.0, 0.0); 100];
        x[0] = Complex64::new(1.0, 0.0);
        let sig = IqSignal::new(x, 1e8);
        let raw = fft_magnitude_raw(&sig, 4096).unwrap();
        assert!(raw.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(fft_mag(&sig, 4096).unwrap().values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tone_peaks_at_its_bin() {
        let raw = fft_magnitude_raw(&tone(17.0, 4096, 4096), 4096).unwrap();
        let peak = (0..raw.len()).max_by(|&a, &b| raw[a].total_cmp(&raw[b])).unwrap();
        assert_eq!(peak, 17);
        let psd = psd_db(&tone(300.0, 16_384, 4096), 4096).unwrap().values;
        let peak = (0..psd.len()).max_by(|&a, &b| psd[a].total_cmp(&psd[b])).unwrap();
        assert_eq!(peak, 300);
    }

    #[test]
    fn parseval_against_direct_sum() {
        let sig = generate(&SignalSpec::desk(WaveformClass::Sc, Some(ModulationScheme::Qam16), 3)).unwrap();
        let nfft = 4096;
        let raw = fft_magnitude_raw(&sig, nfft).unwrap();
        let freq: f64 = raw.iter().map(|v| v * v).sum();
        let time: f64 = sig.samples[..nfft].iter().map(|s| s.norm_sqr()).sum();
        assert!((freq / (nfft as f64 * time) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fft_zero_pads_short_input() {
        let sig = IqSignal::new(vec![Complex64::new(1.0, 0.0); 10], 1e8);
        assert_eq!(fft_mag(&sig, 4096).unwrap().nfft(), 4096);
        let empty = IqSignal::new(vec![], 1e8);
        assert_eq!(fft_mag(&empty, 4096), Err(FeatureError::EmptyInput));
        assert_eq!(fft_mag(&sig, 3000), Err(FeatureError::BadNfft(3000)));
    }

    #[test]
    fn white_noise_psd_is_flat() {
        let spec = SignalSpec::desk(WaveformClass::Unknown(UnknownKind::WhiteNoise), None, 12);
        let sig = gen_unknown(UnknownKind::WhiteNoise, &spec).unwrap();
        let raw = psd_db_raw(&sig, 4096, PsdMethod::Welch).unwrap();
        // Unit power spread over 4096 bins → 0 dB per bin with this scaling.
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        assert!(mean.abs() < 1.5, "mean {mean}");
        // Seven half-overlapped Hann segments leave ~1.6 dB of per-bin scatter
        // (log of a scaled chi-square); 64-bin block means must sit within ±3 dB.
        for block in raw.chunks(64) {
            let m = block.iter().sum::<f64>() / block.len() as f64;
            assert!(m.abs() <= 3.0, "block mean {m}");
        }
        let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / raw.len() as f64).sqrt();
        assert!(sd < 2.5, "per-bin sd {sd}");
    }

    #[test]
    fn psd_needs_nfft_samples() {
        let sig = tone(3.0, 1000, 4096);
        assert_eq!(
            psd_db(&sig, 4096),
            Err(FeatureError::InsufficientSamples { needed: 4096, have: 1000 })
        );
    }

    #[test]
    fn doubling_amplitude_shifts_psd_by_6db() {
        let sig = generate(&SignalSpec::desk(WaveformClass::Ofdm, Some(ModulationScheme::Qpsk), 2)).unwrap();
        let double = IqSignal::new(sig.samples.iter().map(|s| s * 2.0).collect(), sig.sample_rate_hz);
        let a = psd_db_raw(&sig, 4096, PsdMethod::Welch).unwrap();
        let b = psd_db_raw(&double, 4096, PsdMethod::Welch).unwrap();
        for (x, y) in a.iter().zip(&b) {
            if *x > PSD_FLOOR_DB + 10.0 {
                assert!((y - x - 20.0 * 2f64.log10()).abs() < 1e-9);
            }
        }
        let na = psd_db(&sig, 4096).unwrap().values;
        let nb = psd_db(&double, 4096).unwrap().values;
        for (x, y) in na.iter().zip(&nb) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(minmax_normalize(&[4.0; 5]), vec![0.0; 5]);
    }

    #[test]
    fn periodogram_mode_is_available() {
        let sig = tone(64.0, 8192, 4096);
        let v = psd_db_with(&sig, 4096, PsdMethod::Periodogram).unwrap();
        let peak = (0..v.values.len()).max_by(|&a, &b| v.values[a].total_cmp(&v.values[b])).unwrap();
        assert_eq!(peak, 64);
    }

    #[test]
    fn real_input_psd_is_mirror_symmetric() {
        let spec = SignalSpec::desk(WaveformClass::Unknown(UnknownKind::Am), None, 4);
        let am = gen_unknown(UnknownKind::Am, &spec).unwrap();
        let p = psd_db_raw(&am, 4096, PsdMethod::Welch).unwrap();
        let n = p.len();
        for k in 1..n / 2 {
            assert!((p[k] - p[n - k]).abs() < 1e-6);
        }
    }

    #[test]
    fn lfm_and_ofdm_are_separable() {
        let feats = |class: WaveformClass| -> Vec<Vec<f64>> {
            (0..20)
                .map(|seed| {
                    let sig = generate(&SignalSpec::desk(class, Some(ModulationScheme::Qpsk), seed)).unwrap();
                    psd_db(&sig, 4096).unwrap().values.iter().map(|v| *v as f64).collect()
                })
                .collect()
        };
        let centroid = |v: &[Vec<f64>]| -> Vec<f64> {
            let mut c = vec![0.0; v[0].len()];
            for row in v {
                for (a, b) in c.iter_mut().zip(row) {
                    *a += b / v.len() as f64;
                }
            }
            c
        };
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let lfm = feats(WaveformClass::Lfm);
        let ofdm = feats(WaveformClass::Ofdm);
        let (cl, co) = (centroid(&lfm), centroid(&ofdm));
        // Every capture lies nearer its own class centroid, and the centroids
        // are further apart than the pooled RMS scatter.
        for v in &lfm {
            assert!(dist(v, &cl) < dist(v, &co));
        }
        for v in &ofdm {
            assert!(dist(v, &co) < dist(v, &cl));
        }
        let rms = |v: &[Vec<f64>], c: &[f64]| (v.iter().map(|x| dist(x, c).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        let spread = rms(&lfm, &cl).max(rms(&ofdm, &co));
        let between = dist(&cl, &co);
        assert!(between > spread, "between {between} spread {spread}");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_bounded(v in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            let once = minmax_normalize(&v);
            let twice = minmax_normalize(&once);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(a));
            }
        }

        #[test]
        fn fft_mag_ignores_global_phase(phi in -PI..PI, seed in 0u64..50) {
            let sig = generate(&SignalSpec::desk(WaveformClass::ScFdma, Some(ModulationScheme::Psk16), seed)).unwrap();
            let a = fft_mag(&sig, 4096).unwrap().values;
            let b = fft_mag(&apply_phase(&sig, phi), 4096).unwrap().values;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn features_ignore_positive_scaling(scale in 0.01f64..100.0, seed in 0u64..50) {
            let sig = generate(&SignalSpec::desk(WaveformClass::Sc, Some(ModulationScheme::Qam64), seed)).unwrap();
            let scaled = IqSignal::new(sig.samples.iter().map(|s| s * scale).collect(), sig.sample_rate_hz);
            for kind in [FeatureKind::FftMag, FeatureKind::PsdDb] {
                let a = extract(&sig, kind, 4096).unwrap().values;
                let b = extract(&scaled, kind, 4096).unwrap().values;
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-5);
                }
            }
        }
    }
}
