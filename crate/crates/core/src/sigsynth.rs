//! Clean baseband waveform synthesis.
//!
//! Four known classes (single carrier, SC-FDMA, OFDM and an LFM chirp train)
//! plus four "unknown" emitters used only for testing the watchdog. Every
//! generator is a pure function of its [`SignalSpec`], seed included.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

/// Emitters that never appear in training corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UnknownKind {
    Am,
    Fm,
    Ble,
    WhiteNoise,
}

/// Waveform class of a signal. Only the first four are "known".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum WaveformClass {
    Sc,
    ScFdma,
    Ofdm,
    Lfm,
    Unknown(UnknownKind),
}

impl WaveformClass {
    /// Known classes in label order.
    pub const KNOWN: [WaveformClass; 4] = [
        WaveformClass::Sc,
        WaveformClass::ScFdma,
        WaveformClass::Ofdm,
        WaveformClass::Lfm,
    ];

    pub const UNKNOWN: [WaveformClass; 4] = [
        WaveformClass::Unknown(UnknownKind::Am),
        WaveformClass::Unknown(UnknownKind::Fm),
        WaveformClass::Unknown(UnknownKind::Ble),
        WaveformClass::Unknown(UnknownKind::WhiteNoise),
    ];

    /// All eight classes in id order.
    pub const ALL: [WaveformClass; 8] = [
        WaveformClass::Sc,
        WaveformClass::ScFdma,
        WaveformClass::Ofdm,
        WaveformClass::Lfm,
        WaveformClass::Unknown(UnknownKind::Am),
        WaveformClass::Unknown(UnknownKind::Fm),
        WaveformClass::Unknown(UnknownKind::Ble),
        WaveformClass::Unknown(UnknownKind::WhiteNoise),
    ];

    pub fn is_known(self) -> bool {
        !matches!(self, WaveformClass::Unknown(_))
    }

    pub fn is_communication(self) -> bool {
        matches!(
            self,
            WaveformClass::Sc | WaveformClass::ScFdma | WaveformClass::Ofdm
        )
    }

    /// Stable numeric id (0..8) used in corpus files.
    pub fn id(self) -> u8 {
        match self {
            WaveformClass::Sc => 0,
            WaveformClass::ScFdma => 1,
            WaveformClass::Ofdm => 2,
            WaveformClass::Lfm => 3,
            WaveformClass::Unknown(UnknownKind::Am) => 4,
            WaveformClass::Unknown(UnknownKind::Fm) => 5,
            WaveformClass::Unknown(UnknownKind::Ble) => 6,
            WaveformClass::Unknown(UnknownKind::WhiteNoise) => 7,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            WaveformClass::Sc => "SC",
            WaveformClass::ScFdma => "SCFDMA",
            WaveformClass::Ofdm => "OFDM",
            WaveformClass::Lfm => "LFM",
            WaveformClass::Unknown(UnknownKind::Am) => "AM",
            WaveformClass::Unknown(UnknownKind::Fm) => "FM",
            WaveformClass::Unknown(UnknownKind::Ble) => "BLE",
            WaveformClass::Unknown(UnknownKind::WhiteNoise) => "WHITE_NOISE",
        }
    }
}

impl fmt::Display for WaveformClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WaveformClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase().replace('-', "");
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name().replace('_', "") == upper.replace('_', ""))
            .ok_or_else(|| format!("unknown waveform class `{s}`"))
    }
}

impl From<WaveformClass> for String {
    fn from(c: WaveformClass) -> String {
        c.name().to_string()
    }
}

impl TryFrom<String> for WaveformClass {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Symbol constellations used to diversify the communication classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModulationScheme {
    Bpsk,
    Qpsk,
    Psk16,
    Psk64,
    Qam4,
    Qam16,
    Qam64,
    Qam256,
}

impl ModulationScheme {
    pub const ALL: [ModulationScheme; 8] = [
        ModulationScheme::Bpsk,
        ModulationScheme::Qpsk,
        ModulationScheme::Psk16,
        ModulationScheme::Psk64,
        ModulationScheme::Qam4,
        ModulationScheme::Qam16,
        ModulationScheme::Qam64,
        ModulationScheme::Qam256,
    ];

    pub fn id(self) -> u8 {
        Self::ALL.iter().position(|m| *m == self).unwrap() as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModulationScheme::Bpsk => "BPSK",
            ModulationScheme::Qpsk => "QPSK",
            ModulationScheme::Psk16 => "PSK16",
            ModulationScheme::Psk64 => "PSK64",
            ModulationScheme::Qam4 => "QAM4",
            ModulationScheme::Qam16 => "QAM16",
            ModulationScheme::Qam64 => "QAM64",
            ModulationScheme::Qam256 => "QAM256",
        }
    }

    pub fn order(self) -> usize {
        match self {
            ModulationScheme::Bpsk => 2,
            ModulationScheme::Qpsk | ModulationScheme::Qam4 => 4,
            ModulationScheme::Psk16 | ModulationScheme::Qam16 => 16,
            ModulationScheme::Psk64 | ModulationScheme::Qam64 => 64,
            ModulationScheme::Qam256 => 256,
        }
    }

    /// Constellation points scaled to unit average energy.
    ///
    /// PSK points start at phase 0; QAM is the square grid.
    pub fn constellation(self) -> Vec<Complex64> {
        let m = self.order();
        match self {
            ModulationScheme::Bpsk
            | ModulationScheme::Qpsk
            | ModulationScheme::Psk16
            | ModulationScheme::Psk64 => (0..m)
                .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / m as f64))
                .collect(),
            _ => {
                let side = (m as f64).sqrt().round() as usize;
                let scale = (2.0 * (m as f64 - 1.0) / 3.0).sqrt();
                let level = |i: usize| (2.0 * i as f64 - (side as f64 - 1.0)) / scale;
                (0..m)
                    .map(|k| Complex64::new(level(k % side), level(k / side)))
                    .collect()
            }
        }
    }
}

impl fmt::Display for ModulationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModulationScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.to_ascii_uppercase();
        Self::ALL
            .into_iter()
            .find(|m| m.name() == upper)
            .ok_or_else(|| format!("unknown modulation `{s}`"))
    }
}

/// Parameters of one synthesized capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub waveform_class: WaveformClass,
    /// Only meaningful for the communication classes.
    pub modulation: Option<ModulationScheme>,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub bandwidth_hz: f64,
    pub seed: u64,
}

/// Scale of generated captures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 1 ms captures (100,000 samples at 100 MHz), 10 ms BLE.
    Paper,
    /// 16,384-sample captures; BLE long enough for two hops.
    Desk,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(format!("unknown profile `{s}` (expected paper|desk)")),
        }
    }
}

pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 1e8;
pub const DEFAULT_BANDWIDTH_HZ: f64 = 5e7;
pub const BLE_SAMPLE_RATE_HZ: f64 = 1.25e8;
pub const BLE_CHANNEL_BANDWIDTH_HZ: f64 = 2e6;
pub const DESK_SAMPLES: usize = 16_384;
pub const PAPER_SAMPLES: usize = 100_000;

impl SignalSpec {
    /// Standard spec for `class` at the given profile scale.
    pub fn for_profile(
        profile: Profile,
        waveform_class: WaveformClass,
        modulation: Option<ModulationScheme>,
        seed: u64,
    ) -> Self {
        let ble = waveform_class == WaveformClass::Unknown(UnknownKind::Ble);
        let (sample_rate_hz, bandwidth_hz) = if ble {
            (BLE_SAMPLE_RATE_HZ, BLE_CHANNEL_BANDWIDTH_HZ)
        } else {
            (DEFAULT_SAMPLE_RATE_HZ, DEFAULT_BANDWIDTH_HZ)
        };
        let duration_s = match (profile, ble) {
            (Profile::Desk, false) => DESK_SAMPLES as f64 / DEFAULT_SAMPLE_RATE_HZ,
            (Profile::Paper, false) => PAPER_SAMPLES as f64 / DEFAULT_SAMPLE_RATE_HZ,
            // 163,840 samples: hops at 78,125 and 156,250.
            (Profile::Desk, true) => 10.0 * DESK_SAMPLES as f64 / BLE_SAMPLE_RATE_HZ,
            (Profile::Paper, true) => 10e-3,
        };
        let modulation = if waveform_class.is_communication() {
            Some(modulation.unwrap_or(ModulationScheme::Qpsk))
        } else {
            None
        };
        SignalSpec {
            waveform_class,
            modulation,
            sample_rate_hz,
            duration_s,
            bandwidth_hz,
            seed,
        }
    }

    pub fn desk(waveform_class: WaveformClass, modulation: Option<ModulationScheme>, seed: u64) -> Self {
        Self::for_profile(Profile::Desk, waveform_class, modulation, seed)
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let exact = self.duration_s * self.sample_rate_hz;
        if !(exact.is_finite() && exact >= 0.5) || (exact - exact.round()).abs() > 1e-6 * exact.max(1.0) {
            return Err(SynthError::InvalidSpec(format!(
                "duration × sample rate = {exact} is not a positive integer"
            )));
        }
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz <= self.sample_rate_hz / 2.0) {
            return Err(SynthError::InvalidSpec(format!(
                "bandwidth {} Hz exceeds half the sample rate {} Hz",
                self.bandwidth_hz, self.sample_rate_hz
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid signal spec: {0}")]
    InvalidSpec(String),
    #[error("generator for {expected} called with a {got} spec")]
    WrongClass {
        expected: &'static str,
        got: WaveformClass,
    },
}

/// Complex baseband capture.
#[derive(Debug, Clone, PartialEq)]
pub struct IqSignal {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
}

impl IqSignal {
    pub fn new(samples: Vec<Complex64>, sample_rate_hz: f64) -> Self {
        IqSignal {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_power(&self) -> f64 {
        mean_power(&self.samples)
    }
}

pub(crate) fn mean_power(samples: &[Complex64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64
}

fn normalize_unit_power(samples: &mut [Complex64]) {
    let p = mean_power(samples);
    if p > 0.0 && p.is_finite() {
        let g = 1.0 / p.sqrt();
        samples.iter_mut().for_each(|s| *s *= g);
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Independent RNG streams per purpose so one draw count never shifts another.
const STREAM_SYMBOLS: u64 = 1;
const STREAM_OFFSETS: u64 = 2;
const STREAM_MESSAGE: u64 = 3;
const STREAM_HOPS: u64 = 4;

/// Uniform draws from the unit-energy constellation of `modulation`.
pub fn gen_symbols(modulation: ModulationScheme, count: usize, seed: u64) -> Vec<Complex64> {
    let points = modulation.constellation();
    let mut rng = rng_for(seed, STREAM_SYMBOLS);
    (0..count)
        .map(|_| points[rng.random_range(0..points.len())])
        .collect()
}

fn expect_class(spec: &SignalSpec, expected: WaveformClass) -> Result<(), SynthError> {
    if spec.waveform_class != expected {
        return Err(SynthError::WrongClass {
            expected: expected.name(),
            got: spec.waveform_class,
        });
    }
    spec.validate()
}

// ---------------------------------------------------------------- single carrier

pub const SC_ROLLOFF: f64 = 0.5;
pub const SC_SPAN_SYMBOLS: usize = 12;

/// Root-raised-cosine taps, `span` symbols long, unit energy.
pub fn rrc_taps(rolloff: f64, samples_per_symbol: usize, span: usize) -> Vec<f64> {
    let sps = samples_per_symbol as f64;
    let half = (span * samples_per_symbol / 2) as isize;
    let b = rolloff;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|n| {
            let t = n as f64 / sps;
            if n == 0 {
                1.0 - b + 4.0 * b / PI
            } else if b > 0.0 && ((4.0 * b * t).abs() - 1.0).abs() < 1e-12 {
                b / 2f64.sqrt()
                    * ((1.0 + 2.0 / PI) * (PI / (4.0 * b)).sin()
                        + (1.0 - 2.0 / PI) * (PI / (4.0 * b)).cos())
            } else {
                let num = (PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos();
                let den = PI * t * (1.0 - (4.0 * b * t).powi(2));
                num / den
            }
        })
        .collect();
    let energy = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|t| *t /= energy);
    taps
}

/// RRC-shaped symbol stream; occupied bandwidth (1+β)·Rs = spec bandwidth.
pub fn gen_sc(spec: &SignalSpec) -> Result<IqSignal, SynthError> {
    expect_class(spec, WaveformClass::Sc)?;
    let n = spec.num_samples();
    let sps = (((1.0 + SC_ROLLOFF) * spec.sample_rate_hz / spec.bandwidth_hz).round() as usize).max(2);
    let taps = rrc_taps(SC_ROLLOFF, sps, SC_SPAN_SYMBOLS);
    let delay = taps.len() / 2;
    let n_sym = (n + taps.len()).div_ceil(sps) + 1;
    let symbols = gen_symbols(spec.modulation.unwrap_or(ModulationScheme::Qpsk), n_sym, spec.seed);

    // Random symbol-timing phase so captures do not all start on a symbol.
    let timing = rng_for(spec.seed, STREAM_OFFSETS).random_range(0..sps);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        // Filter output at upsampled index m = k + delay + timing.
        let m = k + delay + timing;
        let mut acc = Complex64::new(0.0, 0.0);
        // Symbol j sits at upsampled index j*sps; contributes taps[m - j*sps].
        let j_hi = m / sps;
        let j_lo = m.saturating_sub(taps.len() - 1).div_ceil(sps);
        for j in j_lo..=j_hi {
            acc += symbols[j] * taps[m - j * sps];
        }
        out.push(acc);
    }
    normalize_unit_power(&mut out);
    Ok(IqSignal::new(out, spec.sample_rate_hz))
}

// ---------------------------------------------------------------- multicarrier

/// Multicarrier numerology shared by OFDM and SC-FDMA.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OfdmGrid {
    pub fft_size: usize,
    pub active: usize,
    pub cyclic_prefix: usize,
}

pub const OFDM_GRID: OfdmGrid = OfdmGrid {
    fft_size: 256,
    active: 128,
    cyclic_prefix: 32,
};

impl OfdmGrid {
    pub fn symbol_len(&self) -> usize {
        self.fft_size + self.cyclic_prefix
    }

    /// FFT bin of the i-th active subcarrier (centered, i = 0 is the lowest).
    pub fn bin(&self, i: usize) -> usize {
        let offset = i as isize - (self.active / 2) as isize;
        offset.rem_euclid(self.fft_size as isize) as usize
    }
}

fn ifft_plan(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_inverse(n)
}

/// Shared OFDM / SC-FDMA modulator. `precode` applies the DFT spreading.
pub(crate) fn multicarrier(spec: &SignalSpec, grid: OfdmGrid, precode: bool) -> IqSignal {
    let n = spec.num_samples();
    let n_symbols = n.div_ceil(grid.symbol_len());
    let data = gen_symbols(
        spec.modulation.unwrap_or(ModulationScheme::Qpsk),
        n_symbols * grid.active,
        spec.seed,
    );
    let ifft = ifft_plan(grid.fft_size);
    let dft = FftPlanner::new().plan_fft_forward(grid.active);
    let dft_scale = 1.0 / (grid.active as f64).sqrt();

    let mut out = Vec::with_capacity(n_symbols * grid.symbol_len());
    let mut freq = vec![Complex64::new(0.0, 0.0); grid.fft_size];
    let mut block = vec![Complex64::new(0.0, 0.0); grid.active];
    for chunk in data.chunks_exact(grid.active) {
        block.copy_from_slice(chunk);
        if precode {
            dft.process(&mut block);
            block.iter_mut().for_each(|v| *v *= dft_scale);
        }
        freq.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for (i, v) in block.iter().enumerate() {
            freq[grid.bin(i)] = *v;
        }
        ifft.process(&mut freq);
        out.extend_from_slice(&freq[grid.fft_size - grid.cyclic_prefix..]);
        out.extend_from_slice(&freq);
    }
    out.truncate(n);
    normalize_unit_power(&mut out);
    IqSignal::new(out, spec.sample_rate_hz)
}

pub fn gen_ofdm(spec: &SignalSpec) -> Result<IqSignal, SynthError> {
    expect_class(spec, WaveformClass::Ofdm)?;
    Ok(multicarrier(spec, OFDM_GRID, false))
}

/// OFDM grid with 128-point DFT precoding, localized mapping.
pub fn gen_scfdma(spec: &SignalSpec) -> Result<IqSignal, SynthError> {
    expect_class(spec, WaveformClass::ScFdma)?;
    Ok(multicarrier(spec, OFDM_GRID, true))
}

// ---------------------------------------------------------------- LFM

pub const LFM_CHIRP_SAMPLES: usize = 2048;

/// Continuous train of identical up-chirps sweeping −B/2 → +B/2.
pub fn gen_lfm(spec: &SignalSpec) -> Result<IqSignal, SynthError> {
    expect_class(spec, WaveformClass::Lfm)?;
    let n = spec.num_samples();
    let fs = spec.sample_rate_hz;
    let period = LFM_CHIRP_SAMPLES as f64 / fs;
    let slope = spec.bandwidth_hz / period;
    let chirp: Vec<Complex64> = (0..LFM_CHIRP_SAMPLES)
        .map(|k| {
            let t = k as f64 / fs;
            let phase = 2.0 * PI * (-spec.bandwidth_hz / 2.0 * t + 0.5 * slope * t * t);
            Complex64::from_polar(1.0, phase)
        })
        .collect();
    let mut rng = rng_for(spec.seed, STREAM_OFFSETS);
    let start = rng.random_range(0..LFM_CHIRP_SAMPLES);
    let rot = Complex64::from_polar(1.0, rng.random_range(-PI..PI));
    let out = (0..n)
        .map(|k| chirp[(k + start) % LFM_CHIRP_SAMPLES] * rot)
        .collect();
    Ok(IqSignal::new(out, fs))
}

// ---------------------------------------------------------------- unknowns

pub const AM_MODULATION_INDEX: f64 = 0.8;
pub const AM_MESSAGE_BANDWIDTH_HZ: f64 = 20e6;
pub const FM_DEVIATION_HZ: f64 = 20e6;
pub const FM_MESSAGE_BANDWIDTH_HZ: f64 = 5e6;
pub const BLE_SYMBOL_RATE: f64 = 1e6;
pub const BLE_BT: f64 = 0.5;
pub const BLE_MODULATION_INDEX: f64 = 0.5;
pub const BLE_HOP_INTERVAL_S: f64 = 625e-6;
pub const BLE_CHANNELS: usize = 40;

/// Real Gaussian noise low-passed to |f| ≤ `cutoff_hz`, scaled to unit peak.
fn bandlimited_message(n: usize, fs: f64, cutoff_hz: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 } * fs / n as f64;
        if f.abs() > cutoff_hz {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut msg: Vec<f64> = buf.iter().map(|v| v.re).collect();
    let peak = msg.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        msg.iter_mut().for_each(|v| *v /= peak);
    }
    msg
}

/// Channel index used for each 625 µs dwell of a BLE capture.
pub fn ble_hop_schedule(spec: &SignalSpec) -> Vec<(usize, usize)> {
    let n = spec.num_samples();
    let dwell = ((BLE_HOP_INTERVAL_S * spec.sample_rate_hz).round() as usize).max(1);
    let mut rng = rng_for(spec.seed, STREAM_HOPS);
    let mut schedule = Vec::new();
    let mut prev = usize::MAX;
    let mut start = 0;
    while start < n {
        // Never dwell twice on the same channel so each boundary is a real hop.
        let mut ch = rng.random_range(0..BLE_CHANNELS);
        while ch == prev {
            ch = rng.random_range(0..BLE_CHANNELS);
        }
        schedule.push((start, ch));
        prev = ch;
        start += dwell;
    }
    schedule
}

pub fn ble_channel_center_hz(channel: usize) -> f64 {
    (channel as f64 - (BLE_CHANNELS as f64 - 1.0) / 2.0) * BLE_CHANNEL_BANDWIDTH_HZ
}

fn gaussian_pulse(bt: f64, sps: usize, span_symbols: usize) -> Vec<f64> {
    let sigma = (2f64.ln()).sqrt() / (2.0 * PI * bt) * sps as f64;
    let half = (span_symbols * sps / 2) as isize;
    let mut g: Vec<f64> = (-half..=half)
        .map(|n| (-(n as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= sum);
    g
}

fn gen_ble(spec: &SignalSpec) -> IqSignal {
    let n = spec.num_samples();
    let fs = spec.sample_rate_hz;
    let sps = ((fs / BLE_SYMBOL_RATE).round() as usize).max(1);
    let mut rng = rng_for(spec.seed, STREAM_SYMBOLS);
    let n_bits = n.div_ceil(sps) + 4;
    let nrz: Vec<f64> = (0..n_bits)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let g = gaussian_pulse(BLE_BT, sps, 3);
    let half = g.len() / 2;
    let dev = BLE_MODULATION_INDEX / 2.0 * BLE_SYMBOL_RATE;
    let schedule = ble_hop_schedule(spec);

    let mut out = Vec::with_capacity(n);
    let mut phase = rng_for(spec.seed, STREAM_OFFSETS).random_range(-PI..PI);
    let mut hop = 0;
    for k in 0..n {
        while hop + 1 < schedule.len() && schedule[hop + 1].0 <= k {
            hop += 1;
        }
        // Gaussian-filtered NRZ at sample k (offset by the filter half-length).
        let m = k + half;
        let mut freq = 0.0;
        for (i, gi) in g.iter().enumerate() {
            if let Some(idx) = m.checked_sub(i) {
                freq += gi * nrz[idx / sps];
            }
        }
        let f_inst = dev * freq + ble_channel_center_hz(schedule[hop].1);
        out.push(Complex64::from_polar(1.0, phase));
        phase = (phase + 2.0 * PI * f_inst / fs).rem_euclid(2.0 * PI);
    }
    IqSignal::new(out, fs)
}

/// Unknown-class emitters (AM, FM, BLE-like GFSK hopper, white noise).
pub fn gen_unknown(kind: UnknownKind, spec: &SignalSpec) -> Result<IqSignal, SynthError> {
    spec.validate()?;
    let n = spec.num_samples();
    let fs = spec.sample_rate_hz;
    let sig = match kind {
        UnknownKind::Am => {
            let mut rng = rng_for(spec.seed, STREAM_MESSAGE);
            let msg = bandlimited_message(n, fs, AM_MESSAGE_BANDWIDTH_HZ, &mut rng);
            let mut out: Vec<Complex64> = msg
                .iter()
                .map(|m| Complex64::new(1.0 + AM_MODULATION_INDEX * m, 0.0))
                .collect();
            normalize_unit_power(&mut out);
            IqSignal::new(out, fs)
        }
        UnknownKind::Fm => {
            let mut rng = rng_for(spec.seed, STREAM_MESSAGE);
            let msg = bandlimited_message(n, fs, FM_MESSAGE_BANDWIDTH_HZ, &mut rng);
            let mut phase = rng_for(spec.seed, STREAM_OFFSETS).random_range(-PI..PI);
            let out = msg
                .iter()
                .map(|m| {
                    let s = Complex64::from_polar(1.0, phase);
                    phase = (phase + 2.0 * PI * FM_DEVIATION_HZ * m / fs).rem_euclid(2.0 * PI);
                    s
                })
                .collect();
            IqSignal::new(out, fs)
        }
        UnknownKind::Ble => gen_ble(spec),
        UnknownKind::WhiteNoise => {
            let mut rng = rng_for(spec.seed, STREAM_MESSAGE);
            let sd = std::f64::consts::FRAC_1_SQRT_2;
            let out = (0..n)
                .map(|_| {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    Complex64::new(re * sd, im * sd)
                })
                .collect();
            IqSignal::new(out, fs)
        }
    };
    Ok(sig)
}

/// Dispatch on `spec.waveform_class`.
pub fn generate(spec: &SignalSpec) -> Result<IqSignal, SynthError> {
    match spec.waveform_class {
        WaveformClass::Sc => gen_sc(spec),
        WaveformClass::ScFdma => gen_scfdma(spec),
        WaveformClass::Ofdm => gen_ofdm(spec),
        WaveformClass::Lfm => gen_lfm(spec),
        WaveformClass::Unknown(kind) => gen_unknown(kind, spec),
    }
}
