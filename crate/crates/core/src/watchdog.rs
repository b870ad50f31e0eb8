//! Convolutional autoencoder over normalized PSD features, and the RMSE
//! region thresholds that separate known from unknown emitters.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{check_watchdog_corpus, Corpus, CorpusError};
use crate::features::{FeatureKind, FeatureVector, SUPPORTED_NFFT};
use crate::neural::{fit_with, Adamax, LayerSpec, Model, NnError, Tensor, TrainingData};
use crate::sigsynth::WaveformClass;

pub const KERNEL: usize = 16;
pub const STRIDE: usize = 4;
pub const L2: f64 = 0.1;
pub const ENCODER_FILTERS: [usize; 3] = [256, 128, 32];
pub const LATENT: usize = 16;
pub const DEFAULT_LEARNING_RATE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum WatchdogError {
    #[error("unsupported FFT size {0} (expected 4096, 8192 or 16384)")]
    UnsupportedNfft(usize),
    #[error("watchdog expects {expected} features, got {got}")]
    FeatureKind { expected: FeatureKind, got: FeatureKind },
    #[error("watchdog expects {expected} feature values, got {got}")]
    FeatureLength { expected: usize, got: usize },
    #[error("no calibration RMSEs for {0}")]
    EmptyClass(WaveformClass),
    #[error("invalid region set: {0}")]
    InvalidRegions(String),
    #[error("model is not a watchdog autoencoder: {0}")]
    Architecture(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub fn architecture(nfft: usize) -> Result<Vec<LayerSpec>, WatchdogError> {
    if !SUPPORTED_NFFT.contains(&nfft) {
        return Err(WatchdogError::UnsupportedNfft(nfft));
    }
    let mut specs = Vec::new();
    let mut len = nfft;
    let mut ch = 1;
    for filters in ENCODER_FILTERS {
        specs.push(LayerSpec::Conv1d {
            in_len: len,
            in_channels: ch,
            filters,
            kernel: KERNEL,
            stride: STRIDE,
            l2: L2,
        });
        specs.push(LayerSpec::Relu);
        len /= STRIDE;
        ch = filters;
    }
    let flat = len * ch;
    specs.extend([
        LayerSpec::Flatten,
        LayerSpec::Dense {
            inputs: flat,
            units: LATENT,
            l2: 0.0,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: LATENT,
            units: flat,
            l2: 0.0,
        },
        LayerSpec::Relu,
        LayerSpec::Reshape { shape: vec![len, ch] },
    ]);
    for filters in [32, 128, 256] {
        specs.push(LayerSpec::ConvTranspose1d {
            in_len: len,
            in_channels: ch,
            filters,
            kernel: KERNEL,
            stride: STRIDE,
            l2: L2,
        });
        specs.push(LayerSpec::Relu);
        len *= STRIDE;
        ch = filters;
    }
    specs.push(LayerSpec::ConvTranspose1d {
        in_len: len,
        in_channels: ch,
        filters: 1,
        kernel: KERNEL,
        stride: 1,
        l2: L2,
    });
    specs.push(LayerSpec::Sigmoid);
    Ok(specs)
}

/// `sqrt(mean((x − x̂)²))`.
pub fn reconstruction_rmse(x: &[f32], reconstruction: &[f32]) -> f64 {
    assert_eq!(x.len(), reconstruction.len(), "length mismatch");
    if x.is_empty() {
        return 0.0;
    }
    let sum: f64 = x
        .iter()
        .zip(reconstruction)
        .map(|(a, b)| {
            let d = f64::from(*a) - f64::from(*b);
            d * d
        })
        .sum();
    (sum / x.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Watchdog {
    model: Model<f32>,
    nfft: usize,
}

impl Watchdog {
    pub fn build(nfft: usize, seed: u64) -> Result<Self, WatchdogError> {
        let specs = architecture(nfft)?;
        Ok(Watchdog {
            model: Model::build(&[nfft, 1], &specs, seed)?,
            nfft,
        })
    }

    pub fn from_model(model: Model<f32>) -> Result<Self, WatchdogError> {
        let nfft = match model.input_shape() {
            [n, 1] => *n,
            other => return Err(WatchdogError::Architecture(format!("input shape {other:?}"))),
        };
        let expected = architecture(nfft).map_err(|e| WatchdogError::Architecture(e.to_string()))?;
        if model.specs() != expected {
            return Err(WatchdogError::Architecture("layer stack differs".into()));
        }
        Ok(Watchdog { model, nfft })
    }

    pub fn nfft(&self) -> usize {
        self.nfft
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WatchdogError> {
        Ok(self.model.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WatchdogError> {
        Self::from_model(Model::load(path)?)
    }

    fn check_len(&self, n: usize) -> Result<(), WatchdogError> {
        if n != self.nfft {
            return Err(WatchdogError::FeatureLength {
                expected: self.nfft,
                got: n,
            });
        }
        Ok(())
    }

    fn check_corpus(&self, corpus: &Corpus) -> Result<(), WatchdogError> {
        if corpus.kind != FeatureKind::PsdDb {
            return Err(WatchdogError::FeatureKind {
                expected: FeatureKind::PsdDb,
                got: corpus.kind,
            });
        }
        self.check_len(corpus.dim)
    }

    pub fn reconstruct(&self, values: &[f32]) -> Result<Vec<f32>, WatchdogError> {
        self.check_len(values.len())?;
        let x = Tensor::new(vec![1, self.nfft, 1], values.to_vec())?;
        Ok(self.model.predict(&x)?.into_data())
    }

    pub fn rmse(&self, feature: &FeatureVector) -> Result<f64, WatchdogError> {
        if feature.kind != FeatureKind::PsdDb {
            return Err(WatchdogError::FeatureKind {
                expected: FeatureKind::PsdDb,
                got: feature.kind,
            });
        }
        self.rmse_values(&feature.values)
    }

    pub fn rmse_values(&self, values: &[f32]) -> Result<f64, WatchdogError> {
        let y = self.reconstruct(values)?;
        Ok(reconstruction_rmse(values, &y))
    }

    /// Reconstruction RMSE of every record, in order.
    pub fn rmse_corpus(&self, corpus: &Corpus) -> Result<Vec<f64>, WatchdogError> {
        self.check_corpus(corpus)?;
        const BATCH: usize = 32;
        let n = self.nfft;
        let mut out = Vec::with_capacity(corpus.len());
        for start in (0..corpus.len()).step_by(BATCH) {
            let end = (start + BATCH).min(corpus.len());
            let x = &corpus.features[start * n..end * n];
            let y = self.model.predict(&Tensor::new(vec![end - start, n, 1], x.to_vec())?)?;
            out.extend(
                x.chunks_exact(n)
                    .zip(y.data().chunks_exact(n))
                    .map(|(a, b)| reconstruction_rmse(a, b)),
            );
        }
        Ok(out)
    }

    /// Trains the autoencoder to reproduce its input. Corpora containing
    /// records below 0 dB SNR are refused.
    pub fn train(
        &mut self,
        corpus: &Corpus,
        config: &TrainConfig,
        on_epoch: impl FnMut(usize, f64),
    ) -> Result<Vec<f64>, WatchdogError> {
        self.check_corpus(corpus)?;
        check_watchdog_corpus(corpus)?;
        let mut opt = Adamax::new(config.learning_rate);
        Ok(fit_with(
            &mut self.model,
            &Reconstruction(corpus),
            config.epochs,
            config.batch_size,
            &mut opt,
            config.seed,
            on_epoch,
        )?)
    }

    /// RMSEs of the known-class records, grouped by class.
    pub fn class_rmses(&self, corpus: &Corpus) -> Result<BTreeMap<WaveformClass, Vec<f64>>, WatchdogError> {
        let rmse = self.rmse_corpus(corpus)?;
        let mut out: BTreeMap<WaveformClass, Vec<f64>> = BTreeMap::new();
        for (m, r) in corpus.meta.iter().zip(rmse) {
            if m.class.is_known() {
                out.entry(m.class).or_default().push(r);
            }
        }
        Ok(out)
    }

    pub fn calibrate(&self, corpus: &Corpus, design: RegionDesign) -> Result<RegionSet, WatchdogError> {
        let mut set = calibrate_regions(&self.class_rmses(corpus)?, design)?;
        set.nfft = Some(self.nfft);
        Ok(set)
    }
}

struct Reconstruction<'a>(&'a Corpus);

impl TrainingData<f32> for Reconstruction<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![self.0.dim, 1]
    }

    fn target_len(&self) -> usize {
        self.0.dim
    }

    fn write_input(&self, index: usize, out: &mut [f32]) {
        out.copy_from_slice(self.0.feature(index));
    }

    fn write_target(&self, index: usize, out: &mut [f32]) {
        out.copy_from_slice(self.0.feature(index));
    }
}

// -------------------------------------------------------------- regions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RegionDesign {
    /// One interval pooled over all known classes.
    Two,
    /// Radar (LFM) and communication intervals.
    Three,
    /// One interval per known class.
    Five,
}

impl RegionDesign {
    pub const ALL: [RegionDesign; 3] = [RegionDesign::Two, RegionDesign::Three, RegionDesign::Five];

    pub fn region_count(self) -> usize {
        match self {
            RegionDesign::Two => 1,
            RegionDesign::Three => 2,
            RegionDesign::Five => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionDesign::Two => "two",
            RegionDesign::Three => "three",
            RegionDesign::Five => "five",
        }
    }
}

impl fmt::Display for RegionDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegionDesign {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "two" | "2" => Ok(RegionDesign::Two),
            "three" | "3" => Ok(RegionDesign::Three),
            "five" | "5" => Ok(RegionDesign::Five),
            _ => Err(format!("unknown region design `{s}` (expected two|three|five)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub label: String,
    pub min: f64,
    pub max: f64,
}

impl Region {
    pub fn contains(&self, rmse: f64) -> bool {
        self.min <= rmse && rmse <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub design: RegionDesign,
    /// FFT size of the calibrating watchdog, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nfft: Option<usize>,
    pub regions: Vec<Region>,
}

impl RegionSet {
    pub fn validate(&self) -> Result<(), WatchdogError> {
        if self.regions.len() != self.design.region_count() {
            return Err(WatchdogError::InvalidRegions(format!(
                "{} design needs {} regions, found {}",
                self.design,
                self.design.region_count(),
                self.regions.len()
            )));
        }
        for r in &self.regions {
            if !(r.min <= r.max) {
                return Err(WatchdogError::InvalidRegions(format!(
                    "region {} has min {} > max {}",
                    r.label, r.min, r.max
                )));
            }
        }
        Ok(())
    }

    /// Doubles are written in shortest round-trip form, so the stored
    /// thresholds are reproduced exactly on load.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("region set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, WatchdogError> {
        let set: RegionSet = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WatchdogError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WatchdogError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn interval(label: &str, values: impl Iterator<Item = f64>) -> Region {
    let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    Region {
        label: label.to_string(),
        min,
        max,
    }
}

/// Min/max thresholds from per-class training RMSEs. Every known class
/// must be present with at least one value.
pub fn calibrate_regions(
    rmses: &BTreeMap<WaveformClass, Vec<f64>>,
    design: RegionDesign,
) -> Result<RegionSet, WatchdogError> {
    for class in WaveformClass::KNOWN {
        if rmses.get(&class).is_none_or(|v| v.is_empty()) {
            return Err(WatchdogError::EmptyClass(class));
        }
    }
    let of = |c: WaveformClass| rmses[&c].iter().copied();
    let comm = [WaveformClass::Sc, WaveformClass::ScFdma, WaveformClass::Ofdm];
    let regions = match design {
        RegionDesign::Two => vec![interval("known", WaveformClass::KNOWN.into_iter().flat_map(of))],
        RegionDesign::Three => vec![
            interval("radar", of(WaveformClass::Lfm)),
            interval("comm", comm.into_iter().flat_map(of)),
        ],
        RegionDesign::Five => WaveformClass::KNOWN.iter().map(|c| interval(c.name(), of(*c))).collect(),
    };
    Ok(RegionSet {
        design,
        nfft: None,
        regions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Known,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub rmse: f64,
    pub verdict: Verdict,
    pub matched_region: Option<String>,
}

/// KNOWN iff `rmse` lies in a closed region; the first match wins.
pub fn detect(rmse: f64, regions: &RegionSet) -> DetectionResult {
    let hit = regions.regions.iter().find(|r| r.contains(rmse));
    DetectionResult {
        rmse,
        verdict: if hit.is_some() { Verdict::Known } else { Verdict::Unknown },
        matched_region: hit.map(|r| r.label.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> BTreeMap<WaveformClass, Vec<f64>> {
        [
            (WaveformClass::Lfm, vec![0.01, 0.02]),
            (WaveformClass::Sc, vec![0.10, 0.12]),
            (WaveformClass::ScFdma, vec![0.11]),
            (WaveformClass::Ofdm, vec![0.13]),
        ]
        .into_iter()
        .collect()
    }

    fn bounds(set: &RegionSet) -> Vec<(&str, f64, f64)> {
        set.regions.iter().map(|r| (r.label.as_str(), r.min, r.max)).collect()
    }

    #[test]
    fn encoder_shapes_for_4096() {
        let specs = architecture(4096).unwrap();
        let mut shape = vec![4096, 1];
        let mut seen = Vec::new();
        for s in &specs {
            shape = s.output_shape(&shape).unwrap();
            seen.push(shape.clone());
        }
        assert_eq!(seen[0], vec![1024, 256]);
        assert_eq!(seen[2], vec![256, 128]);
        assert_eq!(seen[4], vec![64, 32]);
        assert_eq!(seen[7], vec![16]);
        assert_eq!(seen[9], vec![2048]);
        assert_eq!(shape, vec![4096, 1]);
        let transposes = specs
            .iter()
            .filter(|s| matches!(s, LayerSpec::ConvTranspose1d { .. }))
            .count();
        assert_eq!(transposes, 4);
    }

    #[test]
    fn unsupported_nfft_is_an_error() {
        assert!(matches!(Watchdog::build(2048, 0), Err(WatchdogError::UnsupportedNfft(2048))));
    }

    #[test]
    fn rmse_hand_values() {
        assert_eq!(reconstruction_rmse(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert_eq!(reconstruction_rmse(&[0.0; 5], &[1.0; 5]), 1.0);
        assert_eq!(reconstruction_rmse(&[0.0, 0.0, 1.0, 1.0], &[0.5; 4]), 0.5);
    }

    #[test]
    fn calibration_examples() {
        let three = calibrate_regions(&example(), RegionDesign::Three).unwrap();
        assert_eq!(bounds(&three), vec![("radar", 0.01, 0.02), ("comm", 0.10, 0.13)]);
        let two = calibrate_regions(&example(), RegionDesign::Two).unwrap();
        assert_eq!(bounds(&two), vec![("known", 0.01, 0.13)]);
        let five = calibrate_regions(&example(), RegionDesign::Five).unwrap();
        assert_eq!(
            bounds(&five),
            vec![
                ("SC", 0.10, 0.12),
                ("SCFDMA", 0.11, 0.11),
                ("OFDM", 0.13, 0.13),
                ("LFM", 0.01, 0.02)
            ]
        );
    }

    #[test]
    fn detection_examples() {
        let three = calibrate_regions(&example(), RegionDesign::Three).unwrap();
        let gap = detect(0.05, &three);
        assert_eq!(gap.verdict, Verdict::Unknown);
        assert_eq!(gap.matched_region, None);
        let edge = detect(0.01, &three);
        assert_eq!(edge.verdict, Verdict::Known);
        assert_eq!(edge.matched_region.as_deref(), Some("radar"));
        let two = calibrate_regions(&example(), RegionDesign::Two).unwrap();
        assert_eq!(detect(0.05, &two).verdict, Verdict::Known);
    }

    #[test]
    fn empty_class_is_an_error() {
        let mut m = example();
        m.insert(WaveformClass::Ofdm, vec![]);
        assert!(matches!(
            calibrate_regions(&m, RegionDesign::Two),
            Err(WatchdogError::EmptyClass(WaveformClass::Ofdm))
        ));
        m.remove(&WaveformClass::Ofdm);
        assert!(calibrate_regions(&m, RegionDesign::Five).is_err());
    }

    #[test]
    fn region_json_is_exact() {
        let mut m = example();
        m.get_mut(&WaveformClass::Sc).unwrap().push(0.1 + 0.2);
        m.get_mut(&WaveformClass::Lfm).unwrap().push(1.0 / 3.0 * 1e-3);
        let mut set = calibrate_regions(&m, RegionDesign::Five).unwrap();
        set.nfft = Some(8192);
        let back = RegionSet::from_json(&set.to_json()).unwrap();
        assert_eq!(back, set);
        for (a, b) in back.regions.iter().zip(&set.regions) {
            assert_eq!(a.min.to_bits(), b.min.to_bits());
            assert_eq!(a.max.to_bits(), b.max.to_bits());
        }

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            for v in m.values_mut() {
                v.iter_mut().for_each(|x| *x = rng.random_range(1e-4..2.0));
            }
            let set = calibrate_regions(&m, RegionDesign::Five).unwrap();
            assert_eq!(RegionSet::from_json(&set.to_json()).unwrap(), set);
        }
    }

    #[test]
    fn malformed_region_sets_are_rejected() {
        let text = r#"{"design":"THREE","regions":[{"label":"radar","min":0.2,"max":0.1},{"label":"comm","min":0,"max":1}]}"#;
        assert!(matches!(RegionSet::from_json(text), Err(WatchdogError::InvalidRegions(_))));
        let text = r#"{"design":"FIVE","regions":[{"label":"x","min":0,"max":1}]}"#;
        assert!(matches!(RegionSet::from_json(text), Err(WatchdogError::InvalidRegions(_))));
    }
}
