//! Corpus manifests, deterministic generation and the `SWF1` feature-record
//! file format.
//!
//! A dataset directory holds `manifest.json` plus one file per corpus and
//! feature configuration, named `<corpus>_<kind>_<nfft>.swf`.
//!
//! ```text
//! "SWF1" | version u16 | record count u32 | feature dim u32 | feature kind u8
//! per record: dim × f32 | class u8 | modulation u8 (255 = none)
//!             | snr_db i8 (−128 = no noise) | impairment flags u8
//! CRC32 (IEEE) of everything above, u32
//! ```

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{impair, FadingKind, ImpairmentConfig};
use crate::features::{extract, FeatureKind, SUPPORTED_NFFT};
use crate::sigsynth::{generate, ModulationScheme, Profile, SignalSpec, WaveformClass};

pub const CORPUS_MAGIC: &[u8; 4] = b"SWF1";
pub const CORPUS_VERSION: u16 = 1;
pub const MANIFEST_VERSION: u16 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Count divisor applied under the desk profile (10,000 → 800 per class).
pub const DESK_DIVISOR: f64 = 12.5;

const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 1;
const NO_MODULATION: u8 = 255;
const NO_NOISE: i8 = i8::MIN;

pub mod flags {
    pub const AWGN: u8 = 1;
    pub const CFO: u8 = 1 << 1;
    pub const PHASE: u8 = 1 << 2;
    pub const IQ: u8 = 1 << 3;
    pub const RAYLEIGH: u8 = 1 << 4;
    pub const RICIAN: u8 = 1 << 5;
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("not a corpus file")]
    NotACorpus,
    #[error("corpus format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("corpus checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("corrupt corpus header: {0}")]
    CorruptHeader(String),
    #[error("corrupt record {index}: {reason}")]
    CorruptRecord { index: usize, reason: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("corpus `{0}` not found in manifest")]
    UnknownCorpus(String),
    #[error("signal generation failed: {0}")]
    Generation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How one impairment parameter is drawn per signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    /// Impairment not applied.
    Off,
    Fixed(f64),
    /// Inclusive uniform range.
    Uniform(f64, f64),
    /// Cycled by within-class index, giving exact per-value balance.
    Grid(Vec<f64>),
}

impl Param {
    pub fn is_off(&self) -> bool {
        matches!(self, Param::Off)
    }

    fn values_bound(&self) -> Option<(f64, f64)> {
        match self {
            Param::Off => None,
            Param::Fixed(v) => Some((*v, *v)),
            Param::Uniform(a, b) => Some((*a, *b)),
            Param::Grid(v) => Some((
                v.iter().cloned().fold(f64::INFINITY, f64::min),
                v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            )),
        }
    }

    fn check(&self, what: &str, lo: f64, hi: f64) -> Result<(), String> {
        if let Param::Uniform(a, b) = self {
            if a > b {
                return Err(format!("{what}: uniform range [{a}, {b}] is reversed"));
            }
        }
        if let Param::Grid(v) = self {
            if v.is_empty() {
                return Err(format!("{what}: empty grid"));
            }
        }
        match self.values_bound() {
            Some((a, b)) if !(a >= lo && b <= hi) => Err(format!("{what}: values must lie in [{lo}, {hi}]")),
            _ => Ok(()),
        }
    }

    /// Always consumes exactly one draw so the stream layout does not depend
    /// on which impairments are active.
    fn sample(&self, index: usize, rng: &mut ChaCha8Rng, off: f64) -> f64 {
        let u: f64 = rng.random();
        match self {
            Param::Off => off,
            Param::Fixed(v) => *v,
            Param::Uniform(a, b) => a + (b - a) * u,
            Param::Grid(v) => v[index % v.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impairments {
    /// `Off` means no noise (SNR = ∞).
    pub snr_db: Param,
    pub phase_rad: Param,
    pub cfo_hz: Param,
    pub iq_db: Param,
    /// Drawn uniformly per signal. Empty means no fading.
    #[serde(default)]
    pub fading: Vec<FadingKind>,
}

impl Impairments {
    pub fn awgn(snr_db: Param) -> Self {
        Impairments {
            snr_db,
            phase_rad: Param::Off,
            cfo_hz: Param::Off,
            iq_db: Param::Off,
            fading: vec![],
        }
    }

    /// Every impairment over its full range, with AWGN from `snr_db`.
    pub fn all(snr_db: Param) -> Self {
        Impairments {
            snr_db,
            phase_rad: Param::Uniform(-PI, PI),
            cfo_hz: Param::Uniform(-5000.0, 5000.0),
            iq_db: Param::Uniform(0.0, 3.0),
            fading: vec![FadingKind::None, FadingKind::Rayleigh, FadingKind::Rician],
        }
    }

    fn validate(&self) -> Result<(), String> {
        if let Some((a, b)) = self.snr_db.values_bound() {
            if a.is_nan() || b.is_nan() || a == f64::NEG_INFINITY {
                return Err("snr_db must be a real number".into());
            }
        }
        self.snr_db.check("snr_db", f64::NEG_INFINITY, f64::INFINITY)?;
        self.phase_rad.check("phase_rad", -PI, PI)?;
        self.cfo_hz.check("cfo_hz", -5000.0, 5000.0)?;
        self.iq_db.check("iq_db", 0.0, 3.0)
    }

    fn min_snr_db(&self) -> f64 {
        self.snr_db.values_bound().map_or(f64::INFINITY, |(a, _)| a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    ClassifierTrain,
    WatchdogTrain,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Cfo,
    Phase,
    Iq,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cfo" => Ok(AblationAxis::Cfo),
            "phase" => Ok(AblationAxis::Phase),
            "iq" => Ok(AblationAxis::Iq),
            _ => Err(format!("unknown ablation axis `{s}` (expected cfo|phase|iq)")),
        }
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationAxis::Cfo => "cfo",
            AblationAxis::Phase => "phase",
            AblationAxis::Iq => "iq",
        })
    }
}

/// Marks a corpus as one point of a single-impairment sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub axis: AblationAxis,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    pub nfft: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub name: String,
    pub purpose: Purpose,
    /// Signal counts at PAPER scale; the desk profile divides them.
    pub classes: BTreeMap<WaveformClass, usize>,
    pub impairments: Impairments,
    pub features: Vec<FeatureConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u16,
    pub profile: Profile,
    #[serde(default = "default_divisor")]
    pub desk_divisor: f64,
    pub master_seed: u64,
    pub corpora: Vec<CorpusSpec>,
}

fn default_divisor() -> f64 {
    DESK_DIVISOR
}

fn counts(classes: &[WaveformClass], n: usize) -> BTreeMap<WaveformClass, usize> {
    classes.iter().map(|c| (*c, n)).collect()
}

fn snr_grid(lo: i32, hi: i32) -> Param {
    Param::Grid((lo..=hi).step_by(5).map(f64::from).collect())
}

impl Manifest {
    /// The full experiment set: classifier and watchdog training corpora, a
    /// mixed test corpus, an AWGN-only detector test corpus and the three
    /// single-impairment sweeps.
    pub fn standard(profile: Profile, master_seed: u64) -> Self {
        let psd: Vec<FeatureConfig> = SUPPORTED_NFFT
            .iter()
            .map(|&nfft| FeatureConfig {
                kind: FeatureKind::PsdDb,
                nfft,
            })
            .collect();
        let fft = FeatureConfig {
            kind: FeatureKind::FftMag,
            nfft: 4096,
        };
        let mut all_features = vec![fft];
        all_features.extend(psd.iter().copied());

        let mut corpora = vec![
            CorpusSpec {
                name: "classifier_train".into(),
                purpose: Purpose::ClassifierTrain,
                classes: counts(&WaveformClass::KNOWN, 10_000),
                impairments: Impairments::all(Param::Uniform(-20.0, 20.0)),
                features: vec![fft],
                ablation: None,
            },
            CorpusSpec {
                name: "watchdog_train".into(),
                purpose: Purpose::WatchdogTrain,
                classes: counts(&WaveformClass::KNOWN, 10_000),
                impairments: Impairments::all(Param::Uniform(0.0, 20.0)),
                features: psd.clone(),
                ablation: None,
            },
            CorpusSpec {
                name: "test".into(),
                purpose: Purpose::Test,
                classes: counts(&WaveformClass::ALL, 400),
                impairments: Impairments::all(snr_grid(-20, 20)),
                features: all_features,
                ablation: None,
            },
            CorpusSpec {
                name: "detector_test_awgn".into(),
                purpose: Purpose::Test,
                classes: counts(&WaveformClass::ALL, 400),
                impairments: Impairments::awgn(snr_grid(-10, 20)),
                features: psd,
                ablation: None,
            },
        ];
        let sweeps = [
            (AblationAxis::Cfo, vec![0.0, 1000.0, 2500.0, 5000.0]),
            (AblationAxis::Phase, vec![0.0, PI / 4.0, PI / 2.0, PI]),
            (AblationAxis::Iq, vec![0.0, 1.0, 2.0, 3.0]),
        ];
        for (axis, values) in sweeps {
            for (i, value) in values.into_iter().enumerate() {
                let mut imp = Impairments::awgn(snr_grid(-20, 20));
                let p = Param::Fixed(value);
                match axis {
                    AblationAxis::Cfo => imp.cfo_hz = p,
                    AblationAxis::Phase => imp.phase_rad = p,
                    AblationAxis::Iq => imp.iq_db = p,
                }
                corpora.push(CorpusSpec {
                    name: format!("ablation_{axis}_{i}"),
                    purpose: Purpose::Test,
                    classes: counts(&WaveformClass::KNOWN, 400),
                    impairments: imp,
                    features: vec![fft],
                    ablation: Some(Ablation { axis, value }),
                });
            }
        }
        Manifest {
            format_version: MANIFEST_VERSION,
            profile,
            desk_divisor: DESK_DIVISOR,
            master_seed,
            corpora,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let m: Manifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn corpus(&self, name: &str) -> Result<&CorpusSpec, CorpusError> {
        self.corpora
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| CorpusError::UnknownCorpus(name.to_string()))
    }

    /// Effective number of signals of `class` in `corpus` for this profile.
    pub fn count(&self, corpus: &CorpusSpec, class: WaveformClass) -> usize {
        let n = corpus.classes.get(&class).copied().unwrap_or(0);
        match self.profile {
            Profile::Paper => n,
            Profile::Desk => (n as f64 / self.desk_divisor).round() as usize,
        }
    }

    pub fn total(&self, corpus: &CorpusSpec) -> usize {
        corpus.classes.keys().map(|c| self.count(corpus, *c)).sum()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Manifest(m));
        if self.format_version != MANIFEST_VERSION {
            return bad(format!("format_version {} (expected {MANIFEST_VERSION})", self.format_version));
        }
        if !(self.desk_divisor > 0.0 && self.desk_divisor.is_finite()) {
            return bad(format!("desk_divisor {} must be positive", self.desk_divisor));
        }
        let mut names = HashSet::new();
        for c in &self.corpora {
            let ok_name = !c.name.is_empty()
                && c.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-');
            if !ok_name {
                return bad(format!("corpus name `{}` must be non-empty [A-Za-z0-9_-]", c.name));
            }
            if !names.insert(&c.name) {
                return bad(format!("duplicate corpus name `{}`", c.name));
            }
            if c.classes.is_empty() {
                return bad(format!("{}: no classes", c.name));
            }
            for (class, _) in &c.classes {
                let n = self.count(c, *class);
                if n == 0 {
                    return bad(format!("{}: {class} count rounds to zero", c.name));
                }
                if n > u32::MAX as usize {
                    return bad(format!("{}: {class} count too large", c.name));
                }
                if class.is_communication() && n % ModulationScheme::ALL.len() != 0 {
                    return bad(format!(
                        "{}: {class} count {n} is not divisible by the {} modulation schemes",
                        c.name,
                        ModulationScheme::ALL.len()
                    ));
                }
            }
            if c.purpose != Purpose::Test && c.classes.keys().any(|k| !k.is_known()) {
                return bad(format!("{}: training corpora may only hold known classes", c.name));
            }
            c.impairments
                .validate()
                .map_err(|e| CorpusError::Manifest(format!("{}: {e}", c.name)))?;
            if c.purpose == Purpose::WatchdogTrain && c.impairments.min_snr_db() < 0.0 {
                return bad(format!(
                    "{}: watchdog training corpora must not contain AWGN below 0 dB",
                    c.name
                ));
            }
            if c.features.is_empty() {
                return bad(format!("{}: no feature configurations", c.name));
            }
            let mut seen = HashSet::new();
            for f in &c.features {
                if !SUPPORTED_NFFT.contains(&f.nfft) {
                    return bad(format!("{}: unsupported nfft {}", c.name, f.nfft));
                }
                if !seen.insert(*f) {
                    return bad(format!("{}: duplicate feature configuration", c.name));
                }
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------- records

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordMeta {
    pub class: WaveformClass,
    pub modulation: Option<ModulationScheme>,
    /// Whole-dB SNR; `None` when no noise was added.
    pub snr_db: Option<i8>,
    pub flags: u8,
}

/// In-memory corpus: feature vectors stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub kind: FeatureKind,
    pub dim: usize,
    pub meta: Vec<RecordMeta>,
    pub features: Vec<f32>,
}

impl Corpus {
    pub fn new(kind: FeatureKind, dim: usize) -> Self {
        Corpus {
            kind,
            dim,
            meta: Vec::new(),
            features: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, meta: RecordMeta, feature: &[f32]) {
        assert_eq!(feature.len(), self.dim, "feature length");
        self.meta.push(meta);
        self.features.extend_from_slice(feature);
    }

    /// Records whose metadata satisfy `keep`, in their original order.
    pub fn filter(&self, keep: impl Fn(&RecordMeta) -> bool) -> Corpus {
        let mut out = Corpus::new(self.kind, self.dim);
        for i in 0..self.len() {
            if keep(&self.meta[i]) {
                out.push(self.meta[i], self.feature(i));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = CorpusWriter::new(Vec::new(), self.kind, self.dim, self.len()).expect("in-memory write");
        for i in 0..self.len() {
            w.write(&self.meta[i], self.feature(i)).expect("in-memory write");
        }
        w.finish().expect("in-memory write")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CorpusError> {
        if bytes.len() < 4 || &bytes[..4] != CORPUS_MAGIC {
            return Err(CorpusError::NotACorpus);
        }
        if bytes.len() < 6 {
            return Err(CorpusError::CorruptHeader("file ends inside the header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CORPUS_VERSION {
            return Err(CorpusError::VersionMismatch {
                found: version,
                expected: CORPUS_VERSION,
            });
        }
        if bytes.len() < HEADER_LEN + 4 {
            let (stored, computed) = if bytes.len() >= 10 {
                let (body, tail) = bytes.split_at(bytes.len() - 4);
                (u32::from_le_bytes(tail.try_into().unwrap()), crc32fast::hash(body))
            } else {
                (0, crc32fast::hash(bytes))
            };
            return Err(CorpusError::Checksum { stored, computed });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CorpusError::Checksum { stored, computed });
        }
        let count = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(body[10..14].try_into().unwrap()) as usize;
        let kind = FeatureKind::from_id(body[14])
            .ok_or_else(|| CorpusError::CorruptHeader(format!("unknown feature kind {}", body[14])))?;
        if dim == 0 {
            return Err(CorpusError::CorruptHeader("feature dimension 0".into()));
        }
        let rec_len = dim * 4 + 4;
        let expected = count.checked_mul(rec_len).map(|n| n + HEADER_LEN);
        if expected != Some(body.len()) {
            return Err(CorpusError::CorruptHeader(format!(
                "{count} records of dimension {dim} do not fit {} bytes",
                body.len()
            )));
        }
        let mut corpus = Corpus::new(kind, dim);
        corpus.meta.reserve(count);
        corpus.features.reserve(count * dim);
        for (index, rec) in body[HEADER_LEN..].chunks_exact(rec_len).enumerate() {
            let (feat, m) = rec.split_at(dim * 4);
            corpus
                .features
                .extend(feat.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
            let class = WaveformClass::from_id(m[0]).ok_or_else(|| CorpusError::CorruptRecord {
                index,
                reason: format!("class id {}", m[0]),
            })?;
            let modulation = match m[1] {
                NO_MODULATION => None,
                id => Some(ModulationScheme::from_id(id).ok_or_else(|| CorpusError::CorruptRecord {
                    index,
                    reason: format!("modulation id {id}"),
                })?),
            };
            let snr = m[2] as i8;
            corpus.meta.push(RecordMeta {
                class,
                modulation,
                snr_db: (snr != NO_NOISE).then_some(snr),
                flags: m[3],
            });
        }
        Ok(corpus)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Streaming writer; the record count is fixed up front.
pub struct CorpusWriter<W: Write> {
    out: W,
    crc: crc32fast::Hasher,
    dim: usize,
    remaining: usize,
}

impl<W: Write> CorpusWriter<W> {
    pub fn new(out: W, kind: FeatureKind, dim: usize, count: usize) -> Result<Self, CorpusError> {
        let mut w = CorpusWriter {
            out,
            crc: crc32fast::Hasher::new(),
            dim,
            remaining: count,
        };
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(CORPUS_MAGIC);
        header.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
        header.extend_from_slice(&(count as u32).to_le_bytes());
        header.extend_from_slice(&(dim as u32).to_le_bytes());
        header.push(kind.id());
        w.put(&header)?;
        Ok(w)
    }

    fn put(&mut self, bytes: &[u8]) -> Result<(), CorpusError> {
        self.crc.update(bytes);
        self.out.write_all(bytes)?;
        Ok(())
    }

    pub fn write(&mut self, meta: &RecordMeta, feature: &[f32]) -> Result<(), CorpusError> {
        assert_eq!(feature.len(), self.dim, "feature length");
        assert!(self.remaining > 0, "more records than declared");
        self.remaining -= 1;
        let mut buf = Vec::with_capacity(self.dim * 4 + 4);
        for v in feature {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(meta.class.id());
        buf.push(meta.modulation.map_or(NO_MODULATION, |m| m.id()));
        buf.push(meta.snr_db.unwrap_or(NO_NOISE) as u8);
        buf.push(meta.flags);
        self.put(&buf)
    }

    pub fn finish(mut self) -> Result<W, CorpusError> {
        assert_eq!(self.remaining, 0, "fewer records than declared");
        let crc = self.crc.clone().finalize();
        self.out.write_all(&crc.to_le_bytes())?;
        self.out.flush()?;
        Ok(self.out)
    }
}

// ----------------------------------------------------------- generation

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of signal `index` of `class` in corpus `name`.
pub fn signal_seed(master_seed: u64, corpus: &str, class: WaveformClass, index: usize) -> u64 {
    let mut h = splitmix(master_seed);
    h = splitmix(h ^ fnv1a(corpus));
    h = splitmix(h ^ u64::from(class.id()));
    splitmix(h ^ index as u64)
}

/// Everything needed to regenerate one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalPlan {
    pub spec: SignalSpec,
    pub impairments: ImpairmentConfig,
    pub flags: u8,
}

const STREAM_IMPAIRMENT_DRAWS: u64 = 21;

pub fn plan_signal(manifest: &Manifest, corpus: &CorpusSpec, class: WaveformClass, index: usize) -> SignalPlan {
    let seed = signal_seed(manifest.master_seed, &corpus.name, class, index);
    let n = manifest.count(corpus, class);
    let modulation = class.is_communication().then(|| {
        let block = (n / ModulationScheme::ALL.len()).max(1);
        ModulationScheme::ALL[(index / block).min(ModulationScheme::ALL.len() - 1)]
    });
    let spec = SignalSpec::for_profile(manifest.profile, class, modulation, seed);

    let imp = &corpus.impairments;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_IMPAIRMENT_DRAWS);
    let snr_db = imp.snr_db.sample(index, &mut rng, f64::INFINITY);
    let phase_offset_rad = imp.phase_rad.sample(index, &mut rng, 0.0);
    let freq_offset_hz = imp.cfo_hz.sample(index, &mut rng, 0.0);
    let iq_imbalance_db = imp.iq_db.sample(index, &mut rng, 0.0);
    let fading = if imp.fading.is_empty() {
        let _: u64 = rng.random();
        FadingKind::None
    } else {
        imp.fading[rng.random_range(0..imp.fading.len())]
    };

    let mut flags_v = 0;
    for (param, bit) in [
        (&imp.snr_db, flags::AWGN),
        (&imp.cfo_hz, flags::CFO),
        (&imp.phase_rad, flags::PHASE),
        (&imp.iq_db, flags::IQ),
    ] {
        if !param.is_off() {
            flags_v |= bit;
        }
    }
    flags_v |= match fading {
        FadingKind::None => 0,
        FadingKind::Rayleigh => flags::RAYLEIGH,
        FadingKind::Rician => flags::RICIAN,
    };
    SignalPlan {
        spec,
        impairments: ImpairmentConfig {
            snr_db,
            phase_offset_rad,
            freq_offset_hz,
            iq_imbalance_db,
            fading,
            seed: splitmix(seed ^ 0x1a2b_3c4d),
        },
        flags: flags_v,
    }
}

fn quantize_snr(snr_db: f64) -> Option<i8> {
    if snr_db.is_infinite() {
        None
    } else {
        Some(snr_db.round().clamp(-127.0, 127.0) as i8)
    }
}

/// Synthesizes, impairs and featurizes one planned signal, producing one
/// feature vector per configuration.
pub fn realize(plan: &SignalPlan, features: &[FeatureConfig]) -> Result<(RecordMeta, Vec<Vec<f32>>), CorpusError> {
    let clean = generate(&plan.spec).map_err(|e| CorpusError::Generation(e.to_string()))?;
    let sig = impair(&clean, &plan.impairments).map_err(|e| CorpusError::Generation(e.to_string()))?;
    let vecs = features
        .iter()
        .map(|f| {
            extract(&sig, f.kind, f.nfft)
                .map(|v| v.values)
                .map_err(|e| CorpusError::Generation(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let meta = RecordMeta {
        class: plan.spec.waveform_class,
        modulation: plan.spec.modulation,
        snr_db: quantize_snr(plan.impairments.snr_db),
        flags: plan.flags,
    };
    Ok((meta, vecs))
}

/// Signals are generated in parallel chunks of this size and written in order.
const CHUNK: usize = 256;

fn for_each_record(
    manifest: &Manifest,
    corpus: &CorpusSpec,
    mut sink: impl FnMut(&RecordMeta, &[Vec<f32>]) -> Result<(), CorpusError>,
) -> Result<(), CorpusError> {
    let jobs: Vec<(WaveformClass, usize)> = corpus
        .classes
        .keys()
        .flat_map(|c| (0..manifest.count(corpus, *c)).map(move |i| (*c, i)))
        .collect();
    for chunk in jobs.chunks(CHUNK) {
        let done = chunk
            .par_iter()
            .map(|(class, i)| realize(&plan_signal(manifest, corpus, *class, *i), &corpus.features))
            .collect::<Result<Vec<_>, _>>()?;
        for (meta, vecs) in &done {
            sink(meta, vecs)?;
        }
    }
    Ok(())
}

/// Builds one corpus in memory, one [`Corpus`] per feature configuration.
pub fn build_corpus(manifest: &Manifest, name: &str) -> Result<Vec<Corpus>, CorpusError> {
    manifest.validate()?;
    let spec = manifest.corpus(name)?;
    let mut out: Vec<Corpus> = spec.features.iter().map(|f| Corpus::new(f.kind, f.nfft)).collect();
    for_each_record(manifest, spec, |meta, vecs| {
        for (c, v) in out.iter_mut().zip(vecs) {
            c.push(*meta, v);
        }
        Ok(())
    })?;
    Ok(out)
}

pub fn corpus_file_name(corpus: &str, feature: FeatureConfig) -> String {
    format!("{corpus}_{}_{}.swf", feature.kind, feature.nfft)
}

/// Writes every corpus of `manifest` plus `manifest.json` into `dir`.
/// Returns the paths written.
pub fn write_dataset(manifest: &Manifest, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, CorpusError> {
    manifest.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for spec in &manifest.corpora {
        let total = manifest.total(spec);
        let paths: Vec<PathBuf> = spec.features.iter().map(|f| dir.join(corpus_file_name(&spec.name, *f))).collect();
        let mut writers = spec
            .features
            .iter()
            .zip(&paths)
            .map(|(f, p)| CorpusWriter::new(BufWriter::new(File::create(p)?), f.kind, f.nfft, total))
            .collect::<Result<Vec<_>, _>>()?;
        for_each_record(manifest, spec, |meta, vecs| {
            for (w, v) in writers.iter_mut().zip(vecs) {
                w.write(meta, v)?;
            }
            Ok(())
        })?;
        for w in writers {
            w.finish()?;
        }
        written.extend(paths);
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_json())?;
    written.push(mpath);
    Ok(written)
}

/// A generated dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = Manifest::load(dir.join(MANIFEST_FILE))?;
        Ok(Dataset { dir, manifest })
    }

    pub fn load(&self, corpus: &str, feature: FeatureConfig) -> Result<Corpus, CorpusError> {
        let spec = self.manifest.corpus(corpus)?;
        if !spec.features.contains(&feature) {
            return Err(CorpusError::Manifest(format!(
                "corpus `{corpus}` has no {} features at nfft {}",
                feature.kind, feature.nfft
            )));
        }
        Corpus::load(self.dir.join(corpus_file_name(corpus, feature)))
    }

    /// Corpora with the given purpose that carry `feature`.
    pub fn find(&self, purpose: Purpose, feature: FeatureConfig) -> Vec<&CorpusSpec> {
        self.manifest
            .corpora
            .iter()
            .filter(|c| c.purpose == purpose && c.features.contains(&feature))
            .collect()
    }
}

/// Whole-dB SNRs of a corpus never below zero: the watchdog training
/// requirement.
pub fn check_watchdog_corpus(corpus: &Corpus) -> Result<(), CorpusError> {
    if let Some((i, m)) = corpus
        .meta
        .iter()
        .enumerate()
        .find(|(_, m)| m.snr_db.is_some_and(|s| s < 0))
    {
        return Err(CorpusError::Manifest(format!(
            "record {i} has AWGN at {} dB; watchdog training needs SNR ≥ 0 dB",
            m.snr_db.unwrap()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigsynth::UnknownKind;

    fn unknown(kind: UnknownKind) -> WaveformClass {
        WaveformClass::Unknown(kind)
    }

    fn tiny(profile: Profile) -> Manifest {
        Manifest {
            format_version: MANIFEST_VERSION,
            profile,
            desk_divisor: 1.0,
            master_seed: 5,
            corpora: vec![CorpusSpec {
                name: "t".into(),
                purpose: Purpose::Test,
                classes: [(WaveformClass::Sc, 8), (WaveformClass::Lfm, 3), (unknown(UnknownKind::Am), 2)]
                    .into_iter()
                    .collect(),
                impairments: Impairments::all(snr_grid(-10, 10)),
                features: vec![
                    FeatureConfig {
                        kind: FeatureKind::FftMag,
                        nfft: 4096,
                    },
                    FeatureConfig {
                        kind: FeatureKind::PsdDb,
                        nfft: 4096,
                    },
                ],
                ablation: None,
            }],
        }
    }

    #[test]
    fn paper_profile_manifest_counts() {
        let m = Manifest::standard(Profile::Paper, 1);
        m.validate().unwrap();
        let train = m.corpus("classifier_train").unwrap();
        assert_eq!(m.total(train), 40_000);
        for class in WaveformClass::KNOWN {
            assert_eq!(m.count(train, class), 10_000);
        }
        // 1,250 per modulation in each communication class.
        let per_mod: Vec<usize> = (0..10_000)
            .map(|i| plan_signal(&m, train, WaveformClass::Ofdm, i).spec.modulation.unwrap().id() as usize)
            .fold(vec![0; 8], |mut acc, id| {
                acc[id] += 1;
                acc
            });
        assert_eq!(per_mod, vec![1250; 8]);
        let test = m.corpus("test").unwrap();
        assert_eq!(m.total(test), 3200);
        assert!(WaveformClass::ALL.iter().all(|c| m.count(test, *c) == 400));
    }

    #[test]
    fn desk_divisor_gives_800_per_class() {
        let m = Manifest::standard(Profile::Desk, 1);
        m.validate().unwrap();
        let train = m.corpus("classifier_train").unwrap();
        assert_eq!(m.count(train, WaveformClass::Sc), 800);
        assert_eq!(m.count(m.corpus("test").unwrap(), WaveformClass::Lfm), 32);
    }

    #[test]
    fn manifest_json_round_trip() {
        let m = Manifest::standard(Profile::Desk, 99);
        assert_eq!(Manifest::from_json(&m.to_json()).unwrap(), m);
    }

    #[test]
    fn watchdog_manifest_rejects_negative_snr() {
        let mut m = Manifest::standard(Profile::Desk, 1);
        m.corpora[1].impairments.snr_db = Param::Uniform(-5.0, 20.0);
        assert!(matches!(m.validate(), Err(CorpusError::Manifest(_))));
    }

    #[test]
    fn bad_modulation_split_is_rejected() {
        let mut m = tiny(Profile::Desk);
        m.corpora[0].classes.insert(WaveformClass::Sc, 12);
        assert!(m.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let m = tiny(Profile::Desk);
        let a = build_corpus(&m, "t").unwrap();
        let b = build_corpus(&m, "t").unwrap();
        assert_eq!(a[0].to_bytes(), b[0].to_bytes());
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].len(), 13);
        assert_eq!(a[1].kind, FeatureKind::PsdDb);
        let back = Corpus::from_bytes(&a[1].to_bytes()).unwrap();
        assert_eq!(back, a[1]);
        let bits = |c: &Corpus| c.features.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&a[1]));
        // Grid SNR cycles by within-class index.
        let snrs: Vec<Option<i8>> = a[0].meta.iter().take(6).map(|m| m.snr_db).collect();
        assert_eq!(snrs, vec![Some(-10), Some(-5), Some(0), Some(5), Some(10), Some(-10)]);
        assert!(a[0].meta.iter().all(|m| m.flags & flags::AWGN != 0 && m.flags & flags::CFO != 0));
    }

    #[test]
    fn written_dataset_matches_in_memory() {
        let m = tiny(Profile::Desk);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&m, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        let f = m.corpora[0].features[1];
        assert_eq!(ds.load("t", f).unwrap(), build_corpus(&m, "t").unwrap()[1]);
    }

    #[test]
    fn corrupt_files_are_rejected_distinctly() {
        let mut c = Corpus::new(FeatureKind::PsdDb, 3);
        for i in 0..4u8 {
            c.push(
                RecordMeta {
                    class: WaveformClass::from_id(i).unwrap(),
                    modulation: None,
                    snr_db: Some(i as i8),
                    flags: 1,
                },
                &[0.1, 0.2, f32::from(i)],
            );
        }
        let bytes = c.to_bytes();
        assert!(matches!(Corpus::from_bytes(b"SWNN\x01\x00"), Err(CorpusError::NotACorpus)));
        assert!(matches!(
            Corpus::from_bytes(&bytes[..bytes.len() - 7]),
            Err(CorpusError::Checksum { .. })
        ));
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(Corpus::from_bytes(&v), Err(CorpusError::VersionMismatch { found: 2, .. })));
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(Corpus::from_bytes(&flipped), Err(CorpusError::Checksum { .. })));
        // A consistent checksum over a lying header.
        let mut lie = bytes[..bytes.len() - 4].to_vec();
        lie[6] = 9;
        let crc = crc32fast::hash(&lie);
        lie.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(Corpus::from_bytes(&lie), Err(CorpusError::CorruptHeader(_))));
    }

    #[test]
    fn watchdog_guard_flags_negative_records() {
        let mut c = Corpus::new(FeatureKind::PsdDb, 1);
        let meta = |snr| RecordMeta {
            class: WaveformClass::Sc,
            modulation: None,
            snr_db: snr,
            flags: 0,
        };
        c.push(meta(None), &[0.0]);
        c.push(meta(Some(0)), &[0.0]);
        assert!(check_watchdog_corpus(&c).is_ok());
        c.push(meta(Some(-1)), &[0.0]);
        assert!(check_watchdog_corpus(&c).is_err());
    }
}
