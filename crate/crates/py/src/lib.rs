use std::collections::BTreeMap;

use num_complex::Complex64;
use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;

use specwatch::channel::{self, FadingKind, ImpairmentConfig};
use specwatch::classifier::{self as clf, Classifier as CoreClassifier};
use specwatch::datastore::{self, Corpus as CoreCorpus, Manifest};
use specwatch::features::{self, FeatureKind};
use specwatch::sigsynth::{self, IqSignal, ModulationScheme, Profile, SignalSpec, WaveformClass};
use specwatch::watchdog::{self as wd, RegionDesign, RegionSet as CoreRegionSet, Verdict, Watchdog as CoreWatchdog};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(value_err)
}

/// A complex baseband capture.
#[pyclass(module = "pyspecwatch", skip_from_py_object)]
#[derive(Clone)]
struct Signal {
    inner: IqSignal,
}

#[pymethods]
impl Signal {
    #[new]
    fn new(samples: Vec<Complex64>, sample_rate_hz: f64) -> PyResult<Self> {
        if !(sample_rate_hz > 0.0) {
            return Err(PyValueError::new_err("sample_rate_hz must be positive"));
        }
        Ok(Signal {
            inner: IqSignal::new(samples, sample_rate_hz),
        })
    }

    #[getter]
    fn samples(&self) -> Vec<Complex64> {
        self.inner.samples.clone()
    }

    #[getter]
    fn sample_rate_hz(&self) -> f64 {
        self.inner.sample_rate_hz
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn add_awgn(&self, snr_db: f64, seed: u64) -> Signal {
        Signal {
            inner: channel::add_awgn(&self.inner, snr_db, seed),
        }
    }

    #[pyo3(signature = (snr_db=None, phase_rad=0.0, cfo_hz=0.0, iq_db=0.0, fading="NONE", seed=0))]
    fn impair(
        &self,
        snr_db: Option<f64>,
        phase_rad: f64,
        cfo_hz: f64,
        iq_db: f64,
        fading: &str,
        seed: u64,
    ) -> PyResult<Signal> {
        let fading = match fading.to_ascii_uppercase().as_str() {
            "NONE" => FadingKind::None,
            "RAYLEIGH" => FadingKind::Rayleigh,
            "RICIAN" => FadingKind::Rician,
            other => return Err(PyValueError::new_err(format!("unknown fading `{other}`"))),
        };
        let cfg = ImpairmentConfig {
            snr_db: snr_db.unwrap_or(f64::INFINITY),
            phase_offset_rad: phase_rad,
            freq_offset_hz: cfo_hz,
            iq_imbalance_db: iq_db,
            fading,
            seed,
        };
        Ok(Signal {
            inner: channel::impair(&self.inner, &cfg).map_err(value_err)?,
        })
    }

    /// Feature vector of kind `fft_mag` or `psd_db`.
    fn features(&self, kind: &str, nfft: usize) -> PyResult<Vec<f32>> {
        let kind: FeatureKind = parse(kind)?;
        Ok(features::extract(&self.inner, kind, nfft).map_err(value_err)?.values)
    }
}

/// Synthesizes one capture of `waveform_class` (e.g. "OFDM", "LFM", "BLE").
#[pyfunction]
#[pyo3(signature = (waveform_class, modulation=None, seed=0, profile="desk"))]
fn generate(waveform_class: &str, modulation: Option<&str>, seed: u64, profile: &str) -> PyResult<Signal> {
    let class: WaveformClass = parse(waveform_class)?;
    let modulation = modulation.map(parse::<ModulationScheme>).transpose()?;
    let spec = SignalSpec::for_profile(parse::<Profile>(profile)?, class, modulation, seed);
    Ok(Signal {
        inner: sigsynth::generate(&spec).map_err(value_err)?,
    })
}

/// Feature corpus loaded from disk.
#[pyclass(module = "pyspecwatch")]
struct Corpus {
    inner: CoreCorpus,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Corpus {
            inner: CoreCorpus::load(path).map_err(value_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    fn feature(&self, index: usize) -> PyResult<Vec<f32>> {
        if index >= self.inner.len() {
            return Err(PyIndexError::new_err(index));
        }
        Ok(self.inner.feature(index).to_vec())
    }

    fn classes(&self) -> Vec<String> {
        self.inner.meta.iter().map(|m| m.class.to_string()).collect()
    }

    fn snr_db(&self) -> Vec<Option<i8>> {
        self.inner.meta.iter().map(|m| m.snr_db).collect()
    }
}

#[pyclass(module = "pyspecwatch")]
struct Classifier {
    inner: CoreClassifier,
}

#[pymethods]
impl Classifier {
    #[new]
    #[pyo3(signature = (seed=0))]
    fn new(seed: u64) -> Self {
        Classifier {
            inner: CoreClassifier::build(seed),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Classifier {
            inner: CoreClassifier::load(path).map_err(value_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(value_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.model().param_count()
    }

    /// `(label, probabilities)` for a 4096-point magnitude spectrum.
    fn predict(&self, values: Vec<f32>) -> PyResult<(String, Vec<f32>)> {
        let p = self.inner.predict_values(&values).map_err(value_err)?;
        Ok((p.label.to_string(), p.probabilities.to_vec()))
    }

    #[pyo3(signature = (corpus, epochs=50, batch_size=128, learning_rate=0.002, seed=0))]
    fn train(
        &mut self,
        py: Python<'_>,
        corpus: &Corpus,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let cfg = clf::TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            seed,
        };
        let inner = &mut self.inner;
        let data = &corpus.inner;
        py.detach(|| inner.train(data, &cfg, |_, _| {})).map_err(value_err)
    }
}

#[pyclass(module = "pyspecwatch")]
struct Watchdog {
    inner: CoreWatchdog,
}

#[pymethods]
impl Watchdog {
    #[new]
    #[pyo3(signature = (nfft=4096, seed=0))]
    fn new(nfft: usize, seed: u64) -> PyResult<Self> {
        Ok(Watchdog {
            inner: CoreWatchdog::build(nfft, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Watchdog {
            inner: CoreWatchdog::load(path).map_err(value_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(value_err)
    }

    #[getter]
    fn nfft(&self) -> usize {
        self.inner.nfft()
    }

    fn reconstruct(&self, py: Python<'_>, values: Vec<f32>) -> PyResult<Vec<f32>> {
        py.detach(|| self.inner.reconstruct(&values)).map_err(value_err)
    }

    fn rmse(&self, py: Python<'_>, values: Vec<f32>) -> PyResult<f64> {
        py.detach(|| self.inner.rmse_values(&values)).map_err(value_err)
    }

    #[pyo3(signature = (corpus, epochs=50, batch_size=128, learning_rate=wd::DEFAULT_LEARNING_RATE, seed=0))]
    fn train(
        &mut self,
        py: Python<'_>,
        corpus: &Corpus,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let cfg = wd::TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            seed,
        };
        let inner = &mut self.inner;
        let data = &corpus.inner;
        py.detach(|| inner.train(data, &cfg, |_, _| {})).map_err(value_err)
    }
}

/// Closed RMSE intervals that count as KNOWN.
#[pyclass(module = "pyspecwatch")]
struct RegionSet {
    inner: CoreRegionSet,
}

#[pymethods]
impl RegionSet {
    /// Builds regions from per-class RMSEs keyed by class name.
    #[staticmethod]
    fn calibrate(rmses: BTreeMap<String, Vec<f64>>, design: &str) -> PyResult<Self> {
        let mut by_class = BTreeMap::new();
        for (name, v) in rmses {
            by_class.insert(parse::<WaveformClass>(&name)?, v);
        }
        Ok(RegionSet {
            inner: wd::calibrate_regions(&by_class, parse::<RegionDesign>(design)?).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(RegionSet {
            inner: CoreRegionSet::from_json(text).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn design(&self) -> &'static str {
        self.inner.design.name()
    }

    fn regions(&self) -> Vec<(String, f64, f64)> {
        self.inner.regions.iter().map(|r| (r.label.clone(), r.min, r.max)).collect()
    }

    /// `(verdict, matched_region)` with verdict "KNOWN" or "UNKNOWN".
    fn detect(&self, rmse: f64) -> (&'static str, Option<String>) {
        let d = wd::detect(rmse, &self.inner);
        let verdict = match d.verdict {
            Verdict::Known => "KNOWN",
            Verdict::Unknown => "UNKNOWN",
        };
        (verdict, d.matched_region)
    }
}

/// The standard experiment manifest as JSON.
#[pyfunction]
#[pyo3(signature = (profile="desk", seed=0))]
fn standard_manifest(profile: &str, seed: u64) -> PyResult<String> {
    Ok(Manifest::standard(parse(profile)?, seed).to_json())
}

/// Generates every corpus of a JSON manifest into `out_dir`.
#[pyfunction]
fn generate_dataset(py: Python<'_>, manifest_json: &str, out_dir: &str) -> PyResult<Vec<String>> {
    let m = Manifest::from_json(manifest_json).map_err(value_err)?;
    let files = py.detach(|| datastore::write_dataset(&m, out_dir)).map_err(value_err)?;
    Ok(files.into_iter().map(|p| p.display().to_string()).collect())
}

#[pymodule]
fn pyspecwatch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Signal>()?;
    m.add_class::<Corpus>()?;
    m.add_class::<Classifier>()?;
    m.add_class::<Watchdog>()?;
    m.add_class::<RegionSet>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(standard_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add("CLASSIFIER_NFFT", clf::FEATURE_NFFT)?;
    m.add("SUPPORTED_NFFT", features::SUPPORTED_NFFT.to_vec())?;
    Ok(())
}
