//! Feed-forward waveform classifier over 4096-point magnitude spectra.
//!
//! Four sigmoid outputs ordered SC, SC-FDMA, OFDM, LFM, trained with
//! binary cross-entropy against one-hot targets. The predicted label is the
//! argmax, lowest index on ties.

use std::path::Path;

use thiserror::Error;

use crate::datastore::Corpus;
use crate::features::{FeatureKind, FeatureVector};
use crate::neural::{fit_with, Adamax, LayerSpec, Model, NnError, Tensor, TrainingData};
use crate::sigsynth::WaveformClass;

pub const FEATURE_NFFT: usize = 4096;
pub const HIDDEN_UNITS: [usize; 4] = [64, 100, 32, 16];
pub const DROPOUT_RATE: f64 = 0.2;
pub const NUM_CLASSES: usize = 4;
pub const PARAM_COUNT: usize = 272_536;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("classifier expects {expected} features, got {got}")]
    FeatureKind { expected: FeatureKind, got: FeatureKind },
    #[error("classifier expects {expected} feature values, got {got}")]
    FeatureLength { expected: usize, got: usize },
    #[error("{0} is not one of the four trained classes")]
    NotKnownClass(WaveformClass),
    #[error("model is not a waveform classifier: {0}")]
    Architecture(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub fn architecture() -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut inputs = FEATURE_NFFT;
    for units in HIDDEN_UNITS {
        specs.push(LayerSpec::Dense { inputs, units, l2: 0.0 });
        specs.push(LayerSpec::Relu);
        specs.push(LayerSpec::Dropout { rate: DROPOUT_RATE });
        inputs = units;
    }
    specs.push(LayerSpec::Dense {
        inputs,
        units: NUM_CLASSES,
        l2: 0.0,
    });
    specs.push(LayerSpec::Sigmoid);
    specs
}

/// One-hot target in `[SC, SCFDMA, OFDM, LFM]` order.
pub fn one_hot(class: WaveformClass) -> Result<[f32; NUM_CLASSES], ClassifierError> {
    if !class.is_known() {
        return Err(ClassifierError::NotKnownClass(class));
    }
    let mut t = [0.0; NUM_CLASSES];
    t[class.id() as usize] = 1.0;
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub probabilities: [f32; NUM_CLASSES],
    pub label: WaveformClass,
}

impl Prediction {
    fn from_outputs(p: &[f32]) -> Self {
        let mut probabilities = [0.0; NUM_CLASSES];
        probabilities.copy_from_slice(p);
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if probabilities[i] > probabilities[best] {
                best = i;
            }
        }
        Prediction {
            probabilities,
            label: WaveformClass::KNOWN[best],
        }
    }
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
            learning_rate: 0.002,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    model: Model<f32>,
}

impl Classifier {
    pub fn build(seed: u64) -> Self {
        Classifier {
            model: Model::build(&[FEATURE_NFFT], &architecture(), seed).expect("fixed architecture is valid"),
        }
    }

    pub fn from_model(model: Model<f32>) -> Result<Self, ClassifierError> {
        if model.input_shape() != [FEATURE_NFFT] {
            return Err(ClassifierError::Architecture(format!(
                "input shape {:?}",
                model.input_shape()
            )));
        }
        if model.specs() != architecture() {
            return Err(ClassifierError::Architecture("layer stack differs".into()));
        }
        Ok(Classifier { model })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClassifierError> {
        Ok(self.model.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClassifierError> {
        Self::from_model(Model::load(path)?)
    }

    pub fn predict(&self, feature: &FeatureVector) -> Result<Prediction, ClassifierError> {
        if feature.kind != FeatureKind::FftMag {
            return Err(ClassifierError::FeatureKind {
                expected: FeatureKind::FftMag,
                got: feature.kind,
            });
        }
        self.predict_values(&feature.values)
    }

    /// Prediction from raw normalized magnitude values.
    pub fn predict_values(&self, values: &[f32]) -> Result<Prediction, ClassifierError> {
        check_len(values.len())?;
        let x = Tensor::new(vec![1, FEATURE_NFFT], values.to_vec())?;
        let y = self.model.predict(&x)?;
        Ok(Prediction::from_outputs(y.data()))
    }

    /// Predictions for every record of an FFT-magnitude corpus, in order.
    pub fn predict_corpus(&self, corpus: &Corpus) -> Result<Vec<Prediction>, ClassifierError> {
        check_corpus(corpus)?;
        const BATCH: usize = 256;
        let mut out = Vec::with_capacity(corpus.len());
        for start in (0..corpus.len()).step_by(BATCH) {
            let end = (start + BATCH).min(corpus.len());
            let data = corpus.features[start * FEATURE_NFFT..end * FEATURE_NFFT].to_vec();
            let y = self.model.predict(&Tensor::new(vec![end - start, FEATURE_NFFT], data)?)?;
            out.extend(y.data().chunks_exact(NUM_CLASSES).map(Prediction::from_outputs));
        }
        Ok(out)
    }

    /// Trains in place and returns the per-epoch loss history.
    pub fn train(
        &mut self,
        corpus: &Corpus,
        config: &TrainConfig,
        on_epoch: impl FnMut(usize, f64),
    ) -> Result<Vec<f64>, ClassifierError> {
        check_corpus(corpus)?;
        if let Some(m) = corpus.meta.iter().find(|m| !m.class.is_known()) {
            return Err(ClassifierError::NotKnownClass(m.class));
        }
        let data = LabeledCorpus(corpus);
        let mut opt = Adamax::new(config.learning_rate);
        Ok(fit_with(
            &mut self.model,
            &data,
            config.epochs,
            config.batch_size,
            &mut opt,
            config.seed,
            on_epoch,
        )?)
    }
}

fn check_len(n: usize) -> Result<(), ClassifierError> {
    if n != FEATURE_NFFT {
        return Err(ClassifierError::FeatureLength {
            expected: FEATURE_NFFT,
            got: n,
        });
    }
    Ok(())
}

fn check_corpus(corpus: &Corpus) -> Result<(), ClassifierError> {
    if corpus.kind != FeatureKind::FftMag {
        return Err(ClassifierError::FeatureKind {
            expected: FeatureKind::FftMag,
            got: corpus.kind,
        });
    }
    check_len(corpus.dim)
}

struct LabeledCorpus<'a>(&'a Corpus);

impl TrainingData<f32> for LabeledCorpus<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![FEATURE_NFFT]
    }

    fn target_len(&self) -> usize {
        NUM_CLASSES
    }

    fn write_input(&self, index: usize, out: &mut [f32]) {
        out.copy_from_slice(self.0.feature(index));
    }

    fn write_target(&self, index: usize, out: &mut [f32]) {
        out.copy_from_slice(&one_hot(self.0.meta[index].class).expect("checked before training"));
    }
}
