//! Evaluation protocol: accuracy against SNR, impairment sweeps, confusion
//! counts and detector scoring, with CSV and JSON export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{Classifier, ClassifierError, FEATURE_NFFT};
use crate::datastore::{Ablation, AblationAxis, Corpus, RecordMeta};
use crate::features::FeatureKind;
use crate::sigsynth::WaveformClass;
use crate::watchdog::{detect, RegionSet, Verdict, Watchdog, WatchdogError};

/// Reporting grid: 5 dB steps from −20 to +20.
pub const SNR_BUCKETS: [i8; 9] = [-20, -15, -10, -5, 0, 5, 10, 15, 20];

pub const VERDICT_LABELS: [&str; 2] = ["KNOWN", "UNKNOWN"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("expected {expected} features at nfft {nfft}, corpus holds {got} at {dim}")]
    FeatureKind {
        expected: FeatureKind,
        nfft: usize,
        got: FeatureKind,
        dim: usize,
    },
    #[error("regions were calibrated at nfft {regions}, corpus has nfft {corpus}")]
    NfftMismatch { regions: usize, corpus: usize },
    #[error("sweep corpus varies {got}, expected {expected}")]
    AxisMismatch { expected: AblationAxis, got: String },
    #[error("{expected} predictions expected, got {got}")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Watchdog(#[from] WatchdogError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Nearest grid point for a whole-dB SNR; `None` for noise-free records.
pub fn snr_bucket(snr_db: Option<i8>) -> Option<i8> {
    snr_db.map(|s| ((f64::from(s) / 5.0).round() * 5.0).clamp(-20.0, 20.0) as i8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Classifier,
    Detector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub snr_db: Option<i8>,
    pub class: WaveformClass,
    pub n: u64,
    pub correct: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub class: WaveformClass,
    pub snr_db: Option<i8>,
    pub rmse: f64,
}

/// Confusion counts: one row per true class, one column per predicted label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub rows: Vec<WaveformClass>,
    pub columns: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    fn new(rows: Vec<WaveformClass>, columns: Vec<String>) -> Self {
        let counts = vec![vec![0; columns.len()]; rows.len()];
        Confusion { rows, columns, counts }
    }

    pub fn row_total(&self, class: WaveformClass) -> u64 {
        self.rows
            .iter()
            .position(|c| *c == class)
            .map_or(0, |i| self.counts[i].iter().sum())
    }

    /// Unordered off-diagonal pair with the most confusions, as
    /// `(a, b, count)` with `a` before `b` in row order.
    pub fn largest_off_diagonal_pair(&self) -> Option<(WaveformClass, WaveformClass, u64)> {
        let mut best: Option<(WaveformClass, WaveformClass, u64)> = None;
        for i in 0..self.rows.len() {
            for j in i + 1..self.rows.len() {
                let name_i = self.rows[i].name();
                let name_j = self.rows[j].name();
                let col = |name: &str| self.columns.iter().position(|c| c == name);
                let (Some(ci), Some(cj)) = (col(name_i), col(name_j)) else {
                    continue;
                };
                let n = self.counts[i][cj] + self.counts[j][ci];
                if best.is_none_or(|b| n > b.2) {
                    best = Some((self.rows[i], self.rows[j], n));
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: ReportKind,
    /// Sorted by SNR bucket, then class.
    pub rows: Vec<AccuracyRow>,
    pub confusion: Confusion,
    pub rmse: Vec<RmseRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn empty(kind: ReportKind) -> Self {
        EvalReport {
            kind,
            rows: Vec::new(),
            confusion: Confusion::new(Vec::new(), Vec::new()),
            rmse: Vec::new(),
            ablation: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn buckets(&self) -> Vec<Option<i8>> {
        let mut b: Vec<_> = self.rows.iter().map(|r| r.snr_db).collect();
        b.dedup();
        b
    }

    /// Pooled accuracy over all classes in a bucket.
    pub fn overall_accuracy(&self, snr_db: Option<i8>) -> Option<f64> {
        pooled(self.rows.iter().filter(|r| r.snr_db == snr_db))
    }

    /// Pooled accuracy over every bucket at or above `min_snr_db`.
    pub fn accuracy_at_least(&self, min_snr_db: i8, class: Option<WaveformClass>) -> Option<f64> {
        pooled(
            self.rows
                .iter()
                .filter(|r| r.snr_db.is_none_or(|s| s >= min_snr_db))
                .filter(|r| class.is_none_or(|c| c == r.class)),
        )
    }

    /// Mean of the per-class accuracies in a bucket.
    pub fn balanced_accuracy(&self, snr_db: Option<i8>) -> Option<f64> {
        let accs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.snr_db == snr_db && r.n > 0)
            .map(|r| r.accuracy)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Fraction of unknown-class records rejected in a bucket.
    pub fn unknown_rejection(&self, snr_db: Option<i8>) -> Option<f64> {
        pooled(self.rows.iter().filter(|r| r.snr_db == snr_db && !r.class.is_known()))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("snr_db,class,n,correct,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                snr_text(r.snr_db),
                r.class,
                r.n,
                r.correct,
                r.accuracy
            );
        }
        s
    }

    pub fn rmse_csv(&self) -> String {
        let mut s = String::from("class,snr_db,rmse\n");
        for r in &self.rmse {
            let _ = writeln!(s, "{},{},{}", r.class, snr_text(r.snr_db), r.rmse);
        }
        s
    }

    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("class");
        for c in &self.confusion.columns {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (class, counts) in self.confusion.rows.iter().zip(&self.confusion.counts) {
            let _ = write!(s, "{class}");
            for n in counts {
                let _ = write!(s, ",{n}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(text)?)
    }
}

fn snr_text(snr: Option<i8>) -> String {
    snr.map_or_else(|| "clean".to_string(), |s| s.to_string())
}

fn pooled<'a>(rows: impl Iterator<Item = &'a AccuracyRow>) -> Option<f64> {
    let (n, c) = rows.fold((0, 0), |(n, c), r| (n + r.n, c + r.correct));
    (n > 0).then(|| c as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown report format `{s}` (expected csv|json)")),
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    path.with_file_name(format!("{stem}_{suffix}.{ext}"))
}

/// Writes a report and returns every file created. JSON goes to a single
/// file; CSV writes the accuracy table at `path` plus `_confusion` and, for
/// detector reports, `_rmse` siblings.
pub fn export_report(report: &EvalReport, path: impl AsRef<Path>, format: Format) -> Result<Vec<PathBuf>, EvalError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    match format {
        Format::Json => {
            fs::write(path, report.to_json())?;
            Ok(vec![path.to_path_buf()])
        }
        Format::Csv => {
            fs::write(path, report.to_csv())?;
            let confusion = sibling(path, "confusion");
            fs::write(&confusion, report.confusion_csv())?;
            let mut out = vec![path.to_path_buf(), confusion];
            if report.kind == ReportKind::Detector {
                let rmse = sibling(path, "rmse");
                fs::write(&rmse, report.rmse_csv())?;
                out.push(rmse);
            }
            Ok(out)
        }
    }
}

fn accuracy_rows(tally: BTreeMap<(Option<i8>, WaveformClass), (u64, u64)>) -> Vec<AccuracyRow> {
    tally
        .into_iter()
        .map(|((snr_db, class), (n, correct))| AccuracyRow {
            snr_db,
            class,
            n,
            correct,
            accuracy: correct as f64 / n as f64,
        })
        .collect()
}

/// Scores classifier labels against record metadata. Records of unknown
/// classes are ignored since the classifier cannot name them.
pub fn score_classifications(meta: &[RecordMeta], labels: &[WaveformClass]) -> Result<EvalReport, EvalError> {
    if meta.len() != labels.len() {
        return Err(EvalError::Length {
            expected: meta.len(),
            got: labels.len(),
        });
    }
    let mut confusion = Confusion::new(
        WaveformClass::KNOWN.to_vec(),
        WaveformClass::KNOWN.iter().map(|c| c.name().to_string()).collect(),
    );
    let mut tally: BTreeMap<_, (u64, u64)> = BTreeMap::new();
    for (m, label) in meta.iter().zip(labels) {
        if !m.class.is_known() {
            continue;
        }
        let e = tally.entry((snr_bucket(m.snr_db), m.class)).or_default();
        e.0 += 1;
        e.1 += u64::from(*label == m.class);
        if label.is_known() {
            confusion.counts[m.class.id() as usize][label.id() as usize] += 1;
        }
    }
    Ok(EvalReport {
        kind: ReportKind::Classifier,
        rows: accuracy_rows(tally),
        confusion,
        rmse: Vec::new(),
        ablation: None,
        metadata: BTreeMap::new(),
    })
}

fn check_fft(corpus: &Corpus) -> Result<(), EvalError> {
    if corpus.kind != FeatureKind::FftMag || corpus.dim != FEATURE_NFFT {
        return Err(EvalError::FeatureKind {
            expected: FeatureKind::FftMag,
            nfft: FEATURE_NFFT,
            got: corpus.kind,
            dim: corpus.dim,
        });
    }
    Ok(())
}

pub fn eval_classifier(classifier: &Classifier, corpus: &Corpus) -> Result<EvalReport, EvalError> {
    check_fft(corpus)?;
    let known = corpus.filter(|m| m.class.is_known());
    let labels: Vec<_> = classifier.predict_corpus(&known)?.into_iter().map(|p| p.label).collect();
    score_classifications(&known.meta, &labels)
}

/// One report per sweep point, in the given order. Every corpus must vary
/// the requested axis.
pub fn eval_ablation(
    classifier: &Classifier,
    axis: AblationAxis,
    sweep: &[(Ablation, &Corpus)],
) -> Result<Vec<EvalReport>, EvalError> {
    sweep
        .iter()
        .map(|(ablation, corpus)| {
            if ablation.axis != axis {
                return Err(EvalError::AxisMismatch {
                    expected: axis,
                    got: ablation.axis.to_string(),
                });
            }
            let mut report = eval_classifier(classifier, corpus)?;
            report.ablation = Some(*ablation);
            Ok(report)
        })
        .collect()
}

/// Scores RMSE values against a region set: known classes are correct on
/// a KNOWN verdict, unknown classes on UNKNOWN.
pub fn score_detections(meta: &[RecordMeta], rmse: &[f64], regions: &RegionSet) -> Result<EvalReport, EvalError> {
    if meta.len() != rmse.len() {
        return Err(EvalError::Length {
            expected: meta.len(),
            got: rmse.len(),
        });
    }
    let mut confusion = Confusion::new(
        WaveformClass::ALL.to_vec(),
        VERDICT_LABELS.iter().map(|s| s.to_string()).collect(),
    );
    let mut tally: BTreeMap<_, (u64, u64)> = BTreeMap::new();
    let mut dump = Vec::with_capacity(meta.len());
    for (m, r) in meta.iter().zip(rmse) {
        let verdict = detect(*r, regions).verdict;
        let correct = (verdict == Verdict::Known) == m.class.is_known();
        let e = tally.entry((snr_bucket(m.snr_db), m.class)).or_default();
        e.0 += 1;
        e.1 += u64::from(correct);
        confusion.counts[m.class.id() as usize][usize::from(verdict == Verdict::Unknown)] += 1;
        dump.push(RmseRow {
            class: m.class,
            snr_db: m.snr_db,
            rmse: *r,
        });
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("design".to_string(), regions.design.name().to_string());
    Ok(EvalReport {
        kind: ReportKind::Detector,
        rows: accuracy_rows(tally),
        confusion,
        rmse: dump,
        ablation: None,
        metadata,
    })
}

pub fn eval_detector(watchdog: &Watchdog, regions: &RegionSet, corpus: &Corpus) -> Result<EvalReport, EvalError> {
    if corpus.kind != FeatureKind::PsdDb || corpus.dim != watchdog.nfft() {
        return Err(EvalError::FeatureKind {
            expected: FeatureKind::PsdDb,
            nfft: watchdog.nfft(),
            got: corpus.kind,
            dim: corpus.dim,
        });
    }
    if let Some(n) = regions.nfft.filter(|n| *n != corpus.dim) {
        return Err(EvalError::NfftMismatch {
            regions: n,
            corpus: corpus.dim,
        });
    }
    let rmse = watchdog.rmse_corpus(corpus)?;
    score_detections(&corpus.meta, &rmse, regions)
}
