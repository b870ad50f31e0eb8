use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use specwatch::classifier::{self, Classifier};
use specwatch::datastore::{AblationAxis, CorpusSpec, Dataset, FeatureConfig, Manifest, Purpose};
use specwatch::evalharness::{self, export_report, Format};
use specwatch::features::{extract, FeatureKind};
use specwatch::sigsynth::{IqSignal, Profile};
use specwatch::watchdog::{self, detect, RegionDesign, RegionSet, Verdict, Watchdog};

#[derive(Parser)]
#[command(name = "specwatch", version, about = "Spectrum monitoring: corpora, classifier, unknown-signal watchdog")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the standard experiment manifest.
    Manifest {
        #[arg(long, default_value = "desk")]
        profile: ProfileArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate every corpus of a manifest into a dataset directory.
    Gen {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        profile: Option<ProfileArg>,
        #[arg(long)]
        seed: Option<u64>,
    },
    TrainClassifier {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.002)]
        lr: f64,
    },
    TrainWatchdog {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_nfft)]
        nfft: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = watchdog::DEFAULT_LEARNING_RATE)]
        lr: f64,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Derive RMSE regions from the watchdog training corpus.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        design: RegionDesign,
        #[arg(long)]
        out: PathBuf,
    },
    EvalClassifier {
        #[command(flatten)]
        eval: EvalArgs,
    },
    EvalAblation {
        #[command(flatten)]
        eval: EvalArgs,
        /// Restrict to one sweep axis.
        #[arg(long)]
        axis: Option<AblationAxis>,
    },
    EvalDetector {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        regions: PathBuf,
    },
    /// Watchdog first; the classifier only runs on KNOWN verdicts.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        watchdog: PathBuf,
        #[arg(long)]
        regions: PathBuf,
        #[arg(long)]
        iq: PathBuf,
        /// Sidecar metadata; defaults to the IQ path with a `.json` extension.
        #[arg(long)]
        meta: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Corpus name inside the test dataset; picked from the manifest if omitted.
    #[arg(long)]
    corpus: Option<String>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
        }
    }
}

fn parse_nfft(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if specwatch::features::SUPPORTED_NFFT.contains(&n) => Ok(n),
        _ => Err(format!("nfft must be one of {:?}", specwatch::features::SUPPORTED_NFFT)),
    }
}

enum Failure {
    Data(String),
    Model(String),
}

impl Failure {
    /// Exit status; 1 is reserved for usage errors reported by the parser.
    fn code(&self) -> u8 {
        match self {
            Failure::Data(_) => 2,
            Failure::Model(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Data(m) | Failure::Model(m) => m,
        }
    }
}

fn data_err<E: Display>(context: impl Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Data(format!("{context}: {e}"))
}

fn model_err<E: Display>(context: impl Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Model(format!("{context}: {e}"))
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Manifest { profile, seed } => {
            println!("{}", Manifest::standard(profile.into(), seed).to_json());
            Ok(())
        }
        Command::Gen {
            manifest,
            out,
            profile,
            seed,
        } => gen(&manifest, &out, profile, seed),
        Command::TrainClassifier {
            data,
            out,
            epochs,
            batch,
            seed,
            lr,
        } => {
            let config = classifier::TrainConfig {
                epochs,
                batch_size: batch,
                learning_rate: lr,
                seed,
            };
            train_classifier(&data, &out, &config)
        }
        Command::TrainWatchdog {
            data,
            nfft,
            out,
            lr,
            epochs,
            batch,
            seed,
        } => {
            let config = watchdog::TrainConfig {
                epochs,
                batch_size: batch,
                learning_rate: lr,
                seed,
            };
            train_watchdog(&data, nfft, &out, &config)
        }
        Command::Calibrate {
            model,
            data,
            design,
            out,
        } => calibrate(&model, &data, design, &out),
        Command::EvalClassifier { eval } => eval_classifier(&eval),
        Command::EvalAblation { eval, axis } => eval_ablation(&eval, axis),
        Command::EvalDetector { eval, regions } => eval_detector(&eval, &regions),
        Command::Classify {
            model,
            watchdog,
            regions,
            iq,
            meta,
        } => classify(&model, &watchdog, &regions, &iq, meta.as_deref()),
    }
}

fn gen(manifest: &Path, out: &Path, profile: Option<ProfileArg>, seed: Option<u64>) -> Outcome {
    let mut m = Manifest::load(manifest).map_err(data_err(manifest.display()))?;
    if let Some(p) = profile {
        m.profile = p.into();
    }
    if let Some(s) = seed {
        m.master_seed = s;
    }
    m.validate().map_err(data_err(manifest.display()))?;
    for c in &m.corpora {
        eprintln!("{}: {} signals", c.name, m.total(c));
    }
    let files = specwatch::datastore::write_dataset(&m, out).map_err(data_err(out.display()))?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn open(dir: &Path) -> Result<Dataset, Failure> {
    Dataset::open(dir).map_err(data_err(dir.display()))
}

/// The named corpus, or the first one of `purpose` carrying `feature`
/// that passes `keep`.
fn pick<'a>(
    ds: &'a Dataset,
    name: Option<&str>,
    purpose: Purpose,
    feature: FeatureConfig,
    keep: impl Fn(&CorpusSpec) -> bool,
) -> Result<&'a CorpusSpec, Failure> {
    match name {
        Some(n) => {
            let c = ds.manifest.corpus(n).map_err(data_err(ds.dir.display()))?;
            if !c.features.contains(&feature) {
                return Err(Failure::Data(format!(
                    "corpus `{n}` has no {} features at nfft {}",
                    feature.kind, feature.nfft
                )));
            }
            Ok(c)
        }
        None => ds.find(purpose, feature).into_iter().find(|c| keep(c)).ok_or_else(|| {
            Failure::Data(format!(
                "{}: no {purpose:?} corpus with {} features at nfft {}",
                ds.dir.display(),
                feature.kind,
                feature.nfft
            ))
        }),
    }
}

const FFT: FeatureConfig = FeatureConfig {
    kind: FeatureKind::FftMag,
    nfft: classifier::FEATURE_NFFT,
};

fn psd(nfft: usize) -> FeatureConfig {
    FeatureConfig {
        kind: FeatureKind::PsdDb,
        nfft,
    }
}

fn train_classifier(dir: &Path, out: &Path, config: &classifier::TrainConfig) -> Outcome {
    let ds = open(dir)?;
    let spec = pick(&ds, None, Purpose::ClassifierTrain, FFT, |_| true)?;
    let corpus = ds.load(&spec.name, FFT).map_err(data_err(&spec.name))?;
    eprintln!("training classifier on `{}` ({} records)", spec.name, corpus.len());
    let mut clf = Classifier::build(config.seed);
    clf.train(&corpus, config, |e, loss| eprintln!("epoch {:>3}  loss {loss:.6}", e + 1))
        .map_err(data_err(&spec.name))?;
    clf.save(out).map_err(model_err(out.display()))
}

fn train_watchdog(dir: &Path, nfft: usize, out: &Path, config: &watchdog::TrainConfig) -> Outcome {
    let ds = open(dir)?;
    let feature = psd(nfft);
    let spec = pick(&ds, None, Purpose::WatchdogTrain, feature, |_| true)?;
    let corpus = ds.load(&spec.name, feature).map_err(data_err(&spec.name))?;
    eprintln!("training watchdog on `{}` ({} records, nfft {nfft})", spec.name, corpus.len());
    let mut wd = Watchdog::build(nfft, config.seed).map_err(model_err("watchdog"))?;
    wd.train(&corpus, config, |e, loss| eprintln!("epoch {:>3}  loss {loss:.6}", e + 1))
        .map_err(data_err(&spec.name))?;
    wd.save(out).map_err(model_err(out.display()))
}

fn load_watchdog(path: &Path) -> Result<Watchdog, Failure> {
    Watchdog::load(path).map_err(model_err(path.display()))
}

fn load_classifier(path: &Path) -> Result<Classifier, Failure> {
    Classifier::load(path).map_err(model_err(path.display()))
}

fn load_regions(path: &Path) -> Result<RegionSet, Failure> {
    RegionSet::load(path).map_err(model_err(path.display()))
}

fn calibrate(model: &Path, dir: &Path, design: RegionDesign, out: &Path) -> Outcome {
    let wd = load_watchdog(model)?;
    let ds = open(dir)?;
    let feature = psd(wd.nfft());
    let spec = pick(&ds, None, Purpose::WatchdogTrain, feature, |_| true)?;
    let corpus = ds.load(&spec.name, feature).map_err(data_err(&spec.name))?;
    let set = wd.calibrate(&corpus, design).map_err(data_err(&spec.name))?;
    set.save(out).map_err(data_err(out.display()))?;
    println!("{}", set.to_json());
    Ok(())
}

fn write_report(report: &evalharness::EvalReport, path: &Path, format: Format) -> Outcome {
    for f in export_report(report, path, format).map_err(data_err(path.display()))? {
        println!("{}", f.display());
    }
    Ok(())
}

fn eval_classifier(args: &EvalArgs) -> Outcome {
    let clf = load_classifier(&args.model)?;
    let ds = open(&args.test)?;
    let spec = pick(&ds, args.corpus.as_deref(), Purpose::Test, FFT, |c| c.ablation.is_none())?;
    let corpus = ds.load(&spec.name, FFT).map_err(data_err(&spec.name))?;
    let mut report = evalharness::eval_classifier(&clf, &corpus).map_err(data_err(&spec.name))?;
    annotate(&mut report, args, &ds, &spec.name);
    write_report(&report, &args.report, args.format)
}

fn eval_ablation(args: &EvalArgs, axis: Option<AblationAxis>) -> Outcome {
    let clf = load_classifier(&args.model)?;
    let ds = open(&args.test)?;
    let sweep: Vec<&CorpusSpec> = ds
        .find(Purpose::Test, FFT)
        .into_iter()
        .filter(|c| c.ablation.is_some_and(|a| axis.is_none_or(|x| a.axis == x)))
        .filter(|c| args.corpus.as_deref().is_none_or(|n| n == c.name))
        .collect();
    if sweep.is_empty() {
        return Err(Failure::Data(format!("{}: no matching sweep corpora", args.test.display())));
    }
    for spec in sweep {
        let ablation = spec.ablation.expect("filtered");
        let corpus = ds.load(&spec.name, FFT).map_err(data_err(&spec.name))?;
        let mut reports =
            evalharness::eval_ablation(&clf, ablation.axis, &[(ablation, &corpus)]).map_err(data_err(&spec.name))?;
        let mut report = reports.remove(0);
        annotate(&mut report, args, &ds, &spec.name);
        let stem = args.report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let ext = match args.format {
            Format::Csv => "csv",
            Format::Json => "json",
        };
        write_report(&report, &args.report.with_file_name(format!("{stem}_{}.{ext}", spec.name)), args.format)?;
    }
    Ok(())
}

fn eval_detector(args: &EvalArgs, regions: &Path) -> Outcome {
    let wd = load_watchdog(&args.model)?;
    let set = load_regions(regions)?;
    let ds = open(&args.test)?;
    let feature = psd(wd.nfft());
    let preferred = ds
        .find(Purpose::Test, feature)
        .into_iter()
        .any(|c| c.name == "detector_test_awgn")
        .then_some("detector_test_awgn");
    let name = args.corpus.as_deref().or(preferred);
    let spec = pick(&ds, name, Purpose::Test, feature, |c| c.ablation.is_none())?;
    let corpus = ds.load(&spec.name, feature).map_err(data_err(&spec.name))?;
    let mut report = evalharness::eval_detector(&wd, &set, &corpus).map_err(data_err(&spec.name))?;
    annotate(&mut report, args, &ds, &spec.name);
    report.metadata.insert("regions".into(), regions.display().to_string());
    write_report(&report, &args.report, args.format)
}

fn annotate(report: &mut evalharness::EvalReport, args: &EvalArgs, ds: &Dataset, corpus: &str) {
    let md = &mut report.metadata;
    md.insert("model".into(), args.model.display().to_string());
    md.insert("corpus".into(), corpus.to_string());
    md.insert("master_seed".into(), ds.manifest.master_seed.to_string());
    md.insert("profile".into(), format!("{:?}", ds.manifest.profile).to_lowercase());
}

#[derive(Deserialize)]
struct Sidecar {
    sample_rate_hz: f64,
}

#[derive(Serialize)]
struct Classification {
    rmse: f64,
    verdict: Verdict,
    region: Option<String>,
    class: Option<String>,
    probabilities: Option<[f32; classifier::NUM_CLASSES]>,
}

fn read_iq(path: &Path, meta: Option<&Path>) -> Result<IqSignal, Failure> {
    let bytes = fs::read(path).map_err(data_err(path.display()))?;
    if bytes.is_empty() || bytes.len() % 8 != 0 {
        return Err(Failure::Data(format!(
            "{}: {} bytes is not a whole number of f32 I/Q pairs",
            path.display(),
            bytes.len()
        )));
    }
    let meta_path = meta.map_or_else(|| path.with_extension("json"), Path::to_path_buf);
    let text = fs::read_to_string(&meta_path).map_err(data_err(meta_path.display()))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(data_err(meta_path.display()))?;
    if !(sidecar.sample_rate_hz > 0.0 && sidecar.sample_rate_hz.is_finite()) {
        return Err(Failure::Data(format!("{}: sample_rate_hz must be positive", meta_path.display())));
    }
    let f = |b: &[u8]| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let samples: Vec<Complex64> = bytes.chunks_exact(8).map(|p| Complex64::new(f(&p[..4]), f(&p[4..]))).collect();
    if samples.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
        return Err(Failure::Data(format!("{}: non-finite samples", path.display())));
    }
    Ok(IqSignal::new(samples, sidecar.sample_rate_hz))
}

fn classify(model: &Path, wd_path: &Path, regions: &Path, iq: &Path, meta: Option<&Path>) -> Outcome {
    let wd = load_watchdog(wd_path)?;
    let clf = load_classifier(model)?;
    let set = load_regions(regions)?;
    if let Some(n) = set.nfft.filter(|n| *n != wd.nfft()) {
        return Err(Failure::Model(format!(
            "regions calibrated at nfft {n}, watchdog uses {}",
            wd.nfft()
        )));
    }
    let sig = read_iq(iq, meta)?;
    let spectrum = extract(&sig, FeatureKind::PsdDb, wd.nfft()).map_err(data_err(iq.display()))?;
    let rmse = wd.rmse(&spectrum).map_err(model_err(wd_path.display()))?;
    let det = detect(rmse, &set);
    let mut out = Classification {
        rmse,
        verdict: det.verdict,
        region: det.matched_region,
        class: None,
        probabilities: None,
    };
    if det.verdict == Verdict::Known {
        let fft = extract(&sig, FeatureKind::FftMag, classifier::FEATURE_NFFT).map_err(data_err(iq.display()))?;
        let p = clf.predict(&fft).map_err(model_err(model.display()))?;
        out.class = Some(p.label.to_string());
        out.probabilities = Some(p.probabilities);
    }
    println!("{}", serde_json::to_string(&out).expect("serializable"));
    Ok(())
}
