use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use omission_audit::agreement::{pair_and_score, read_agreement, similarity_histogram, write_agreement};
use omission_audit::attribution::{
    attribute_corpus_to_file, read_attributions, AttributeOptions, AttributionScope,
};
use omission_audit::backends::conformance::{run_suite, ConformanceProbe};
use omission_audit::backends::{load_backend, BackendDescriptor, BackendKind, ModelInput, RemoteBackend};
use omission_audit::calibration::{
    calibrate, classify_different, read_annotations, sample_for_annotation, CalibrateOptions,
    CalibrationResult, SamplePlan,
};
use omission_audit::corpus::{load_corpus, Corpus, Manifest};
use omission_audit::report::{build_summary, render_heatmaps};
use omission_audit::{jsonl, Execution};

mod serve;

#[derive(Parser)]
#[command(name = "omission-audit", version, about = "Word-omission agreement audit for text classifiers")]
struct Cli {
    /// Run every stage single-threaded.
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute omission attribution vectors for every corpus instance.
    Attribute(AttributeArgs),
    /// Pair main and biased attribution files into an agreement file.
    Compare(CompareArgs),
    /// Equal-width histogram of defined similarities.
    Histogram(HistogramArgs),
    /// Draw annotation tasks across the similarity scale.
    Sample(SampleArgs),
    /// Tune the similar/different threshold from annotations.
    Calibrate(CalibrateArgs),
    /// Split easy instances at a threshold.
    Classify(ClassifyArgs),
    /// Audit summary as JSON and HTML.
    Report(ReportArgs),
    /// Token heatmap pages for selected instances.
    Render(RenderArgs),
    /// Serve annotation tasks over HTTP.
    ServeAnnotation(ServeArgs),
    /// Probe a remote scoring server for protocol conformance.
    CheckRemote(CheckRemoteArgs),
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Defaults to `<corpus>.manifest.toml`, then `manifest.toml` beside the corpus.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct AttributeArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    backend: PathBuf,
    #[arg(long, default_value = "full")]
    scope: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    fail_fast: bool,
    /// Write per-instance failures here as JSONL.
    #[arg(long)]
    failures: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    main: PathBuf,
    #[arg(long)]
    biased: PathBuf,
    #[arg(long, default_value = "full")]
    scope: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HistogramArgs {
    #[arg(long)]
    agreement: PathBuf,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    agreement: PathBuf,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Items per bin.
    #[arg(long, conflicts_with = "total")]
    per_bin: Option<usize>,
    /// Total budget, split evenly across bins.
    #[arg(long)]
    total: Option<usize>,
    #[arg(long, default_value_t = 40)]
    overlap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "a1,a2")]
    annotators: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    agreement: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Fraction of labels held out from tuning.
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long, conflicts_with = "calibration")]
    threshold: Option<f64>,
    #[arg(long)]
    calibration: Option<PathBuf>,
}

impl ThresholdArgs {
    /// (threshold, classifier F1 when known)
    fn resolve(&self) -> Result<(f64, Option<f64>)> {
        match (&self.threshold, &self.calibration) {
            (Some(t), _) => {
                if !t.is_finite() {
                    bail!("--threshold must be finite");
                }
                Ok((*t, None))
            }
            (None, Some(p)) => {
                let c = CalibrationResult::load(p)
                    .with_context(|| format!("reading calibration {}", p.display()))?;
                Ok((c.threshold, Some(c.f1_negative)))
            }
            (None, None) => bail!("one of --threshold or --calibration is required"),
        }
    }
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    agreement: PathBuf,
    #[command(flatten)]
    threshold: ThresholdArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    agreement: PathBuf,
    #[command(flatten)]
    threshold: ThresholdArgs,
    /// Setting name shown in the table, e.g. `MNLI-Partial`.
    #[arg(long)]
    setting: String,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long)]
    json: PathBuf,
    #[arg(long)]
    html: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    main: PathBuf,
    #[arg(long)]
    biased: PathBuf,
    #[arg(long)]
    agreement: Option<PathBuf>,
    /// Instance ids to render; defaults to the `different` set when a
    /// threshold is given.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    main: PathBuf,
    #[arg(long)]
    biased: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// 0 picks a free port; the bound address is printed on stdout.
    #[arg(long, default_value_t = 8765)]
    port: u16,
    #[arg(long)]
    hide_predictions: bool,
}

#[derive(Args)]
struct CheckRemoteArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Descriptor of kind `remote`.
    #[arg(long)]
    backend: PathBuf,
    /// Segments the server is configured to ignore.
    #[arg(long, value_delimiter = ',')]
    ignored: Vec<String>,
    #[arg(long, default_value_t = 8)]
    probes: usize,
}

fn resolve_manifest(args: &CorpusArgs) -> Result<PathBuf> {
    if let Some(m) = &args.manifest {
        return Ok(m.clone());
    }
    let sibling = args.corpus.with_extension("manifest.toml");
    if sibling.exists() {
        return Ok(sibling);
    }
    let dir_manifest = args
        .corpus
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("manifest.toml");
    if dir_manifest.exists() {
        return Ok(dir_manifest);
    }
    bail!(
        "no manifest given and neither {} nor {} exists",
        sibling.display(),
        dir_manifest.display()
    )
}

fn load(args: &CorpusArgs) -> Result<Corpus> {
    let manifest_path = resolve_manifest(args)?;
    let manifest = Manifest::load(&manifest_path)
        .with_context(|| format!("reading manifest {}", manifest_path.display()))?;
    let corpus = load_corpus(&args.corpus, &manifest)
        .with_context(|| format!("reading corpus {}", args.corpus.display()))?;
    log::info!("{}", corpus.summary());
    Ok(corpus)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let execution = if cli.serial {
        Execution::Serial
    } else {
        Execution::default()
    };
    match cli.command {
        Command::Attribute(a) => {
            let corpus = load(&a.corpus)?;
            let scope: AttributionScope = a.scope.parse()?;
            let backend = load_backend(&a.backend)
                .with_context(|| format!("loading backend {}", a.backend.display()))?;
            let opts = AttributeOptions {
                execution,
                fail_fast: a.fail_fast,
                ..Default::default()
            };
            let report = attribute_corpus_to_file(backend.as_ref(), &corpus, &scope, &opts, &a.out)?;
            eprintln!(
                "attributed {} of {} instances with `{}` ({} failed)",
                report.written,
                corpus.len(),
                backend.id(),
                report.failures.len()
            );
            if let Some(p) = &a.failures {
                jsonl::write(p, &report.failures)?;
            }
            if !report.failures.is_empty() {
                bail!("{} instances failed", report.failures.len());
            }
        }
        Command::Compare(a) => {
            let scope: AttributionScope = a.scope.parse()?;
            let main = read_attributions(&a.main)?;
            let biased = read_attributions(&a.biased)?;
            let pairing = pair_and_score(&main, &biased, &scope, execution)?;
            write_agreement(&a.out, &pairing.records)?;
            eprintln!(
                "{} paired, {} easy, {} only in main, {} only in biased",
                pairing.records.len(),
                pairing.easy_count(),
                pairing.only_main.len(),
                pairing.only_biased.len()
            );
            let mut flags: Vec<_> = pairing.degenerate_counts().into_iter().collect();
            flags.sort_by_key(|(f, _)| format!("{f:?}"));
            for (flag, n) in flags {
                eprintln!("excluded easy instances ({flag:?}): {n}");
            }
        }
        Command::Histogram(a) => {
            let records = read_agreement(&a.agreement)?;
            let hist = similarity_histogram(&records, a.bins)?;
            match &a.out {
                Some(p) => write_json(p, &hist)?,
                None => {
                    for (i, c) in hist.counts.iter().enumerate() {
                        println!("{:>8.4} {:>8.4} {c}", hist.edges[i], hist.edges[i + 1]);
                    }
                }
            }
        }
        Command::Sample(a) => {
            let records = read_agreement(&a.agreement)?;
            let quota = match (a.per_bin, a.total) {
                (Some(q), _) => q,
                (None, Some(t)) => SamplePlan::for_total(t, a.bins).quota,
                (None, None) => bail!("one of --per-bin or --total is required"),
            };
            let plan = SamplePlan {
                bins: a.bins,
                quota,
                overlap: a.overlap,
                seed: a.seed,
                annotators: a.annotators.clone(),
            };
            let list = sample_for_annotation(&records, &plan)?;
            jsonl::write(&a.out, &list.tasks)?;
            eprintln!(
                "{} tasks ({} shared) across {} bins",
                list.tasks.len(),
                list.tasks.iter().filter(|t| t.overlap).count(),
                list.per_bin.len()
            );
        }
        Command::Calibrate(a) => {
            let records = read_agreement(&a.agreement)?;
            let annotations = read_annotations(&a.annotations)?;
            let opts = CalibrateOptions {
                holdout: a.holdout,
                seed: a.seed,
            };
            let result = calibrate(&records, &annotations, &opts)?;
            result.save(&a.out)?;
            eprintln!(
                "threshold {:.6}  F1(different) {:.3}  AUC {:.3}  IAA {}",
                result.threshold,
                result.f1_negative,
                result.auc,
                result.iaa.map_or("n/a".into(), |v| format!("{v:.3}"))
            );
        }
        Command::Classify(a) => {
            let records = read_agreement(&a.agreement)?;
            let (threshold, _) = a.threshold.resolve()?;
            let partition = classify_different(&records, threshold);
            write_json(&a.out, &partition)?;
            eprintln!(
                "different: {} of {} easy",
                partition.different_count(),
                partition.easy
            );
        }
        Command::Report(a) => {
            let corpus = load(&a.corpus)?;
            let records = read_agreement(&a.agreement)?;
            let (threshold, f1) = a.threshold.resolve()?;
            let summary = build_summary(&a.setting, &corpus, &records, threshold, f1, a.bins)?;
            std::fs::write(&a.json, summary.to_json())?;
            if let Some(h) = &a.html {
                std::fs::write(h, summary.to_html())?;
            }
            println!("{}", summary.table_row());
        }
        Command::Render(a) => {
            let manifest = Manifest::load(&a.manifest)?;
            let labels = manifest.label_set()?;
            let main = read_attributions(&a.main)?;
            let biased = read_attributions(&a.biased)?;
            let records = match &a.agreement {
                Some(p) => read_agreement(p)?,
                None => Vec::new(),
            };
            let ids = if !a.ids.is_empty() {
                a.ids.clone()
            } else if let Some(t) = a.threshold {
                if records.is_empty() {
                    bail!("--threshold needs --agreement");
                }
                classify_different(&records, t).different
            } else {
                bail!("give --ids or --threshold");
            };
            let pages = render_heatmaps(&ids, &main, &biased, &records, &labels, &a.out_dir, execution)?;
            eprintln!("wrote {} pages to {}", pages.len(), a.out_dir.display());
        }
        Command::ServeAnnotation(a) => serve::run(&a)?,
        Command::CheckRemote(a) => {
            let corpus = load(&a.corpus)?;
            let desc = BackendDescriptor::load(&a.backend)?;
            if desc.kind != BackendKind::Remote {
                bail!("check-remote needs a descriptor of kind `remote`");
            }
            let cfg = desc.remote.clone().ok_or_else(|| anyhow!("missing [remote] table"))?;
            let remote = RemoteBackend::new(
                desc.id.clone(),
                desc.label_set()?,
                cfg.endpoint,
                cfg.max_in_flight,
                cfg.max_batch,
                std::time::Duration::from_secs(cfg.timeout_secs),
            );
            let known: HashSet<&String> = corpus.manifest.segments.iter().collect();
            for s in &a.ignored {
                if !known.contains(s) {
                    bail!("unknown segment `{s}`");
                }
            }
            let probe = ConformanceProbe {
                inputs: corpus
                    .instances
                    .iter()
                    .take(a.probes.max(1))
                    .map(|i| ModelInput::new(i.segments.clone()))
                    .collect(),
                ignored_segments: a.ignored.clone(),
            };
            let report = run_suite(&remote, &probe);
            print!("{report}");
            if !report.passed() {
                bail!("remote backend failed conformance");
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
