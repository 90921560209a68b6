//! `maskfit`: command line for the sizing pipeline.
//!
//! Usage errors exit with status 2, pipeline failures with status 1 and a
//! JSON error object on stderr.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use maskfit_client::Client;
use maskfit_core::api::{self, AnnotationDoc, LandmarkSource, RunState, SizeResponse};
use maskfit_core::dataset;
use maskfit_core::imaging;
use maskfit_core::run::{self, RunRecord};
use maskfit_core::sizing::Fixtures;
use maskfit_core::synth::{self, SynthParams};
use maskfit_core::trainer::{self, StatsMode, TrainConfig};
use maskfit_core::{Model, SizeChart};
use maskfit_service::{AppState, Store, STORE_ENV};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "maskfit", version, about = "Nasal mask sizing from facial photographs")]
struct Cli {
    /// Size chart JSON; defaults to the built-in four-size chart.
    #[arg(long, global = true)]
    chart: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with exact ground truth.
    Synth(SynthArgs),
    /// Check a manifest and its images.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train one model on every sample of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Leave-one-out evaluation with a sizing report.
    Loocv {
        #[arg(long)]
        manifest: PathBuf,
        /// Run directory; required unless --server is given.
        #[arg(long, required_unless_present = "server")]
        out: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
        #[command(flatten)]
        train: TrainArgs,
        /// Submit the run to a service instead; the manifest path must be
        /// readable by the service.
        #[arg(long)]
        server: Option<String>,
    },
    /// Score confusion matrices: the embedded published tables, or a JSON file.
    Evaluate {
        #[arg(long, num_args = 0..=1, default_missing_value = "", required = true)]
        fixtures: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Width and size for one image.
    Size {
        #[arg(long)]
        image: PathBuf,
        /// Annotation JSON with the coin, and landmarks or a nose box.
        #[arg(long)]
        annot: PathBuf,
        /// Predict the landmarks with this model instead of using annotated ones.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        server: Option<String>,
    },
    /// Print the report of a finished run.
    Report {
        /// Run directory, or run id with --server.
        #[arg(long)]
        run: String,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        server: Option<String>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, env = STORE_ENV)]
        store: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON file of generator parameters; flags below override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Image size as WxH.
    #[arg(long, value_parser = parse_dims)]
    image_size: Option<(usize, usize)>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Crop size as WxH.
    #[arg(long, value_parser = parse_dims)]
    crop: Option<(usize, usize)>,
    #[arg(long)]
    drop_prob: Option<f64>,
    #[arg(long, value_enum)]
    stats: Option<StatsArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsArg {
    PerFold,
    Global,
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((parse(w)?, parse(h)?))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => read_json(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            c.base_seed = v;
        }
        if let Some(v) = self.max_epochs {
            c.max_epochs = v;
        }
        if let Some(v) = self.patience {
            c.patience = v;
        }
        if let Some(v) = self.repetitions {
            c.repetitions = v;
        }
        if let Some(v) = self.hidden {
            c.n_hidden = v;
        }
        if let Some((w, h)) = self.crop {
            c.crop_w = w;
            c.crop_h = h;
        }
        if let Some(v) = self.drop_prob {
            c.drop_prob = v;
        }
        if let Some(v) = self.stats {
            c.stats_mode = match v {
                StatsArg::PerFold => StatsMode::PerFold,
                StatsArg::Global => StatsMode::Global,
            };
        }
        c.validate()?;
        Ok(c)
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn synth_cmd(args: &SynthArgs, chart: &SizeChart) -> Result<()> {
    let mut params: SynthParams = match &args.params {
        Some(p) => read_json(p)?,
        None => SynthParams::default(),
    };
    if let Some(v) = args.count {
        params.count = v;
    }
    if let Some(v) = args.seed {
        params.seed = v;
    }
    if let Some((w, h)) = args.image_size {
        params.image_w = w;
        params.image_h = h;
    }
    let corpus = synth::generate(&params, chart)?;
    let manifest = corpus.write_to(&args.out)?;
    let records = corpus.records();
    let difficulty = if records.is_empty() {
        None
    } else {
        Some(synth::corpus_difficulty(&records, chart)?)
    };
    print_json(&serde_json::json!({
        "manifest": manifest,
        "count": records.len(),
        "difficulty": difficulty,
    }))
}

fn validate_cmd(manifest: &Path, chart: &SizeChart) -> Result<()> {
    let records = dataset::load_manifest(manifest, chart)?;
    let mut counts = vec![0usize; chart.len()];
    let mut unsized_count = 0;
    for r in &records {
        match &r.ground_truth_size {
            Some(s) => counts[chart.index_of(s)?] += 1,
            None => unsized_count += 1,
        }
    }
    print_json(&serde_json::json!({
        "manifest": manifest,
        "samples": records.len(),
        "sizes": chart.names().into_iter().zip(counts).collect::<std::collections::BTreeMap<_, _>>(),
        "without_size": unsized_count,
    }))
}

fn train_cmd(manifest: &Path, out: &Path, train: &TrainArgs, chart: &SizeChart) -> Result<()> {
    let config = train.config()?;
    let records = dataset::load_manifest(manifest, chart)?;
    let (model, trace, excluded) = trainer::train_model(&records, &config)?;
    model.save(out)?;
    print_json(&serde_json::json!({
        "model": out,
        "samples": records.len() - excluded.len(),
        "excluded": excluded.iter().map(|(id, e)| serde_json::json!({"id": id, "reason": e.to_string()})).collect::<Vec<_>>(),
        "epochs_run": trace.epochs_run,
        "improvements": trace.improvements,
        "best_sse": trace.best_sse,
        "final_alpha": trace.final_alpha,
    }))
}

fn loocv_cmd(
    manifest: &Path,
    out: Option<&Path>,
    run_id: Option<String>,
    train: &TrainArgs,
    server: Option<&str>,
    chart: &SizeChart,
) -> Result<()> {
    let config = train.config()?;
    if let Some(base) = server {
        let manifest = std::fs::canonicalize(manifest).with_context(|| format!("resolving {}", manifest.display()))?;
        return runtime()?.block_on(async {
            let client = Client::new(base);
            let mut status = client.start_run(&manifest.to_string_lossy(), Some(config)).await?;
            while status.state == RunState::Running {
                tokio::time::sleep(Duration::from_millis(500)).await;
                status = client.run(&status.run_id).await?;
            }
            if status.state == RunState::Failed {
                bail!("run {} failed: {}", status.run_id, status.error.unwrap_or_default());
            }
            let report = client.report(&status.run_id).await?;
            print!("{}", report.to_text());
            println!("run: {}", status.run_id);
            Ok(())
        });
    }
    let out = out.context("--out is required without --server")?;
    let record = run::run_loocv(manifest, &config, chart, out, run_id)?;
    let report = record.load_report(out)?;
    print!("{}", report.to_text());
    println!("run: {}", record.run_id);
    println!("report checksum: {}", record.report_checksum);
    Ok(())
}

fn evaluate_cmd(fixtures: &str, json: bool) -> Result<()> {
    let fixtures = if fixtures.is_empty() {
        Fixtures::published()
    } else {
        read_json(Path::new(fixtures))?
    };
    let reports = fixtures.reports()?;
    if json {
        return print_json(&reports);
    }
    for (i, r) in reports.iter().enumerate() {
        if i > 0 {
            println!();
        }
        print!("{}", r.to_text());
    }
    Ok(())
}

/// Local sizing: a model, when given, predicts the landmarks from the nose
/// box; otherwise the annotated landmarks are used.
fn size_local(image: &Path, doc: &AnnotationDoc, model: Option<&Path>, chart: &SizeChart) -> Result<SizeResponse> {
    let bytes = std::fs::read(image).with_context(|| format!("reading {}", image.display()))?;
    let img = imaging::load_image(&bytes)?;
    doc.validate(img.width(), img.height())?;
    let px_per_mm = doc.px_per_mm().context("annotation has no coin or scale")??;
    let (landmarks, source) = match model {
        Some(path) => {
            let model = Model::load(path)?;
            let nose_box = doc.nose_box.context("prediction needs a nose_box in the annotation")?;
            (api::predict(&model, &img, nose_box, None)?.landmarks, LandmarkSource::Prediction)
        }
        None => (
            doc.landmarks.clone().context("annotation has no landmarks; pass --model to predict them")?,
            LandmarkSource::Annotation,
        ),
    };
    let mut response = api::size_landmarks(landmarks.left, landmarks.right, px_per_mm, chart)?;
    response.source = Some(source);
    Ok(response)
}

/// Remote sizing: uploads the image and annotation, asks the service to
/// predict when no landmarks were annotated, then sizes.
fn size_remote(base: &str, image: &Path, doc: &AnnotationDoc, predict: bool) -> Result<SizeResponse> {
    let bytes = std::fs::read(image).with_context(|| format!("reading {}", image.display()))?;
    runtime()?.block_on(async {
        let client = Client::new(base);
        let info = client.upload_sample(bytes).await?;
        client.put_annotation(&info.id, doc).await?;
        let source = if predict || doc.landmarks.is_none() {
            client.predict(&info.id, None).await?;
            LandmarkSource::Prediction
        } else {
            LandmarkSource::Annotation
        };
        Ok(client.size(&info.id, Some(source)).await?)
    })
}

fn report_cmd(run_ref: &str, json: bool, server: Option<&str>) -> Result<()> {
    let report = match server {
        Some(base) => runtime()?.block_on(async { Client::new(base).report(run_ref).await })?,
        None => {
            let dir = Path::new(run_ref);
            RunRecord::load(dir)?.load_report(dir)?
        }
    };
    if json {
        print_json(&report)
    } else {
        print!("{}", report.to_text());
        Ok(())
    }
}

fn serve_cmd(store: &Path, host: &str, port: u16, model: Option<&Path>, chart: SizeChart) -> Result<()> {
    let model = model.map(Model::load).transpose()?;
    let addr: SocketAddr = format!("{host}:{port}").parse().with_context(|| format!("bad address {host}:{port}"))?;
    let state = AppState::new(Store::open(store)?, model, chart);
    runtime()?.block_on(maskfit_service::serve(addr, state))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let chart = match &cli.chart {
        Some(p) => read_json(p)?,
        None => SizeChart::eson(),
    };
    match cli.command {
        Command::Synth(args) => synth_cmd(&args, &chart),
        Command::Validate { manifest } => validate_cmd(&manifest, &chart),
        Command::Train { manifest, out, train } => train_cmd(&manifest, &out, &train, &chart),
        Command::Loocv {
            manifest,
            out,
            run_id,
            train,
            server,
        } => loocv_cmd(&manifest, out.as_deref(), run_id, &train, server.as_deref(), &chart),
        Command::Evaluate { fixtures, json } => evaluate_cmd(fixtures.as_deref().unwrap_or(""), json),
        Command::Size {
            image,
            annot,
            model,
            server,
        } => {
            let doc: AnnotationDoc = read_json(&annot)?;
            let response = match server {
                Some(base) => size_remote(&base, &image, &doc, model.is_some())?,
                None => size_local(&image, &doc, model.as_deref(), &chart)?,
            };
            print_json(&response)
        }
        Command::Report { run, json, server } => report_cmd(&run, json, server.as_deref()),
        Command::Serve {
            store,
            port,
            host,
            model,
        } => serve_cmd(&store, &host, port, model.as_deref(), chart),
    }
}

#[derive(Serialize)]
struct ErrorReport {
    error: String,
    causes: Vec<String>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport {
                error: e.to_string(),
                causes: e.chain().skip(1).map(ToString::to_string).collect(),
            };
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            ExitCode::FAILURE
        }
    }
}
