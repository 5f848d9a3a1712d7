//! Command-line workflow: phantom dataset generation, the two training
//! stages, evaluation and cross-run comparison.
//!
//! Exit-code contract: 0 success, 2 usage or validation failure, 3 runtime
//! failure. Validation covers everything checked before the wrapped
//! operation starts (flags, config, data discovery); failures inside the
//! operation itself map to 3.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::load_config;
use crate::data::phantom::{generate_phantom, PhantomSpec};
use crate::data::{load_cases, split_cases, CaseRecord, Modality};
use crate::domain::{LabelScheme, TrainConfig};
use crate::error::Result;
use crate::eval::{evaluate_split, self_test_split, write_overlays};
use crate::metrics::regions_for;
use crate::report::{compare_reports, load_report, render_table, write_report_files};
use crate::trainer::{
    latest_segnet_checkpoint, load_segnet, load_synthesis, load_train_data, source_only_baseline,
    train_stage1, train_stage2, StageOutcome,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

const SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

#[derive(Parser)]
#[command(
    name = "bigl",
    version,
    about = "Bidirectional global-to-local adaptation for cross-modality segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate the synthetic two-domain phantom dataset.
    Phantom(PhantomArgs),
    /// Stage 1: train the cross-domain synthesis networks.
    TrainSyn(TrainSynArgs),
    /// Stage 2: adapt the segmentation backbone (or run the source-only baseline).
    TrainUda(TrainUdaArgs),
    /// Evaluate a backbone checkpoint over a dataset split.
    Eval(EvalArgs),
    /// Compare evaluation reports of several runs side by side.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct PhantomArgs {
    /// Dataset output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of cases.
    #[arg(long, default_value_t = 30)]
    pub cases: usize,
    /// In-plane side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Axial slices per case.
    #[arg(long, default_value_t = 10)]
    pub depth: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Intensity noise level inside the head.
    #[arg(long, default_value_t = 0.03)]
    pub noise: f64,
    /// Smallest lesion radius in pixels.
    #[arg(long, default_value_t = 5.0)]
    pub lesion_radius_min: f64,
    /// Largest lesion radius in pixels.
    #[arg(long, default_value_t = 9.0)]
    pub lesion_radius_max: f64,
}

/// Training configuration source plus CLI overrides. Precedence: CLI flag
/// over config file over built-in default, logged at startup.
#[derive(Args)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; all randomness derives from it through named sub-streams.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Square image side length.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub gen_width: Option<usize>,
    #[arg(long)]
    pub disc_width: Option<usize>,
    #[arg(long)]
    pub snapshot_every: Option<u32>,
    /// Replace the unpaired reconstruction with a cycle reconstruction.
    #[arg(long)]
    pub cycle_reconstruction: bool,
    /// Ablation: drop the output-consistency term.
    #[arg(long)]
    pub no_output_consistency: bool,
    /// Ablation: drop feature-level alignment.
    #[arg(long)]
    pub no_feature_alignment: bool,
    /// Ablation: drop attention-level alignment.
    #[arg(long)]
    pub no_attention_alignment: bool,
}

impl ConfigArgs {
    /// Materialize the effective configuration and the precedence log.
    pub fn effective(&self) -> Result<(TrainConfig, Vec<String>)> {
        let mut log = Vec::new();
        let mut cfg = match &self.config {
            Some(path) => {
                log.push(format!("config: file {}", path.display()));
                load_config(path)?
            }
            None => {
                log.push("config: built-in defaults".to_string());
                TrainConfig::default()
            }
        };
        let mut over = |name: &str, value: String| log.push(format!("config: cli override {name}={value}"));
        if let Some(v) = self.seed {
            cfg.seed = v;
            over("seed", v.to_string());
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
            over("epochs", v.to_string());
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
            over("batch_size", v.to_string());
        }
        if let Some(v) = self.image_size {
            cfg.image_size = (v, v);
            over("image_size", v.to_string());
        }
        if let Some(v) = self.base_width {
            cfg.base_width = v;
            over("base_width", v.to_string());
        }
        if let Some(v) = self.gen_width {
            cfg.gen_width = v;
            over("gen_width", v.to_string());
        }
        if let Some(v) = self.disc_width {
            cfg.disc_width = v;
            over("disc_width", v.to_string());
        }
        if let Some(v) = self.snapshot_every {
            cfg.snapshot_every = v;
            over("snapshot_every", v.to_string());
        }
        if self.cycle_reconstruction {
            cfg.cycle_reconstruction = true;
            over("cycle_reconstruction", "true".to_string());
        }
        if self.no_output_consistency {
            cfg.use_output_consistency = false;
            over("use_output_consistency", "false".to_string());
        }
        if self.no_feature_alignment {
            cfg.use_feature_alignment = false;
            over("use_feature_alignment", "false".to_string());
        }
        if self.no_attention_alignment {
            cfg.use_attention_alignment = false;
            over("use_attention_alignment", "false".to_string());
        }
        cfg.validate()?;
        Ok((cfg, log))
    }
}

#[derive(Args)]
pub struct TrainSynArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset root directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Run output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Label scheme of the dataset.
    #[arg(long, value_enum, default_value_t = SchemeArg::Brats)]
    pub scheme: SchemeArg,
    /// Continue from the latest checkpoint set in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args)]
pub struct TrainUdaArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding the stage-1 checkpoints (the stage-1 --out or its
    /// stage1/ subdirectory). Not needed with --source-only.
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Label scheme of the dataset.
    #[arg(long, value_enum, default_value_t = SchemeArg::Brats)]
    pub scheme: SchemeArg,
    /// Train the labeled-source-only baseline instead of the adapted model.
    #[arg(long)]
    pub source_only: bool,
    #[arg(long)]
    pub resume: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    A,
    B,
}

impl ModalityArg {
    fn to_modality(self) -> Modality {
        match self {
            ModalityArg::A => Modality::A,
            ModalityArg::B => Modality::B,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Brats,
    Cardiac,
}

impl SchemeArg {
    fn to_scheme(self) -> LabelScheme {
        match self {
            SchemeArg::Brats => LabelScheme::Brats,
            SchemeArg::Cardiac => LabelScheme::Cardiac,
        }
    }
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Backbone checkpoint file, or a directory to take the latest
    /// segnet checkpoint from. Not needed with --self-test.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Modality to segment (the adaptation target is modality B).
    #[arg(long, value_enum, default_value_t = ModalityArg::B)]
    pub modality: ModalityArg,
    #[arg(long, value_enum, default_value_t = SchemeArg::Brats)]
    pub scheme: SchemeArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-case mask-overlay images.
    #[arg(long)]
    pub overlays: bool,
    /// Score the ground truth against itself to check the harness.
    #[arg(long)]
    pub self_test: bool,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Run directories containing an evaluation report
    /// (report.json, eval/report.json, or the file itself).
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

/// On-disk run summary: which stages completed and where their artifacts
/// live. Merged across commands sharing an output directory.
#[derive(Default, Serialize, Deserialize)]
pub struct RunManifest {
    #[serde(default)]
    pub run_id: String,
    #[serde(default)]
    pub code_version: String,
    #[serde(default)]
    pub device: String,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub config_toml: String,
    #[serde(default)]
    pub stages: BTreeMap<String, StageStatus>,
}

#[derive(Serialize, Deserialize)]
pub struct StageStatus {
    pub status: String,
    pub iterations: u64,
    pub checkpoints: Vec<String>,
    pub log: String,
}

impl RunManifest {
    pub fn path_in(out: &Path) -> PathBuf {
        out.join("manifest.json")
    }

    pub fn load_or_default(out: &Path) -> RunManifest {
        std::fs::read_to_string(Self::path_in(out))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default()
    }

    fn record_stage(&mut self, name: &str, out: &Path, outcome: &StageOutcome) {
        let rel = |p: &Path| p.to_string_lossy().into_owned();
        self.stages.insert(
            name.to_string(),
            StageStatus {
                status: "complete".to_string(),
                iterations: outcome.iterations_total,
                checkpoints: outcome.checkpoint_paths.iter().map(|p| rel(p)).collect(),
                log: rel(&out.join(name).join("train_log.jsonl")),
            },
        );
    }

    fn save(&self, out: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(Self::path_in(out), body).map_err(crate::BiglError::Io)
    }
}

fn stamp_manifest(m: &mut RunManifest, out: &Path, cfg: &TrainConfig, device: &str) {
    let hash = cfg.content_hash();
    let dir_name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    m.run_id = format!("{dir_name}-{}", &hash[..8]);
    m.code_version = env!("CARGO_PKG_VERSION").to_string();
    m.device = device.to_string();
    m.config_hash = hash;
    m.config_toml = toml::to_string(cfg).expect("config serializes");
}

/// Resolve BIGL_DEVICE: unset or "cpu" selects the only implemented device.
pub fn select_device(raw: Option<&str>) -> std::result::Result<&'static str, String> {
    match raw {
        None | Some("") | Some("cpu") => Ok("cpu"),
        Some(other) => Err(format!(
            "BIGL_DEVICE={other} is not supported; this build implements only cpu"
        )),
    }
}

struct CliFailure {
    code: i32,
    message: String,
}

fn usage(msg: impl std::fmt::Display) -> CliFailure {
    CliFailure { code: EXIT_USAGE, message: msg.to_string() }
}

fn runtime(msg: impl std::fmt::Display) -> CliFailure {
    CliFailure { code: EXIT_RUNTIME, message: msg.to_string() }
}

type CliResult = std::result::Result<(), CliFailure>;

/// Parse and execute; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let device = match select_device(std::env::var("BIGL_DEVICE").ok().as_deref()) {
        Ok(d) => d,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let outcome = match cli.cmd {
        Cmd::Phantom(a) => cmd_phantom(&a),
        Cmd::TrainSyn(a) => cmd_train_syn(&a, device),
        Cmd::TrainUda(a) => cmd_train_uda(&a, device),
        Cmd::Eval(a) => cmd_eval(&a, device),
        Cmd::Report(a) => cmd_report(&a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn cmd_phantom(a: &PhantomArgs) -> CliResult {
    let spec = PhantomSpec {
        image_size: a.size,
        depth: a.depth,
        n_cases: a.cases,
        noise: a.noise,
        seed: a.seed,
        lesion_radius: (a.lesion_radius_min, a.lesion_radius_max),
        ..PhantomSpec::default()
    };
    spec.validate().map_err(usage)?;
    generate_phantom(&spec, &a.out).map_err(runtime)?;
    println!(
        "phantom: {} cases of {}x{}x{} written to {}",
        a.cases,
        a.depth,
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

fn prepare_common(
    cfg_args: &ConfigArgs,
    data: &Path,
    device: &str,
) -> std::result::Result<(TrainConfig, Vec<CaseRecord>), CliFailure> {
    let (cfg, log) = cfg_args.effective().map_err(usage)?;
    for line in &log {
        println!("{line}");
    }
    println!("device: {device}");
    if !data.is_dir() {
        return Err(usage(format!("data directory {} does not exist", data.display())));
    }
    let cases = load_cases(data).map_err(usage)?;
    Ok((cfg, cases))
}

fn split_for(
    cfg: &TrainConfig,
    cases: &[CaseRecord],
    which: SplitArg,
) -> std::result::Result<Vec<CaseRecord>, CliFailure> {
    use rand::Rng;
    let seed: u64 = {
        let mut s = crate::rng::stream(cfg.seed, "data-split", 0);
        s.gen()
    };
    let (train, val, test) = split_cases(cases, SPLIT_RATIOS, seed).map_err(usage)?;
    Ok(match which {
        SplitArg::Train => train,
        SplitArg::Val => val,
        SplitArg::Test => test,
    })
}

fn guard_fresh_or_resume(stage_dir: &Path, resume: bool) -> CliResult {
    if resume || !stage_dir.is_dir() {
        return Ok(());
    }
    let has_ckpt = std::fs::read_dir(stage_dir)
        .map(|rd| {
            rd.flatten()
                .any(|e| e.file_name().to_string_lossy().ends_with(".ckpt"))
        })
        .unwrap_or(false);
    if has_ckpt {
        return Err(usage(format!(
            "{} already contains checkpoints; pass --resume to continue the run",
            stage_dir.display()
        )));
    }
    Ok(())
}

fn cmd_train_syn(a: &TrainSynArgs, device: &str) -> CliResult {
    let (cfg, cases) = prepare_common(&a.cfg, &a.data, device)?;
    let train = split_for(&cfg, &cases, SplitArg::Train)?;
    let data = load_train_data(&train, a.scheme.to_scheme(), cfg.image_size).map_err(usage)?;
    std::fs::create_dir_all(&a.out).map_err(|e| usage(format!("{}: {e}", a.out.display())))?;
    guard_fresh_or_resume(&a.out.join("stage1"), a.resume)?;
    let run = train_stage1(&cfg, &data, &a.out).map_err(runtime)?;
    println!(
        "stage1: {} iterations total ({} fresh, resumed from epoch {})",
        run.outcome.iterations_total,
        run.outcome.reports.len(),
        run.outcome.resumed_from_epoch
    );
    let mut manifest = RunManifest::load_or_default(&a.out);
    stamp_manifest(&mut manifest, &a.out, &cfg, device);
    manifest.record_stage("stage1", &a.out, &run.outcome);
    manifest.save(&a.out).map_err(runtime)?;
    Ok(())
}

fn cmd_train_uda(a: &TrainUdaArgs, device: &str) -> CliResult {
    let (cfg, cases) = prepare_common(&a.cfg, &a.data, device)?;
    let train = split_for(&cfg, &cases, SplitArg::Train)?;
    let data = load_train_data(&train, a.scheme.to_scheme(), cfg.image_size).map_err(usage)?;
    std::fs::create_dir_all(&a.out).map_err(|e| usage(format!("{}: {e}", a.out.display())))?;

    let (stage_name, outcome) = if a.source_only {
        guard_fresh_or_resume(&a.out.join("source_only"), a.resume)?;
        let run = source_only_baseline(&cfg, &data, &a.out).map_err(runtime)?;
        ("source_only", run.outcome)
    } else {
        let Some(stage1) = &a.stage1 else {
            return Err(usage(
                "stage-1 checkpoints are required: pass --stage1 <dir> or use --source-only",
            ));
        };
        let stage1_dir = if stage1.join("stage1").is_dir() {
            stage1.join("stage1")
        } else {
            stage1.clone()
        };
        let syn = load_synthesis(&stage1_dir, &cfg).map_err(usage)?;
        guard_fresh_or_resume(&a.out.join("stage2"), a.resume)?;
        let run = train_stage2(&cfg, &data, &syn, &a.out).map_err(runtime)?;
        ("stage2", run.outcome)
    };
    println!(
        "{stage_name}: {} iterations total ({} fresh, resumed from epoch {})",
        outcome.iterations_total,
        outcome.reports.len(),
        outcome.resumed_from_epoch
    );
    let mut manifest = RunManifest::load_or_default(&a.out);
    stamp_manifest(&mut manifest, &a.out, &cfg, device);
    manifest.record_stage(stage_name, &a.out, &outcome);
    manifest.save(&a.out).map_err(runtime)?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, device: &str) -> CliResult {
    let (cfg, cases) = prepare_common(&a.cfg, &a.data, device)?;
    let split = split_for(&cfg, &cases, a.split)?;
    let scheme = a.scheme.to_scheme();
    let modality = a.modality.to_modality();
    let regions = regions_for(scheme);
    let net = match (&a.checkpoint, a.self_test) {
        (Some(path), _) => {
            let path = if path.is_dir() {
                latest_segnet_checkpoint(path).map_err(usage)?
            } else {
                path.clone()
            };
            Some(load_segnet(&path, &cfg).map_err(usage)?)
        }
        (None, true) => None,
        (None, false) => {
            return Err(usage("--checkpoint is required unless --self-test is set"));
        }
    };
    let split_name = match a.split {
        SplitArg::Train => "train",
        SplitArg::Val => "val",
        SplitArg::Test => "test",
    };
    let title = format!(
        "{split_name} split, modality {}{}",
        match a.modality {
            ModalityArg::A => "A",
            ModalityArg::B => "B",
        },
        if a.self_test { " (self-test)" } else { "" }
    );
    let report = if a.self_test {
        self_test_split(&split, modality, scheme, &regions, cfg.image_size).map_err(runtime)?
    } else {
        evaluate_split(net.as_ref().unwrap(), &split, modality, scheme, &regions)
            .map_err(runtime)?
    };
    let [table, records, json] = write_report_files(&title, &report, &a.out).map_err(runtime)?;
    print!("{}", render_table(&title, &report));
    println!("table:   {}", table.display());
    println!("records: {}", records.display());
    println!("report:  {}", json.display());
    if a.overlays {
        let Some(net) = net.as_ref() else {
            return Err(usage("--overlays requires a checkpoint to predict with"));
        };
        let paths = write_overlays(net, &split, modality, scheme, &a.out.join("overlays"))
            .map_err(runtime)?;
        println!("overlays: {} images under {}", paths.len(), a.out.join("overlays").display());
    }
    Ok(())
}

fn find_report(dir: &Path) -> std::result::Result<PathBuf, CliFailure> {
    if dir.is_file() {
        return Ok(dir.to_path_buf());
    }
    for candidate in [dir.join("report.json"), dir.join("eval").join("report.json")] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(usage(format!("no evaluation report found under {}", dir.display())))
}

fn cmd_report(a: &ReportArgs) -> CliResult {
    let mut entries = Vec::new();
    for run in &a.runs {
        let path = find_report(run)?;
        let label = run
            .file_stem()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| run.display().to_string());
        let report = load_report(&path).map_err(usage)?;
        entries.push((label, report));
    }
    let table = compare_reports(&entries).map_err(usage)?;
    print!("{table}");
    Ok(())
}
