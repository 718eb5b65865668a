//! `amcnet` command-line driver.
//!
//! Every command that writes files takes `--out <dir>` and records a
//! `run_manifest.json` there. `amcnet rerun <manifest> --out <dir>` replays
//! the recorded command into a fresh directory.

mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use amcnet::config::RunConfig;
use amcnet::data::{
    export_png, extract_train_patches, make_phantom, normalize_hu, read_mask, read_patches, read_volume, write_mask,
    write_patch_manifest, write_patches, write_volume, PatchSample, PhantomConfig, SizePolicy, Volume,
};
use amcnet::ensemble::{load_bundle, make_lopo_splits, predict_volume, save_bundle, train_ensemble, Fusion};
use amcnet::eval::{
    confusion_png, jet_overlay, score_volume, severity_grade, ConfusionCounts, MetricReport, SeverityReference,
    BODY_FLOOR_HU,
};
use amcnet::network::{dump_features, save_checkpoint};
use amcnet::trainer::train;
use amcnet::{ModelSpec, ModelState, SeedRng, Tensor, Variant};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "amcnet", version, about = "Lung CT infection segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Generate synthetic CT volumes with known infection masks.
    Phantom(PhantomArgs),
    /// Normalise volumes and extract training patches.
    Prep(PrepArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train a leave-one-patient-out ensemble.
    TrainEnsemble(EnsembleArgs),
    /// Segment a volume with a checkpoint or bundle.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Grade the involvement of an infection mask.
    Severity(SeverityArgs),
    /// Export per-channel activation maps of one block.
    Features(FeaturesArgs),
    /// Report the trainable parameter count of an architecture.
    Params(ParamsArgs),
    /// Replay the command recorded in a run manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Debug, Clone)]
struct PhantomArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    slices: usize,
    #[arg(long, default_value_t = 512)]
    size: usize,
    /// Lesion share of the lung area on infected slices.
    #[arg(long, default_value_t = 0.10)]
    lesion_fraction: f64,
    /// Share of slices that carry lesions.
    #[arg(long, default_value_t = 0.5)]
    infected_fraction: f64,
    #[arg(long, default_value_t = 15.0)]
    noise_hu: f64,
}

#[derive(Args, Debug, Clone)]
struct PrepArgs {
    /// Directory of `<patient>.ctv` volumes with matching `<patient>.msk` masks.
    #[arg(long)]
    volumes: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Run configuration supplying the patch settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of `<patient>.pch` patch stores.
    #[arg(long)]
    patches: PathBuf,
    /// Overrides the configured initialisation and training seeds.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Patient held out for validation and model selection.
    #[arg(long)]
    val: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct EnsembleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    patches: PathBuf,
    /// Base seed; member i uses seed + i - 1.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Members trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug, Clone)]
struct PredictArgs {
    /// `bundle.json` or an `AMC1` checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Raw Hounsfield volume (CTV1).
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write one JET overlay PNG per slice.
    #[arg(long)]
    overlays: bool,
    /// Fusion rule, overriding the bundle's.
    #[arg(long)]
    fusion: Option<String>,
    /// REJECT or RESAMPLE for slices that do not tile.
    #[arg(long, default_value = "REJECT")]
    size_policy: String,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug, Clone)]
struct EvaluateArgs {
    /// Predicted masks (MSK1), paired in order with `--truth`.
    #[arg(long, required = true, num_args = 1..)]
    pred: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    truth: Vec<PathBuf>,
    /// Probability volumes (CTV1) for ROC AUC, paired with `--pred`.
    #[arg(long, num_args = 1..)]
    prob: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SeverityArgs {
    #[arg(long)]
    mask: PathBuf,
    /// Lung mask to measure involvement against.
    #[arg(long, conflicts_with = "volume")]
    lungs: Option<PathBuf>,
    /// Raw HU volume; its voxels above the body floor form the reference.
    #[arg(long)]
    volume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct FeaturesArgs {
    #[arg(long)]
    model: PathBuf,
    /// Raw Hounsfield volume (CTV1).
    #[arg(long)]
    volume: PathBuf,
    #[arg(long, default_value_t = 0)]
    slice: usize,
    /// Block index, 1 to 9.
    #[arg(long)]
    block: usize,
    /// Top-left corner of the patch fed to the model.
    #[arg(long, default_value_t = 0)]
    row: usize,
    #[arg(long, default_value_t = 0)]
    col: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ParamsArgs {
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write `params.json` and a run manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct RerunArgs {
    manifest: PathBuf,
    /// Fresh output directory for the replay.
    #[arg(long)]
    out: PathBuf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phantom(_) => "phantom",
            Command::Prep(_) => "prep",
            Command::Train(_) => "train",
            Command::TrainEnsemble(_) => "train-ensemble",
            Command::Predict(_) => "predict",
            Command::Evaluate(_) => "evaluate",
            Command::Severity(_) => "severity",
            Command::Features(_) => "features",
            Command::Params(_) => "params",
            Command::Rerun(_) => "rerun",
        }
    }

    fn out_dir(&self) -> Option<&Path> {
        match self {
            Command::Phantom(a) => Some(&a.out),
            Command::Prep(a) => Some(&a.out),
            Command::Train(a) => Some(&a.out),
            Command::TrainEnsemble(a) => Some(&a.out),
            Command::Predict(a) => Some(&a.out),
            Command::Evaluate(a) => Some(&a.out),
            Command::Severity(a) => Some(&a.out),
            Command::Features(a) => Some(&a.out),
            Command::Params(a) => a.out.as_deref(),
            Command::Rerun(a) => Some(&a.out),
        }
    }

    fn config_path(&self) -> Option<&Path> {
        match self {
            Command::Prep(a) => a.config.as_deref(),
            Command::Train(a) => a.config.as_deref(),
            Command::TrainEnsemble(a) => a.config.as_deref(),
            Command::Params(a) => a.config.as_deref(),
            _ => None,
        }
    }

    fn seeds(&self) -> BTreeMap<String, u64> {
        let seed = match self {
            Command::Phantom(a) => Some(a.seed),
            Command::Prep(a) => Some(a.seed),
            Command::Train(a) => Some(a.seed),
            Command::TrainEnsemble(a) => Some(a.seed),
            _ => None,
        };
        seed.into_iter().map(|s| ("seed".to_string(), s)).collect()
    }

    fn inputs(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = match self {
            Command::Prep(a) => vec![a.volumes.clone()],
            Command::Train(a) => vec![a.patches.clone()],
            Command::TrainEnsemble(a) => vec![a.patches.clone()],
            Command::Predict(a) => vec![a.model.clone(), a.volume.clone()],
            Command::Evaluate(a) => a.pred.iter().chain(&a.truth).chain(&a.prob).cloned().collect(),
            Command::Severity(a) => [Some(&a.mask), a.lungs.as_ref(), a.volume.as_ref()].into_iter().flatten().cloned().collect(),
            Command::Features(a) => vec![a.model.clone(), a.volume.clone()],
            Command::Rerun(a) => vec![a.manifest.clone()],
            Command::Phantom(_) | Command::Params(_) => Vec::new(),
        };
        v.extend(self.config_path().map(Path::to_path_buf));
        v
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match execute(cli.command, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Runs `command` and records its manifest. `argv` is the argument list that
/// reproduces the run.
fn execute(command: Command, argv: Vec<String>) -> Result<()> {
    if let Command::Rerun(a) = &command {
        return rerun(a);
    }
    let start = Instant::now();
    if let Some(out) = command.out_dir() {
        std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    }
    let outputs = run(&command)?;
    let Some(out) = command.out_dir() else { return Ok(()) };
    let config_text = match command.config_path() {
        Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let manifest = RunManifest {
        command: command.name().to_string(),
        args: argv,
        working_dir: std::env::current_dir().context("resolving the working directory")?,
        config: command.config_path().map(Path::to_path_buf),
        config_text,
        seeds: command.seeds(),
        inputs: command.inputs(),
        out_dir: out.to_path_buf(),
        outputs,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        duration_secs: start.elapsed().as_secs_f64(),
    };
    manifest.write(&out.join(manifest::FILE_NAME))
}

fn run(command: &Command) -> Result<Vec<PathBuf>> {
    match command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Prep(a) => cmd_prep(a),
        Command::Train(a) => cmd_train(a),
        Command::TrainEnsemble(a) => cmd_train_ensemble(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Severity(a) => cmd_severity(a),
        Command::Features(a) => cmd_features(a),
        Command::Params(a) => cmd_params(a),
        Command::Rerun(_) => unreachable!("handled by execute"),
    }
}

/// Re-parses the recorded arguments with the output directory replaced and
/// runs them from the recorded working directory.
fn rerun(a: &RerunArgs) -> Result<()> {
    let m = RunManifest::read(&a.manifest)?;
    let out = std::path::absolute(&a.out).with_context(|| format!("resolving {}", a.out.display()))?;
    let mut args = m.args.clone();
    let flag = args.iter().position(|s| s == "--out").context("recorded command has no --out argument")?;
    *args.get_mut(flag + 1).context("recorded --out has no value")? = out.display().to_string();
    std::env::set_current_dir(&m.working_dir)
        .with_context(|| format!("entering recorded working directory {}", m.working_dir.display()))?;
    if let (Some(path), Some(text)) = (&m.config, &m.config_text) {
        let now = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if &now != text {
            bail!("{} changed since the recorded run", path.display());
        }
    }
    let cli = Cli::try_parse_from(std::iter::once("amcnet".to_string()).chain(args.iter().cloned()))
        .with_context(|| format!("{}: recorded arguments no longer parse", a.manifest.display()))?;
    if matches!(cli.command, Command::Rerun(_)) {
        bail!("{}: refusing to replay a rerun", a.manifest.display());
    }
    execute(cli.command, args)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .with_context(|| format!("{}: cannot derive a name from this path", path.display()))
}

/// Files in `dir` with extension `ext`, sorted by name.
fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("{}: no .{ext} files found", dir.display());
    }
    Ok(files)
}

fn load_volume(path: &Path) -> Result<Volume> {
    read_volume(path).with_context(|| format!("reading volume {}", path.display()))
}

fn cmd_phantom(a: &PhantomArgs) -> Result<Vec<PathBuf>> {
    let cfg = PhantomConfig {
        size: a.size,
        slices: a.slices,
        lesion_fraction: a.lesion_fraction,
        infected_slice_fraction: a.infected_fraction,
        noise_hu: a.noise_hu,
        ..Default::default()
    };
    cfg.validate()?;
    let mut seeds = SeedRng::seed_from_u64(a.seed);
    let mut outputs = Vec::new();
    for i in 1..=a.count {
        let ph = make_phantom(seeds.next_u64(), &cfg)?;
        let name = format!("P{i}");
        let files = [format!("{name}.ctv"), format!("{name}.msk"), format!("{name}_lungs.msk")];
        write_volume(&a.out.join(&files[0]), &ph.volume)?;
        write_mask(&a.out.join(&files[1]), &ph.mask)?;
        write_mask(&a.out.join(&files[2]), &ph.lungs)?;
        println!("{name}: {} infected voxels", ph.mask.count());
        outputs.extend(files.into_iter().map(PathBuf::from));
    }
    Ok(outputs)
}

fn cmd_prep(a: &PrepArgs) -> Result<Vec<PathBuf>> {
    let cfg = load_config(a.config.as_deref())?;
    let mut all = Vec::new();
    let mut outputs = Vec::new();
    for (k, path) in files_with_ext(&a.volumes, "ctv")?.iter().enumerate() {
        let patient = stem(path)?;
        let mask_path = path.with_extension("msk");
        let volume = normalize_hu(&load_volume(path)?);
        let mask = read_mask(&mask_path).with_context(|| format!("reading mask {}", mask_path.display()))?;
        if mask.dims != volume.dims {
            bail!("{}: mask dims {:?} differ from volume dims {:?}", mask_path.display(), mask.dims, volume.dims);
        }
        // One independent stream per patient keeps patients reproducible on their own.
        let mut rng = SeedRng::seed_from_u64(a.seed);
        rng.set_stream(k as u64);
        let [slices, h, w] = volume.dims;
        let mut patches = Vec::new();
        for s in 0..slices {
            patches.extend(
                extract_train_patches(volume.slice(s), mask.slice(s), h, w, &patient, s, &cfg.extract, &mut rng)
                    .with_context(|| format!("{}: slice {s}", path.display()))?,
            );
        }
        let file = format!("{patient}.pch");
        write_patches(&a.out.join(&file), &patches)?;
        let infected = patches.iter().filter(|p| p.label == amcnet::data::SliceLabel::Infected).count();
        println!("{patient}: {} patches ({infected} infected)", patches.len());
        outputs.push(PathBuf::from(file));
        all.extend(patches);
    }
    write_patch_manifest(&a.out.join("patches.csv"), &all)?;
    outputs.push(PathBuf::from("patches.csv"));
    Ok(outputs)
}

fn load_patch_dir(dir: &Path) -> Result<BTreeMap<String, Vec<PatchSample>>> {
    let mut out = BTreeMap::new();
    for path in files_with_ext(dir, "pch")? {
        let patches = read_patches(&path).with_context(|| format!("reading patches {}", path.display()))?;
        out.insert(stem(&path)?, patches);
    }
    Ok(out)
}

fn seeded(cfg: &mut RunConfig, seed: u64) {
    cfg.model.init_seed = seed;
    cfg.train.seed = seed;
}

fn cmd_train(a: &TrainArgs) -> Result<Vec<PathBuf>> {
    let mut cfg = load_config(a.config.as_deref())?;
    seeded(&mut cfg, a.seed);
    let patients = load_patch_dir(&a.patches)?;
    if let Some(v) = &a.val {
        if !patients.contains_key(v) {
            bail!("{}: no patch store for validation patient `{v}`", a.patches.display());
        }
    }
    let train_set: Vec<PatchSample> =
        patients.iter().filter(|(p, _)| Some(*p) != a.val.as_ref()).flat_map(|(_, v)| v.iter().cloned()).collect();
    let val_set = a.val.as_ref().map(|v| patients[v].clone()).unwrap_or_default();
    let model = ModelState::<f32>::build(&cfg.model)?;
    let outcome = train(model, &train_set, &val_set, &cfg.train)?;
    save_checkpoint(&outcome.state, &a.out.join("model.amc1"))?;
    outcome.curve.write_csv(&a.out.join("curve.csv"))?;
    if let Some(last) = outcome.curve.epochs.last() {
        println!("epoch {}: train loss {:.6}, train DSC {:.4}", last.epoch, last.train_loss, last.train_dsc);
    }
    match outcome.best_val_dsc {
        Some(d) => println!("best validation DSC {d:.4} at epoch {}", outcome.best_epoch),
        None => println!("kept epoch {}", outcome.best_epoch),
    }
    Ok(vec!["model.amc1".into(), "curve.csv".into()])
}

fn cmd_train_ensemble(a: &EnsembleArgs) -> Result<Vec<PathBuf>> {
    let mut cfg = load_config(a.config.as_deref())?;
    seeded(&mut cfg, a.seed);
    let patches = load_patch_dir(&a.patches)?;
    let ids: Vec<String> = patches.keys().cloned().collect();
    let splits = make_lopo_splits(&ids)?;
    let members = cfg.members(splits.len())?;
    let mut bundle = train_ensemble(&splits, &patches, &members, a.jobs)?;
    bundle.fusion = cfg.fusion;
    bundle.vote_threshold = cfg.vote_threshold;
    save_bundle(&bundle, &a.out)?;
    let mut outputs = vec![PathBuf::from(amcnet::ensemble::BUNDLE_MANIFEST)];
    for m in &bundle.members {
        let id = &m.split.member_id;
        println!("{id}: validation patient {}, DSC {:.4}", m.split.val_patient, m.val_dsc.unwrap_or(f64::NAN));
        outputs.push(format!("{id}.amc1").into());
        outputs.push(format!("{id}_curve.csv").into());
    }
    for f in &bundle.failures {
        eprintln!("{}: failed: {}", f.member_id, f.message);
    }
    if let Some((mean, sd)) = bundle.val_dsc_summary() {
        println!("validation DSC {mean:.4} ± {sd:.4}");
    }
    if !bundle.is_complete() {
        bail!("{} of {} members failed; partial bundle written to {}", bundle.failures.len(), splits.len(), a.out.display());
    }
    Ok(outputs)
}

fn set_jobs(jobs: usize) {
    // Only the first call can configure the global pool; later calls keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
}

fn cmd_predict(a: &PredictArgs) -> Result<Vec<PathBuf>> {
    set_jobs(a.jobs);
    let mut bundle = load_bundle(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    if let Some(f) = &a.fusion {
        bundle.fusion = Fusion::parse(f)?;
    }
    let policy = SizePolicy::parse(&a.size_policy)?;
    let raw = load_volume(&a.volume)?;
    let volume = normalize_hu(&raw);
    let pred = predict_volume(&bundle, &volume, policy).with_context(|| format!("segmenting {}", a.volume.display()))?;
    let name = stem(&a.volume)?;
    let mask_file = format!("{name}_pred.msk");
    let prob_file = format!("{name}_prob.ctv");
    write_mask(&a.out.join(&mask_file), &pred.mask)?;
    write_volume(&a.out.join(&prob_file), &Volume::new(volume.dims, pred.mean_prob.clone())?)?;
    let mut outputs = vec![PathBuf::from(mask_file), PathBuf::from(prob_file)];
    if a.overlays {
        let [slices, h, w] = volume.dims;
        for s in 0..slices {
            let probs = &pred.mean_prob[s * h * w..(s + 1) * h * w];
            let img = jet_overlay(probs, volume.slice(s), h, w, bundle.vote_threshold, 0.5)?;
            let file = format!("{name}_overlay_{s:03}.png");
            let path = a.out.join(&file);
            img.save(&path).with_context(|| format!("writing {}", path.display()))?;
            outputs.push(file.into());
        }
    }
    println!("{}: {} of {} voxels segmented", name, pred.mask.count(), pred.mask.voxels.len());
    Ok(outputs)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<Vec<PathBuf>> {
    if a.pred.len() != a.truth.len() {
        bail!("{} predictions but {} truth masks", a.pred.len(), a.truth.len());
    }
    if !a.prob.is_empty() && a.prob.len() != a.pred.len() {
        bail!("{} probability volumes for {} predictions", a.prob.len(), a.pred.len());
    }
    let mut scores = Vec::new();
    let mut pooled = ConfusionCounts::default();
    for (i, (p, t)) in a.pred.iter().zip(&a.truth).enumerate() {
        let pred = read_mask(p).with_context(|| format!("reading prediction {}", p.display()))?;
        let truth = read_mask(t).with_context(|| format!("reading truth {}", t.display()))?;
        let probs = match a.prob.get(i) {
            Some(path) => Some(load_volume(path)?.voxels),
            None => None,
        };
        let score = score_volume(&stem(p)?, &pred, probs.as_deref(), &truth).with_context(|| format!("scoring {}", p.display()))?;
        pooled += score.counts;
        scores.push(score);
    }
    let report = MetricReport::from_scores(scores);
    report.write_csv(&a.out.join("metrics.csv"))?;
    confusion_png(&a.out.join("confusion.png"), &pooled, 64)?;
    println!("{}", report.summary());
    Ok(vec!["metrics.csv".into(), "confusion.png".into()])
}

fn cmd_severity(a: &SeverityArgs) -> Result<Vec<PathBuf>> {
    let mask = read_mask(&a.mask).with_context(|| format!("reading mask {}", a.mask.display()))?;
    let grade = match (&a.lungs, &a.volume) {
        (Some(l), _) => {
            let lungs = read_mask(l).with_context(|| format!("reading lung mask {}", l.display()))?;
            severity_grade(&mask, SeverityReference::Lungs(&lungs))?
        }
        (None, Some(v)) => {
            let volume = load_volume(v)?;
            severity_grade(&mask, SeverityReference::Body { volume: &volume, floor_hu: BODY_FLOOR_HU })?
        }
        (None, None) => bail!("severity needs --lungs or --volume as the reference region"),
    };
    let path = a.out.join("severity.json");
    std::fs::write(&path, serde_json::to_string_pretty(&grade)?).with_context(|| format!("writing {}", path.display()))?;
    println!("{} ({:.2}% of {})", grade.grade, grade.involvement_pct, grade.reference);
    Ok(vec!["severity.json".into()])
}

fn cmd_features(a: &FeaturesArgs) -> Result<Vec<PathBuf>> {
    let bundle = load_bundle(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let state = &bundle.members[0].state;
    let (ph, pw) = state.spec().input_size;
    let volume = normalize_hu(&load_volume(&a.volume)?);
    let [slices, h, w] = volume.dims;
    if a.slice >= slices {
        bail!("{}: slice {} out of range (volume has {slices})", a.volume.display(), a.slice);
    }
    if a.row + ph > h || a.col + pw > w {
        bail!("patch at ({}, {}) of size {ph}x{pw} exceeds the {h}x{w} slice", a.row, a.col);
    }
    let src = volume.slice(a.slice);
    let patch: Vec<f32> = (a.row..a.row + ph).flat_map(|r| src[r * w + a.col..r * w + a.col + pw].iter().copied()).collect();
    let maps = dump_features(state, &Tensor::new(vec![1, 1, ph, pw], patch)?, a.block)?;
    let mut outputs = Vec::new();
    for (c, m) in maps.iter().enumerate() {
        let file = format!("block{}_c{c:03}.png", a.block);
        export_png(&a.out.join(&file), &m.data, m.height, m.width)?;
        outputs.push(file.into());
    }
    println!("block {}: {} channels at {}x{}", a.block, maps.len(), maps[0].height, maps[0].width);
    Ok(outputs)
}

fn cmd_params(a: &ParamsArgs) -> Result<Vec<PathBuf>> {
    let mut spec: ModelSpec = load_config(a.config.as_deref())?.model;
    if let Some(v) = &a.variant {
        spec.variant = Variant::parse(v)?;
    }
    if let Some(b) = a.base_channels {
        spec.base_channels = b;
    }
    spec.validate()?;
    let count = spec.parameter_count();
    println!("{} (base {}): {count} parameters", spec.variant, spec.base_channels);
    let Some(out) = &a.out else { return Ok(Vec::new()) };
    let body = serde_json::json!({ "variant": spec.variant.name(), "base_channels": spec.base_channels, "parameters": count });
    let path = out.join("params.json");
    std::fs::write(&path, serde_json::to_string_pretty(&body)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(vec!["params.json".into()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_commands_require_a_seed() {
        for args in [
            vec!["amcnet", "phantom", "--out", "x"],
            vec!["amcnet", "prep", "--volumes", "v", "--out", "x"],
            vec!["amcnet", "train", "--patches", "p", "--out", "x"],
            vec!["amcnet", "train-ensemble", "--patches", "p", "--out", "x"],
        ] {
            assert!(Cli::try_parse_from(&args).is_err(), "{args:?}");
        }
    }

    #[test]
    fn out_dir_and_seeds_are_exposed() {
        let cli = Cli::try_parse_from(["amcnet", "phantom", "--seed", "7", "--count", "2", "--out", "d"]).unwrap();
        assert_eq!(cli.command.out_dir(), Some(Path::new("d")));
        assert_eq!(cli.command.seeds()["seed"], 7);
        let cli = Cli::try_parse_from(["amcnet", "params", "--variant", "UNET"]).unwrap();
        assert_eq!(cli.command.out_dir(), None);
    }
}
