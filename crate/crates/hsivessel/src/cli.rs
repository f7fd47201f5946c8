//! Subcommand implementations behind the `hsivessel` binary.
//!
//! Every subcommand exits 0 on success, 2 on input-validation failure, and
//! 1 on internal errors; machine-readable outputs are JSON.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_cube, load_mask_png, make_source_phantom, make_target_phantom, save_cube, save_mask_png,
    save_reduced_png, ChannelMeaning, Domain, PhantomSpec, ReducedImage, SampleImage, SamplePair,
};
use crate::error::{Error, Result};
use crate::harness::{
    find_approach, mix_seed, run_cross_test, CrossTestData, CrossTestPlan, HyperparamSpace,
    StubRunner, TrainRunner, TrialConfig, TrialRunner,
};
use crate::metrics::{Metrics, MetricsReport, MetricsRow};
use crate::reduce::{rgb_windowing, window_median, WavelengthWindow};
use crate::train::TrainConfig;

#[derive(Debug, Parser)]
#[command(
    name = "hsivessel",
    about = "Cross-domain vessel segmentation for hyperspectral images",
    version
)]
pub struct Cli {
    /// Global JSON config file; explicit flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed propagated to every stochastic stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset (target cubes + source images).
    Synth(SynthArgs),
    /// Reduce a hyperspectral cube to a PNG by median windowing.
    Reduce(ReduceArgs),
    /// Train one approach from the catalog on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a trained model on annotated samples.
    Eval(EvalArgs),
    /// Run the full cross-testing protocol for one approach.
    Crosstest(CrosstestArgs),
    /// Render a stored report as a text table.
    Report(ReportArgs),
}

/// Optional JSON config: data paths, output directory, device, seed.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct CliConfig {
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Only "cpu" is supported.
    #[serde(default)]
    pub device: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl CliConfig {
    fn load(path: Option<&Path>) -> Result<CliConfig> {
        let Some(path) = path else { return Ok(CliConfig::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: CliConfig = serde_json::from_str(&text)?;
        if let Some(device) = &cfg.device {
            if device != "cpu" {
                return Err(Error::Config(format!(
                    "device '{device}' is not available; this build is CPU-only"
                )));
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of target-domain cubes.
    #[arg(long, default_value_t = 8)]
    pub targets: usize,
    /// Number of source-domain images.
    #[arg(long, default_value_t = 20)]
    pub sources: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 32)]
    pub bands: usize,
    #[arg(long, default_value_t = 0.10)]
    pub density: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct ReduceArgs {
    /// Cube header (JSON).
    #[arg(long)]
    pub cube: PathBuf,
    /// Grayscale window "lo:hi" in nm.
    #[arg(long, conflicts_with = "rgb")]
    pub window: Option<String>,
    /// Three windows "r_lo:r_hi,g_lo:g_hi,b_lo:b_hi".
    #[arg(long)]
    pub rgb: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Approach id from the catalog (e.g. fada-gray-500to600).
    #[arg(long)]
    pub approach: String,
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Adaptation steps.
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    /// Source-only pretraining steps (where the approach uses them).
    #[arg(long, default_value_t = 300)]
    pub pretrain_steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model directory produced by `train` (or its model.json path).
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated sample ids; all annotated targets when omitted.
    #[arg(long)]
    pub ids: Option<String>,
}

#[derive(Debug, Args)]
pub struct CrosstestArgs {
    #[arg(long)]
    pub approach: String,
    #[arg(long)]
    pub data: PathBuf,
    /// Plan file (JSON CrossTestPlan); a default plan over the first five
    /// target ids is built when omitted.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Count protocol arithmetic with a no-training stub.
    #[arg(long, default_value_t = false)]
    pub stub_training: bool,
    #[arg(long, default_value_t = 120)]
    pub steps: usize,
    #[arg(long, default_value_t = 120)]
    pub pretrain_steps: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json produced by eval or crosstest.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value = "run")]
    pub label: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Cube header or PNG path, relative to the manifest.
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub targets: Vec<ManifestEntry>,
    pub sources: Vec<ManifestEntry>,
}

/// Model directory descriptor written by `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub approach_id: String,
    pub trial: TrialConfig,
    /// Member subdirectories for ensembles.
    pub members: Vec<String>,
}

pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Io { .. } => 1,
        _ => 2,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = CliConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let out = cli
        .out
        .clone()
        .or(config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    match cli.command {
        Command::Synth(args) => cmd_synth(&args, seed, &out),
        Command::Reduce(args) => cmd_reduce(&args, &out),
        Command::Train(args) => cmd_train(&args, seed, &out),
        Command::Eval(args) => cmd_eval(&args, &out),
        Command::Crosstest(args) => cmd_crosstest(&args, seed, &out),
        Command::Report(args) => cmd_report(&args),
    }
}

pub fn cmd_synth(args: &SynthArgs, seed: u64, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let base = PhantomSpec {
        height: args.height,
        width: args.width,
        n_bands: args.bands,
        vessel_density: args.density,
        noise_sigma: args.noise,
        seed,
        ..PhantomSpec::default()
    };
    base.validate()?;

    let mut targets = Vec::new();
    for i in 0..args.targets {
        let spec = PhantomSpec { seed: mix_seed(&[seed, 1, i as u64]), ..base.clone() };
        let (cube, mask) = make_target_phantom(&spec)?;
        let id = format!("target_{i:03}");
        let header = format!("{id}.json");
        let mask_file = format!("{id}_mask.png");
        save_cube(&cube, out.join(&header), &format!("{id}.raw"))?;
        save_mask_png(&mask, out.join(&mask_file))?;
        targets.push(ManifestEntry { id, image: header, mask: mask_file });
    }

    let mut sources = Vec::new();
    for i in 0..args.sources {
        let spec = PhantomSpec { seed: mix_seed(&[seed, 2, i as u64]), ..base.clone() };
        let (image, mask) = make_source_phantom(&spec)?;
        let id = format!("source_{i:03}");
        let image_file = format!("{id}.png");
        let mask_file = format!("{id}_mask.png");
        save_reduced_png(&image, out.join(&image_file))?;
        save_mask_png(&mask, out.join(&mask_file))?;
        sources.push(ManifestEntry { id, image: image_file, mask: mask_file });
    }

    let manifest = Manifest { seed, phantom: base, targets, sources };
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    println!(
        "wrote {} target cubes and {} source images to {}",
        args.targets,
        args.sources,
        out.display()
    );
    Ok(())
}

fn parse_rgb_windows(text: &str) -> Result<[WavelengthWindow; 3]> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::invalid("expected three comma-separated windows"));
    }
    Ok([
        WavelengthWindow::parse(parts[0])?,
        WavelengthWindow::parse(parts[1])?,
        WavelengthWindow::parse(parts[2])?,
    ])
}

pub fn cmd_reduce(args: &ReduceArgs, out: &Path) -> Result<()> {
    let cube = load_cube(&args.cube)?;
    let (reduced, default_name) = match (&args.window, &args.rgb) {
        (Some(w), None) => {
            let window = WavelengthWindow::parse(w)?;
            (window_median(&cube, &window)?, format!("reduced_{}_{}.png", window.lo_nm, window.hi_nm))
        }
        (None, Some(spec)) => {
            let windows = parse_rgb_windows(spec)?;
            (rgb_windowing(&cube, &windows)?, "reduced_rgb.png".to_string())
        }
        (None, None) => {
            let window = crate::reduce::window_500_600();
            (window_median(&cube, &window)?, "reduced_500_600.png".to_string())
        }
        (Some(_), Some(_)) => {
            return Err(Error::invalid("--window and --rgb are mutually exclusive"))
        }
    };
    let target = if out.extension().is_some() {
        out.to_path_buf()
    } else {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        out.join(default_name)
    };
    save_reduced_png(&reduced, &target)?;
    println!("wrote {}", target.display());
    Ok(())
}

/// Loads a synth-format dataset directory into source pairs and annotated
/// target pairs (masks attached; training strips them).
pub fn load_dataset(dir: &Path) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;

    let mut sources = Vec::new();
    for entry in &manifest.sources {
        let image = crate::data::load_reduced_png(dir.join(&entry.image))?;
        let mask = load_mask_png(dir.join(&entry.mask))?;
        sources.push(SamplePair::new(
            SampleImage::Reduced(image),
            Some(mask),
            Domain::Source,
            entry.id.clone(),
        )?);
    }
    let mut targets = Vec::new();
    for entry in &manifest.targets {
        let cube = load_cube(dir.join(&entry.image))?;
        let mask = load_mask_png(dir.join(&entry.mask))?;
        targets.push(SamplePair::new(
            SampleImage::Cube(cube),
            Some(mask),
            Domain::Target,
            entry.id.clone(),
        )?);
    }
    Ok((sources, targets))
}

fn split_cross_test_data(
    sources: Vec<SamplePair>,
    targets: Vec<SamplePair>,
    annotated_ids: &[String],
) -> CrossTestData {
    let (annotated, unlabeled): (Vec<_>, Vec<_>) = targets
        .into_iter()
        .partition(|t| annotated_ids.contains(&t.id().to_string()));
    CrossTestData {
        source: sources,
        target_unlabeled: unlabeled.into_iter().map(SamplePair::into_unlabeled).collect(),
        annotated,
    }
}

pub fn cmd_train(args: &TrainArgs, seed: u64, out: &Path) -> Result<()> {
    let approach = find_approach(&args.approach)?;
    let (sources, targets) = load_dataset(&args.data)?;
    // Training never reads target masks: every target enters unlabeled.
    let data = CrossTestData {
        source: sources,
        target_unlabeled: targets.into_iter().map(SamplePair::into_unlabeled).collect(),
        annotated: Vec::new(),
    };

    let template = approach.template(&TrainConfig {
        steps: args.steps,
        batch_size: args.batch,
        seed,
        ..TrainConfig::default()
    });
    template.validate()?;
    let trial = TrialConfig { index: 0, seed, train: template };

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut runner = TrainRunner::new(approach.clone(), None, args.pretrain_steps);
    let model = runner.train(0, &trial, &data)?;

    let mut members = Vec::new();
    if model.members.is_empty() {
        persist_model_dir(&model, out)?;
    } else {
        for (i, member) in model.members.iter().enumerate() {
            let sub = format!("member{i}");
            persist_model_dir(member, &out.join(&sub))?;
            members.push(sub);
        }
    }
    let descriptor = ModelDescriptor { approach_id: approach.id.clone(), trial, members };
    let path = out.join("model.json");
    std::fs::write(&path, serde_json::to_string_pretty(&descriptor)?)
        .map_err(|e| Error::io(&path, e))?;
    println!("trained {} -> {}", approach.id, out.display());
    Ok(())
}

fn persist_model_dir(model: &crate::harness::TrainedModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.log.write_ndjson(dir.join("steplog.ndjson"))?;
    let mut models: Vec<&dyn crate::nn::ParamSet> = vec![&model.net];
    if let Some(g) = &model.gen_g {
        models.push(g);
    }
    crate::nn::save_checkpoint(
        dir.join("checkpoint.json"),
        &models,
        serde_json::json!({ "reduction": model.reduction }),
    )?;
    Ok(())
}

fn load_model_dir(dir: &Path) -> Result<crate::harness::TrainedModel> {
    let descriptor_path = if dir.is_dir() { dir.join("model.json") } else { dir.to_path_buf() };
    let root = descriptor_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text =
        std::fs::read_to_string(&descriptor_path).map_err(|e| Error::io(&descriptor_path, e))?;
    let descriptor: ModelDescriptor = serde_json::from_str(&text)?;
    let approach = find_approach(&descriptor.approach_id)?;

    let load_single = |dir: &Path, spec: &crate::harness::ApproachSpec| -> Result<crate::harness::TrainedModel> {
        crate::harness::load_model_artifacts(spec, dir)
    };

    if descriptor.members.is_empty() {
        load_single(&root, &approach)
    } else {
        let member_ids = approach
            .ensemble_of
            .clone()
            .ok_or_else(|| Error::Checkpoint("ensemble descriptor without members".into()))?;
        let mut members = Vec::new();
        for (sub, id) in descriptor.members.iter().zip(member_ids.iter()) {
            let spec = find_approach(id)?;
            members.push(load_single(&root.join(sub), &spec)?);
        }
        Ok(crate::harness::TrainedModel {
            net: crate::models::SegNet::new(
                crate::models::SegNetConfig::desk_default(1),
                0,
            )?,
            gen_g: None,
            reduction: approach.reduction.clone(),
            members,
            log: crate::train::TrainLog::default(),
        })
    }
}

pub fn cmd_eval(args: &EvalArgs, out: &Path) -> Result<()> {
    let model = load_model_dir(&args.model)?;
    let (_, targets) = load_dataset(&args.data)?;
    let wanted: Option<Vec<String>> = args
        .ids
        .as_ref()
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect());

    let mut rows = Vec::new();
    std::fs::create_dir_all(out.join("overlays")).map_err(|e| Error::io(out, e))?;
    let mut evaluated = 0usize;
    for sample in &targets {
        if let Some(ids) = &wanted {
            if !ids.contains(&sample.id().to_string()) {
                continue;
            }
        }
        let Some(mask) = sample.mask() else {
            return Err(Error::invalid(format!("sample '{}' has no mask for eval", sample.id())));
        };
        let pred = model.predict_mask(sample)?;
        rows.push(MetricsRow {
            id: sample.id().to_string(),
            repetition: None,
            metrics: Metrics::of_pair(&pred, mask)?,
        });
        write_overlay(&model, sample, &pred, &out.join("overlays").join(format!("{}.png", sample.id())))?;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::invalid("no annotated samples matched the eval request"));
    }
    let report = MetricsReport::aggregate(rows)?;
    let path = out.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)
        .map_err(|e| Error::io(&path, e))?;
    println!("{}", report.render_table("eval"));
    println!("wrote {}", path.display());
    Ok(())
}

/// Side-by-side qualitative panel: reduced input | ground truth | prediction.
fn write_overlay(
    model: &crate::harness::TrainedModel,
    sample: &SamplePair,
    pred: &crate::data::Mask,
    path: &Path,
) -> Result<()> {
    let panel_model = if model.members.is_empty() { model } else { &model.members[0] };
    let input = reduced_input_for(panel_model, sample)?;
    let (h, w, k) = input.dim();
    let mask = sample.mask().expect("checked by caller");
    let mut panel = Array3::<f32>::zeros((h, w * 3, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = if k == 3 { input[[y, x, c]] } else { input[[y, x, 0]] };
                panel[[y, x, c]] = v;
                panel[[y, w + x, c]] = mask.data()[[y, x]] as f32;
                panel[[y, 2 * w + x, c]] = pred.data()[[y, x]] as f32;
            }
        }
    }
    let image = ReducedImage::new(panel, ChannelMeaning::Rgb)?;
    save_reduced_png(&image, path)
}

/// The reduction a model would feed to its network, for qualitative output.
fn reduced_input_for(
    model: &crate::harness::TrainedModel,
    sample: &SamplePair,
) -> Result<Array3<f32>> {
    match sample.image() {
        SampleImage::Reduced(im) => Ok(im.data().clone()),
        SampleImage::Cube(cube) => match &model.reduction {
            crate::train::ReductionCfg::StaticWindow(ws) => match ws.as_slice() {
                [w] => Ok(window_median(cube, w)?.into_data()),
                [r, g, b] => Ok(rgb_windowing(cube, &[*r, *g, *b])?.into_data()),
                _ => Err(Error::invalid("expected one window or three")),
            },
            _ => {
                let g = model
                    .gen_g
                    .as_ref()
                    .ok_or_else(|| Error::invalid("learned reduction without generator"))?;
                let tape = crate::autodiff::Tape::<f32>::inference();
                let input = tape.leaf(crate::models::batch_images(&[cube.data()]).into_dyn());
                let out = g.forward(&tape, input)?;
                let arr = tape
                    .value(out)
                    .into_dimensionality::<ndarray::Ix4>()
                    .expect("BCHW");
                let (_, kk, hh, ww) = arr.dim();
                let mut img = Array3::<f32>::zeros((hh, ww, kk));
                for c in 0..kk {
                    for y in 0..hh {
                        for x in 0..ww {
                            img[[y, x, c]] = arr[[0, c, y, x]];
                        }
                    }
                }
                Ok(img)
            }
        },
    }
}

pub fn cmd_crosstest(args: &CrosstestArgs, seed: u64, out: &Path) -> Result<()> {
    let approach = find_approach(&args.approach)?;
    let (sources, targets) = load_dataset(&args.data)?;
    if targets.len() < 5 {
        return Err(Error::invalid(format!(
            "cross-testing needs at least 5 target samples, found {}",
            targets.len()
        )));
    }

    let plan = match &args.plan {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<CrossTestPlan>(&text)?
        }
        None => CrossTestPlan::new(
            targets.iter().take(5).map(|t| t.id().to_string()).collect(),
            seed,
        ),
    };
    plan.validate()?;

    let data = split_cross_test_data(sources, targets, &plan.annotated_ids);
    let template = approach.template(&TrainConfig {
        steps: args.steps,
        seed,
        ..TrainConfig::default()
    });
    let space = HyperparamSpace { seed, ..HyperparamSpace::default() };

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report = if args.stub_training {
        let mut runner = StubRunner::default();
        let report = run_cross_test(&plan, &approach, &space, &template, &data, &mut runner)?;
        println!(
            "stub run: {} trainings, {} validation evals, {} test evals",
            runner.train_calls, runner.validation_calls, runner.test_calls
        );
        report
    } else {
        let mut runner = TrainRunner::new(
            approach.clone(),
            Some(out.join("runs")),
            args.pretrain_steps,
        );
        run_cross_test(&plan, &approach, &space, &template, &data, &mut runner)?
    };

    let report_path = out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)
        .map_err(|e| Error::io(&report_path, e))?;
    let table = report.render_table(&approach.description);
    let table_path = out.join("table.txt");
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    println!("{table}");
    println!("wrote {}", report_path.display());
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.report).map_err(|e| Error::io(&args.report, e))?;
    let report: MetricsReport = serde_json::from_str(&text)?;
    println!("{}", report.render_table(&args.label));
    Ok(())
}
