use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use ssnet::phantom::{generate_dataset, PhantomSpec};
use ssnet::phase_filters::{build_stack, FilterParams, UltrasoundFrame};
use ssnet::trainer::{
    evaluate, infer, run_ablation, split_by_subject, train, Checkpoint, Dataset, TrainConfig,
    TrainOptions, Variant,
};
use ssnet::{io, Error, Result};

mod manifest;

use manifest::RunManifest;

/// Bone surface and shadow segmentation toolkit.
#[derive(Debug, Parser)]
#[command(name = "ssnet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Compute filter stacks and preview images for PNG frames.
    Filters(FiltersArgs),
    /// Train a model on the train split of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint with k-fold dice.
    Eval(EvalArgs),
    /// Train and compare ablation variants over several seeds.
    Ablate(AblateArgs),
    /// Segment a single frame.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Phantom spec JSON; every field required. Defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct FiltersArgs {
    /// A PNG file or a directory of PNG files.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset directory written by `synth`. Falls back to the config's
    /// `dataset` field, then to $SSNET_DATA_DIR.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fraction of subject groups used for training.
    #[arg(long, default_value_t = 0.8)]
    split_ratio: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TrainConfig JSON; every field required.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many steps in total.
    #[arg(long)]
    stop_at: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Subset {
    Test,
    Train,
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Which split to score; the split is recomputed from the checkpoint's seed.
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    subset: Subset,
    /// Defaults to the checkpoint config's `folds`.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated: base, ctft, ctft+tcc, unet, unet+ctft.
    #[arg(long, default_value = "base,ctft,ctft+tcc")]
    variants: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Filter parameters; defaults to those stored in the checkpoint.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_usage() {
        2
    } else if e.is_io() {
        3
    } else {
        1
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Filters(a) => filters(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Infer(a) => infer_cmd(a),
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    io::read_json(path).map_err(|e| match e {
        Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
        other => other,
    })
}

fn filter_params(path: Option<&Path>) -> Result<FilterParams> {
    match path {
        Some(p) => FilterParams::from_json_file(p),
        None => Ok(FilterParams::default()),
    }
}

fn data_dir(flag: Option<&Path>, config: Option<&Path>) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os("SSNET_DATA_DIR").map(PathBuf::from))
        .ok_or_else(|| Error::Config("no dataset given: pass --data, set `dataset` in the config or SSNET_DATA_DIR".into()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let started = Instant::now();
    let mut spec = match &a.spec {
        Some(p) => load_json::<PhantomSpec>(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let manifest = generate_dataset(&spec, a.n, &a.out)?;
    println!("wrote {} samples to {}", manifest.n, a.out.display());
    println!("content_hash {}", manifest.content_hash);
    let mut run = RunManifest::new("synth", json!({ "spec": spec, "n": a.n }));
    if let Some(p) = &a.spec {
        run.input_file(p)?;
    }
    run.output(a.out.join(ssnet::phantom::MANIFEST_FILE));
    run.finish(&a.out, started)
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = std::fs::read_dir(input).map_err(|e| io_err(input, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn filters(a: FiltersArgs) -> Result<()> {
    let started = Instant::now();
    let params = filter_params(a.params.as_deref())?;
    let inputs = png_inputs(&a.input)?;
    if inputs.is_empty() {
        return Err(io_err(
            &a.input,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no PNG files found"),
        ));
    }
    io::create_dir(&a.out)?;
    let mut run = RunManifest::new("filters", json!({ "params": params }));
    let mut first_error = None;
    let mut done = 0;
    for path in &inputs {
        let result = (|| -> Result<Vec<PathBuf>> {
            let frame = UltrasoundFrame::from_png(path)?;
            let stack = build_stack(&frame, &params)?;
            let stem = a.out.join(path.file_stem().unwrap_or_default());
            let (bin, json) = stack.save(&stem, &params)?;
            let mut written = vec![bin, json];
            for (name, ch) in ["bmode", "lpt", "lp", "bse"].iter().zip(stack.channels()) {
                let preview = PathBuf::from(format!("{}_{name}.png", stem.display()));
                io::write_gray8(&preview, ch.view())?;
                written.push(preview);
            }
            Ok(written)
        })();
        match result {
            Ok(written) => {
                run.input_file(path)?;
                written.into_iter().for_each(|p| run.output(p));
                done += 1;
            }
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                first_error.get_or_insert(e);
            }
        }
    }
    println!("filtered {done}/{} images into {}", inputs.len(), a.out.display());
    if done == 0 {
        return Err(first_error.expect("at least one input failed"));
    }
    run.finish(&a.out, started)
}

fn split_data(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let split = split_by_subject(&data.groups, ratio, seed)?;
    Ok((data.subset(&split.train)?, data.subset(&split.test)?))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let config = TrainConfig::from_json_file(&a.config)?;
    let dir = data_dir(a.data.data.as_deref(), config.dataset.as_deref())?;
    let data = Dataset::load(&dir, &config.filters)?;
    let (train_set, test_set) = split_data(&data, a.data.split_ratio, config.seed)?;
    log::info!(
        "training on {} samples ({} held out), {} steps",
        train_set.len(),
        test_set.len(),
        config.total_steps()
    );
    let outcome = train(
        &config,
        &train_set,
        &TrainOptions {
            out_dir: Some(a.out.clone()),
            resume: a.resume.clone(),
            tag: None,
            stop_at: a.stop_at,
        },
    )?;
    let m = &outcome.checkpoint.manifest;
    if let Some(last) = outcome.history.last() {
        println!(
            "final step {} phase {}: total {:.4} (bce_surface {:.4}, bce_shadow {:.4}, tcc {:.4})",
            last.step, last.phase, last.total, last.bce_surface, last.bce_shadow, last.tcc
        );
    }
    println!("checkpoint {} ({} parameters)", a.out.display(), m.parameter_count);
    let mut run = RunManifest::new(
        "train",
        json!({ "config": config, "split_ratio": a.data.split_ratio, "stop_at": a.stop_at }),
    );
    run.input_file(&a.config)?;
    run.input_hash(&dir, &data.hash);
    if let Some(r) = &a.resume {
        run.input_file(&r.join(ssnet::trainer::MANIFEST_NAME))?;
    }
    for f in ["weights.ot", "manifest.json", "train_log.jsonl", "loss.csv", "loss.png"] {
        run.output(a.out.join(f));
    }
    run.finish(&a.out, started)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let ck = Checkpoint::load(&a.checkpoint)?;
    let config = ck.config().clone();
    let dir = data_dir(a.data.data.as_deref(), config.dataset.as_deref())?;
    let data = Dataset::load(&dir, &config.filters)?;
    let (train_set, test_set) = split_data(&data, a.data.split_ratio, config.seed)?;
    let target = match a.subset {
        Subset::Test => test_set,
        Subset::Train => train_set,
        Subset::All => data,
    };
    let k = a.folds.unwrap_or(config.folds);
    let report = evaluate(&ck, &target, k)?;
    report.save(&a.out, "SSNet")?;
    println!("{}", report.to_table("SSNet"));
    println!("dice_surface {:.4} ± {:.4}", report.dice_surface.mean, report.dice_surface.std);
    println!("dice_shadow {:.4} ± {:.4}", report.dice_shadow.mean, report.dice_shadow.std);
    let mut run = RunManifest::new(
        "eval",
        json!({ "subset": format!("{:?}", a.subset).to_lowercase(), "folds": k, "split_ratio": a.data.split_ratio }),
    );
    run.input_file(&a.checkpoint.join(ssnet::trainer::MANIFEST_NAME))?;
    run.input_hash(&dir, &target.hash);
    run.output(a.out.join("report.json"));
    run.output(a.out.join("report.txt"));
    run.finish(&a.out, started)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let started = Instant::now();
    let config = TrainConfig::from_json_file(&a.config)?;
    let variants = Variant::parse_list(&a.variants)?;
    let dir = data_dir(a.data.data.as_deref(), config.dataset.as_deref())?;
    let data = Dataset::load(&dir, &config.filters)?;
    let split = split_by_subject(&data.groups, a.data.split_ratio, config.seed)?;
    let table = run_ablation(&config, &data, &split, &variants, &a.seeds, &a.out)?;
    println!("{}", table.render());
    let mut run = RunManifest::new(
        "ablate",
        json!({ "config": config, "variants": variants, "seeds": a.seeds, "split_ratio": a.data.split_ratio }),
    );
    run.input_file(&a.config)?;
    run.input_hash(&dir, &data.hash);
    run.output(a.out.join("ablation.json"));
    run.output(a.out.join("ablation.txt"));
    for r in table.rows.iter().flat_map(|r| &r.runs) {
        run.output(r.manifest.clone());
    }
    run.finish(&a.out, started)
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let started = Instant::now();
    let ck = Checkpoint::load(&a.checkpoint)?;
    let params = match &a.params {
        Some(p) => FilterParams::from_json_file(p)?,
        None => ck.config().filters.clone(),
    };
    let frame = UltrasoundFrame::from_png(&a.input)?;
    let masks = infer(&ck, &frame, &params, Some(&a.out))?;
    let (h, w) = masks.surface.dim();
    let count = |m: &ssnet::Mask| m.iter().filter(|&&v| v != 0).count();
    println!("surface pixels {} / {}", count(&masks.surface), h * w);
    println!("shadow pixels {} / {}", count(&masks.shadow), h * w);
    let mut run = RunManifest::new("infer", json!({ "params": params }));
    run.input_file(&a.input)?;
    run.input_file(&a.checkpoint.join(ssnet::trainer::MANIFEST_NAME))?;
    if let Some((s, sh)) = masks.files {
        println!("wrote {} and {}", s.display(), sh.display());
        run.output(s);
        run.output(sh);
    }
    run.finish(&a.out, started)
}
