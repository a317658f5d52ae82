//! `srnet`: synthesize rain, train, derain, evaluate and self-check.

mod dump;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use srnet::gradcheck::{check_kernel, GradcheckOptions, Kernel};
use srnet::io::{load_checkpoint, load_image, load_model, save_image, PairedDataset};
use srnet::synth::{make_dataset, write_scenes, Regime};
use srnet::train::{evaluate, evaluate_inputs, load_pairs, train, Preset, TrainConfig, TrainOutputs};
use srnet::{Ablation, ModelConfig, Srnet};

#[derive(Parser, Debug)]
#[command(name = "srnet", version, about = "Single-image rain removal with a structural residual network")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write rainy/clean pairs generated from a directory of clean PNGs.
    Synth(SynthArgs),
    /// Write procedural clean scenes to use as backgrounds.
    Scenes(ScenesArgs),
    /// Train a network and write its checkpoint.
    Train(TrainArgs),
    /// Remove rain from an image or a directory of images.
    Derain(DerainArgs),
    /// Luminance PSNR/SSIM over a paired dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint's configuration and tensors.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value = "mixed")]
    regime: Regime,
}

#[derive(Args, Debug)]
struct ScenesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training pairs (rain/ and norain/ subdirectories).
    #[arg(long)]
    data: PathBuf,
    /// Held-out pairs evaluated at the schedule milestones.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Final checkpoint; `.best`, `.log` and `.json` siblings are written too.
    #[arg(long)]
    out: PathBuf,
    /// Defaults for every flag below; explicit flags still win.
    #[arg(long)]
    preset: Option<Preset>,
    /// [default: 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 18]
    #[arg(long)]
    batch: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    patch: Option<usize>,
    /// Feature channels N [default: 64]
    #[arg(long)]
    width: Option<usize>,
    /// Pooling stages T [default: 2]
    #[arg(long)]
    depth: Option<usize>,
    /// Dilation factors [default: 1,2,3]
    #[arg(long, value_delimiter = ',')]
    dfs: Option<Vec<usize>>,
    /// Ba, Bb, Bc, Bd, Be or Bf [default: Bf]
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Initial learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Also evaluate every k epochs.
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args, Debug)]
struct DerainArgs {
    #[arg(long)]
    model: PathBuf,
    /// PNG file or directory of PNG files.
    #[arg(long)]
    input: PathBuf,
    /// Output file, or directory when the input is a directory.
    #[arg(long)]
    output: PathBuf,
    /// Also write the rain layers and feature maps here.
    #[arg(long)]
    dump_layers: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Without a model the rainy inputs themselves are scored.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Write the aggregate summary as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "tiny", value_parser = ["tiny"])]
    config: String,
    /// Random instances per kernel.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Perturb one kernel's analytic gradient (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<Kernel>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => synth(a, seed)?,
        Command::Scenes(a) => {
            let files = write_scenes(&a.out, a.n, a.height, a.width, seed)?;
            println!("wrote {} scenes to {}", files.len(), a.out.display());
        }
        Command::Train(a) => train_cmd(a, seed)?,
        Command::Derain(a) => derain_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Gradcheck(a) => return gradcheck(a, seed),
        Command::Inspect(a) => inspect(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let manifest = make_dataset(&a.clean, &a.out, a.n, a.regime, seed)
        .with_context(|| format!("generating pairs from {}", a.clean.display()))?;
    println!("{}", a.out.join(srnet::synth::MANIFEST_NAME).display());
    println!("{} pairs", manifest.entries.len());
    Ok(())
}

fn resolve_train(a: &TrainArgs, seed: u64) -> Result<(ModelConfig, TrainConfig)> {
    let variant = a.ablation.unwrap_or(Ablation::Bf);
    let (mut model, mut hyper) = a.preset.unwrap_or(Preset::Paper).configs(variant);
    if let Some(w) = a.width {
        model.width = w;
    }
    if let Some(d) = a.depth {
        model.depth = d;
    }
    if let Some(dfs) = &a.dfs {
        model.dilation_factors = dfs.clone();
    }
    if let Some(e) = a.epochs {
        hyper.epochs = e;
        if a.preset == Some(Preset::Desk) {
            hyper.schedule = srnet::Schedule::default().scaled_to(e);
        }
    }
    if let Some(b) = a.batch {
        hyper.batch = b;
    }
    if let Some(p) = a.patch {
        hyper.patch = p;
    }
    if let Some(lr) = a.lr {
        hyper.schedule.base_lr = lr;
    }
    hyper.eval_every = a.eval_every;
    hyper.seed = seed;
    model.validate()?;
    if hyper.patch % model.alignment() != 0 {
        bail!("patch size {} is not a multiple of {}", hyper.patch, model.alignment());
    }
    Ok((model, hyper))
}

fn train_cmd(a: TrainArgs, seed: u64) -> Result<()> {
    let (model, hyper) = resolve_train(&a, seed)?;
    let data = PairedDataset::open(&a.data).with_context(|| format!("opening {}", a.data.display()))?;
    let train_pairs = load_pairs(&data)?;
    let eval_pairs = match &a.eval {
        Some(dir) => load_pairs(&PairedDataset::open(dir).with_context(|| format!("opening {}", dir.display()))?)?,
        None => Vec::new(),
    };
    println!(
        "training {} pairs, {} held out; N={} T={} dfs={:?} params={} epochs={} batch={} patch={}",
        train_pairs.len(),
        eval_pairs.len(),
        model.width,
        model.depth,
        model.scales(),
        model.param_count()?,
        hyper.epochs,
        hyper.batch,
        hyper.patch
    );
    let start = Instant::now();
    let outputs = TrainOutputs::beside(&a.out);
    let result = train(&train_pairs, &eval_pairs, model, &hyper, &outputs, |r| println!("{}", r.log_line()))?;
    let rep = &result.report;
    if let (Some(ip), Some(is)) = (rep.input_psnr_y, rep.input_ssim_y) {
        println!("rainy input  psnr_y {ip:.4} ssim_y {is:.4}");
    }
    if let (Some(fp), Some(fs)) = (rep.final_psnr_y, rep.final_ssim_y) {
        println!("final model  psnr_y {fp:.4} ssim_y {fs:.4}");
    }
    println!("checkpoint {} ({:.1}s)", a.out.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn derain_one(model: &Srnet<f32>, input: &Path, output: &Path, dump: Option<&Path>) -> Result<()> {
    let img = load_image::<f32>(input)?;
    let d = srnet::train::derain(model, &img)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_image(&d.background, output)?;
    if let Some(dir) = dump {
        let n = dump::write_layers(model, &img, &d, dir)?;
        println!("{} layer images in {}", n, dir.display());
    }
    Ok(())
}

fn derain_cmd(a: DerainArgs) -> Result<()> {
    let model = load_model::<f32>(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    if a.input.is_dir() {
        let files = srnet::synth::list_pngs(&a.input)?;
        std::fs::create_dir_all(&a.output)?;
        for f in &files {
            let name = f.file_name().expect("listed files have names");
            let dump = a.dump_layers.as_ref().map(|d| d.join(Path::new(name).with_extension("")));
            derain_one(&model, f, &a.output.join(name), dump.as_deref())?;
        }
        println!("derained {} images into {}", files.len(), a.output.display());
    } else {
        derain_one(&model, &a.input, &a.output, a.dump_layers.as_deref())?;
        println!("{}", a.output.display());
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let data = PairedDataset::open(&a.data).with_context(|| format!("opening {}", a.data.display()))?;
    let pairs = load_pairs(&data)?;
    let report = match &a.model {
        Some(path) => {
            evaluate(&load_model::<f32>(path).with_context(|| format!("loading {}", path.display()))?, &pairs)?
        }
        None => evaluate_inputs(&pairs)?,
    };
    print!("{}", report.to_table());
    let json = report.summary_json();
    println!("{json}");
    if let Some(p) = &a.json {
        std::fs::write(p, format!("{json}\n"))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs, seed: u64) -> Result<ExitCode> {
    let opts = GradcheckOptions { seed, instances: a.instances, corrupt: a.corrupt, ..Default::default() };
    let start = Instant::now();
    let mut ok = true;
    for k in Kernel::ALL {
        let r = check_kernel(k, &opts)?;
        println!("{r}");
        ok &= r.passed();
    }
    println!(
        "{} in {:.1}s",
        if ok { "all gradients ok" } else { "GRADIENT CHECK FAILED" },
        start.elapsed().as_secs_f64()
    );
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn inspect(a: InspectArgs) -> Result<()> {
    let (config, store) = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    println!("width {}  depth {}  dilation factors {:?}", config.width, config.depth, config.dilation_factors);
    println!(
        "multi_scale {}  use_pooling {}  use_maxunpool {}  global_residual {}  local_skips {}  weight_sharing {}",
        config.multi_scale,
        config.use_pooling,
        config.use_maxunpool,
        config.global_residual,
        config.local_skips,
        config.weight_sharing
    );
    println!("fingerprint {:016x}", config.fingerprint());
    println!("{} tensors, {} parameters", store.len(), store.scalar_count());
    for p in store.iter() {
        println!("  {:<28} {}", p.name, p.value.shape());
    }
    Srnet::from_store(config, store)?;
    Ok(())
}
