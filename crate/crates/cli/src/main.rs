use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gabornet::data::{self, LabeledDataset};
use gabornet::gradcheck::{self, GradcheckOptions};
use gabornet::train::checkpoint::{self, Checkpoint};
use gabornet::train::export::export_filters;
use gabornet::train::metrics::fmt_sig6;
use gabornet::train::runner::{self, network_spec, ExperimentData, RunFiles};
use gabornet::train::{build_network, EpochMetrics, ExperimentConfig, NetworkSpec};
use gabornet::Error;

const EXIT_CODES: &str =
    "Exit codes: 0 success, 1 gradient check failed, 2 usage or config error, \
                          3 data or file error, 4 numeric abort (non-finite loss or gradient).";

/// Gabor-parameterized convolutional networks: synthetic data, training,
/// evaluation, filter export and gradient checks.
#[derive(Parser, Debug)]
#[command(name = "gabornet", version, after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an oriented-grating texture dataset as root/<class>/NNNNN.png.
    #[command(after_help = EXIT_CODES)]
    GenData(GenDataArgs),
    /// Train a network (or a GCNN/CNN pair) from a config file.
    #[command(after_help = EXIT_CODES)]
    Train(TrainArgs),
    /// Report loss and accuracy of a saved checkpoint on an image directory.
    #[command(after_help = EXIT_CODES)]
    Eval(EvalArgs),
    /// Render first-layer kernels as a grayscale PNG grid.
    #[command(after_help = EXIT_CODES)]
    ExportFilters(ExportArgs),
    /// Compare every analytic gradient with central finite differences.
    #[command(after_help = EXIT_CODES)]
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory; must be empty or absent unless --force is given.
    #[arg(long)]
    out: PathBuf,
    /// Number of classes (orientations), 2 to 8.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Images per class.
    #[arg(long, default_value_t = 600)]
    per_class: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Standard deviation of the Gaussian pixel noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Generator seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Delete an existing non-empty --out directory before writing.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Experiment config file (flat key = value, TOML syntax).
    #[arg(long)]
    config: PathBuf,
    /// Train the GCNN and its standard-convolution twin and write summary.txt.
    #[arg(long)]
    paired: bool,
    /// Continue a single run from this checkpoint up to the configured epochs.
    #[arg(long, conflicts_with = "paired")]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Subset {
    /// The validation split if the checkpoint recorded one, otherwise all images.
    Auto,
    All,
    Train,
    Val,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image directory in root/<class>/*.png layout.
    #[arg(long)]
    data: PathBuf,
    /// Which part of --data to score; train/val re-create the split stored in the checkpoint.
    #[arg(long, value_enum, default_value_t = Subset::Auto)]
    subset: Subset,
    /// Evaluation batch size.
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["checkpoint", "config"]))]
struct ExportArgs {
    /// Export the kernels of a trained checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Export the freshly initialized kernels of the network in this config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Pixel magnification per kernel element.
    #[arg(long, default_value_t = 4)]
    scale: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Seed for the random configurations.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run only matching groups, by full name (layers.dense), by one part
    /// (dense, layers) or by one word (gabor selects every Gabor check).
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, hide = true)]
    corrupt: bool,
}

enum Failure {
    Checks(usize),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => 2,
        Error::NonFinite(_) => 4,
        _ => 3,
    }
}

fn print_resolved(command: &str, pairs: &[(&str, String)]) {
    println!("# {command}");
    for (k, v) in pairs {
        println!("{k} = {v}");
    }
    println!();
}

fn gen_data(args: &GenDataArgs) -> Result<(), Failure> {
    print_resolved(
        "gen-data",
        &[
            ("out", format!("{:?}", args.out.display().to_string())),
            ("classes", args.classes.to_string()),
            ("per_class", args.per_class.to_string()),
            ("size", args.size.to_string()),
            ("noise", args.noise.to_string()),
            ("seed", args.seed.to_string()),
            ("force", args.force.to_string()),
        ],
    );
    let ds = data::gen_texture_dataset(
        args.per_class,
        args.size,
        args.classes,
        args.noise,
        args.seed,
    )?;
    let non_empty = args.out.is_dir()
        && std::fs::read_dir(&args.out)
            .map_err(|e| Error::Io {
                path: args.out.clone(),
                source: e,
            })?
            .next()
            .is_some();
    if args.out.exists() && !args.out.is_dir() {
        return Err(Error::Config(format!(
            "--out {} exists and is not a directory",
            args.out.display()
        ))
        .into());
    }
    if non_empty {
        if !args.force {
            return Err(Error::Config(format!(
                "--out {} is not empty; pass --force to replace it",
                args.out.display()
            ))
            .into());
        }
        std::fs::remove_dir_all(&args.out).map_err(|e| Error::Io {
            path: args.out.clone(),
            source: e,
        })?;
    }
    data::write_image_dir(&ds, &args.out)?;
    println!(
        "wrote {} images in {} classes to {}",
        ds.len(),
        ds.num_classes(),
        args.out.display()
    );
    Ok(())
}

fn progress_line(tag: &str, total: usize, m: &EpochMetrics) {
    println!(
        "[{tag}] epoch {}/{total} train_loss={} train_acc={} val_loss={} val_acc={}",
        m.epoch,
        fmt_sig6(m.train_loss),
        fmt_sig6(m.train_acc),
        fmt_sig6(m.val_loss),
        fmt_sig6(m.val_acc)
    );
}

fn train(args: &TrainArgs) -> Result<(), Failure> {
    let cfg = ExperimentConfig::from_file(&args.config)?;
    println!("# train{}", if args.paired { " --paired" } else { "" });
    println!("{}", cfg.to_text());
    let data = ExperimentData::load(&cfg)?;
    println!(
        "data: {} training and {} validation images, {} classes, shape {:?}",
        data.train.len(),
        data.val.len(),
        data.train.num_classes(),
        data.train.sample_shape()
    );
    if args.paired {
        let summary = runner::run_paired_experiment(&cfg, &data, &mut |tag, m| {
            progress_line(tag, cfg.epochs, m)
        })?;
        print!("{}", summary.to_text());
        println!("outputs in {}", cfg.output_dir.display());
        return Ok(());
    }
    let spec = network_spec(&cfg, &data)?;
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let files = RunFiles::in_dir(&cfg.output_dir, "metrics.csv", "model.ckpt");
    let outcome = runner::run_training(
        &cfg,
        &spec,
        &data,
        resume.as_ref(),
        Some(&files),
        &mut |m| progress_line("train", cfg.epochs, m),
    )?;
    println!(
        "{} parameters; wrote {} and {}",
        outcome.trainer.network.param_count(),
        files.csv.display(),
        files.checkpoint.display()
    );
    Ok(())
}

fn select_subset(
    ds: LabeledDataset,
    subset: Subset,
    split: Option<data::SplitSpec>,
) -> Result<LabeledDataset, Error> {
    let need_split = || {
        split.ok_or_else(|| {
            Error::Config(
                "checkpoint has no stored train/validation split; use --subset all".into(),
            )
        })
    };
    Ok(match subset {
        Subset::All => ds,
        Subset::Auto => match split {
            Some(s) => data::split(&ds, &s)?.1,
            None => ds,
        },
        Subset::Train => data::split(&ds, &need_split()?)?.0,
        Subset::Val => data::split(&ds, &need_split()?)?.1,
    })
}

fn eval(args: &EvalArgs) -> Result<(), Failure> {
    print_resolved(
        "eval",
        &[
            (
                "checkpoint",
                format!("{:?}", args.checkpoint.display().to_string()),
            ),
            ("data", format!("{:?}", args.data.display().to_string())),
            ("subset", format!("{:?}", args.subset).to_lowercase()),
            ("batch_size", args.batch_size.to_string()),
        ],
    );
    if args.batch_size == 0 {
        return Err(Error::Config("--batch-size must be at least 1".into()).into());
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (mut network, meta) = checkpoint::network_from_checkpoint(&ckpt)?;
    let [channels, size, _] = meta.input;
    let ds = data::load_image_dir(&args.data, size, channels)?;
    if ds.num_classes() != network.num_classes() {
        return Err(Error::Data(format!(
            "{} has {} classes, the checkpoint was trained on {}",
            args.data.display(),
            ds.num_classes(),
            network.num_classes()
        ))
        .into());
    }
    let ds = select_subset(ds, args.subset, meta.split)?;
    let ds = match &meta.stats {
        Some(stats) => data::normalize(&ds, Some(stats))?,
        None => ds,
    };
    let (loss, acc) = runner::evaluate(&mut network, &ds, args.batch_size)?;
    println!("network = {}", meta.network);
    println!("epoch = {}", meta.epoch);
    println!("samples = {}", ds.len());
    println!("loss = {}", fmt_sig6(loss));
    println!("accuracy = {}", fmt_sig6(acc));
    Ok(())
}

fn count_class_dirs(root: &Path) -> Option<usize> {
    let entries = std::fs::read_dir(root).ok()?;
    let n = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .count();
    (n > 0).then_some(n)
}

fn export(args: &ExportArgs) -> Result<(), Failure> {
    let network = if let Some(path) = &args.checkpoint {
        print_resolved(
            "export-filters",
            &[
                ("checkpoint", format!("{:?}", path.display().to_string())),
                ("out", format!("{:?}", args.out.display().to_string())),
                ("scale", args.scale.to_string()),
            ],
        );
        checkpoint::network_from_checkpoint(&Checkpoint::load(path)?)?.0
    } else {
        let path = args.config.as_ref().expect("clap enforces one source");
        let cfg = ExperimentConfig::from_file(path)?;
        // Only later layers depend on the class count.
        let classes = count_class_dirs(&cfg.data_dir).unwrap_or(2);
        print_resolved(
            "export-filters",
            &[
                ("config", format!("{:?}", path.display().to_string())),
                ("out", format!("{:?}", args.out.display().to_string())),
                ("scale", args.scale.to_string()),
                ("classes", classes.to_string()),
            ],
        );
        println!("{}", cfg.to_text());
        let input = [cfg.channels, cfg.image_size, cfg.image_size];
        let spec = if cfg.network == "default" {
            NetworkSpec::default_gcnn(input, classes, cfg.seed)
        } else {
            NetworkSpec::parse(&cfg.network, input, classes, cfg.seed)?
        };
        build_network(&spec)?
    };
    let grid = export_filters(&network, &args.out, args.scale)?;
    println!(
        "wrote {} {}x{} kernels as a {}x{} grid to {}",
        grid.slices,
        grid.kernel,
        grid.kernel,
        grid.rows,
        grid.cols,
        args.out.display()
    );
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    print_resolved(
        "gradcheck",
        &[
            ("seed", args.seed.to_string()),
            ("layer", args.layer.clone().unwrap_or_else(|| "all".into())),
            ("epsilon", format!("{:e}", gradcheck::EPSILON)),
            ("tolerance", format!("{:e}", gradcheck::TOLERANCE)),
        ],
    );
    let results = gradcheck::run(&GradcheckOptions {
        seed: args.seed,
        group: args.layer.clone(),
        corrupt: args.corrupt,
    })?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<18} configs={:<3} checked={:<6} skipped={:<4} max_rel_err={:.3e}",
            r.group, r.configs, r.checked, r.skipped, r.max_rel_err
        );
        if !r.passed() {
            println!("     worst: {}", r.worst);
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure::Checks(failed));
    }
    println!(
        "all {} groups within {:e}",
        results.len(),
        gradcheck::TOLERANCE
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ExportFilters(a) => export(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks(n)) => {
            eprintln!("error: {n} gradient check group(s) exceeded the tolerance");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
