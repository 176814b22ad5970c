//! `ect`: dataset generation, training, evaluation and image utilities for
//! planar capacitance tomography.
//!
//! Every subcommand is deterministic given its flags and `--seed`. Exit codes:
//! 0 on success, 2 for usage errors, 3 for runtime or numeric failures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ect_core::dataset::{
    add_noise, build_dataset, read_dataset, split, write_dataset, Dataset, DatasetConfig, NoiseModel,
};
use ect_core::fem::{ForwardModel, PhysicalPermittivity};
use ect_core::image::{Image, PermittivityImage};
use ect_core::inverse::{sensitivity_matrix, Baseline, BaselineReconstructor, SensitivityMatrix};
use ect_core::mesh::DomainSpec;
use ect_core::metrics::{evaluate, stitch};
use ect_core::net::{
    gradient_suite, load_model_expecting, save_model, train_with, LossConfig, NetworkConfig, TrainConfig, TrainedModel,
};
use ect_core::phantom::{BiofilmSpec, Interval, MicrosphereSpec, PhantomSpec};

const SPLIT: [f64; 3] = [0.8, 0.1, 0.1];
const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<ect_core::Error> for CliError {
    fn from(e: ect_core::Error) -> Self {
        match e {
            ect_core::Error::InvalidSpec(_) | ect_core::Error::InvalidInput(_) | ect_core::Error::InvalidSplit(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "ect", version, about = "Planar capacitance tomography toolkit")]
struct Cli {
    /// Worker threads for parallel stages (defaults to all cores).
    #[arg(long, global = true, env = "ECT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset of phantoms and normalized capacitance matrices.
    ///
    /// Phantom i is drawn from a stream keyed by (--seed, i), so the output
    /// is identical for identical flags regardless of thread count.
    GenData(GenDataArgs),
    /// Train the reconstruction network on the 80% training split.
    ///
    /// The split is seeded by the dataset seed; shuffling, noise and
    /// initialization are seeded by --seed.
    Train(TrainArgs),
    /// Evaluate a trained model or a linear baseline on a split.
    Eval(EvalArgs),
    /// Reconstruct one dataset sample to a PGM image.
    Reconstruct(ReconstructArgs),
    /// Stitch adjacent reconstruction windows laterally into one PGM.
    Stitch(StitchArgs),
    /// Run the finite-difference gradient suite; exit 0 iff every check passes.
    Gradcheck(GradcheckArgs),
    /// Export a stored ground-truth image to PGM.
    ExportImage(ExportArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Kind {
    Microsphere,
    Biofilm,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BaselineName {
    Tikhonov,
    Landweber,
    Lbp,
}

impl From<BaselineName> for Baseline {
    fn from(b: BaselineName) -> Self {
        match b {
            BaselineName::Tikhonov => Baseline::Tikhonov,
            BaselineName::Landweber => Baseline::Landweber,
            BaselineName::Lbp => Baseline::BackProjection,
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    domain: DomainOverrides,
    #[command(flatten)]
    phantom: PhantomOverrides,
    /// Relative permittivity of the background medium.
    #[arg(long, default_value_t = 2.0)]
    eps_background: f64,
    /// Relative permittivity of inclusions.
    #[arg(long, default_value_t = 2.6)]
    eps_inclusion: f64,
    /// Noise std recorded in the manifest (applied during training only).
    #[arg(long, default_value_t = 0.03)]
    noise_std: f64,
}

#[derive(Args, Debug)]
struct DomainOverrides {
    #[arg(long, default_value_t = 200)]
    width_um: u32,
    #[arg(long, default_value_t = 100)]
    depth_um: u32,
    #[arg(long, default_value_t = 50)]
    pad_side_um: u32,
    #[arg(long, default_value_t = 50)]
    pad_top_um: u32,
    #[arg(long, default_value_t = 20)]
    electrodes: u32,
    #[arg(long, default_value_t = 10)]
    pitch_um: u32,
    #[arg(long, default_value_t = 8)]
    electrode_width_um: u32,
    #[arg(long, default_value_t = 1)]
    elements_per_um: u32,
}

impl DomainOverrides {
    fn spec(&self) -> DomainSpec {
        DomainSpec {
            width_um: self.width_um,
            depth_um: self.depth_um,
            pad_side_um: self.pad_side_um,
            pad_top_um: self.pad_top_um,
            n_electrodes: self.electrodes,
            pitch_um: self.pitch_um,
            electrode_width_um: self.electrode_width_um,
            elements_per_um: self.elements_per_um,
        }
    }
}

/// Phantom ranges as `min,max` pairs.
#[derive(Args, Debug)]
struct PhantomOverrides {
    #[arg(long, value_parser = parse_count_range, default_value = "1,3")]
    spheres: (u32, u32),
    #[arg(long, value_parser = parse_interval, default_value = "10,20")]
    radius_um: Interval,
    #[arg(long, value_parser = parse_interval, default_value = "5,80")]
    center_depth_um: Interval,
    #[arg(long, value_parser = parse_interval, default_value = "10,60")]
    base_thickness_um: Interval,
    #[arg(long, value_parser = parse_interval, default_value = "0,20")]
    roughness_um: Interval,
    #[arg(long, value_parser = parse_interval, default_value = "20,60")]
    correlation_um: Interval,
    #[arg(long, default_value_t = 0.0)]
    void_probability: f64,
}

impl PhantomOverrides {
    fn spec(&self, kind: Kind) -> PhantomSpec {
        match kind {
            Kind::Microsphere => PhantomSpec::Microsphere(MicrosphereSpec {
                count: self.spheres,
                radius_um: self.radius_um,
                center_depth_um: self.center_depth_um,
            }),
            Kind::Biofilm => PhantomSpec::Biofilm(BiofilmSpec {
                base_thickness_um: self.base_thickness_um,
                roughness_amplitude_um: self.roughness_um,
                correlation_length_um: self.correlation_um,
                void_probability: self.void_probability,
            }),
        }
    }
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> Result<(T, T), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `min,max`, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<T>().map_err(|_| format!("cannot parse `{v}`"));
    Ok((p(a)?, p(b)?))
}

fn parse_interval(s: &str) -> Result<Interval, String> {
    let (a, b) = parse_pair::<f64>(s)?;
    Ok(Interval::new(a, b))
}

fn parse_count_range(s: &str) -> Result<(u32, u32), String> {
    parse_pair(s)
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated loss terms: smoothl1, focal, dice.
    #[arg(long, default_value = "smoothl1,focal,dice")]
    loss: String,
    /// Std of the Gaussian noise added to normalized capacitances each epoch.
    #[arg(long, default_value_t = 0.03)]
    noise_std: f64,
    /// Disable random left-right mirroring of training samples.
    #[arg(long)]
    no_mirror: bool,
    /// Hidden widths of the first four blocks.
    #[arg(long, value_delimiter = ',', default_value = "64,32,16,8")]
    widths: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history, one JSON object per line (default: `<out>.history`).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[group(id = "predictor", required = true, multiple = false, args = ["model", "baseline"])]
struct PredictorArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum)]
    baseline: Option<BaselineName>,
    /// Sensitivity matrix cache (default: `<data>/sensitivity.ectj`).
    #[arg(long)]
    sensitivity: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    predictor: PredictorArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Noise std added to the evaluated capacitances (clean by default).
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[command(flatten)]
    predictor: PredictorArgs,
    #[arg(long)]
    data: PathBuf,
    /// Sample index within the whole dataset.
    #[arg(long)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StitchArgs {
    /// Input PGM windows, left to right.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    overlap: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

fn require_dir(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{} is not a directory", path.display())))
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{} does not exist", path.display())))
    }
}

fn require_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(usage(format!("output directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    require_dir(dir)?;
    Ok(read_dataset(dir)?)
}

fn select_split(ds: &Dataset, which: SplitName) -> CliResult<Dataset> {
    if let SplitName::All = which {
        return Ok(ds.clone());
    }
    let (train, val, test) = split(ds, SPLIT, ds.manifest.seed)?;
    Ok(match which {
        SplitName::Train => train,
        SplitName::Val => val,
        _ => test,
    })
}

fn network_config(ds: &Dataset, widths: [usize; 4]) -> CliResult<NetworkConfig> {
    let mut cfg = NetworkConfig::with_widths(widths);
    cfg.m = ds.manifest.m;
    cfg.n = ds.manifest.n;
    if cfg.output_size != (ds.manifest.img_h, ds.manifest.img_w) {
        return Err(usage(format!(
            "the network produces {:?} images but the dataset holds {}×{}",
            cfg.output_size, ds.manifest.img_h, ds.manifest.img_w
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the cached sensitivity matrix or computes and caches it.
fn sensitivity(ds: &Dataset, cache: Option<&Path>, data_dir: &Path) -> CliResult<SensitivityMatrix> {
    let path = cache.map_or_else(|| data_dir.join("sensitivity.ectj"), Path::to_path_buf);
    let man = &ds.manifest;
    let k = ect_core::fem::CapacitanceMatrix::zeros(man.m, man.n).measurement_count();
    if path.is_file() {
        let j = SensitivityMatrix::read(&path)?;
        if j.k == k && j.p == man.img_h * man.img_w {
            return Ok(j);
        }
        eprintln!("sensitivity cache {} has the wrong shape, rebuilding", path.display());
    }
    let model = ForwardModel::new(&man.domain_spec)?;
    let j = sensitivity_matrix(&model, &man.permittivity, &man.calibration()?)?;
    j.write(&path)?;
    Ok(j)
}

enum Predictor {
    Model(Box<TrainedModel>),
    Baseline(Baseline, SensitivityMatrix),
}

impl Predictor {
    fn load(args: &PredictorArgs, ds: &Dataset, data_dir: &Path) -> CliResult<Self> {
        match (&args.model, args.baseline) {
            (Some(path), _) => {
                require_file(path)?;
                let probe = ect_core::net::load_model(path)?;
                let cfg = probe.network.config().clone();
                if (cfg.m, cfg.n) != (ds.manifest.m, ds.manifest.n) {
                    return Err(usage(format!(
                        "model expects {}×{} capacitance matrices, dataset has {}×{}",
                        cfg.m, cfg.n, ds.manifest.m, ds.manifest.n
                    )));
                }
                Ok(Predictor::Model(Box::new(load_model_expecting(path, &cfg)?)))
            }
            (None, Some(b)) => Ok(Predictor::Baseline(
                b.into(),
                sensitivity(ds, args.sensitivity.as_deref(), data_dir)?,
            )),
            (None, None) => Err(usage("one of --model or --baseline is required")),
        }
    }

    fn name(&self) -> String {
        match self {
            Predictor::Model(_) => "network".into(),
            Predictor::Baseline(b, _) => b.name().into(),
        }
    }
}

fn cmd_gen_data(a: &GenDataArgs) -> CliResult<()> {
    if a.count == 0 {
        return Err(usage("--count must be positive"));
    }
    require_parent(&a.out)?;
    let domain = a.domain.spec();
    domain.validate()?;
    let (rows, cols) = domain.image_dims();
    let phantom = a.phantom.spec(a.kind);
    phantom.validate(rows, cols)?;
    let permittivity = PhysicalPermittivity {
        eps_background: a.eps_background,
        eps_inclusion: a.eps_inclusion,
    };
    permittivity.validate()?;
    let noise = NoiseModel { std: a.noise_std };
    noise.validate()?;
    let cfg = DatasetConfig {
        phantom,
        domain,
        permittivity,
        noise,
        seed: a.seed,
    };
    let ds = build_dataset(a.count, &cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_dataset(&ds, &a.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let m = &ds.manifest;
    println!(
        "wrote {} {} samples to {}: {}x{} capacitances, {}x{} images, seed {}",
        m.count,
        m.phantom_spec.kind(),
        a.out.display(),
        m.m,
        m.n,
        m.img_h,
        m.img_w,
        m.seed
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let ds = load_dataset(&a.data)?;
    require_parent(&a.out)?;
    let widths: [usize; 4] = a
        .widths
        .as_slice()
        .try_into()
        .map_err(|_| usage("--widths takes exactly four values"))?;
    let net_cfg = network_config(&ds, widths)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        noise_std: a.noise_std,
        seed: a.seed,
        loss: LossConfig::parse_terms(&a.loss)?,
        mirror: !a.no_mirror,
    };
    cfg.validate()?;
    let (train_set, val_set, _) = split(&ds, SPLIT, ds.manifest.seed)?;

    let history_path = a.history.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".history");
        PathBuf::from(p)
    });
    let mut history = fs::File::create(&history_path).map_err(|e| io_err(&history_path, e))?;
    let mut write_err = None;
    let model = train_with(&train_set, &val_set, &net_cfg, &cfg, |r| {
        eprintln!(
            "epoch {:>3}: loss {:.5}, val CC {:.4}, val IoU {:.4}",
            r.epoch, r.train_loss, r.val_cc, r.val_iou
        );
        if let Err(e) = writeln!(history, "{}", r.to_line()) {
            write_err.get_or_insert(e);
        }
    })
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(e) = write_err {
        return Err(io_err(&history_path, e));
    }
    save_model(&model, &a.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "saved {} (best epoch {}, val CC {:.4}, val IoU {:.4})",
        a.out.display(),
        model.meta.best_epoch,
        model.meta.best_val_cc,
        model.meta.best_val_iou
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let ds = load_dataset(&a.data)?;
    require_parent(&a.out)?;
    let noise = NoiseModel { std: a.noise_std };
    noise.validate()?;
    let subset = select_split(&ds, a.split)?;
    let predictor = Predictor::load(&a.predictor, &ds, &a.data)?;
    let mut noisy = subset.clone();
    if a.noise_std > 0.0 {
        for (i, s) in noisy.samples.iter_mut().enumerate() {
            s.capacitance = add_noise(&s.capacitance, &noise, a.seed.wrapping_add(i as u64));
        }
    }
    let report = match &predictor {
        Predictor::Model(m) => evaluate(&predictor.name(), |c| m.predict(c), &noisy),
        Predictor::Baseline(kind, j) => {
            let rec = BaselineReconstructor::new(*kind, j, ds.manifest.img_h, ds.manifest.img_w)?;
            evaluate(&predictor.name(), |c| rec.reconstruct(c), &noisy)
        }
    }
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(&a.out, report.to_json()).map_err(|e| io_err(&a.out, e))?;
    let mm = &report.means;
    println!(
        "{} on {} samples: MSE {:.5}, SSIM {:.4}, PSNR {:.2} dB, CC {:.4}, IoU {:.4}",
        report.predictor, report.count, mm.mse, mm.ssim, mm.psnr, mm.cc, mm.iou
    );
    Ok(())
}

fn cmd_reconstruct(a: &ReconstructArgs) -> CliResult<()> {
    let ds = load_dataset(&a.data)?;
    require_parent(&a.out)?;
    let sample = ds
        .samples
        .get(a.index)
        .ok_or_else(|| usage(format!("index {} out of range for {} samples", a.index, ds.len())))?;
    let predictor = Predictor::load(&a.predictor, &ds, &a.data)?;
    let image: PermittivityImage = match &predictor {
        Predictor::Model(m) => m.predict(&sample.capacitance)?,
        Predictor::Baseline(kind, j) => BaselineReconstructor::new(*kind, j, ds.manifest.img_h, ds.manifest.img_w)?
            .reconstruct(&sample.capacitance)?,
    };
    image.as_image().write_pgm(&a.out)?;
    println!(
        "wrote {} reconstruction of sample {} to {}",
        predictor.name(),
        a.index,
        a.out.display()
    );
    Ok(())
}

fn cmd_stitch(a: &StitchArgs) -> CliResult<()> {
    require_parent(&a.out)?;
    let windows = a
        .inputs
        .iter()
        .map(|p| {
            require_file(p)?;
            Ok(Image::read_pgm(p)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let out = stitch(&windows, a.overlap)?;
    out.write_pgm(&a.out)?;
    println!(
        "stitched {} windows into {}x{} at {}",
        windows.len(),
        out.rows,
        out.cols,
        a.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let entries = gradient_suite(a.seed).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut worst = 0.0_f64;
    for e in &entries {
        println!("{:<60} {:.3e}", e.name, e.report.max_rel_error);
        worst = worst.max(e.report.max_rel_error);
    }
    println!("max relative error {worst:.3e}");
    if worst < GRADCHECK_THRESHOLD {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "max relative error {worst:e} exceeds {GRADCHECK_THRESHOLD:e}"
        )))
    }
}

fn cmd_export_image(a: &ExportArgs) -> CliResult<()> {
    let ds = load_dataset(&a.data)?;
    require_parent(&a.out)?;
    let sample = ds
        .samples
        .get(a.index)
        .ok_or_else(|| usage(format!("index {} out of range for {} samples", a.index, ds.len())))?;
    sample.image.as_image().write_pgm(&a.out)?;
    println!("wrote sample {} to {}", a.index, a.out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Stitch(a) => cmd_stitch(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportImage(a) => cmd_export_image(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Runtime(m) => eprintln!("failed: {m}"),
            }
            ExitCode::from(e.code())
        }
    }
}
