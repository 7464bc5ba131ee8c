//! `sphrot` — command-line front end for the spherical rotation estimator.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sphrot_core::checks::{resampling_convergence, run_gradchecks, shift_equivariance_error};
use sphrot_core::geometry::{decompose, viewpoint_from_direction, Rotation};
use sphrot_core::network::{NetConfig, RotationNet};
use sphrot_core::spa_conv::pad_index_map;
use sphrot_core::sphermap::{to_spherical_map, PointCloud};
use sphrot_core::tensor::{Checkpoint, ParamStore, Scalar};
use sphrot_core::training::{
    evaluate, read_dataset, rng_stream, synth_dataset, train, write_csv, write_dataset, Metrics, Precision,
    ShapeParams, TrainConfig,
};
use sphrot_core::Error;

const EXIT_MISSING: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "sphrot", version, about = "Decoupled viewpoint / in-plane rotation estimation on spherical maps")]
struct Cli {
    /// Worker threads for data preparation, training and evaluation.
    /// Results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of randomly rotated template clouds.
    GenData(GenData),
    /// Convert a point cloud (VIPC) into a spherical map (VISM).
    Convert(Convert),
    /// Train a model and write a checkpoint and a CSV log.
    Train(Train),
    /// Evaluate a checkpoint on a dataset.
    Eval(Eval),
    /// Measure azimuthal-shift equivariance and resampling convergence.
    CheckEquivariance(CheckEquivariance),
    /// Finite-difference gradient checks of the differentiable operations.
    Gradcheck(Gradcheck),
    /// Print the spherical padding of a symbolic map.
    PadDemo(PadDemo),
    /// Split a rotation into viewpoint and in-plane factors.
    Decompose(Decompose),
}

#[derive(Args)]
struct GenData {
    /// Seed of the "data" random stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of samples.
    #[arg(long)]
    count: usize,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Points per cloud.
    #[arg(long, default_value_t = 2048)]
    points: usize,
}

#[derive(Args)]
struct Convert {
    /// Input point cloud (VIPC).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output spherical map (VISM).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Attribute stream to project.
    #[arg(long, default_value = "radial")]
    stream: String,
}

#[derive(Args)]
struct Train {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// key=value config file (training and architecture keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed (streams "init" and "shuffle").
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out dataset for periodic median-error evaluation.
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long = "out-checkpoint")]
    out_checkpoint: PathBuf,
    /// Per-iteration CSV log.
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Expected architecture (key=value); rejected if the checkpoint differs.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the metrics table to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CheckEquivariance {
    /// Random input/kernel pairs for the shift test; rotations for the
    /// resampling table.
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Finest resolution; the table halves it twice.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Gradcheck {
    /// `all` or one check name.
    #[arg(long, default_value = "all")]
    ops: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PadDemo {
    #[arg(long, default_value_t = 2)]
    height: usize,
    #[arg(long, default_value_t = 2)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    pad: usize,
}

#[derive(Args)]
struct Decompose {
    /// Nine reals, row-major, separated by spaces or commas.
    #[arg(long, allow_hyphen_values = true)]
    rotation: String,
}

/// A failure with its exit status.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => EXIT_MISSING,
            Error::Format(_) => EXIT_FORMAT,
            Error::NonFinite(_) => EXIT_NUMERIC,
            Error::InvalidArgument(_) | Error::DegenerateInput(_) => EXIT_USAGE,
        };
        Failure(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure(EXIT_MISSING, e.to_string())
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let threads = cli.threads.max(1);
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Convert(a) => convert(a),
        Command::Train(a) => run_train(a, threads),
        Command::Eval(a) => run_eval(a, threads),
        Command::CheckEquivariance(a) => check_equivariance(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::PadDemo(a) => pad_demo(a),
        Command::Decompose(a) => run_decompose(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>, Failure> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure(EXIT_MISSING, format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure(EXIT_MISSING, format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure(EXIT_MISSING, format!("{}: {e}", path.display())))
}

fn dataset(path: &Path) -> Result<Vec<sphrot_core::training::Sample>, Failure> {
    if !path.join(sphrot_core::training::MANIFEST).is_file() {
        return Err(Failure(EXIT_MISSING, format!("{}: no dataset manifest", path.display())));
    }
    Ok(read_dataset(path)?)
}

fn gen_data(a: GenData) -> CmdResult {
    let shape = ShapeParams { points: a.points, ..ShapeParams::default() };
    let samples = synth_dataset(a.seed, a.count, &shape)?;
    write_dataset(&a.out, &samples)?;
    println!("wrote {} samples ({} points each) to {}", samples.len(), a.points, a.out.display());
    Ok(0)
}

fn convert(a: Convert) -> CmdResult {
    let cloud = PointCloud::read_vipc(open(&a.input)?)?;
    let map = to_spherical_map(&cloud, &a.stream, a.height, a.width)?;
    map.write_vism(create(&a.out)?)?;
    let occupied = map.occupied;
    println!(
        "{} points -> {}×{}×{} map, {occupied} of {} bins occupied",
        cloud.len(),
        map.channels,
        map.height,
        map.width,
        map.height * map.width
    );
    Ok(0)
}

fn run_train(a: Train, threads: usize) -> CmdResult {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        cfg.apply(&read_text(path)?)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let samples = dataset(&a.data)?;
    let heldout = a.heldout.as_deref().map(dataset).transpose()?;
    let (net, store) = RotationNet::new(cfg.net.clone(), &mut rng_stream(cfg.seed, "init"))?;
    println!("training {} parameters on {} samples for {} iterations", store.scalar_count(), samples.len(), cfg.iterations);
    match cfg.precision {
        Precision::F32 => train_as(&cfg, &net, store.cast::<f32>(), &samples, heldout.as_deref(), &a, threads),
        Precision::F64 => train_as(&cfg, &net, store, &samples, heldout.as_deref(), &a, threads),
    }
}

fn train_as<T: Scalar>(
    cfg: &TrainConfig,
    net: &RotationNet,
    store: ParamStore<T>,
    samples: &[sphrot_core::training::Sample],
    heldout: Option<&[sphrot_core::training::Sample]>,
    a: &Train,
    threads: usize,
) -> CmdResult {
    let out = train(cfg, net, store, samples, heldout, threads, |row| {
        if let Some(m) = row.median_deg {
            println!("iter {:>6}  loss {:.5}  held-out median {m:.3} deg", row.iter, row.terms.loss);
        }
    })?;
    write_csv(&out.log, create(&a.log)?)?;
    out.store.write_checkpoint(&net.config().to_key_value(), create(&a.out_checkpoint)?)?;
    println!("wrote {} and {}", a.out_checkpoint.display(), a.log.display());
    Ok(0)
}

fn metrics_table(m: &Metrics) -> String {
    let pct = |x: f64| format!("{:.1}%", 100.0 * x);
    let mut s = format!(
        "samples       {}\nmean_deg      {:.3}\nmedian_deg    {:.3}\nacc@5deg      {}\nacc@10deg     {}\nacc@15deg     {}\n",
        m.count,
        m.mean_deg,
        m.median_deg,
        pct(m.acc5),
        pct(m.acc10),
        pct(m.acc15)
    );
    if let (Some(p), Some(t)) = (m.phi_top1, m.theta_top1) {
        s += &format!("phi_top1±1    {}\ntheta_top1±1  {}\n", pct(p), pct(t));
    }
    s
}

fn run_eval(a: Eval, threads: usize) -> CmdResult {
    let ckpt = Checkpoint::read(open(&a.checkpoint)?)?;
    let arch = NetConfig::from_key_value(&ckpt.config)?;
    if let Some(path) = &a.config {
        let mut expected = TrainConfig::default();
        expected.apply(&read_text(path)?)?;
        if expected.net != arch {
            return Err(Failure(
                EXIT_USAGE,
                format!(
                    "architecture mismatch: checkpoint has\n{}but config asks for\n{}",
                    arch.to_key_value(),
                    expected.net.to_key_value()
                ),
            ));
        }
    }
    // parameter values are replaced below; the generator only shapes them
    let (net, store) = RotationNet::new(arch, &mut rng_stream(0, "init"))?;
    let mut store = store.cast::<f32>();
    store.load(&ckpt)?;
    let samples = dataset(&a.data)?;
    let metrics = evaluate(&net, &store, &samples, threads)?;
    let table = metrics_table(&metrics);
    print!("{table}");
    if let Some(path) = &a.report {
        create(path)?.write_all(table.as_bytes())?;
    }
    Ok(0)
}

fn check_equivariance(a: CheckEquivariance) -> CmdResult {
    if a.resolution < 16 || !a.resolution.is_power_of_two() {
        return Err(Failure(EXIT_USAGE, "--resolution must be a power of two, at least 16".into()));
    }
    let shift_res: Vec<usize> = (3..).map(|k| 1usize << k).take_while(|&n| n <= a.resolution.min(32)).collect();
    let worst = shift_equivariance_error(a.trials, &shift_res, a.seed)?;
    println!("max shift-equivariance error (stride 1, {} trials): {worst:.3e}", a.trials);
    let table = resampling_convergence(a.trials.min(20).max(1), &[a.resolution / 4, a.resolution / 2, a.resolution], a.seed)?;
    println!("resolution  mean relative discrepancy");
    for (n, d) in &table {
        println!("{n:>10}  {d:.6}");
    }
    let decreasing = table.windows(2).all(|w| w[1].1 < w[0].1);
    let ok = worst < 1e-12 && decreasing;
    println!("{}", if ok { "ok" } else { "FAILED" });
    Ok(if ok { 0 } else { EXIT_NUMERIC })
}

fn gradcheck(a: Gradcheck) -> CmdResult {
    let reports = run_gradchecks(&a.ops, a.seed)?;
    let mut all = true;
    println!("{:<22} {:>12} {:>8}  result", "check", "worst_rel", "entries");
    for (name, r) in &reports {
        all &= r.passed();
        println!("{name:<22} {:>12.3e} {:>8}  {}", r.worst_rel, r.entries, if r.passed() { "pass" } else { "FAIL" });
    }
    Ok(if all { 0 } else { EXIT_NUMERIC })
}

fn symbol(i: usize) -> String {
    let mut s = String::new();
    let mut n = i + 1;
    while n > 0 {
        n -= 1;
        s.insert(0, (b'a' + (n % 26) as u8) as char);
        n /= 26;
    }
    s
}

fn pad_demo(a: PadDemo) -> CmdResult {
    let map = pad_index_map(1, a.height, a.width, a.pad)?;
    let cells = a.height * a.width;
    let wide = symbol(cells - 1).len();
    let row = |items: &mut dyn Iterator<Item = usize>| {
        items.map(|i| format!("{:>wide$}", symbol(i))).collect::<Vec<_>>().join(" ")
    };
    println!("source {}×{}:", a.height, a.width);
    for h in 0..a.height {
        println!("{}", row(&mut (h * a.width..(h + 1) * a.width)));
    }
    let (ph, pw) = (a.height + 2 * a.pad, a.width + 2 * a.pad);
    println!("padded {ph}×{pw} (pad {}):", a.pad);
    for h in 0..ph {
        println!("{}", row(&mut map[h * pw..(h + 1) * pw].iter().map(|&i| i as usize)));
    }
    Ok(0)
}

fn fmt_num(x: f64) -> String {
    // avoid printing negative zero
    let x = if x.abs() < 5e-10 { 0.0 } else { x };
    format!("{x:>12.9}")
}

fn print_matrix(name: &str, r: &Rotation) {
    println!("{name} =");
    let m = r.to_row_major();
    for row in m.chunks(3) {
        println!("  {}", row.iter().map(|&x| fmt_num(x)).collect::<Vec<_>>().join(" "));
    }
}

fn run_decompose(a: Decompose) -> CmdResult {
    let values: Vec<f64> = a
        .rotation
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Failure(EXIT_USAGE, format!("not a number: {s:?}"))))
        .collect::<Result<_, _>>()?;
    let r = Rotation::from_row_slice(&values)?;
    let angles = viewpoint_from_direction(&r.zenith());
    let (r_vp, r_ip) = decompose(&r);
    println!("phi   = {} rad ({} deg)", fmt_num(angles.phi), fmt_num(angles.phi.to_degrees()));
    println!("theta = {} rad ({} deg)", fmt_num(angles.theta), fmt_num(angles.theta.to_degrees()));
    print_matrix("R_vp", &r_vp);
    print_matrix("R_ip", &r_ip);
    Ok(0)
}
