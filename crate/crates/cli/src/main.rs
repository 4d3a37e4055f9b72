//! `lobcq` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 unusable input
//! data, 4 codebook family mismatch, 5 corrupt stream.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lobcq::baselines::nmse_slices;
use lobcq::calib::{
    calibrate, freeze_family, normalize_blocks, BlockSampling, BlockSet, CalibOptions, CodebookFamily, QuantConfig,
};
use lobcq::codec::{decode, encode, ratio_to_f64, EncodedTensor, STREAM_MAGIC};
use lobcq::eval::{
    emit_report, format_pertensor, lloydmax_pertensor, render_report, render_sweep, run_experiment, sig6,
    sweep_configs, Experiment, ReportFormat, SweepGrid, DEFAULT_CALIBRATION_LEN,
};
use lobcq::formats::NumberFormat;
use lobcq::tensor::{load_tensor, save_tensor, synth_tensor, DistSpec, TensorView, TENSOR_MAGIC};
use lobcq::{Error, ErrorKind};

/// Largest accepted iteration cap.
const MAX_ITERS: usize = 100;

#[derive(Parser)]
#[command(name = "lobcq", version, about = "Block clustered quantization with calibrated codebooks")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; falls back to BCQ_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// error, warn, info, debug or trace.
    #[arg(long = "log-level", global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate a codebook family on tensors or synthetic data.
    Calibrate(CalibrateArgs),
    /// Round a real-valued family's codewords to integers.
    Freeze {
        #[arg(long)]
        family: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress a tensor into a block stream.
    Encode(EncodeArgs),
    /// Reconstruct a tensor from a block stream.
    Decode(DecodeArgs),
    /// Run an experiment file.
    Eval(EvalArgs),
    /// Bitwidth (and optionally NMSE) over a grid of configurations.
    Sweep(SweepArgs),
    /// Fit a per-tensor Lloyd-Max quantizer and compare it to number formats.
    FitLloydmax(FitArgs),
    /// Describe a tensor, stream or family file.
    Info {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args)]
struct QuantArgs {
    /// Block length.
    #[arg(long = "Lb", default_value_t = 8)]
    lb: usize,
    /// Block array length.
    #[arg(long = "La", default_value_t = 64)]
    la: usize,
    /// Number of codebooks.
    #[arg(long = "Nc", default_value_t = 16)]
    nc: usize,
    /// Index bits per scalar.
    #[arg(long, default_value_t = 4)]
    bits: u32,
    /// Iteration cap, at most 100.
    #[arg(long, default_value_t = MAX_ITERS)]
    iters: usize,
}

impl QuantArgs {
    fn config(&self, seed: u64) -> Result<QuantConfig, Error> {
        if self.iters > MAX_ITERS {
            return Err(Error::InvalidConfig(format!("--iters must be at most {MAX_ITERS}, got {}", self.iters)));
        }
        let cfg = QuantConfig::new(self.lb, self.la, self.nc, self.bits)
            .with_max_iters(self.iters)
            .with_seed(seed);
        cfg.validate().map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(flag_message(&m)),
            e => e,
        })?;
        Ok(cfg)
    }
}

/// Name the command-line flag behind a configuration message.
fn flag_message(m: &str) -> String {
    for (name, flag) in [("Nc", "--Nc"), ("B ", "--bits"), ("iteration", "--iters")] {
        if m.starts_with(name) || m.contains(name) {
            return format!("{flag}: {m}");
        }
    }
    m.to_string()
}

#[derive(Args)]
struct SourceArgs {
    /// Input tensor file(s).
    #[arg(long)]
    input: Vec<PathBuf>,
    /// Synthetic distribution, e.g. `outliers` or `gaussian(0,1)`.
    #[arg(long)]
    synth: Option<String>,
    /// Scalars in the synthetic tensor.
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_LEN)]
    len: usize,
}

impl SourceArgs {
    fn tensors(&self, seed: u64) -> Result<Vec<TensorView>, Error> {
        let mut out: Vec<TensorView> = self.input.iter().map(load_tensor).collect::<Result<_, _>>()?;
        if let Some(spec) = &self.synth {
            let dist: DistSpec = spec.parse()?;
            out.push(synth_tensor(dist, self.len, seed)?);
        }
        if out.is_empty() {
            return Err(Error::InvalidConfig("give --input or --synth".into()));
        }
        Ok(out)
    }
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    quant: QuantArgs,
    /// Where to write the family JSON; the trace goes next to it.
    #[arg(long = "out-family")]
    out_family: PathBuf,
    /// Keep real-valued codewords instead of freezing to integers.
    #[arg(long)]
    unfrozen: bool,
    /// Calibrate on this many uniformly sampled blocks instead of all of them.
    #[arg(long = "sample-blocks")]
    sample_blocks: Option<usize>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    family: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Block array length.
    #[arg(long = "La", default_value_t = 64)]
    la: usize,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    family: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Original tensor to report NMSE against.
    #[arg(long)]
    compare: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment JSON file.
    #[arg(long)]
    spec: PathBuf,
    /// Report file; overrides the experiment's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv, json or markdown; defaults to the report file extension.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long = "Lb", value_delimiter = ',', default_values_t = [8])]
    lb: Vec<usize>,
    #[arg(long = "La", value_delimiter = ',', default_values_t = [64, 32, 16])]
    la: Vec<usize>,
    #[arg(long = "Nc", value_delimiter = ',', default_values_t = [2, 4, 8, 16])]
    nc: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    /// Also calibrate every cell on a synthetic tensor and report NMSE.
    #[arg(long)]
    synth: Option<String>,
    #[arg(long, default_value_t = 1 << 16)]
    len: usize,
    #[arg(long, default_value = "markdown")]
    format: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value_t = 4)]
    bits: u32,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 2,
        ErrorKind::Data => 3,
        ErrorKind::FamilyMismatch => 4,
        ErrorKind::CorruptStream => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    let threads = cli
        .threads
        .or_else(|| std::env::var("BCQ_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a, cli.seed),
        Command::Freeze { family, out } => {
            let f = CodebookFamily::load(family)?;
            freeze_family(&f).save(out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a, cli.seed),
        Command::FitLloydmax(a) => cmd_fit(a, cli.seed),
        Command::Info { input } => cmd_info(input),
    }
}

fn trace_path(family: &Path) -> PathBuf {
    let mut name = family.file_stem().unwrap_or_default().to_os_string();
    name.push(".trace.json");
    family.with_file_name(name)
}

fn cmd_calibrate(a: &CalibrateArgs, seed: u64) -> Result<(), Error> {
    let cfg = a.quant.config(seed)?;
    let tensors = a.source.tensors(seed)?;
    let sets: Vec<BlockSet> = tensors
        .iter()
        .map(|t| normalize_blocks(t, &cfg)?.calibration_set())
        .collect::<Result<_, _>>()?;
    let sampling = match a.sample_blocks {
        Some(0) => return Err(Error::InvalidConfig("--sample-blocks must be positive".into())),
        Some(k) => BlockSampling::Uniform(k),
        None => BlockSampling::All,
    };
    let blocks = sampling.apply(BlockSet::concat(&sets)?, cfg.seed)?;
    let cal = calibrate(&blocks, &cfg, &CalibOptions::default())?;
    let family = if a.unfrozen { cal.family } else { freeze_family(&cal.family) };
    family.save(&a.out_family)?;
    let trace = trace_path(&a.out_family);
    fs::write(&trace, serde_json::to_string_pretty(&cal.trace)?)?;
    println!(
        "{} codebooks of {} entries, {} iterations, J {} -> {}, hash {:016x}",
        family.num_codebooks(),
        1usize << family.bits(),
        cal.trace.iterations_run,
        sig6(cal.trace.initial_j),
        sig6(cal.trace.final_j()),
        family.hash()
    );
    println!("wrote {} and {}", a.out_family.display(), trace.display());
    Ok(())
}

fn cmd_encode(a: &EncodeArgs) -> Result<(), Error> {
    let t = load_tensor(&a.input)?;
    let family = CodebookFamily::load(&a.family)?;
    let cfg = QuantConfig::new(family.block_len(), a.la, family.num_codebooks(), family.bits())
        .with_codeword_bits(family.codeword_bits());
    cfg.validate()?;
    let enc = encode(&t, &family, &cfg)?;
    enc.save(&a.out)?;
    let bits = enc.payload_bits();
    println!(
        "{} bits/scalar payload ({bits} bits for {} scalars), {} stream bytes",
        sig6(bits as f64 / t.len() as f64),
        t.len(),
        enc.to_bytes().len()
    );
    Ok(())
}

fn cmd_decode(a: &DecodeArgs) -> Result<(), Error> {
    let enc = EncodedTensor::load(&a.input)?;
    let family = CodebookFamily::load(&a.family)?;
    let t = decode(&enc, &family)?;
    save_tensor(&t, &a.out)?;
    println!("decoded {} scalars to {}", t.len(), a.out.display());
    if let Some(reference) = &a.compare {
        let r = load_tensor(reference)?;
        println!("nmse {}", sig6(nmse_slices(r.data(), t.data())?));
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), Error> {
    let e = Experiment::load(&a.spec)?;
    let report = run_experiment(&e)?;
    for s in &report.summary {
        println!(
            "{}: median nmse {} at {} bits/scalar over {} rows",
            s.method,
            sig6(s.median_nmse),
            sig6(s.bits_per_scalar),
            s.rows
        );
    }
    let format = |path: Option<&Path>| -> Result<ReportFormat, Error> {
        match (&a.format, path) {
            (Some(f), _) => f.parse(),
            (None, Some(p)) => Ok(ReportFormat::from_path(p)),
            (None, None) => Ok(ReportFormat::Markdown),
        }
    };
    match a.out.as_ref().or(e.output.as_ref()) {
        Some(path) => {
            emit_report(&report, format(Some(path))?, path)?;
            println!("wrote {}", path.display());
        }
        None => print!("{}", render_report(&report, format(None)?)?),
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, seed: u64) -> Result<(), Error> {
    let grid = SweepGrid {
        block_lens: a.lb.clone(),
        array_lens: a.la.clone(),
        num_codebooks: a.nc.clone(),
        bits: a.bits,
    };
    let data = match &a.synth {
        Some(spec) => Some(synth_tensor(spec.parse()?, a.len, seed)?),
        None => None,
    };
    let rows = sweep_configs(&grid, data.as_ref(), seed)?;
    let format: ReportFormat = a.format.parse()?;
    let text = render_sweep(&rows, format)?;
    match &a.out {
        Some(path) => {
            fs::write(path, text)?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    let mismatched = rows.iter().filter(|r| r.matches_published == Some(false)).count();
    if mismatched > 0 {
        log::warn!("{mismatched} cells differ from the published bitwidths");
    }
    Ok(())
}

fn mse(x: &[f32], y: &[f32]) -> f64 {
    let s: f64 = x.iter().zip(y).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    s / x.len() as f64
}

fn cmd_fit(a: &FitArgs, seed: u64) -> Result<(), Error> {
    for t in a.source.tensors(seed)? {
        let (recon, iters) = lloydmax_pertensor(&t, a.bits)?;
        println!("{}: lloyd-max B={} mse {} ({iters} iterations)", t.name(), a.bits, sig6(mse(t.data(), &recon)));
        let formats = ["int4", "e2m1", "e1m2", "e3m0", "e4m3", "int8"];
        for name in formats {
            let f: NumberFormat = name.parse()?;
            if f.bits() == a.bits {
                let q = format_pertensor(&t, f)?;
                println!("{}: {name} mse {}", t.name(), sig6(mse(t.data(), &q)));
            }
        }
    }
    Ok(())
}

fn cmd_info(input: &Path) -> Result<(), Error> {
    let bytes = fs::read(input)?;
    if bytes.starts_with(&TENSOR_MAGIC) {
        let t = TensorView::from_bytes(&bytes, input.display().to_string())?;
        println!("tensor {:?}: shape {:?}, {} scalars, max |x| {}", t.name(), t.shape(), t.len(), sig6(t.max_abs()));
    } else if bytes.starts_with(&STREAM_MAGIC) {
        let e = EncodedTensor::from_bytes(&bytes)?;
        let cfg = e.config();
        let bits = lobcq::codec::effective_bitwidth(&cfg, None)?.effective_bits_per_scalar;
        println!(
            "stream: shape {:?}, Lb {} La {} Nc {} B {}, {} bits/scalar, family {:016x}, {} bytes",
            e.shape,
            cfg.block_len,
            cfg.array_len,
            cfg.num_codebooks,
            cfg.bits,
            sig6(ratio_to_f64(bits)),
            e.family_hash,
            bytes.len()
        );
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::MalformedFamily("not a tensor, stream or family".into()))?;
        let f = CodebookFamily::from_json(&text)?;
        println!(
            "family: {} codebooks, B {}, Bc {}, Lb {}, frozen {}, {} bytes of codewords, hash {:016x}",
            f.num_codebooks(),
            f.bits(),
            f.codeword_bits(),
            f.block_len(),
            f.is_frozen(),
            f.footprint_bytes(),
            f.hash()
        );
    }
    Ok(())
}
