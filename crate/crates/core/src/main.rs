//! `dquant`: command-line front end for the quantization pipeline.

use std::error::Error as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use dquant::blockwise::{
    finetune_block, float_block_forward, load_block_file, AdamParams, FinetuneOptions,
};
use dquant::config::{ApproxLevel, QuantConfig};
use dquant::error::DqError;
use dquant::format::{read_quant, read_tensor, write_quant, write_tensor};
use dquant::layerwise::{quantize_layer, recon_loss_quantized, ColumnProblem};
use dquant::linalg::{Hessian, HessianBuilder};
use dquant::oracle::{exhaustive_solve, DEFAULT_ORACLE_BUDGET};
use dquant::report::save_json;
use dquant::tensor::Tensor2D;

const FORMAT_NOTES: &str = "\
File formats (all integers little-endian):
  Tensor files    magic \"DQTEN\\0\", version 1, dtype u8 (0=f32, 1=f64),
                  ndim u8, dims u64 each, row-major payload.
  Quantized layer magic \"DQQNT\\0\", version 1, bits u8, alpha/beta i32,
                  d_in/d_out u64, ng u32, packed codes (one byte-aligned
                  block per output column, LSB-first, code = w - alpha),
                  then d_out*ng f32 scales and d_out*ng f32 zero points.";

#[derive(Parser)]
#[command(
    name = "dquant",
    version,
    about = "Weight-only quantization: decouple weights into integers plus scales/zeros",
    after_help = FORMAT_NOTES,
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Accumulate calibration activations into a damped Gram matrix file.
    Hessian(HessianArgs),
    /// Quantize one layer against a Hessian file.
    Quantize(QuantizeArgs),
    /// Re-evaluate a quantized layer from its files.
    Eval(EvalArgs),
    /// Fine-tune scales, zeros, and norm parameters of a two-layer block.
    BlockFinetune(BlockFinetuneArgs),
    /// Exhaustively enumerate tiny instances for ground truth.
    Oracle(OracleArgs),
    /// Compare the two integer-solve approximations across inner-iteration counts.
    CompareApprox(CompareArgs),
}

#[derive(Args)]
struct HessianArgs {
    /// Activation tensor file(s); repeat the flag to accumulate batches.
    #[arg(long, required = true)]
    activations: Vec<PathBuf>,
    /// Diagonal damping as a fraction of the mean Gram diagonal.
    #[arg(long, default_value_t = 0.01)]
    damping: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Solver options shared by the quantizing subcommands. Precedence:
/// built-in defaults, then the --config file, then explicit flags.
#[derive(Args, Clone, Default)]
struct SolverFlags {
    /// TOML config file; any flag below overrides its value.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bit width (2, 3, or 4).
    #[arg(long)]
    bits: Option<u8>,
    /// Scale/zero groups along the input dimension.
    #[arg(long)]
    groups: Option<usize>,
    /// Integer-solve approximation: level1 or level2.
    #[arg(long)]
    approx: Option<String>,
    /// Alternation rounds.
    #[arg(long)]
    n: Option<usize>,
    /// Inner PGD iterations per sequential step (level1).
    #[arg(long)]
    k: Option<usize>,
    /// Warm-up PGD iterations (level1).
    #[arg(long)]
    m: Option<usize>,
    /// Shrink factors scanned by the grid-search initialization.
    #[arg(long)]
    grid_points: Option<usize>,
    /// Smallest shrink factor.
    #[arg(long)]
    grid_min: Option<f64>,
    /// Largest shrink factor.
    #[arg(long)]
    grid_max: Option<f64>,
    /// Search a separate shrink factor per group.
    #[arg(long, default_value_t = false)]
    per_group_grid: bool,
    /// Damping fraction echoed into the report.
    #[arg(long)]
    damping: Option<f64>,
    /// PGD early-stop tolerance.
    #[arg(long)]
    pgd_tolerance: Option<f64>,
    /// Seed for randomized subroutines.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-column parallelism (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
    /// Pin scale,zero (e.g. "1,0") for every group and skip the analytic
    /// scale/zero updates; for reproducing worked examples.
    #[arg(long, value_parser = parse_sz_pair)]
    fixed_init_sz: Option<(f64, f64)>,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Weight tensor file, d_in x d_out.
    #[arg(long)]
    weights: PathBuf,
    /// Hessian tensor file (d_in x d_in), e.g. from `dquant hessian`.
    #[arg(long)]
    hessian: PathBuf,
    /// Output quantized-layer file.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    flags: SolverFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Original weight tensor file.
    #[arg(long)]
    weights: PathBuf,
    /// Quantized layer file.
    #[arg(long)]
    quant: PathBuf,
    /// Calibration activations used to rebuild the Hessian; repeat the flag
    /// to accumulate batches.
    #[arg(long, required = true)]
    activations: Vec<PathBuf>,
    /// Damping fraction for the rebuilt Hessian.
    #[arg(long, default_value_t = 0.01)]
    damping: f64,
}

#[derive(Args)]
struct BlockFinetuneArgs {
    /// Block description file (TOML).
    #[arg(long)]
    block: PathBuf,
    /// Calibration inputs fed to the block, batch x width.
    #[arg(long)]
    calib: PathBuf,
    /// Optional separate inputs for the full-precision reference pass; use
    /// when --calib carries outputs of already-quantized upstream blocks.
    #[arg(long)]
    ref_activations: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    wd: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional JSON report with the loss curve.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// Weight tensor file; every column is enumerated.
    #[arg(long)]
    weights: PathBuf,
    /// Hessian tensor file.
    #[arg(long)]
    hessian: PathBuf,
    /// Candidate ceiling.
    #[arg(long, default_value_t = DEFAULT_ORACLE_BUDGET)]
    budget: u64,
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    groups: Option<usize>,
    /// Enumerate with (s, z) pinned to this pair instead of solving them.
    #[arg(long, value_parser = parse_sz_pair)]
    fixed_sz: Option<(f64, f64)>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    hessian: PathBuf,
    /// Inner-iteration counts to sweep for level1.
    #[arg(long, default_value = "1,2,4,8,20", value_parser = parse_k_sweep)]
    k_sweep: KSweep,
    /// Optional CSV output path (the table always prints to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: SolverFlags,
}

/// Newtype so clap can parse the comma-separated sweep in one value.
#[derive(Clone, Debug)]
struct KSweep(Vec<usize>);

fn parse_sz_pair(raw: &str) -> Result<(f64, f64), String> {
    let (s, z) = raw
        .split_once(',')
        .ok_or_else(|| format!("expected \"scale,zero\", got '{raw}'"))?;
    let s: f64 = s.trim().parse().map_err(|e| format!("bad scale: {e}"))?;
    let z: f64 = z.trim().parse().map_err(|e| format!("bad zero: {e}"))?;
    if !s.is_finite() || !z.is_finite() {
        return Err("scale and zero must be finite".into());
    }
    Ok((s, z))
}

fn parse_k_sweep(raw: &str) -> Result<KSweep, String> {
    let ks = raw
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad K '{p}': {e}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if ks.is_empty() {
        return Err("the K sweep must contain at least one value".into());
    }
    Ok(KSweep(ks))
}

/// Optional solver settings loadable from TOML; flags override these.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    bits: Option<u8>,
    groups: Option<usize>,
    approx: Option<String>,
    n: Option<usize>,
    k: Option<usize>,
    m: Option<usize>,
    grid_points: Option<usize>,
    grid_min: Option<f64>,
    grid_max: Option<f64>,
    per_group_grid: Option<bool>,
    damping: Option<f64>,
    pgd_tolerance: Option<f64>,
    seed: Option<u64>,
    workers: Option<usize>,
}

fn io_err(path: &Path, source: std::io::Error) -> DqError {
    DqError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn load_file_config(path: &Path) -> Result<FileConfig, DqError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| DqError::InvalidConfig(format!("{}: {e}", path.display())))
}

fn build_config(flags: &SolverFlags) -> Result<(QuantConfig, usize), DqError> {
    let file = match &flags.config {
        Some(p) => load_file_config(p)?,
        None => FileConfig::default(),
    };
    let bits = flags.bits.or(file.bits).unwrap_or(2);
    let mut cfg = QuantConfig::for_bits(bits)?;
    if let Some(g) = flags.groups.or(file.groups) {
        cfg.group_count = g;
    }
    if let Some(a) = flags.approx.clone().or(file.approx) {
        cfg.approx_level = a.parse::<ApproxLevel>()?;
    }
    if let Some(n) = flags.n.or(file.n) {
        cfg.rounds = n;
    }
    if let Some(k) = flags.k.or(file.k) {
        cfg.seq_pgd_iters = k;
    }
    if let Some(m) = flags.m.or(file.m) {
        cfg.warmup_pgd_iters = m;
    }
    if let Some(p) = flags.grid_points.or(file.grid_points) {
        cfg.grid_points = p;
    }
    if let Some(v) = flags.grid_min.or(file.grid_min) {
        cfg.grid_shrink_min = v;
    }
    if let Some(v) = flags.grid_max.or(file.grid_max) {
        cfg.grid_shrink_max = v;
    }
    if flags.per_group_grid || file.per_group_grid.unwrap_or(false) {
        cfg.per_group_shrink = true;
    }
    if let Some(v) = flags.damping.or(file.damping) {
        cfg.damping_fraction = v;
    }
    if let Some(v) = flags.pgd_tolerance.or(file.pgd_tolerance) {
        cfg.pgd_tolerance = v;
    }
    if let Some(v) = flags.seed.or(file.seed) {
        cfg.seed = v;
    }
    cfg.fixed_sz = flags.fixed_init_sz;
    cfg.validate()?;
    let workers = flags.workers.or(file.workers).unwrap_or(0);
    Ok((cfg, workers))
}

fn load_hessian_file(path: &Path) -> Result<Hessian, DqError> {
    Hessian::from_matrix(read_tensor(path)?)
}

/// Reads and folds activation batches in file order.
fn accumulate_batches(paths: &[PathBuf]) -> Result<HessianBuilder, DqError> {
    let first = read_tensor(&paths[0])?;
    let mut builder = HessianBuilder::new(first.cols());
    builder.accumulate(&first)?;
    for path in &paths[1..] {
        builder.accumulate(&read_tensor(path)?)?;
    }
    Ok(builder)
}

fn cmd_hessian(args: &HessianArgs) -> Result<(), DqError> {
    let builder = accumulate_batches(&args.activations)?;
    let hessian = builder.finalize(args.damping)?;
    let diag: Vec<f64> = (0..hessian.dim())
        .map(|i| hessian.matrix().get(i, i))
        .collect();
    let (min, max) = diag
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let mean = diag.iter().sum::<f64>() / diag.len() as f64;
    write_tensor(&args.out, hessian.matrix())?;
    println!("rows accumulated: {}", hessian.source_rows());
    println!("damping lambda:   {:.12e}", hessian.damping_lambda());
    println!("diag min/mean/max: {min:.6e} / {mean:.6e} / {max:.6e}");
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_quantize(args: &QuantizeArgs) -> Result<(), DqError> {
    let (cfg, workers) = build_config(&args.flags)?;
    let w0 = read_tensor(&args.weights)?;
    let hessian = load_hessian_file(&args.hessian)?;
    let (layer, report) = quantize_layer(&w0, &hessian, &cfg, workers)?;
    write_quant(&args.out, &layer)?;
    if let Some(path) = &args.report {
        save_json(path, &report)?;
    }
    println!("columns:   {}", report.totals.columns);
    println!("total g:   {:.12e}", report.totals.total_g);
    println!("flagged:   {}", report.totals.flagged_columns);
    println!("seconds:   {:.3}", report.timings.total_seconds);
    println!("wrote {}", args.out.display());
    if report.totals.flagged_columns > 0 {
        return Err(DqError::Numerical(format!(
            "{} column(s) fell back to an earlier iterate after a singular analytic solve; \
             output files were still written",
            report.totals.flagged_columns
        )));
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), DqError> {
    let w0 = read_tensor(&args.weights)?;
    let layer = read_quant(&args.quant)?;
    if layer.d_in != w0.rows() || layer.d_out != w0.cols() {
        return Err(DqError::InvalidData(format!(
            "quantized layer is {}x{}, weights are {}x{}",
            layer.d_in,
            layer.d_out,
            w0.rows(),
            w0.cols()
        )));
    }
    let wt = layer.dequantize_matrix()?;
    let mut builder = HessianBuilder::new(w0.rows());
    let mut num = 0.0;
    let mut den = 0.0;
    for path in &args.activations {
        let x = read_tensor(path)?;
        if x.cols() != w0.rows() {
            return Err(DqError::InvalidData(format!(
                "{}: activations have {} features, weights have {} rows",
                path.display(),
                x.cols(),
                w0.rows()
            )));
        }
        builder.accumulate(&x)?;
        let xw0 = x.matmul(&w0);
        let xwt = x.matmul(&wt);
        for (a, b) in xwt.data().iter().zip(xw0.data()) {
            num += (a - b) * (a - b);
            den += b * b;
        }
    }
    let hessian = builder.finalize(args.damping)?;

    let mut total_g = 0.0;
    for j in 0..layer.d_out {
        let w = layer.column_qweights(j)?;
        let s: Vec<f64> = layer.column_scales(j).iter().map(|&v| v as f64).collect();
        let z: Vec<f64> = layer.column_zeros(j).iter().map(|&v| v as f64).collect();
        total_g += recon_loss_quantized(&w, &s, &z, &w0.column(j), &hessian)?;
    }
    let rel = if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    };

    println!("total g:          {:.12e}", total_g);
    println!("mean g/column:    {:.12e}", total_g / layer.d_out as f64);
    println!("relative output error: {:.12e}", rel);
    Ok(())
}

fn cmd_block_finetune(args: &BlockFinetuneArgs) -> Result<(), DqError> {
    let loaded = load_block_file(&args.block)?;
    let x = read_tensor(&args.calib)?;
    let ref_x = match &args.ref_activations {
        Some(p) => read_tensor(p)?,
        None => x.clone(),
    };
    let y_ref = float_block_forward(
        &loaded.float_w1,
        &loaded.float_w2,
        &loaded.params.norm_gain,
        &loaded.params.norm_bias,
        loaded.block.activation,
        &ref_x,
    )?;
    if y_ref.rows() != x.rows() {
        return Err(DqError::InvalidData(format!(
            "reference inputs have {} rows, calibration inputs have {}",
            y_ref.rows(),
            x.rows()
        )));
    }

    let opts = FinetuneOptions {
        epochs: args.epochs,
        batch_size: args.batch,
        adam: AdamParams {
            lr: args.lr,
            weight_decay: args.wd,
            ..AdamParams::default()
        },
        seed: args.seed,
    };
    let (tuned, report) = finetune_block(&loaded.block, &loaded.params, &x, &y_ref, &opts)?;

    // Persist the tuned parameters: scales/zeros back into the two layer
    // files, norm parameters back into their tensor files.
    let narrow = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let mut layer1 = loaded.block.layer1.clone();
    layer1.scales = narrow(&tuned.scales1);
    layer1.zeros = narrow(&tuned.zeros1);
    write_quant(&loaded.linear1_path, &layer1)?;
    let mut layer2 = loaded.block.layer2.clone();
    layer2.scales = narrow(&tuned.scales2);
    layer2.zeros = narrow(&tuned.zeros2);
    write_quant(&loaded.linear2_path, &layer2)?;
    let gain = Tensor2D::new(1, tuned.norm_gain.len(), tuned.norm_gain.clone())?;
    let bias = Tensor2D::new(1, tuned.norm_bias.len(), tuned.norm_bias.clone())?;
    write_tensor(&loaded.norm_gain_path, &gain)?;
    write_tensor(&loaded.norm_bias_path, &bias)?;
    if let Some(path) = &args.report {
        save_json(path, &report)?;
    }

    println!("initial loss: {:.12e}", report.initial_loss);
    println!("final loss:   {:.12e}", report.final_loss);
    match report.best_epoch {
        Some(e) => println!("best epoch:   {e}"),
        None => println!("best epoch:   none (initialization kept)"),
    }
    Ok(())
}

fn cmd_oracle(args: &OracleArgs) -> Result<(), DqError> {
    let w0 = read_tensor(&args.weights)?;
    let hessian = load_hessian_file(&args.hessian)?;
    let mut cfg = QuantConfig::for_bits(args.bits.unwrap_or(2))?;
    if let Some(g) = args.groups {
        cfg.group_count = g;
    }
    cfg.fixed_sz = args.fixed_sz;
    cfg.validate()?;

    let mut total = 0.0;
    for j in 0..w0.cols() {
        let b = w0.column(j);
        let prob = ColumnProblem::new(&b, &hessian, &cfg)?;
        let res = exhaustive_solve(&prob, args.budget)?;
        total += res.g_opt;
        println!(
            "column {j}: g_opt {:.12e}  candidates {}  w_opt {:?}",
            res.g_opt, res.candidates_evaluated, res.w_opt
        );
    }
    println!("total g_opt: {total:.12e}");
    Ok(())
}

fn cmd_compare_approx(args: &CompareArgs) -> Result<(), DqError> {
    let (base_cfg, workers) = build_config(&args.flags)?;
    let w0 = read_tensor(&args.weights)?;
    let hessian = load_hessian_file(&args.hessian)?;

    let mut csv = String::from("approx,k,total_g\n");
    let mut cfg = base_cfg.clone();
    cfg.approx_level = ApproxLevel::Level2;
    let (_, report) = quantize_layer(&w0, &hessian, &cfg, workers)?;
    csv.push_str(&format!("level2,,{:.12e}\n", report.totals.total_g));
    for &k in &args.k_sweep.0 {
        let mut cfg = base_cfg.clone();
        cfg.approx_level = ApproxLevel::Level1;
        cfg.seq_pgd_iters = k;
        let (_, report) = quantize_layer(&w0, &hessian, &cfg, workers)?;
        csv.push_str(&format!("level1,{k},{:.12e}\n", report.totals.total_g));
    }
    print!("{csv}");
    if let Some(path) = &args.out {
        std::fs::write(path, &csv).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), DqError> {
    match &cli.command {
        Command::Hessian(a) => cmd_hessian(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Eval(a) => cmd_eval(a),
        Command::BlockFinetune(a) => cmd_block_finetune(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::CompareApprox(a) => cmd_compare_approx(a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let mut source = e.source();
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(e.exit_code());
    }
}
