//! End-to-end tests of the `dquant` binary: artifact files in, exit codes
//! and printed metrics out. Every fixture is built with the library's own
//! writers so the tests pin the binary to the public formats.

use std::path::Path;
use std::process::{Command, Output};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dquant::blockwise::{block_loss, Activation};
use dquant::config::QuantConfig;
use dquant::format::{pack_codes, read_quant, read_tensor, write_tensor};
use dquant::layerwise::{ColumnProblem, QuantizedLayer};
use dquant::linalg::build_hessian;
use dquant::oracle::{exhaustive_solve, DEFAULT_ORACLE_BUDGET};
use dquant::report::{load_json, FinetuneReport, SolveReport};
use dquant::tensor::Tensor2D;

fn dquant(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dquant"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("failed to spawn dquant")
}

fn run_ok(args: &[&str], dir: &Path) -> String {
    let out = dquant(args, dir);
    assert!(
        out.status.success(),
        "dquant {args:?} failed with {:?}:\n{}{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn exit_code(args: &[&str], dir: &Path) -> i32 {
    dquant(args, dir).status.code().expect("killed by signal")
}

/// Extracts the last whitespace-separated token of the line starting with
/// `prefix` and parses it as a float.
fn metric(stdout: &str, prefix: &str) -> f64 {
    let line = stdout
        .lines()
        .find(|l| l.starts_with(prefix))
        .unwrap_or_else(|| panic!("no line starting with '{prefix}' in:\n{stdout}"));
    line.split_whitespace().last().unwrap().parse().unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor2D::new(rows, cols, data).unwrap()
}

#[test]
fn help_version_and_error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(exit_code(&["--help"], d), 0);
    assert_eq!(exit_code(&["quantize", "--help"], d), 0);
    let out = dquant(&["--version"], d);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("dquant"));

    // Parse errors and invalid settings exit 1.
    assert_eq!(exit_code(&["no-such-command"], d), 1);
    assert_eq!(exit_code(&["eval", "--no-such-flag"], d), 1);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&mut rng, 8, 3);
    write_tensor(&d.join("x.dqt"), &x).unwrap();
    let h = build_hessian(&x, 0.01).unwrap();
    write_tensor(&d.join("h.dqt"), h.matrix()).unwrap();
    let w = random_tensor(&mut rng, 3, 2);
    write_tensor(&d.join("w.dqt"), &w).unwrap();

    // A structurally valid invocation against a missing file exits 2.
    assert_eq!(
        exit_code(
            &[
                "quantize",
                "--weights",
                "missing.dqt",
                "--hessian",
                "h.dqt",
                "--out",
                "o.dqq"
            ],
            d
        ),
        2
    );
    // An unsupported bit width is caught by validation, not by clap.
    assert_eq!(
        exit_code(
            &[
                "quantize",
                "--weights",
                "w.dqt",
                "--hessian",
                "h.dqt",
                "--out",
                "o.dqq",
                "--bits",
                "7"
            ],
            d
        ),
        1
    );
    // A tensor file is not a quantized-layer file: format error, exit 2.
    assert_eq!(
        exit_code(
            &[
                "eval",
                "--weights",
                "w.dqt",
                "--quant",
                "x.dqt",
                "--activations",
                "x.dqt"
            ],
            d
        ),
        2
    );
}

#[test]
fn hessian_command_is_deterministic_and_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_tensor(&mut rng, 16, 5);
    // Two batches split row-wise accumulate to the same Gram matrix as the
    // full tensor in one pass.
    let x1 = Tensor2D::new(10, 5, x.data()[..50].to_vec()).unwrap();
    let x2 = Tensor2D::new(6, 5, x.data()[50..].to_vec()).unwrap();
    write_tensor(&d.join("x1.dqt"), &x1).unwrap();
    write_tensor(&d.join("x2.dqt"), &x2).unwrap();

    let args = [
        "hessian",
        "--activations",
        "x1.dqt",
        "--activations",
        "x2.dqt",
        "--damping",
        "0.01",
        "--out",
    ];
    let stdout = run_ok(&[&args[..], &["h1.dqt"]].concat(), d);
    assert!(stdout.contains("rows accumulated: 16"));
    run_ok(&[&args[..], &["h2.dqt"]].concat(), d);
    assert_eq!(
        std::fs::read(d.join("h1.dqt")).unwrap(),
        std::fs::read(d.join("h2.dqt")).unwrap(),
        "two runs over the same batches wrote different files"
    );

    // Batch partial sums are added in file order, so the library reproduces
    // the command bit for bit when fed the same split.
    let mut builder = dquant::linalg::HessianBuilder::new(5);
    builder.accumulate(&x1).unwrap();
    builder.accumulate(&x2).unwrap();
    let expected = builder.finalize(0.01).unwrap();
    let written = read_tensor(&d.join("h1.dqt")).unwrap();
    for (a, b) in written.data().iter().zip(expected.matrix().data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    // The one-pass build agrees up to summation order.
    let whole = build_hessian(&x, 0.01).unwrap();
    for (a, b) in written.data().iter().zip(whole.matrix().data()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
    // Stdout carries 12 significant digits of the damping value.
    let lambda = metric(&stdout, "damping lambda:");
    assert!((lambda - expected.damping_lambda()).abs() <= 1e-10 * lambda.abs());
}

#[test]
fn quantize_reproduces_the_two_coordinate_example() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tensor(
        &d.join("h.dqt"),
        &Tensor2D::from_rows(&[vec![2.0, 1.0], vec![1.0, 1.0]]).unwrap(),
    )
    .unwrap();
    write_tensor(
        &d.join("w.dqt"),
        &Tensor2D::new(2, 1, vec![0.6, 0.0]).unwrap(),
    )
    .unwrap();

    let stdout = run_ok(
        &[
            "quantize",
            "--weights",
            "w.dqt",
            "--hessian",
            "h.dqt",
            "--out",
            "layer.dqq",
            "--report",
            "report.json",
            "--approx",
            "level2",
            "--n",
            "1",
            "--fixed-init-sz",
            "1,0",
        ],
        d,
    );
    assert!((metric(&stdout, "total g:") - 0.16).abs() < 1e-12);

    let layer = read_quant(&d.join("layer.dqq")).unwrap();
    assert_eq!(layer.column_qweights(0).unwrap(), vec![1, 0]);
    assert_eq!(layer.column_scales(0), &[1.0f32]);
    assert_eq!(layer.column_zeros(0), &[0.0f32]);

    let report: SolveReport = load_json(&d.join("report.json")).unwrap();
    assert_eq!(report.totals.columns, 1);
    assert_eq!(report.totals.flagged_columns, 0);
    assert!((report.totals.total_g - 0.16).abs() < 1e-12);
    assert_eq!(report.config.fixed_sz, Some((1.0, 0.0)));
}

#[test]
fn quantize_is_deterministic_and_eval_recomputes_its_objective() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random_tensor(&mut rng, 32, 6);
    let w = random_tensor(&mut rng, 6, 4);
    write_tensor(&d.join("x.dqt"), &x).unwrap();
    write_tensor(&d.join("w.dqt"), &w).unwrap();
    run_ok(&["hessian", "--activations", "x.dqt", "--out", "h.dqt"], d);

    let common = [
        "quantize",
        "--weights",
        "w.dqt",
        "--hessian",
        "h.dqt",
        "--approx",
        "level1",
        "--groups",
        "2",
        "--k",
        "10",
        "--seed",
        "42",
    ];
    let stdout = run_ok(&[&common[..], &["--out", "a.dqq"]].concat(), d);
    run_ok(
        &[&common[..], &["--out", "b.dqq", "--workers", "4"]].concat(),
        d,
    );
    assert_eq!(
        std::fs::read(d.join("a.dqq")).unwrap(),
        std::fs::read(d.join("b.dqq")).unwrap(),
        "same seed and settings wrote different layers"
    );

    // `eval` rebuilds the Hessian from the activations with the same
    // damping, so its objective matches the solver's report.
    let quantize_g = metric(&stdout, "total g:");
    let eval_out = run_ok(
        &[
            "eval",
            "--weights",
            "w.dqt",
            "--quant",
            "a.dqq",
            "--activations",
            "x.dqt",
            "--damping",
            "0.01",
        ],
        d,
    );
    let eval_g = metric(&eval_out, "total g:");
    assert!(
        (eval_g - quantize_g).abs() <= 1e-9 * quantize_g.abs().max(1e-12),
        "quantize reported {quantize_g}, eval recomputed {eval_g}"
    );
    let rel = metric(&eval_out, "relative output error:");
    assert!(rel.is_finite() && rel >= 0.0);

    // Feeding the same rows as several --activations batches agrees with
    // the single-file evaluation (up to batched-accumulation rounding).
    let x_a = Tensor2D::new(20, 6, x.data()[..20 * 6].to_vec()).unwrap();
    let x_b = Tensor2D::new(12, 6, x.data()[20 * 6..].to_vec()).unwrap();
    write_tensor(&d.join("x_a.dqt"), &x_a).unwrap();
    write_tensor(&d.join("x_b.dqt"), &x_b).unwrap();
    let split_out = run_ok(
        &[
            "eval",
            "--weights",
            "w.dqt",
            "--quant",
            "a.dqq",
            "--activations",
            "x_a.dqt",
            "--activations",
            "x_b.dqt",
            "--damping",
            "0.01",
        ],
        d,
    );
    let split_g = metric(&split_out, "total g:");
    assert!(
        (split_g - eval_g).abs() <= 1e-9 * eval_g.abs().max(1e-12),
        "split batches recomputed {split_g}, single batch gave {eval_g}"
    );
    let split_rel = metric(&split_out, "relative output error:");
    assert!(
        (split_rel - rel).abs() <= 1e-12 * rel.max(1e-12),
        "split batches reported error {split_rel}, single batch {rel}"
    );
}

#[test]
fn eval_reports_exactly_zero_error_for_a_representable_layer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Codes dequantized at (0.5, 0.25) are exact in both f32 and f64, so a
    // weight matrix built from them reconstructs with zero residual.
    let codes: Vec<i32> = vec![-2, -1, 0, 1];
    let layer = QuantizedLayer {
        d_in: 4,
        d_out: 1,
        bits: 2,
        alpha: -2,
        beta: 1,
        group_count: 1,
        codes: pack_codes(&codes, 2, -2).unwrap(),
        scales: vec![0.5],
        zeros: vec![0.25],
    };
    dquant::format::write_quant(&d.join("layer.dqq"), &layer).unwrap();
    let w = Tensor2D::new(4, 1, vec![-0.75, -0.25, 0.25, 0.75]).unwrap();
    write_tensor(&d.join("w.dqt"), &w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    write_tensor(&d.join("x.dqt"), &random_tensor(&mut rng, 8, 4)).unwrap();

    let stdout = run_ok(
        &[
            "eval",
            "--weights",
            "w.dqt",
            "--quant",
            "layer.dqq",
            "--activations",
            "x.dqt",
        ],
        d,
    );
    assert_eq!(metric(&stdout, "total g:"), 0.0);
    assert_eq!(metric(&stdout, "relative output error:"), 0.0);
}

/// Writes a full set of block artifacts into `dir` and returns the names of
/// the files the fine-tune run may rewrite.
fn write_block_fixture(dir: &Path, seed: u64) -> Vec<&'static str> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (width, hidden) = (4usize, 6usize);
    let code_col = |rng: &mut ChaCha8Rng, n: usize| -> Vec<i32> {
        (0..n).map(|_| rng.random_range(-2..=1)).collect()
    };
    let pack_layer = |cols: &[Vec<i32>], rng: &mut ChaCha8Rng| -> QuantizedLayer {
        let d_in = cols[0].len();
        let d_out = cols.len();
        let mut codes = Vec::new();
        for c in cols {
            codes.extend(pack_codes(c, 2, -2).unwrap());
        }
        QuantizedLayer {
            d_in,
            d_out,
            bits: 2,
            alpha: -2,
            beta: 1,
            group_count: 1,
            codes,
            scales: (0..d_out).map(|_| rng.random_range(0.3..0.8)).collect(),
            zeros: (0..d_out).map(|_| rng.random_range(-0.2..0.2)).collect(),
        }
    };
    let cols1: Vec<Vec<i32>> = (0..hidden).map(|_| code_col(&mut rng, width)).collect();
    let cols2: Vec<Vec<i32>> = (0..width).map(|_| code_col(&mut rng, hidden)).collect();
    let layer1 = pack_layer(&cols1, &mut rng);
    let layer2 = pack_layer(&cols2, &mut rng);
    dquant::format::write_quant(&dir.join("l1.dqq"), &layer1).unwrap();
    dquant::format::write_quant(&dir.join("l2.dqq"), &layer2).unwrap();

    let gain: Vec<f64> = (0..width).map(|_| rng.random_range(0.9..1.1)).collect();
    let bias: Vec<f64> = (0..width).map(|_| rng.random_range(-0.1..0.1)).collect();
    write_tensor(
        &dir.join("gain.dqt"),
        &Tensor2D::new(1, width, gain).unwrap(),
    )
    .unwrap();
    write_tensor(
        &dir.join("bias.dqt"),
        &Tensor2D::new(1, width, bias).unwrap(),
    )
    .unwrap();
    write_tensor(&dir.join("w1.dqt"), &random_tensor(&mut rng, width, hidden)).unwrap();
    write_tensor(&dir.join("w2.dqt"), &random_tensor(&mut rng, hidden, width)).unwrap();
    write_tensor(&dir.join("calib.dqt"), &random_tensor(&mut rng, 24, width)).unwrap();

    std::fs::write(
        dir.join("block.toml"),
        r#"[block]
width = 4
hidden = 6
activation = "gelu"

[params]
norm_gain = "gain.dqt"
norm_bias = "bias.dqt"
weights1 = "w1.dqt"
weights2 = "w2.dqt"

[quantized]
linear1 = "l1.dqq"
linear2 = "l2.dqq"
"#,
    )
    .unwrap();
    vec!["l1.dqq", "l2.dqq", "gain.dqt", "bias.dqt"]
}

#[test]
fn block_finetune_zero_epochs_rewrites_files_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let rewritten = write_block_fixture(d, 51);
    let before: Vec<Vec<u8>> = rewritten
        .iter()
        .map(|f| std::fs::read(d.join(f)).unwrap())
        .collect();

    let stdout = run_ok(
        &[
            "block-finetune",
            "--block",
            "block.toml",
            "--calib",
            "calib.dqt",
            "--epochs",
            "0",
        ],
        d,
    );
    assert!(stdout.contains("best epoch:   none"));
    assert_eq!(
        metric(&stdout, "initial loss:"),
        metric(&stdout, "final loss:")
    );
    for (f, old) in rewritten.iter().zip(before) {
        assert_eq!(
            std::fs::read(d.join(f)).unwrap(),
            old,
            "{f} changed with no training"
        );
    }
}

#[test]
fn block_finetune_trains_parameters_but_never_touches_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_block_fixture(d, 52);
    let l1_before = read_quant(&d.join("l1.dqq")).unwrap();
    let l2_before = read_quant(&d.join("l2.dqq")).unwrap();
    // Training rewrites the norm tensors in place; the full-precision
    // reference pass is defined by their values before the run.
    let gain_before = read_tensor(&d.join("gain.dqt")).unwrap();
    let bias_before = read_tensor(&d.join("bias.dqt")).unwrap();

    let stdout = run_ok(
        &[
            "block-finetune",
            "--block",
            "block.toml",
            "--calib",
            "calib.dqt",
            "--epochs",
            "3",
            "--lr",
            "1e-3",
            "--batch",
            "8",
            "--seed",
            "7",
            "--report",
            "ft.json",
        ],
        d,
    );
    let initial = metric(&stdout, "initial loss:");
    let final_loss = metric(&stdout, "final loss:");
    assert!(
        final_loss <= initial,
        "loss rose from {initial} to {final_loss}"
    );

    let l1_after = read_quant(&d.join("l1.dqq")).unwrap();
    let l2_after = read_quant(&d.join("l2.dqq")).unwrap();
    assert_eq!(
        l1_before.codes, l1_after.codes,
        "integer codes must stay frozen"
    );
    assert_eq!(
        l2_before.codes, l2_after.codes,
        "integer codes must stay frozen"
    );
    assert!(
        l1_after.scales != l1_before.scales || l2_after.scales != l2_before.scales,
        "three epochs at lr 1e-3 should move the scales"
    );

    // Stdout carries 12 significant digits of the report values.
    let report: FinetuneReport = load_json(&d.join("ft.json")).unwrap();
    assert!((report.initial_loss - initial).abs() <= 1e-10 * initial.abs().max(1.0));
    assert!((report.final_loss - final_loss).abs() <= 1e-10 * final_loss.abs().max(1.0));
    assert_eq!(report.epoch_losses.len(), 3);

    // The rewritten artifacts actually evaluate to the reported final loss.
    let loaded = dquant::blockwise::load_block_file(&d.join("block.toml")).unwrap();
    let x = read_tensor(&d.join("calib.dqt")).unwrap();
    let y_ref = dquant::blockwise::float_block_forward(
        &loaded.float_w1,
        &loaded.float_w2,
        gain_before.data(),
        bias_before.data(),
        Activation::Gelu,
        &x,
    )
    .unwrap();
    let recomputed = block_loss(&loaded.block, &loaded.params, &x, &y_ref).unwrap();
    // Scales and zeros pass through an f32 narrowing on their way to disk.
    assert!(
        (recomputed - final_loss).abs() <= 1e-6 * final_loss.max(1e-12),
        "files evaluate to {recomputed}, command reported {final_loss}"
    );
}

#[test]
fn block_finetune_accepts_separate_reference_activations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_block_fixture(d, 53);
    // The reference pass may see different inputs than the tuned block, as
    // long as the row counts line up.
    std::fs::copy(d.join("calib.dqt"), d.join("ref.dqt")).unwrap();
    let stdout = run_ok(
        &[
            "block-finetune",
            "--block",
            "block.toml",
            "--calib",
            "calib.dqt",
            "--ref-activations",
            "ref.dqt",
            "--epochs",
            "1",
        ],
        d,
    );
    assert!(metric(&stdout, "final loss:") <= metric(&stdout, "initial loss:"));
}

#[test]
fn compare_approx_emits_the_sweep_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let x = random_tensor(&mut rng, 16, 4);
    write_tensor(&d.join("x.dqt"), &x).unwrap();
    write_tensor(&d.join("w.dqt"), &random_tensor(&mut rng, 4, 2)).unwrap();
    run_ok(&["hessian", "--activations", "x.dqt", "--out", "h.dqt"], d);

    let stdout = run_ok(
        &[
            "compare-approx",
            "--weights",
            "w.dqt",
            "--hessian",
            "h.dqt",
            "--k-sweep",
            "1,3",
            "--seed",
            "5",
            "--out",
            "sweep.csv",
        ],
        d,
    );
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "approx,k,total_g");
    assert!(lines[1].starts_with("level2,,"));
    assert!(lines[2].starts_with("level1,1,"));
    assert!(lines[3].starts_with("level1,3,"));
    for line in &lines[1..4] {
        let g: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(g.is_finite() && g >= 0.0);
    }
    assert_eq!(
        std::fs::read_to_string(d.join("sweep.csv")).unwrap(),
        stdout
    );
}

#[test]
fn oracle_command_matches_the_library_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let x = random_tensor(&mut rng, 12, 3);
    let w = random_tensor(&mut rng, 3, 2);
    write_tensor(&d.join("x.dqt"), &x).unwrap();
    write_tensor(&d.join("w.dqt"), &w).unwrap();
    let h = build_hessian(&x, 0.01).unwrap();
    write_tensor(&d.join("h.dqt"), h.matrix()).unwrap();

    let stdout = run_ok(
        &[
            "oracle",
            "--weights",
            "w.dqt",
            "--hessian",
            "h.dqt",
            "--bits",
            "2",
        ],
        d,
    );
    let cfg = QuantConfig::for_bits(2).unwrap();
    let mut expected_total = 0.0;
    for j in 0..2 {
        let b = w.column(j);
        let prob = ColumnProblem::new(&b, &h, &cfg).unwrap();
        expected_total += exhaustive_solve(&prob, DEFAULT_ORACLE_BUDGET)
            .unwrap()
            .g_opt;
        assert!(stdout.contains(&format!("column {j}: g_opt")));
    }
    let total = metric(&stdout, "total g_opt:");
    assert!((total - expected_total).abs() <= 1e-12 * expected_total.max(1e-12));
}

#[test]
fn config_file_supplies_defaults_and_flags_override_them() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let x = random_tensor(&mut rng, 16, 4);
    write_tensor(&d.join("x.dqt"), &x).unwrap();
    write_tensor(&d.join("w.dqt"), &random_tensor(&mut rng, 4, 2)).unwrap();
    run_ok(&["hessian", "--activations", "x.dqt", "--out", "h.dqt"], d);
    std::fs::write(d.join("solver.toml"), "bits = 3\nn = 9\nseed = 5\n").unwrap();

    run_ok(
        &[
            "quantize",
            "--weights",
            "w.dqt",
            "--hessian",
            "h.dqt",
            "--out",
            "c.dqq",
            "--config",
            "solver.toml",
            "--n",
            "2",
            "--report",
            "report.json",
        ],
        d,
    );
    let report: SolveReport = load_json(&d.join("report.json")).unwrap();
    assert_eq!(
        report.config.bits, 3,
        "bits should come from the config file"
    );
    assert_eq!(report.config.rounds, 2, "the --n flag overrides the file");
    assert_eq!(report.config.seed, 5);
    assert_eq!(read_quant(&d.join("c.dqq")).unwrap().bits, 3);

    // Misspelled keys are rejected rather than silently ignored.
    std::fs::write(d.join("bad.toml"), "bots = 3\n").unwrap();
    assert_eq!(
        exit_code(
            &[
                "quantize",
                "--weights",
                "w.dqt",
                "--hessian",
                "h.dqt",
                "--out",
                "c.dqq",
                "--config",
                "bad.toml",
            ],
            d
        ),
        1
    );
}
