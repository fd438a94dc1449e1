//! `cafbifpn`: command-line driver for the C-AFBiFPN kernels.
//!
//! Reports go to stdout as JSON, diagnostics to stderr. Exit codes are 0 for
//! success, 1 for a failed check, 2 for usage, config or input errors.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cafbifpn_core::config::RunConfig;
use cafbifpn_core::error::Error;
use cafbifpn_core::fixture::{read_backbone, write_fixture};
use cafbifpn_core::format::tensor_write;
use cafbifpn_core::gradcheck::{run_gradcheck, GradcheckOptions};
use cafbifpn_core::oracles::{attention_flops, AttentionDims, AttentionMode, FlopCount};
use cafbifpn_core::pyramid::{c_afbifpn_forward, InitOptions, PipelineParams};
use cafbifpn_core::rng::RngState;
use cafbifpn_core::routing::{ba_forward_traced, BraParams, TieBreak};
use cafbifpn_core::selfcheck::{run_selfcheck, SelfcheckOptions};
use cafbifpn_core::tensor::Tensor;

#[derive(Parser)]
#[command(name = "cafbifpn", version, about = "C-AFBiFPN feature pyramid: forward passes, checks and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the desk-scale invariant suite, one line per property.
    Selfcheck {
        /// Test hook: plant a known bug and confirm the suite catches it.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Run the pipeline on a backbone directory (C2..C5 tensor files).
    Forward {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Start from an exact relu kink to show the resampling path.
        #[arg(long)]
        engineered_kink: bool,
    },
    /// Time routed against full attention and report exact MAC counts.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the seeded standard backbone fixture.
    GenFixture {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    TopkTiebreak,
}

enum Failure {
    /// A check ran and did not pass.
    Check,
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type Outcome = Result<(), Failure>;

/// Writes one line to stdout. A reader that went away (`| head`) is not an
/// error worth a panic, so write failures are ignored.
fn emit(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn print_json<T: Serialize>(value: &T) {
    emit(&serde_json::to_string_pretty(value).expect("report serializes"));
}

fn selfcheck(fault: Option<Fault>) -> Outcome {
    let opts = SelfcheckOptions {
        tie_break: match fault {
            Some(Fault::TopkTiebreak) => TieBreak::DescendingId,
            None => TieBreak::AscendingId,
        },
    };
    let start = Instant::now();
    let results = run_selfcheck(&opts);
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        emit(&format!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail));
    }
    emit(&format!(
        "{} of {} properties passed in {:.1} s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    ));
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

#[derive(Serialize)]
struct LevelSummary {
    name: String,
    file: String,
    dims: Vec<usize>,
    min: f64,
    max: f64,
    mean: f64,
    l2: f64,
}

impl LevelSummary {
    fn of(name: &str, file: &str, t: &Tensor) -> Self {
        let d = t.data();
        Self {
            name: name.into(),
            file: file.into(),
            dims: t.dims().to_vec(),
            min: d.iter().copied().fold(f64::INFINITY, f64::min),
            max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: t.sum() / t.numel() as f64,
            l2: t.dot(t).sqrt(),
        }
    }
}

#[derive(Serialize)]
struct ForwardReport {
    config: RunConfig,
    ba_invocations: usize,
    flops: FlopCount,
    levels: Vec<LevelSummary>,
}

fn forward(config: &Path, input: &Path, output: &Path) -> Outcome {
    let cfg = RunConfig::from_path(config)?;
    let backbone = read_backbone(input)?;
    let channels = backbone.levels.clone().map(|t| t.dims()[0]);
    let params = PipelineParams::seeded(&cfg, channels, InitOptions::default())?;
    let out = c_afbifpn_forward(&backbone, &params)?;
    std::fs::create_dir_all(output).map_err(Error::from)?;
    let mut levels = Vec::with_capacity(4);
    for (l, t) in out.outputs.levels.iter().enumerate() {
        let name = format!("P{}O", l + 2);
        let file = format!("{name}.tnsr");
        tensor_write(&output.join(&file), t)?;
        levels.push(LevelSummary::of(&name, &file, t));
    }
    let report = ForwardReport {
        config: cfg,
        ba_invocations: out.ba_invocations,
        flops: out.flops,
        levels,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(output.join("report.json"), format!("{json}\n")).map_err(Error::from)?;
    emit(&json);
    Ok(())
}

fn gradcheck(config: &Path, seed: u64, engineered_kink: bool) -> Outcome {
    let cfg = RunConfig::from_path(config)?;
    let report = run_gradcheck(&cfg, seed, GradcheckOptions { engineered_kink })?;
    print_json(&report);
    for g in report.groups.iter().filter(|g| !g.passed) {
        eprintln!("gradient group {} failed: relative error {:.3e}", g.group, g.max_rel_error);
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

#[derive(Serialize)]
struct BenchCase {
    h: usize,
    w: usize,
    s: usize,
    k: usize,
    routed_macs: FlopCount,
    dense_macs: FlopCount,
    qk_ratio: f64,
    av_ratio: f64,
    expected_ratio: f64,
    runtime_matches_formula: bool,
    routed_seconds: f64,
    dense_seconds: f64,
}

#[derive(Serialize)]
struct BenchReport {
    channels: usize,
    heads: usize,
    cases: Vec<BenchCase>,
    passed: bool,
}

const BENCH_SIDES: [usize; 3] = [8, 16, 32];
const BENCH_REPS: usize = 3;

/// Best-of-N wall time of one BA pass; returns the runtime MAC tally too.
fn time_ba(f: &Tensor, p: &BraParams) -> Result<(f64, FlopCount), Error> {
    let mut best = f64::INFINITY;
    let mut flops = FlopCount::default();
    for _ in 0..BENCH_REPS {
        let start = Instant::now();
        flops = ba_forward_traced(f, p, None)?.flops;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok((best, flops))
}

fn bench(config: &Path) -> Outcome {
    let cfg = RunConfig::from_path(config)?;
    let c = cfg.fusion_width;
    let mut rng = RngState::new(cfg.seed);
    let mut cases = Vec::new();
    let mut passed = true;
    for side in BENCH_SIDES {
        let f = Tensor::uniform(&[c, side, side], &mut rng, -1.0, 1.0)?;
        for s in [1, 2, 4] {
            let s2 = s * s;
            let mut ks = vec![1, cfg.topk_k, s2 / 2, s2];
            ks.retain(|&k| (1..=s2).contains(&k));
            ks.sort_unstable();
            ks.dedup();
            // full routing reads every region, which is dense attention
            let dense = BraParams::seeded(c, s, s2, cfg.heads, cfg.lce_kernel, 0.1, false, &mut rng)?;
            let (dense_seconds, _) = time_ba(&f, &dense)?;
            for k in ks {
                let mut p = dense.clone();
                p.top_k = k;
                let dims = AttentionDims {
                    h: side,
                    w: side,
                    c,
                    s,
                    k,
                    heads: cfg.heads,
                    lce_kernel: cfg.lce_kernel,
                };
                let routed = attention_flops(dims, AttentionMode::Routed);
                let full = attention_flops(dims, AttentionMode::Dense);
                let (routed_seconds, runtime) = time_ba(&f, &p)?;
                let exact = routed.qk_logits * s2 as u64 == full.qk_logits * k as u64
                    && routed.av_aggregation * s2 as u64 == full.av_aggregation * k as u64;
                let case = BenchCase {
                    h: side,
                    w: side,
                    s,
                    k,
                    routed_macs: routed,
                    dense_macs: full,
                    qk_ratio: routed.qk_logits as f64 / full.qk_logits as f64,
                    av_ratio: routed.av_aggregation as f64 / full.av_aggregation as f64,
                    expected_ratio: k as f64 / s2 as f64,
                    runtime_matches_formula: runtime == routed,
                    routed_seconds,
                    dense_seconds,
                };
                if !exact || !case.runtime_matches_formula {
                    eprintln!("MAC accounting mismatch at H=W={side} S={s} k={k}");
                    passed = false;
                }
                cases.push(case);
            }
        }
    }
    print_json(&BenchReport {
        channels: c,
        heads: cfg.heads,
        cases,
        passed,
    });
    if passed {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn gen_fixture(seed: u64, out: &Path) -> Outcome {
    print_json(&write_fixture(seed, out)?);
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Selfcheck { inject_fault } => selfcheck(inject_fault),
        Command::Forward { config, input, output } => forward(&config, &input, &output),
        Command::Gradcheck {
            config,
            seed,
            engineered_kink,
        } => gradcheck(&config, seed, engineered_kink),
        Command::Bench { config } => bench(&config),
        Command::GenFixture { seed, out } => gen_fixture(seed, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            match e {
                // a computation that broke on valid input is a failed check
                Error::Numeric(_) | Error::Graph(_) | Error::Index(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
