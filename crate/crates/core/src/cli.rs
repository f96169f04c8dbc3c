//! The `tokendiff` command line.
//!
//! Exit codes: 0 on success, 1 on a domain error (reported on stderr as `error: ...`),
//! 2 on a usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::auxiliary::{club_mi, contrastive_ranking_loss, info_nce, recall_at_k};
use crate::codec::{dequantize, fit_codebooks, quantize, reconstruction_report, FitConfig, QuantizerKind};
use crate::diffusion::{
    corrupt, sample_chains, train_denoiser, vlb_loss, Condition, Denoiser, Guidance, GuidanceMode, TokenGrid, TrainConfig,
    DEFAULT_STRIDE,
};
use crate::error::{Error, Result};
use crate::io::{self, DenoiserFile, TokenFile};
use crate::metrics::{mcd, pitch_errors, ssim, SsimConstants, DEFAULT_GPE_THRESHOLD, DEFAULT_SSIM_WINDOW};
use crate::rng;
use crate::schedules::{Layout, Schedule, ScheduleFile, ScheduleKind};
use crate::selftest;

#[derive(Debug, Parser)]
#[command(name = "tokendiff", version, about = "Discrete diffusion over vector-quantized token grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Noise schedules
    #[command(subcommand)]
    Schedule(ScheduleCmd),
    /// Transition-matrix oracles
    #[command(subcommand)]
    Transitions(TransitionsCmd),
    /// Forward corruption, sampling, training and bound evaluation
    #[command(subcommand)]
    Diffuse(DiffuseCmd),
    /// Vector-quantization codecs
    #[command(subcommand)]
    Codec(CodecCmd),
    /// Objective evaluation metrics
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Contrastive losses, recall@k and CLUB
    #[command(subcommand)]
    Aux(AuxCmd),
    /// Run the brute-force oracle suites
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Samples drawn by the recovery suite
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
    },
}

#[derive(Debug, Subcommand)]
enum ScheduleCmd {
    /// Print the cumulative coefficients for every step
    Inspect(ScheduleSource),
}

#[derive(Debug, Args)]
struct ScheduleSource {
    /// JSON schedule file (overrides the generator flags)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "linear")]
    kind: String,
    #[arg(long = "T", default_value_t = 100)]
    steps: usize,
    #[arg(long = "K", default_value_t = 512)]
    classes: usize,
    #[arg(long = "N_q", alias = "N-q", default_value_t = 1)]
    layers: usize,
    #[arg(long = "L", default_value_t = 1)]
    frames: usize,
    #[arg(long, default_value = "concatenated")]
    layout: String,
}

impl ScheduleSource {
    fn load(&self) -> Result<Schedule> {
        match &self.config {
            Some(path) => io::read_schedule(path),
            None => {
                let kind = match self.kind.as_str() {
                    "linear" => ScheduleKind::Linear,
                    "improved" => ScheduleKind::Improved,
                    other => return Err(Error::Argument(format!("unknown schedule kind `{other}`"))),
                };
                let layout: Layout = self.layout.parse()?;
                ScheduleFile::generated(kind, self.steps, self.classes, self.layers, layout, self.frames).build()
            }
        }
    }
}

#[derive(Debug, Subcommand)]
enum TransitionsCmd {
    /// Compare closed-form marginals and posteriors with explicit matrix products
    Check {
        #[arg(long = "K", default_value_t = 4)]
        classes: usize,
        #[arg(long = "T", default_value_t = 6)]
        steps: usize,
        /// Random schedules to test in addition to the linear one
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
enum DiffuseCmd {
    /// Corrupt every grid of a token file to step t
    Corrupt {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw grids from a denoiser by running the reverse process
    Sample {
        #[arg(long)]
        denoiser: PathBuf,
        /// Schedule file; defaults to the one stored with the denoiser
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Guidance scale (0 disables guidance)
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        lambda: f64,
        #[arg(long, default_value = "log")]
        guidance_mode: String,
        /// Expected step count; must match the schedule when given
        #[arg(long = "T")]
        steps: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_STRIDE)]
        stride: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Condition label (omit for the null condition)
        #[arg(long)]
        label: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads (default: all cores); output does not depend on it
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a tabular denoiser on the variational bound
    Train {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long, default_value_t = TrainConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
        lr: f64,
        #[arg(long, default_value_t = TrainConfig::default().null_prob)]
        null_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo estimate of the variational bound per grid
    Vlb {
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
enum CodecCmd {
    /// Fit codebooks to a feature CSV
    Fit {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value = "VQ")]
        kind: String,
        /// Groups (default: 4 for GVQ, 2 for GRVQ, otherwise 1)
        #[arg(long = "G")]
        groups: Option<usize>,
        /// Residual depth (default: 12 for RVQ, 2 for GRVQ, otherwise 1)
        #[arg(long = "R")]
        depth: Option<usize>,
        #[arg(long = "Kp", default_value_t = 1024)]
        codes: usize,
        #[arg(long, default_value_t = 25)]
        iters: usize,
        /// Quantizer dropout (RVQ only)
        #[arg(long)]
        dropout: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize features into a token file
    Encode {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Number of active books (residual kinds only; default all)
        #[arg(long)]
        active: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct features from a token file
    Decode {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruction error per active depth
    Report {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        features: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum MetricsCmd {
    /// Mel-cepstral distortion
    Mcd {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        syn: PathBuf,
        /// Apply the conventional 10*sqrt(2)/ln(10) dB factor
        #[arg(long)]
        db: bool,
    },
    /// Structural similarity
    Ssim {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        syn: PathBuf,
        /// Window side (default 7, reduced to fit small inputs)
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        c1: Option<f64>,
        #[arg(long)]
        c2: Option<f64>,
    },
    /// GPE, VDE and FFE between pitch tracks
    Pitch {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        syn: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GPE_THRESHOLD)]
        threshold: f64,
    },
}

#[derive(Debug, Subcommand)]
enum AuxCmd {
    /// Symmetric InfoNCE over a similarity matrix
    Infonce {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
    },
    /// Bidirectional hinge loss over a similarity matrix
    RankLoss {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        margin: f64,
    },
    /// Recall at rank k, in percent
    Recall {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// CLUB mutual-information estimate from paired samples
    Club {
        #[arg(long)]
        input: PathBuf,
    },
}

/// Parse `argv` (program name first), run the command and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(text) => {
            let mut out = std::io::stdout().lock();
            let _ = out.write_all(text.as_bytes());
            let _ = out.flush();
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Round to 12 decimals for display so exact schedule values print cleanly.
fn num(v: f64) -> String {
    let r = (v * 1e12).round() / 1e12;
    if r == 0.0 {
        "0".into()
    } else {
        r.to_string()
    }
}

fn emit_json<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<String> {
    match out {
        Some(path) => {
            io::write_json(path, value)?;
            Ok(String::new())
        }
        None => {
            let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Argument(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
    }
}

fn execute(command: Command) -> Result<String> {
    match command {
        Command::Schedule(ScheduleCmd::Inspect(src)) => inspect_schedule(&src.load()?),
        Command::Transitions(TransitionsCmd::Check {
            classes,
            steps,
            count,
            seed,
        }) => check_transitions(classes, steps, count, seed),
        Command::Diffuse(cmd) => diffuse(cmd),
        Command::Codec(cmd) => codec(cmd),
        Command::Metrics(cmd) => metrics(cmd),
        Command::Aux(cmd) => aux(cmd),
        Command::Selftest { seed, samples } => {
            let outcomes = vec![
                selftest::transitions_suite(2..=5, 2..=8, 50, seed)?,
                selftest::posterior_suite(4, 6, seed)?,
                selftest::recovery_suite(samples, seed)?,
            ];
            report_suites(&outcomes)
        }
    }
}

fn report_suites(outcomes: &[selftest::SuiteOutcome]) -> Result<String> {
    let mut text = String::new();
    for o in outcomes {
        let _ = writeln!(text, "{o}");
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(text)
    } else {
        print!("{text}");
        Err(Error::Inconsistent(format!("oracle suites failed: {}", failed.join(", "))))
    }
}

fn inspect_schedule(schedule: &Schedule) -> Result<String> {
    let mut text = String::new();
    let layers: Vec<_> = match schedule {
        Schedule::Uniform(t) => vec![(None, t)],
        Schedule::Positional(p) => p.layers().iter().enumerate().map(|(q, t)| (Some(q), t)).collect(),
    };
    let _ = writeln!(text, "# T={} K={}", schedule.steps(), schedule.num_classes());
    for (q, table) in layers {
        let k = table.num_classes() as f64;
        if let Some(q) = q {
            let _ = writeln!(text, "# layer {q}");
        }
        let _ = writeln!(text, "t\talpha_bar\tbeta_bar\tgamma_bar\tuniform_mass");
        for t in 0..=table.steps() {
            let c = table.cumulative(t);
            let _ = writeln!(
                text,
                "{t}\t{}\t{}\t{}\t{}",
                num(c.alpha),
                num(c.beta),
                num(c.gamma),
                num(k * c.beta)
            );
        }
    }
    Ok(text)
}

fn check_transitions(classes: usize, steps: usize, count: usize, seed: u64) -> Result<String> {
    let mut rng = rng::stream(seed, 0);
    let mut tables = vec![crate::schedules::linear_schedule(steps, classes)?];
    for _ in 0..count {
        tables.push(selftest::random_schedule(classes, steps, &mut rng)?);
    }
    let (mut marg, mut post) = (0.0f64, 0.0f64);
    let (mut marg_cases, mut post_cases) = (0, 0);
    for table in &tables {
        let (e, n) = selftest::marginal_error(table)?;
        let (p, m) = selftest::posterior_error(table)?;
        marg = marg.max(e);
        post = post.max(p);
        marg_cases += n;
        post_cases += m;
    }
    let outcomes = [
        selftest::SuiteOutcome {
            name: "marginal",
            passed: marg <= selftest::ORACLE_TOL,
            cases: marg_cases,
            max_error: marg,
            threshold: selftest::ORACLE_TOL,
        },
        selftest::SuiteOutcome {
            name: "posterior",
            passed: post <= selftest::ORACLE_TOL,
            cases: post_cases,
            max_error: post,
            threshold: selftest::ORACLE_TOL,
        },
    ];
    report_suites(&outcomes)
}

fn resolve_schedule(stored: Schedule, override_path: Option<&Path>) -> Result<Schedule> {
    match override_path {
        Some(p) => io::read_schedule(p),
        None => Ok(stored),
    }
}

fn diffuse(cmd: DiffuseCmd) -> Result<String> {
    match cmd {
        DiffuseCmd::Corrupt {
            tokens,
            t,
            schedule,
            seed,
            out,
        } => {
            let file = io::read_tokens(&tokens)?;
            let schedule = io::read_schedule(&schedule)?;
            let grids = file.to_grids()?;
            let mut corrupted = Vec::with_capacity(grids.len());
            for (i, (grid, _)) in grids.iter().enumerate() {
                let mut rng = rng::stream(seed, i as u64);
                corrupted.push(corrupt(grid, t, &schedule, &mut rng)?);
            }
            let out_file = TokenFile::from_grids(&corrupted, &file.labels)?;
            emit_json(out.as_deref(), &out_file)
        }
        DiffuseCmd::Sample {
            denoiser,
            schedule,
            lambda,
            guidance_mode,
            steps,
            stride,
            count,
            label,
            seed,
            threads,
            out,
        } => {
            let (model, stored) = io::read_denoiser(&denoiser)?;
            let schedule = resolve_schedule(stored, schedule.as_deref())?;
            if let Some(steps) = steps {
                if steps != schedule.steps() {
                    return Err(Error::Argument(format!(
                        "--T {steps} does not match the schedule's T={}",
                        schedule.steps()
                    )));
                }
            }
            let guidance = Guidance::new(lambda, guidance_mode.parse::<GuidanceMode>()?)?;
            let cond = Condition::from(label);
            let shape = model.shape();
            let draw = || sample_chains(&model, cond, &schedule, shape, stride, guidance, seed, count);
            let grids = match threads {
                Some(n) => rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Argument(format!("cannot build a pool of {n} threads: {e}")))?
                    .install(draw)?,
                None => draw()?,
            };
            let labels = vec![cond; grids.len()];
            emit_json(out.as_deref(), &TokenFile::from_grids(&grids, &labels)?)
        }
        DiffuseCmd::Train {
            tokens,
            schedule,
            epochs,
            lr,
            null_prob,
            seed,
            out,
        } => {
            let data = io::read_tokens(&tokens)?.to_grids()?;
            let schedule = io::read_schedule(&schedule)?;
            let config = TrainConfig {
                epochs,
                learning_rate: lr,
                null_prob,
                seed,
                ..TrainConfig::default()
            };
            let (model, report) = train_denoiser(&data, &schedule, &config)?;
            io::write_json(&out, &DenoiserFile::tabular(model, &schedule))?;
            let last = report.smoothed(10).last().copied().unwrap_or(report.initial_loss);
            Ok(format!(
                "epochs={epochs} initial_loss={:.6} final_loss={last:.6}\n",
                report.initial_loss
            ))
        }
        DiffuseCmd::Vlb {
            denoiser,
            tokens,
            schedule,
            samples,
            seed,
        } => {
            let (model, stored) = io::read_denoiser(&denoiser)?;
            let schedule = resolve_schedule(stored, schedule.as_deref())?;
            let data = io::read_tokens(&tokens)?.to_grids()?;
            vlb_table(&model, &data, &schedule, samples, seed)
        }
    }
}

fn vlb_table<D: Denoiser>(
    model: &D,
    data: &[(TokenGrid, Condition)],
    schedule: &Schedule,
    samples: usize,
    seed: u64,
) -> Result<String> {
    let mut text = String::from("grid\tnats\tstd_error\tprior_nats\n");
    let mut total = 0.0;
    for (i, (grid, cond)) in data.iter().enumerate() {
        let mut rng = rng::stream(seed, i as u64);
        let est = vlb_loss(model, grid, *cond, schedule, &mut rng, samples)?;
        let _ = writeln!(text, "{i}\t{:.6}\t{:.6}\t{:.6}", est.nats, est.std_error, est.prior_nats);
        if let Some(d) = &est.diagnostic {
            eprintln!("grid {i}: {d}");
        }
        total += est.nats;
    }
    let _ = writeln!(text, "mean\t{:.6}", total / data.len() as f64);
    Ok(text)
}

fn codec(cmd: CodecCmd) -> Result<String> {
    match cmd {
        CodecCmd::Fit {
            features,
            kind,
            groups,
            depth,
            codes,
            iters,
            dropout,
            seed,
            out,
        } => {
            let kind: QuantizerKind = kind.parse()?;
            let (g_default, r_default) = match kind {
                QuantizerKind::Vq => (1, 1),
                QuantizerKind::Rvq => (1, 12),
                QuantizerKind::Gvq => (4, 1),
                QuantizerKind::Grvq => (2, 2),
            };
            let config = FitConfig {
                kind,
                groups: groups.unwrap_or(g_default),
                depth: depth.unwrap_or(r_default),
                codes,
                iters,
                seed,
                dropout,
            };
            let data = io::read_features(&features)?;
            let model = fit_codebooks(&data, &config)?;
            io::write_codec(&out, &model)?;
            let mse = reconstruction_report(&data, &model)?.last().map(|r| r.1).unwrap_or(0.0);
            Ok(format!("books={} mse={mse:.6}\n", model.num_books()))
        }
        CodecCmd::Encode {
            codec,
            features,
            active,
            out,
        } => {
            let model = io::read_codec(&codec)?;
            let data = io::read_features(&features)?;
            let (grid, _) = quantize(&data, &model, active.unwrap_or(model.num_books()))?;
            emit_json(out.as_deref(), &TokenFile::from_grids(&[grid], &[])?)
        }
        CodecCmd::Decode { codec, tokens, out } => {
            let model = io::read_codec(&codec)?;
            let grids = io::read_tokens(&tokens)?.to_grids()?;
            let mut rows = Vec::new();
            for (grid, _) in &grids {
                rows.extend(dequantize(grid, &model)?.to_rows());
            }
            match out {
                Some(path) => {
                    io::write_matrix(&path, &rows)?;
                    Ok(String::new())
                }
                None => {
                    let mut text = String::new();
                    for r in rows {
                        let fields: Vec<String> = r.iter().map(f64::to_string).collect();
                        let _ = writeln!(text, "{}", fields.join(","));
                    }
                    Ok(text)
                }
            }
        }
        CodecCmd::Report { codec, features } => {
            let model = io::read_codec(&codec)?;
            let data = io::read_features(&features)?;
            let mut text = String::from("active_books\tmse\n");
            for (a, mse) in reconstruction_report(&data, &model)? {
                let _ = writeln!(text, "{a}\t{mse:.9}");
            }
            Ok(text)
        }
    }
}

fn metrics(cmd: MetricsCmd) -> Result<String> {
    match cmd {
        MetricsCmd::Mcd { reference, syn, db } => {
            let value = mcd(&io::read_matrix(&reference)?, &io::read_matrix(&syn)?, db)?;
            Ok(format!("mcd={value}\n"))
        }
        MetricsCmd::Ssim {
            reference,
            syn,
            window,
            c1,
            c2,
        } => {
            let a = io::read_matrix(&reference)?;
            let b = io::read_matrix(&syn)?;
            let window = window.unwrap_or_else(|| DEFAULT_SSIM_WINDOW.min(a.len()).min(a[0].len()));
            let defaults = SsimConstants::for_reference(&a);
            let constants = SsimConstants {
                c1: c1.unwrap_or(defaults.c1),
                c2: c2.unwrap_or(defaults.c2),
            };
            Ok(format!("ssim={}\n", ssim(&a, &b, window, constants)?))
        }
        MetricsCmd::Pitch {
            reference,
            syn,
            threshold,
        } => {
            let e = pitch_errors(&io::read_pitch(&reference)?, &io::read_pitch(&syn)?, threshold)?;
            let gpe = e.gpe.map_or_else(|| "none".to_string(), |g| g.to_string());
            Ok(format!("gpe={gpe} vde={} ffe={}\n", e.vde, e.ffe))
        }
    }
}

fn aux(cmd: AuxCmd) -> Result<String> {
    match cmd {
        AuxCmd::Infonce { input, tau } => Ok(format!("infonce={}\n", info_nce(&io::read_matrix(&input)?, tau)?)),
        AuxCmd::RankLoss { input, margin } => Ok(format!(
            "rank_loss={}\n",
            contrastive_ranking_loss(&io::read_matrix(&input)?, margin)?
        )),
        AuxCmd::Recall { input, k } => Ok(format!("R@{k}={}\n", recall_at_k(&io::read_matrix(&input)?, k)?)),
        AuxCmd::Club { input } => {
            let est = club_mi(&io::read_paired(&input)?)?;
            if let Some(d) = &est.diagnostic {
                eprintln!("warning: {d}");
            }
            Ok(format!("club_nats={}\n", est.nats))
        }
    }
}
