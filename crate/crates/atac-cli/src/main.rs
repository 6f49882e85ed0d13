//! Command-line front end: deterministic simulation and analysis runs over
//! manifold config files, with CSV/plot-data artifacts and a run manifest.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use atac_sim::crossing::{transition_moment_braket, CrossingFrame};
use atac_sim::dynamics::{
    atac_transfer, extract_lz_fit, landau_zener_probability, lifetime_survival, pi_pulse_us,
    rf_crossing_lz, AtacOptions, Method, PropagateOptions,
};
use atac_sim::io::{fmt_float, read_numeric_csv, write_schedule_csv, write_table, write_trace_csv};
use atac_sim::manifold::{load_manifold_with, LevelManifold};
use atac_sim::planner::{detour_check, plan_path, simulate_plan, PlannerPolicy};
use atac_sim::spectroscopy::{
    fringe_frequency, hyperbola_fit, noise_averaged_splitting, peak_frequency,
    peak_frequency_lineshape, ramsey_minimum_estimate, simulate_ramsey, simulate_resonance_scan,
    Hyperbola, HyperbolaFit, MeasureOptions, NoiseDistribution, NoiseModel,
};
use atac_sim::units::TAU;

#[derive(Parser, Debug)]
#[command(
    name = "atacsim",
    about = "Simulate and analyze rf-driven transport through avoided-crossing manifolds",
    version
)]
struct Cli {
    /// Manifold config file (TOML).
    #[arg(long, global = true)]
    manifold: Option<PathBuf>,
    /// Downgrade unknown config keys from errors to warnings.
    #[arg(long, global = true)]
    lax: bool,
    /// Output directory (default: $ATACSIM_OUT_DIR or ./atacsim-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every stochastic component of the run.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Integrator per-step error tolerance.
    #[arg(long, global = true, default_value_t = 1e-9)]
    tol: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Propagate one rf transfer across a crossing and export the trace.
    Simulate(SimulateArgs),
    /// Sweep the rf amplitude, fit the saturation curve, export the data.
    LzFit(LzFitArgs),
    /// Resonant-transfer frequency scan at fixed field.
    Scan(ScanArgs),
    /// Ramsey fringe at one field, or a field scan with minimum estimation.
    Ramsey(RamseyArgs),
    /// Fit a hyperbola to (field, splitting) points from a CSV file.
    FitHyperbola(FitHyperbolaArgs),
    /// Compile a transport plan between two levels.
    Plan(PlanArgs),
    /// Compile a plan and run every action through the dynamics engine.
    SimulatePlan(PlanArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Crossing id.
    #[arg(long)]
    crossing: String,
    /// Rf amplitude, G.
    #[arg(long, default_value_t = 0.05)]
    brf: f64,
    /// Rf frequency, MHz (default: blue-detuned above the splitting).
    #[arg(long)]
    frf: Option<f64>,
    /// Sweep start field, G (default: above both rf-induced crossings).
    #[arg(long)]
    from: Option<f64>,
    /// Sweep end field, G (default: below both rf-induced crossings).
    #[arg(long)]
    to: Option<f64>,
    /// Sweep speed, G/ms.
    #[arg(long, default_value_t = 1.3)]
    ramp: f64,
    /// Linear rf rise/fall time, µs (0 = rectangular).
    #[arg(long, default_value_t = 10.0)]
    rise_us: f64,
    /// Use the rotating-wave propagator instead of the lab frame.
    #[arg(long)]
    rwa: bool,
    /// Also run the mirrored return sweep and report the recovery.
    #[arg(long)]
    round_trip: bool,
}

#[derive(Args, Debug)]
struct LzFitArgs {
    #[arg(long)]
    crossing: String,
    /// Largest rf amplitude in the sweep, G.
    #[arg(long, default_value_t = 0.18)]
    brf_max: f64,
    #[arg(long, default_value_t = 9)]
    points: usize,
    #[arg(long)]
    frf: Option<f64>,
    /// Sweep speed, G/ms; fast enough that the curve spans low to saturated.
    #[arg(long, default_value_t = 40.0)]
    ramp: f64,
    #[arg(long, default_value_t = 10.0)]
    rise_us: f64,
    #[arg(long)]
    rwa: bool,
}

#[derive(Args, Debug)]
struct ScanArgs {
    #[arg(long)]
    crossing: String,
    /// Scan field, G.
    #[arg(long)]
    b: Option<f64>,
    /// Scan at the crossing field (default when --b is absent).
    #[arg(long)]
    at_b0: bool,
    /// Pulse length, ms (default: a π pulse at the given amplitude).
    #[arg(long)]
    pulse_ms: Option<f64>,
    /// Rf amplitude, G.
    #[arg(long, default_value_t = 0.01)]
    brf: f64,
    /// Half width of the frequency grid around the local splitting, MHz.
    #[arg(long, default_value_t = 0.06)]
    span: f64,
    #[arg(long, default_value_t = 25)]
    points: usize,
    /// Fit the full Rabi lineshape instead of parabolic interpolation.
    #[arg(long)]
    lineshape_fit: bool,
    /// Use the lab-frame propagator (slow) instead of the rotating wave.
    #[arg(long)]
    lab_frame: bool,
}

#[derive(Args, Debug)]
struct RamseyArgs {
    #[arg(long)]
    crossing: String,
    /// Measurement field, G (default: the crossing field).
    #[arg(long)]
    b: Option<f64>,
    /// Rf detuning from the local splitting, kHz.
    #[arg(long, default_value_t = 5.0)]
    detuning_khz: f64,
    /// Rabi frequency for the π/2 pulses, kHz.
    #[arg(long, default_value_t = 70.0)]
    rabi_khz: f64,
    /// Longest hold time, ms.
    #[arg(long, default_value_t = 0.8)]
    hold_max_ms: f64,
    #[arg(long, default_value_t = 80)]
    points: usize,
    /// Enable the field-noise model.
    #[arg(long)]
    noise: bool,
    /// Field gradient across the cloud, G/mm.
    #[arg(long, default_value_t = 2.0)]
    gradient: f64,
    /// Cloud diameter, mm.
    #[arg(long, default_value_t = 0.02)]
    diameter_mm: f64,
    /// Shot-to-shot field fluctuation, mG.
    #[arg(long, default_value_t = 20.0)]
    sigma_mg: f64,
    /// Monte-Carlo samples per point when noise is on.
    #[arg(long, default_value_t = 400)]
    samples: usize,
    /// Scan this many fields around the crossing and estimate the minimal
    /// splitting (0 = single-field fringe only).
    #[arg(long, default_value_t = 0)]
    b_scan_points: usize,
    /// Half width of the field scan, G.
    #[arg(long, default_value_t = 0.27)]
    b_scan_halfwidth: f64,
}

#[derive(Args, Debug)]
struct FitHyperbolaArgs {
    /// CSV with columns b_gauss, splitting_mhz and optional weight.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Start level id.
    #[arg(long)]
    from: String,
    /// Goal level id.
    #[arg(long)]
    to: String,
    #[arg(long, default_value_t = 0.2)]
    jump_threshold: f64,
    #[arg(long, default_value_t = 0.05)]
    brf: f64,
    #[arg(long, default_value_t = 1.3)]
    atac_ramp: f64,
    #[arg(long, default_value_t = 14.0)]
    travel_ramp: f64,
    /// Field the schedule descends to after the last action, G.
    #[arg(long, default_value_t = 0.0)]
    final_field: f64,
    /// Skip the window-collision pass.
    #[arg(long)]
    no_detour: bool,
    /// Route for best estimated survival instead of fewest crossings.
    #[arg(long)]
    best_survival: bool,
    /// Use the rotating-wave propagator for simulate-plan.
    #[arg(long)]
    rwa: bool,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

struct Ctx {
    out: PathBuf,
    seed: u64,
    tol: f64,
    config_hash: String,
    started: Instant,
    manifest_lines: Vec<String>,
}

impl Ctx {
    fn comments(&self) -> Vec<String> {
        vec![format!("config_hash={}", self.config_hash), format!("seed={}", self.seed)]
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn note(&mut self, line: String) {
        println!("{line}");
        self.manifest_lines.push(line);
    }

    fn write_report(&mut self, name: &str, body: &str) -> Result<()> {
        let mut text = String::new();
        let _ = writeln!(text, "# config_hash={}", self.config_hash);
        let _ = writeln!(text, "# seed={}", self.seed);
        text.push_str(body);
        std::fs::write(self.path(name), &text).with_context(|| format!("writing {name}"))?;
        print!("{body}");
        Ok(())
    }

    fn finish(&self, cli_debug: &str) -> Result<()> {
        let wall = self.started.elapsed();
        let epoch = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut text = String::new();
        let _ = writeln!(text, "run manifest");
        let _ = writeln!(text, "config_hash={}", self.config_hash);
        let _ = writeln!(text, "seed={}", self.seed);
        let _ = writeln!(text, "tol={}", self.tol);
        let _ = writeln!(text, "version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(text, "unix_time_s={epoch}");
        let _ = writeln!(text, "wall_time_ms={}", wall.as_millis());
        let _ = writeln!(text, "config={cli_debug}");
        for line in &self.manifest_lines {
            let _ = writeln!(text, "note: {line}");
        }
        std::fs::write(self.path("run_manifest.txt"), text).context("writing run manifest")?;
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    let cli_debug = format!("{cli:?}");
    // The hash names the scientific configuration; the output location is
    // not part of it.
    let hashed = format!(
        "manifold={:?} lax={} seed={} tol={} command={:?}",
        cli.manifold, cli.lax, cli.seed, cli.tol, cli.command
    );
    let mut hasher = Sha256::new();
    hasher.update(hashed.as_bytes());
    let config_hash = hex_prefix(&hasher.finalize(), 16);

    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("ATACSIM_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("atacsim-out"));
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;

    let mut ctx = Ctx {
        out,
        seed: cli.seed,
        tol: cli.tol,
        config_hash,
        started: Instant::now(),
        manifest_lines: Vec::new(),
    };

    let manifold = match &cli.manifold {
        Some(path) => {
            let (m, warnings) = load_manifold_with(path, cli.lax)
                .with_context(|| format!("loading manifold {}", path.display()))?;
            for w in warnings {
                ctx.note(format!("manifold warning: {w}"));
            }
            Some(m)
        }
        None => None,
    };
    let need = |m: &Option<LevelManifold>| -> Result<LevelManifold> {
        m.clone().context("this command needs --manifold")
    };

    match &cli.command {
        Command::Simulate(args) => cmd_simulate(&mut ctx, &need(&manifold)?, args)?,
        Command::LzFit(args) => cmd_lz_fit(&mut ctx, &need(&manifold)?, args)?,
        Command::Scan(args) => cmd_scan(&mut ctx, &need(&manifold)?, args)?,
        Command::Ramsey(args) => cmd_ramsey(&mut ctx, &need(&manifold)?, args)?,
        Command::FitHyperbola(args) => cmd_fit_hyperbola(&mut ctx, args)?,
        Command::Plan(args) => cmd_plan(&mut ctx, &need(&manifold)?, args, false)?,
        Command::SimulatePlan(args) => cmd_plan(&mut ctx, &need(&manifold)?, args, true)?,
    }
    ctx.finish(&cli_debug)
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::new();
    for b in bytes {
        let _ = write!(s, "{b:02x}");
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

/// Blue-detuned drive frequency and a window bracketing both rf-induced
/// crossings, mirroring the planner defaults.
fn default_geometry(frame: &CrossingFrame, frf: Option<f64>) -> (f64, f64, f64) {
    let f_rf = frf.unwrap_or(frame.omega + (0.02 * frame.omega).max(0.25));
    let dc = ((f_rf - frame.omega) * (f_rf + frame.omega)).max(0.0).sqrt();
    let half_span = dc / frame.dmu().abs();
    (f_rf, frame.b0 + 2.0 * half_span, frame.b0 - 2.0 * half_span)
}

fn method_of(rwa: bool) -> Method {
    if rwa {
        Method::RotatingWave
    } else {
        Method::LabFrame
    }
}

fn cmd_simulate(ctx: &mut Ctx, manifold: &LevelManifold, args: &SimulateArgs) -> Result<()> {
    let frame = manifold.frame(&args.crossing)?;
    let (f_rf, from_default, to_default) = default_geometry(&frame, args.frf);
    let b_from = args.from.unwrap_or(from_default);
    let b_to = args.to.unwrap_or(to_default);
    let opts = AtacOptions {
        rise_us: (args.rise_us > 0.0).then_some(args.rise_us),
        propagate: PropagateOptions {
            tol: ctx.tol,
            method: method_of(args.rwa),
            ..Default::default()
        },
    };
    let res = atac_transfer(&frame, args.brf, f_rf, b_from, b_to, args.ramp, None, &opts)?;
    write_trace_csv(&res.trace, ctx.path("trace.csv"), &ctx.comments())?;

    let predicted = rf_crossing_lz(&frame, args.brf, f_rf)
        .map(|lz| landau_zener_probability(TAU * lz.gap_mhz, args.ramp, lz.slope_mhz_per_g));
    let mut body = String::new();
    let _ = writeln!(body, "rf transfer report");
    let _ = writeln!(
        body,
        "crossing={} splitting_mhz={} b0_gauss={}",
        args.crossing,
        fmt_float(frame.omega),
        fmt_float(frame.b0)
    );
    let _ = writeln!(
        body,
        "b_rf_g={} f_rf_mhz={} b_from={} b_to={} ramp_g_per_ms={}",
        fmt_float(args.brf),
        fmt_float(f_rf),
        fmt_float(b_from),
        fmt_float(b_to),
        fmt_float(args.ramp)
    );
    let _ = writeln!(body, "efficiency={}", fmt_float(res.efficiency));
    if let Some(p) = predicted {
        let _ = writeln!(body, "predicted_landau_zener={}", fmt_float(p));
    }
    let _ = writeln!(body, "duration_ms={}", fmt_float(res.schedule_duration_ms));
    let _ = writeln!(body, "norm_drift={}", fmt_float(res.final_state.norm_drift));
    let mut total_ms = res.schedule_duration_ms;

    if args.round_trip {
        let back = atac_transfer(
            &frame,
            args.brf,
            f_rf,
            b_to,
            b_from,
            args.ramp,
            Some(res.final_state),
            &opts,
        )?;
        let (upper, _) = back.final_state.dressed_populations(&frame, b_from);
        total_ms += back.schedule_duration_ms;
        let _ = writeln!(body, "round_trip_recovery={}", fmt_float(upper));
    }
    if let Some(tau) = manifold.lifetime_tau_ms() {
        let _ = writeln!(
            body,
            "lifetime_survival={}",
            fmt_float(lifetime_survival(total_ms, Some(tau)))
        );
    }
    ctx.write_report("transfer_report.txt", &body)
}

fn cmd_lz_fit(ctx: &mut Ctx, manifold: &LevelManifold, args: &LzFitArgs) -> Result<()> {
    let frame = manifold.frame(&args.crossing)?;
    let (f_rf, b_from, b_to) = default_geometry(&frame, args.frf);
    if args.points < 5 {
        bail!("--points must be at least 5");
    }
    let opts = AtacOptions {
        rise_us: (args.rise_us > 0.0).then_some(args.rise_us),
        propagate: PropagateOptions {
            tol: ctx.tol,
            method: method_of(args.rwa),
            ..Default::default()
        },
    };
    let mut points = Vec::with_capacity(args.points);
    for k in 1..=args.points {
        let b_rf = args.brf_max * k as f64 / args.points as f64;
        let res = atac_transfer(&frame, b_rf, f_rf, b_from, b_to, args.ramp, None, &opts)?;
        points.push((b_rf, res.efficiency));
    }
    let lz = rf_crossing_lz(&frame, 1.0, f_rf).context("blue-detuned geometry")?;
    let fit = extract_lz_fit(&points, args.ramp, lz.slope_mhz_per_g)?;

    let rows: Vec<Vec<f64>> = points
        .iter()
        .map(|&(b_rf, eff)| {
            let model = landau_zener_probability(
                TAU * b_rf * fit.moment_mhz_per_g,
                args.ramp,
                lz.slope_mhz_per_g,
            );
            vec![b_rf, eff, model]
        })
        .collect();
    let mut comments = ctx.comments();
    comments.push(format!(
        "fitted moment_mhz_per_g={} sigma={}",
        fmt_float(fit.moment_mhz_per_g),
        fmt_float(fit.sigma_mhz_per_g)
    ));
    write_table(
        ctx.path("efficiency_vs_brf.dat"),
        &comments,
        &["brf_g", "efficiency_sim", "efficiency_lz_fit"],
        &rows,
    )?;

    let mut body = String::new();
    let _ = writeln!(body, "amplitude-sweep saturation fit");
    let _ = writeln!(body, "crossing={} f_rf_mhz={}", args.crossing, fmt_float(f_rf));
    let _ = writeln!(body, "ramp_g_per_ms={}", fmt_float(args.ramp));
    let _ = writeln!(
        body,
        "moment_mhz_per_g={} sigma_mhz_per_g={}",
        fmt_float(fit.moment_mhz_per_g),
        fmt_float(fit.sigma_mhz_per_g)
    );
    let _ = writeln!(body, "drive_gap_per_gauss_mhz={}", fmt_float(lz.gap_mhz));
    ctx.write_report("lz_fit_report.txt", &body)
}

fn cmd_scan(ctx: &mut Ctx, manifold: &LevelManifold, args: &ScanArgs) -> Result<()> {
    let frame = manifold.frame(&args.crossing)?;
    let b = args.b.unwrap_or(frame.b0);
    let splitting = frame.splitting_at_field(b);
    let gap = args.brf * transition_moment_braket(&frame.at_field(b)).abs();
    let pulse_ms = args.pulse_ms.unwrap_or(pi_pulse_us(gap) * 1e-3);
    if args.points < 5 {
        bail!("--points must be at least 5");
    }
    let grid: Vec<f64> = (0..args.points)
        .map(|k| splitting - args.span + 2.0 * args.span * k as f64 / (args.points - 1) as f64)
        .collect();
    let opts = MeasureOptions {
        method: method_of(!args.lab_frame),
        tol: ctx.tol,
        ..Default::default()
    };
    let scan = simulate_resonance_scan(&frame, b, pulse_ms, args.brf, &grid, &opts)?;
    let rows: Vec<Vec<f64>> =
        scan.frequencies.iter().zip(&scan.transfer).map(|(&f, &t)| vec![f, t]).collect();
    write_table(ctx.path("scan.csv"), &ctx.comments(), &["freq_mhz", "transfer"], &rows)?;

    let peak = if args.lineshape_fit {
        peak_frequency_lineshape(&scan)?
    } else {
        peak_frequency(&scan)?
    };
    let mut body = String::new();
    let _ = writeln!(body, "resonant-transfer scan");
    let _ = writeln!(body, "crossing={} b_gauss={}", args.crossing, fmt_float(b));
    let _ = writeln!(body, "pulse_ms={} b_rf_g={}", fmt_float(pulse_ms), fmt_float(args.brf));
    let _ = writeln!(
        body,
        "peak_freq_mhz={} sigma_mhz={}",
        fmt_float(peak.freq_mhz),
        fmt_float(peak.sigma_mhz)
    );
    let _ = writeln!(body, "local_splitting_mhz={}", fmt_float(splitting));
    ctx.write_report("peak_report.txt", &body)
}

fn noise_of(args: &RamseyArgs) -> Option<NoiseModel> {
    args.noise.then(|| {
        NoiseModel::new(
            args.gradient,
            args.diameter_mm,
            args.sigma_mg * 1e-3,
            NoiseDistribution::UniformCloudGaussianTime,
        )
    })
}

fn cmd_ramsey(ctx: &mut Ctx, manifold: &LevelManifold, args: &RamseyArgs) -> Result<()> {
    let frame = manifold.frame(&args.crossing)?;
    let b_center = args.b.unwrap_or(frame.b0);
    let noise = noise_of(args);
    let omega_r = TAU * args.rabi_khz * 1e-3;
    let holds: Vec<f64> = (0..args.points)
        .map(|k| args.hold_max_ms * k as f64 / (args.points - 1).max(1) as f64)
        .collect();
    let opts = MeasureOptions {
        method: Method::RotatingWave,
        tol: ctx.tol,
        noise_samples: args.samples,
    };

    if args.b_scan_points == 0 {
        let ideal = frame.splitting_at_field(b_center);
        let base = match &noise {
            Some(model) => {
                let hyp =
                    Hyperbola { delta_min: frame.omega, slope_k: frame.dmu().abs(), b0: frame.b0 };
                noise_averaged_splitting(b_center, &hyp, model, 50_000, ctx.seed ^ 0x5eed)
            }
            None => ideal,
        };
        let f_rf = base + args.detuning_khz * 1e-3;
        let rec = simulate_ramsey(
            &frame,
            b_center,
            f_rf,
            omega_r,
            &holds,
            noise.as_ref(),
            ctx.seed,
            &opts,
        )?;
        let rows: Vec<Vec<f64>> = rec
            .hold_times_ms
            .iter()
            .zip(&rec.remaining_fraction)
            .map(|(&t, &y)| vec![t, y])
            .collect();
        write_table(
            ctx.path("fringe.csv"),
            &ctx.comments(),
            &["hold_ms", "remaining_fraction"],
            &rows,
        )?;
        let fitted = fringe_frequency(&rec)?;
        let mut body = String::new();
        let _ = writeln!(body, "ramsey fringe");
        let _ = writeln!(body, "crossing={} b_gauss={}", args.crossing, fmt_float(b_center));
        let _ = writeln!(body, "f_rf_mhz={}", fmt_float(f_rf));
        let _ = writeln!(
            body,
            "fringe_khz={} sigma_khz={}",
            fmt_float(fitted.freq_mhz * 1e3),
            fmt_float(fitted.sigma_mhz * 1e3)
        );
        let _ = writeln!(body, "programmed_detuning_khz={}", fmt_float(args.detuning_khz));
        let _ = writeln!(body, "implied_splitting_mhz={}", fmt_float(f_rf - fitted.freq_mhz));
        let _ = writeln!(body, "coherence_decay_per_ms={}", fmt_float(fitted.decay_per_ms));
        return ctx.write_report("fringe_report.txt", &body);
    }

    // Field scan with minimum estimation.
    let noise_model = noise.context("--b-scan-points needs --noise")?;
    let truth = Hyperbola { delta_min: frame.omega, slope_k: frame.dmu().abs(), b0: frame.b0 };
    let mut records = Vec::with_capacity(args.b_scan_points);
    for k in 0..args.b_scan_points {
        let frac = if args.b_scan_points == 1 {
            0.0
        } else {
            -1.0 + 2.0 * k as f64 / (args.b_scan_points - 1) as f64
        };
        let b = b_center + frac * args.b_scan_halfwidth;
        let local_slope = truth.slope_k.powi(2) * (b - truth.b0).abs() / truth.eval(b);
        let detuning =
            (args.detuning_khz * 1e-3).max(3.0 * local_slope * noise_model.sigma_eff_g());
        let base = noise_averaged_splitting(b, &truth, &noise_model, 50_000, ctx.seed ^ 0x5eed);
        let rec = simulate_ramsey(
            &frame,
            b,
            base + detuning,
            omega_r,
            &holds,
            Some(&noise_model),
            ctx.seed.wrapping_add(k as u64),
            &opts,
        )?;
        records.push(rec);
    }
    let estimate = ramsey_minimum_estimate(&records, &noise_model, 100_000, ctx.seed ^ 0xa7ea)?;

    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|rec| {
            let measured = rec.f_rf - rec.fitted_fringe_mhz.unwrap_or(f64::NAN);
            let ideal = estimate.hyperbola.eval(rec.b);
            let averaged = noise_averaged_splitting(
                rec.b,
                &estimate.hyperbola,
                &noise_model,
                100_000,
                ctx.seed ^ 0xa7ea,
            );
            vec![rec.b, measured, ideal, averaged]
        })
        .collect();
    write_table(
        ctx.path("splitting_map.dat"),
        &ctx.comments(),
        &["b_gauss", "splitting_mhz", "ideal_hyperbola_mhz", "noise_averaged_mhz"],
        &rows,
    )?;

    let mut body = String::new();
    let _ = writeln!(body, "ramsey minimum estimate");
    let _ = writeln!(body, "crossing={}", args.crossing);
    write_hyperbola_fit(&mut body, &estimate);
    let _ = writeln!(
        body,
        "upshift_at_minimum_mhz={}",
        fmt_float(atac_sim::spectroscopy::analytic_upshift_at_minimum(
            &estimate.hyperbola,
            noise_model.sigma_eff_g()
        ))
    );
    ctx.write_report("minimum_report.txt", &body)
}

fn write_hyperbola_fit(body: &mut String, fit: &HyperbolaFit) {
    let _ = writeln!(
        body,
        "delta_min_mhz={} sigma={}",
        fmt_float(fit.hyperbola.delta_min),
        fmt_float(fit.sigma_delta_min)
    );
    let _ = writeln!(
        body,
        "slope_k_mhz_per_g={} sigma={}",
        fmt_float(fit.hyperbola.slope_k),
        fmt_float(fit.sigma_k)
    );
    let _ = writeln!(body, "b0_gauss={} sigma={}", fmt_float(fit.hyperbola.b0), fmt_float(fit.sigma_b0));
    let _ = writeln!(body, "residual_norm={}", fmt_float(fit.residual_norm));
    let _ = writeln!(body, "rank_deficient={}", fit.rank_deficient);
}

fn cmd_fit_hyperbola(ctx: &mut Ctx, args: &FitHyperbolaArgs) -> Result<()> {
    let rows = read_numeric_csv(&args.input)?;
    if rows.is_empty() {
        bail!("{}: no data rows", args.input.display());
    }
    if rows[0].len() < 2 {
        bail!("{}: need at least two columns (b_gauss, splitting_mhz)", args.input.display());
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[1])).collect();
    let weights: Option<Vec<f64>> = (rows[0].len() >= 3).then(|| rows.iter().map(|r| r[2]).collect());
    let fit = hyperbola_fit(&points, weights.as_deref())?;

    let out_rows: Vec<Vec<f64>> =
        points.iter().map(|&(b, y)| vec![b, y, fit.hyperbola.eval(b)]).collect();
    write_table(
        ctx.path("splitting_vs_field.dat"),
        &ctx.comments(),
        &["b_gauss", "splitting_mhz", "hyperbola_fit_mhz"],
        &out_rows,
    )?;

    let mut body = String::new();
    let _ = writeln!(body, "hyperbola fit");
    let _ = writeln!(body, "input={}", args.input.display());
    let _ = writeln!(body, "points={}", points.len());
    write_hyperbola_fit(&mut body, &fit);
    ctx.write_report("hyperbola_report.txt", &body)
}

fn cmd_plan(ctx: &mut Ctx, manifold: &LevelManifold, args: &PlanArgs, simulate: bool) -> Result<()> {
    let policy = PlannerPolicy {
        jump_threshold_mhz: args.jump_threshold,
        atac_b_rf_g: args.brf,
        atac_ramp_speed_g_per_ms: args.atac_ramp,
        travel_ramp_speed_g_per_ms: args.travel_ramp,
        final_field_g: Some(args.final_field),
        route_objective: if args.best_survival {
            atac_sim::planner::RouteObjective::BestSurvival
        } else {
            atac_sim::planner::RouteObjective::FewestCrossings
        },
        ..PlannerPolicy::default()
    };
    let mut plan = plan_path(manifold, &args.from, &args.to, &policy)?;
    if !args.no_detour {
        plan = detour_check(manifold, &plan, &policy)?;
    }

    let mut body = plan.to_string();
    if let Some(tau) = manifold.lifetime_tau_ms() {
        let _ = writeln!(body, "lifetime_tau_ms: {tau}");
    }
    ctx.write_report("plan.txt", &body)?;
    write_schedule_csv(&plan.schedule, ctx.path("schedule.csv"), &ctx.comments())?;

    if simulate {
        let opts = PropagateOptions {
            tol: ctx.tol,
            method: method_of(args.rwa),
            trace_samples: 2,
            ..Default::default()
        };
        let sim = simulate_plan(manifold, &plan, &opts)?;
        let rows: Vec<Vec<f64>> = sim
            .per_crossing
            .iter()
            .map(|c| vec![c.predicted, c.simulated, (c.simulated - c.predicted).abs()])
            .collect();
        let mut comments = ctx.comments();
        for (i, c) in sim.per_crossing.iter().enumerate() {
            comments.push(format!("row {} = crossing {}", i, c.crossing_id));
        }
        write_table(
            ctx.path("per_crossing.csv"),
            &comments,
            &["predicted", "simulated", "abs_difference"],
            &rows,
        )?;
        let mut body = String::new();
        let _ = writeln!(body, "plan simulation");
        for c in &sim.per_crossing {
            let _ = writeln!(
                body,
                "crossing {}: predicted={} simulated={}",
                c.crossing_id,
                fmt_float(c.predicted),
                fmt_float(c.simulated)
            );
        }
        let _ = writeln!(body, "total_predicted={}", fmt_float(sim.total_predicted));
        let _ = writeln!(body, "total_simulated={}", fmt_float(sim.total_simulated));
        let survival = lifetime_survival(plan.total_duration_ms, manifold.lifetime_tau_ms())
            * sim.total_simulated;
        let _ = writeln!(body, "simulated_survival_with_lifetime={}", fmt_float(survival));
        ctx.write_report("plan_simulation.txt", &body)?;
    }
    Ok(())
}
