//! Splitting spectroscopy on a single avoided crossing.
//!
//! Two measurement methods are simulated and analyzed:
//!
//! 1. resonant-transfer scans — a single rf pulse at fixed field, scanned in
//!    frequency; the transfer peaks at the local dressed splitting;
//! 2. Ramsey interferometry — two π/2 pulses separated by a hold time; the
//!    fringe frequency equals the rf detuning from the splitting.
//!
//! Splittings measured at several fields are fitted with the hyperbola
//! E(B) = sqrt(Δ_min² + k²(B − B0)²). Field gradients across the cloud and
//! shot-to-shot field fluctuations average the hyperbola into a slightly
//! upshifted curve; [`noise_averaged_splitting`] evaluates that average and
//! [`ramsey_minimum_estimate`] inverts it to recover the ideal Δ_min.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::crossing::{transition_moment_braket, CrossingFrame};
use crate::dynamics::{
    propagate, DynamicsError, Envelope, Method, PropagateOptions, PulseSchedule, QuantumState,
    RampSegment, RfDrive,
};
use crate::fit::{self, Bounds, FitOptions};
use crate::units::TAU;

/// Transfer probability versus rf frequency at one field.
#[derive(Clone, Debug)]
pub struct ResonanceScan {
    pub b: f64,
    pub pulse_length_ms: f64,
    pub b_rf: f64,
    /// Scanned frequencies, MHz, strictly increasing.
    pub frequencies: Vec<f64>,
    /// Transferred population per frequency, in [0, 1].
    pub transfer: Vec<f64>,
}

/// Peak position extracted from a scan.
#[derive(Clone, Copy, Debug)]
pub struct PeakEstimate {
    pub freq_mhz: f64,
    pub sigma_mhz: f64,
}

/// One Ramsey measurement: remaining initial-branch fraction versus hold
/// time at fixed field and rf frequency.
#[derive(Clone, Debug)]
pub struct RamseyRecord {
    pub b: f64,
    pub f_rf: f64,
    pub hold_times_ms: Vec<f64>,
    pub remaining_fraction: Vec<f64>,
    /// Fringe frequency fitted from the record, MHz; set when the damped
    /// cosine fit succeeded.
    pub fitted_fringe_mhz: Option<f64>,
    pub fitted_fringe_sigma_mhz: Option<f64>,
}

/// Damped-cosine fit of a fringe.
#[derive(Clone, Copy, Debug)]
pub struct FringeFit {
    pub freq_mhz: f64,
    pub sigma_mhz: f64,
    pub amplitude: f64,
    pub offset: f64,
    /// Decay rate 1/τ_c in 1/ms.
    pub decay_per_ms: f64,
}

/// Magnetic-field noise model: a static gradient sampled across the cloud
/// combined with shot-to-shot Gaussian fluctuations.
#[derive(Clone, Copy, Debug)]
pub struct NoiseModel {
    pub gradient_g_per_mm: f64,
    pub cloud_diameter_mm: f64,
    pub field_sigma_g: f64,
    pub distribution: NoiseDistribution,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseDistribution {
    /// Single Gaussian with the combined effective width.
    Gaussian,
    /// Uniform across the cloud diameter ⊗ Gaussian in time.
    UniformCloudGaussianTime,
}

impl NoiseModel {
    pub fn new(
        gradient_g_per_mm: f64,
        cloud_diameter_mm: f64,
        field_sigma_g: f64,
        distribution: NoiseDistribution,
    ) -> Self {
        assert!(gradient_g_per_mm >= 0.0 && cloud_diameter_mm >= 0.0 && field_sigma_g >= 0.0);
        Self { gradient_g_per_mm, cloud_diameter_mm, field_sigma_g, distribution }
    }

    /// Spatial spread modeled as uniform over the cloud (std = span/√12)
    /// combined in quadrature with the temporal Gaussian width.
    pub fn sigma_eff_g(&self) -> f64 {
        let spatial = self.gradient_g_per_mm * self.cloud_diameter_mm / 12f64.sqrt();
        spatial.hypot(self.field_sigma_g)
    }

    fn draw(&self, rng: &mut ChaCha12Rng) -> f64 {
        match self.distribution {
            NoiseDistribution::Gaussian => self.sigma_eff_g() * standard_normal(rng),
            NoiseDistribution::UniformCloudGaussianTime => {
                let span = self.gradient_g_per_mm * self.cloud_diameter_mm;
                let uniform = (rng.random::<f64>() - 0.5) * span;
                uniform + self.field_sigma_g * standard_normal(rng)
            }
        }
    }
}

fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// The hyperbola E(B) = sqrt(Δ_min² + k²(B − B0)²).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperbola {
    pub delta_min: f64,
    pub slope_k: f64,
    pub b0: f64,
}

impl Hyperbola {
    pub fn eval(&self, b: f64) -> f64 {
        self.delta_min.hypot(self.slope_k * (b - self.b0))
    }
}

/// Hyperbola parameters with uncertainties and fit diagnostics.
#[derive(Clone, Debug)]
pub struct HyperbolaFit {
    pub hyperbola: Hyperbola,
    pub sigma_delta_min: f64,
    pub sigma_k: f64,
    pub sigma_b0: f64,
    pub residual_norm: f64,
    /// Row-major 3×3 covariance over (Δ_min, k, B0).
    pub covariance: [f64; 9],
    pub rank_deficient: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum SpectroscopyError {
    #[error("spectroscopy: frequency grid [{f_min}, {f_max}] MHz does not bracket the local splitting {splitting} MHz")]
    GridDoesNotBracket { splitting: f64, f_min: f64, f_max: f64 },
    #[error("spectroscopy: need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("spectroscopy: scan maximum sits at the grid edge")]
    PeakAtEdge,
    #[error("spectroscopy: scan has no usable curvature around its maximum")]
    FlatScan,
    #[error("spectroscopy: record is undersampled: {0}")]
    Undersampled(String),
    #[error("spectroscopy: record {index} carries no fitted fringe frequency")]
    MissingFringe { index: usize },
    #[error("spectroscopy: frequencies must be strictly increasing")]
    UnsortedGrid,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Fit(#[from] fit::FitError),
}

/// Options shared by the simulated measurements.
#[derive(Clone, Copy, Debug)]
pub struct MeasureOptions {
    /// Propagation scheme; rotating-wave is the default for these long
    /// resonant pulses and is cross-validated against the lab frame.
    pub method: Method,
    pub tol: f64,
    /// Monte-Carlo samples per point when a noise model is present.
    pub noise_samples: usize,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        Self { method: Method::RotatingWave, tol: 1e-9, noise_samples: 400 }
    }
}

fn propagate_opts(opts: &MeasureOptions) -> PropagateOptions {
    PropagateOptions { tol: opts.tol, method: opts.method, trace_samples: 2, max_steps: 200_000_000 }
}

// --- Method 1: resonant transfer scans ------------------------------------

/// Simulate a resonant-transfer scan: one rectangular rf pulse per grid
/// frequency at fixed field, recording the transferred population.
pub fn simulate_resonance_scan(
    frame: &CrossingFrame,
    b: f64,
    pulse_length_ms: f64,
    b_rf: f64,
    freq_grid: &[f64],
    opts: &MeasureOptions,
) -> Result<ResonanceScan, SpectroscopyError> {
    if freq_grid.len() < 2 {
        return Err(SpectroscopyError::TooFewPoints { needed: 2, got: freq_grid.len() });
    }
    if !freq_grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(SpectroscopyError::UnsortedGrid);
    }
    let splitting = frame.splitting_at_field(b);
    let (f_min, f_max) = (freq_grid[0], *freq_grid.last().unwrap());
    if !(f_min < splitting && splitting < f_max) {
        return Err(SpectroscopyError::GridDoesNotBracket { splitting, f_min, f_max });
    }

    let initial = QuantumState::dressed_upper(frame, b);
    let popts = propagate_opts(opts);
    let mut transfer = Vec::with_capacity(freq_grid.len());
    for &f_rf in freq_grid {
        let rf = RfDrive {
            amplitude_g: b_rf,
            freq_mhz: f_rf,
            phase_rad: 0.0,
            envelope: Envelope::Rectangular,
        };
        let schedule =
            PulseSchedule::new(b, vec![RampSegment::hold(pulse_length_ms, b, Some(rf))])?;
        let run = propagate(&initial, frame, &schedule, &popts)?;
        let (_, lower) = run.final_state.dressed_populations(frame, b);
        transfer.push(lower);
    }
    Ok(ResonanceScan { b, pulse_length_ms, b_rf, frequencies: freq_grid.to_vec(), transfer })
}

/// Frequency of maximal transfer by parabolic interpolation through the top
/// three points; the uncertainty combines residual scatter with the local
/// curvature.
pub fn peak_frequency(scan: &ResonanceScan) -> Result<PeakEstimate, SpectroscopyError> {
    let n = scan.frequencies.len();
    if n < 5 {
        return Err(SpectroscopyError::TooFewPoints { needed: 5, got: n });
    }
    let (k_max, _) = scan
        .transfer
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty scan");
    if k_max == 0 || k_max == n - 1 {
        return Err(SpectroscopyError::PeakAtEdge);
    }

    let vertex = |y: [f64; 3]| -> Option<(f64, f64)> {
        let (x1, x2, x3) =
            (scan.frequencies[k_max - 1], scan.frequencies[k_max], scan.frequencies[k_max + 1]);
        let (d1, d2) = (x2 - x1, x3 - x2);
        let u = y[0] - y[1];
        let v = y[2] - y[1];
        let denom = d1 * d2 * (d1 + d2);
        let a = (u * d2 + v * d1) / denom;
        let b = (v * d1 * d1 - u * d2 * d2) / denom;
        if a >= 0.0 {
            return None;
        }
        Some((x2 - b / (2.0 * a), a))
    };

    let y0 = [scan.transfer[k_max - 1], scan.transfer[k_max], scan.transfer[k_max + 1]];
    let (f_peak, curvature) = vertex(y0).ok_or(SpectroscopyError::FlatScan)?;

    // Residual scatter against the interpolating parabola over a window of
    // up to five points.
    let lo = k_max.saturating_sub(2);
    let hi = (k_max + 2).min(n - 1);
    let x2 = scan.frequencies[k_max];
    let bcoef = -2.0 * curvature * (f_peak - x2);
    let c = scan.transfer[k_max];
    let mut ss = 0.0;
    let mut count = 0usize;
    for i in lo..=hi {
        let dx = scan.frequencies[i] - x2;
        let model = curvature * dx * dx + bcoef * dx + c;
        ss += (scan.transfer[i] - model).powi(2);
        count += 1;
    }
    let sigma_y = (ss / count as f64).sqrt().max(1e-12);

    // Propagate σ_y through the three-point vertex formula numerically.
    let mut grad_sq = 0.0;
    for i in 0..3 {
        let mut bumped = y0;
        let eps = 1e-8 * y0[1].abs().max(1e-8);
        bumped[i] += eps;
        if let Some((f_b, _)) = vertex(bumped) {
            grad_sq += ((f_b - f_peak) / eps).powi(2);
        }
    }
    Ok(PeakEstimate { freq_mhz: f_peak, sigma_mhz: sigma_y * grad_sq.sqrt() })
}

/// Full Rabi-lineshape fit of a scan:
/// P(f) = A·g²/(g² + (f − f0)²)·sin²(π·sqrt(g² + (f − f0)²)·t).
/// More model-dependent than the parabolic interpolation; available behind
/// a flag for narrow grids.
pub fn peak_frequency_lineshape(scan: &ResonanceScan) -> Result<PeakEstimate, SpectroscopyError> {
    let n = scan.frequencies.len();
    if n < 5 {
        return Err(SpectroscopyError::TooFewPoints { needed: 5, got: n });
    }
    let coarse = peak_frequency(scan)?;
    let t_us = scan.pulse_length_ms * 1e3;
    let span = scan.frequencies[n - 1] - scan.frequencies[0];
    let freqs = scan.frequencies.clone();
    let data = scan.transfer.clone();
    let outcome = fit::levenberg_marquardt(
        |p, out| {
            let (a, f0, g) = (p[0], p[1], p[2]);
            for (i, (&f, &y)) in freqs.iter().zip(&data).enumerate() {
                let gen = g.hypot(f - f0);
                let line = if gen > 0.0 {
                    (g / gen).powi(2) * (std::f64::consts::PI * gen * t_us).sin().powi(2)
                } else {
                    0.0
                };
                out[i] = a * line - y;
            }
        },
        &[1.0, coarse.freq_mhz, (0.25 / t_us).max(span * 0.05)],
        n,
        &Bounds {
            lower: vec![0.0, scan.frequencies[0], 1e-9],
            upper: vec![2.0, scan.frequencies[n - 1], f64::INFINITY],
        },
        &FitOptions::default(),
    )?;
    Ok(PeakEstimate { freq_mhz: outcome.params[1], sigma_mhz: outcome.sigmas[1] })
}

// --- Method 2: Ramsey interferometry ---------------------------------------

/// Simulate a Ramsey sequence — π/2 pulse, hold, π/2 pulse — at fixed field.
///
/// `omega_r` is the physical Rabi angular frequency in rad/µs used to time
/// the pulses (population oscillates as sin²(ω_R t / 2)); the rf amplitude
/// realizing it is derived from the local coupling element. Without noise
/// the fringe frequency equals |f_rf − splitting(B)|; with a noise model the
/// remaining fraction is Monte-Carlo averaged over field offsets drawn once
/// per record (common random numbers across hold times), and the fringe
/// decays with an emergent coherence time.
#[allow(clippy::too_many_arguments)]
pub fn simulate_ramsey(
    frame: &CrossingFrame,
    b: f64,
    f_rf: f64,
    omega_r: f64,
    hold_times_ms: &[f64],
    noise: Option<&NoiseModel>,
    seed: u64,
    opts: &MeasureOptions,
) -> Result<RamseyRecord, SpectroscopyError> {
    assert!(omega_r > 0.0, "pulse timing needs a positive Rabi frequency");
    let gap_mhz = omega_r / TAU;
    let pulse_ms = 0.25 / gap_mhz * 1e-3;

    let offsets: Vec<f64> = match noise {
        None => vec![0.0],
        Some(model) => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            (0..opts.noise_samples.max(1)).map(|_| model.draw(&mut rng)).collect()
        }
    };

    let popts = propagate_opts(opts);
    let mut remaining = Vec::with_capacity(hold_times_ms.len());
    for &t_h in hold_times_ms {
        let mut acc = 0.0;
        for &db in &offsets {
            let b_eff = b + db;
            let coupling = transition_moment_braket(&frame.at_field(b_eff)).abs();
            let rf = RfDrive {
                amplitude_g: gap_mhz / coupling,
                freq_mhz: f_rf,
                phase_rad: 0.0,
                envelope: Envelope::Rectangular,
            };
            let mut segments = vec![RampSegment::hold(pulse_ms, b_eff, Some(rf))];
            if t_h > 0.0 {
                segments.push(RampSegment::hold(t_h, b_eff, None));
            }
            segments.push(RampSegment::hold(pulse_ms, b_eff, Some(rf)));
            let schedule = PulseSchedule::new(b_eff, segments)?;
            let initial = QuantumState::dressed_upper(frame, b_eff);
            let run = propagate(&initial, frame, &schedule, &popts)?;
            let (upper, _) = run.final_state.dressed_populations(frame, b_eff);
            acc += upper;
        }
        remaining.push(acc / offsets.len() as f64);
    }

    let mut record = RamseyRecord {
        b,
        f_rf,
        hold_times_ms: hold_times_ms.to_vec(),
        remaining_fraction: remaining,
        fitted_fringe_mhz: None,
        fitted_fringe_sigma_mhz: None,
    };
    if let Ok(fitted) = fringe_frequency(&record) {
        record.fitted_fringe_mhz = Some(fitted.freq_mhz);
        record.fitted_fringe_sigma_mhz = Some(fitted.sigma_mhz);
    }
    Ok(record)
}

/// Fit A·cos(2πf·t + φ)·exp(−γt) + C to a Ramsey record and return the
/// fringe frequency.
pub fn fringe_frequency(record: &RamseyRecord) -> Result<FringeFit, SpectroscopyError> {
    let n = record.hold_times_ms.len();
    if n < 8 {
        return Err(SpectroscopyError::TooFewPoints { needed: 8, got: n });
    }
    let t_us: Vec<f64> = record.hold_times_ms.iter().map(|t| t * 1e3).collect();
    let y = &record.remaining_fraction;
    let span = t_us[n - 1] - t_us[0];
    if span <= 0.0 {
        return Err(SpectroscopyError::Undersampled("zero time span".into()));
    }
    let mut dts: Vec<f64> = t_us.windows(2).map(|w| w[1] - w[0]).collect();
    dts.sort_by(f64::total_cmp);
    let dt_med = dts[dts.len() / 2];

    // Coarse periodogram for the frequency seed.
    let mean = y.iter().sum::<f64>() / n as f64;
    let f_lo = 1.0 / span;
    let f_hi = 0.5 / dt_med;
    if f_hi <= f_lo {
        return Err(SpectroscopyError::Undersampled(
            "fewer than two periods resolvable above Nyquist".into(),
        ));
    }
    let mut best = (f_lo, 0.0, 0.0);
    let grid = 4000;
    for k in 0..=grid {
        let f = f_lo + (f_hi - f_lo) * k as f64 / grid as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (t, yy) in t_us.iter().zip(y) {
            let ph = TAU * f * t;
            re += (yy - mean) * ph.cos();
            im -= (yy - mean) * ph.sin();
        }
        let p = re * re + im * im;
        if p > best.1 {
            best = (f, p, im.atan2(re));
        }
    }
    let (f0, power, phi0) = best;
    let a0 = 2.0 * power.sqrt() / n as f64;

    // Reference the phase to the record center; this decorrelates the
    // frequency and phase directions and roughly halves the nonlinearity of
    // a frequency step.
    let t_mid = 0.5 * (t_us[0] + t_us[n - 1]);
    let ts = t_us.clone();
    let ys = y.to_vec();
    let outcome = fit::levenberg_marquardt(
        |p, out| {
            let (a, f, phi, gamma, c) = (p[0], p[1], p[2], p[3], p[4]);
            for (i, (&t, &yy)) in ts.iter().zip(&ys).enumerate() {
                out[i] =
                    a * (TAU * f * (t - t_mid) + phi).cos() * (-gamma * t).exp() + c - yy;
            }
        },
        &[a0, f0, phi0 + TAU * f0 * t_mid, 1e-6, mean],
        n,
        &Bounds {
            lower: vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY],
            upper: vec![f64::INFINITY; 5],
        },
        &FitOptions::default(),
    )?;
    let f_fit = outcome.params[1];

    // Post-fit sampling checks.
    if span * f_fit < 2.0 {
        return Err(SpectroscopyError::Undersampled(format!(
            "only {:.2} fringe periods in the record",
            span * f_fit
        )));
    }
    if dt_med > 0.5 / f_fit {
        return Err(SpectroscopyError::Undersampled(
            "sampling below the Nyquist rate of the fitted fringe".into(),
        ));
    }
    Ok(FringeFit {
        freq_mhz: f_fit,
        sigma_mhz: outcome.sigmas[1],
        amplitude: outcome.params[0],
        offset: outcome.params[4],
        decay_per_ms: outcome.params[3] * 1e3,
    })
}

// --- hyperbola fitting and noise averaging ---------------------------------

/// Weighted nonlinear least-squares fit of sqrt(Δ_min² + k²(B − B0)²) to
/// measured (B, splitting) points. `weights` multiply the squared residuals.
pub fn hyperbola_fit(
    points: &[(f64, f64)],
    weights: Option<&[f64]>,
) -> Result<HyperbolaFit, SpectroscopyError> {
    fit_splitting_model(points, weights, None, 0, 0)
}

/// Splitting expected from a hyperbola under field noise: the Monte-Carlo
/// average of E(B + δB) over the noise distribution.
pub fn noise_averaged_splitting(
    b: f64,
    hyperbola: &Hyperbola,
    noise: &NoiseModel,
    n_samples: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = n_samples.max(1);
    let mut acc = 0.0;
    for _ in 0..n {
        acc += hyperbola.eval(b + noise.draw(&mut rng));
    }
    acc / n as f64
}

/// Second-order (small-σ) approximation of the averaging upshift at the
/// hyperbola minimum: k²·σ_eff²/(2·Δ_min).
pub fn analytic_upshift_at_minimum(hyperbola: &Hyperbola, sigma_eff_g: f64) -> f64 {
    hyperbola.slope_k.powi(2) * sigma_eff_g.powi(2) / (2.0 * hyperbola.delta_min)
}

/// Estimate the ideal hyperbola minimum from Ramsey records taken under
/// field noise: splittings derived from the fitted fringes (blue-detuned
/// convention, splitting = f_rf − fringe) are fitted with the noise-averaged
/// model, so the reported Δ_min has the averaging upshift removed.
pub fn ramsey_minimum_estimate(
    records: &[RamseyRecord],
    noise: &NoiseModel,
    n_samples: usize,
    seed: u64,
) -> Result<HyperbolaFit, SpectroscopyError> {
    let mut points = Vec::with_capacity(records.len());
    for (index, rec) in records.iter().enumerate() {
        let fringe = rec.fitted_fringe_mhz.ok_or(SpectroscopyError::MissingFringe { index })?;
        points.push((rec.b, rec.f_rf - fringe));
    }
    fit_splitting_model(&points, None, Some(*noise), n_samples, seed)
}

/// Shared fitting core: plain hyperbola when `noise` is None, otherwise the
/// noise-averaged model with common random numbers across evaluations.
fn fit_splitting_model(
    points: &[(f64, f64)],
    weights: Option<&[f64]>,
    noise: Option<NoiseModel>,
    n_samples: usize,
    seed: u64,
) -> Result<HyperbolaFit, SpectroscopyError> {
    if points.len() < 4 {
        return Err(SpectroscopyError::TooFewPoints { needed: 4, got: points.len() });
    }
    if let Some(w) = weights {
        assert_eq!(w.len(), points.len(), "one weight per point");
    }

    // Frozen noise draws make the Monte-Carlo objective smooth in the
    // parameters.
    let offsets: Vec<f64> = match &noise {
        None => Vec::new(),
        Some(model) => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            (0..n_samples.max(1)).map(|_| model.draw(&mut rng)).collect()
        }
    };

    // Initialization: minimum point and outermost secant slope.
    let (b_at_min, y_min) = points
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty");
    let k0 = points
        .iter()
        .filter(|(b, _)| (b - b_at_min).abs() > 0.0)
        .map(|&(b, y)| {
            let dy2 = (y * y - y_min * y_min).max(0.0);
            dy2.sqrt() / (b - b_at_min).abs()
        })
        .fold(0.0_f64, f64::max)
        .max(1e-6);

    let pts = points.to_vec();
    let w: Vec<f64> = match weights {
        Some(w) => w.iter().map(|x| x.sqrt()).collect(),
        None => vec![1.0; points.len()],
    };
    let outcome = fit::levenberg_marquardt(
        |p, out| {
            let h = Hyperbola { delta_min: p[0], slope_k: p[1], b0: p[2] };
            for (i, (&(b, y), sw)) in pts.iter().zip(&w).enumerate() {
                let model = if offsets.is_empty() {
                    h.eval(b)
                } else {
                    offsets.iter().map(|&db| h.eval(b + db)).sum::<f64>() / offsets.len() as f64
                };
                out[i] = sw * (model - y);
            }
        },
        &[y_min.max(1e-9), k0, b_at_min],
        points.len(),
        &Bounds {
            lower: vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
            upper: vec![f64::INFINITY; 3],
        },
        &FitOptions::default(),
    )?;

    let mut covariance = [0.0; 9];
    covariance.copy_from_slice(&outcome.covariance);
    Ok(HyperbolaFit {
        hyperbola: Hyperbola {
            delta_min: outcome.params[0],
            slope_k: outcome.params[1].abs(),
            b0: outcome.params[2],
        },
        sigma_delta_min: outcome.sigmas[0],
        sigma_k: outcome.sigmas[1],
        sigma_b0: outcome.sigmas[2],
        residual_norm: outcome.residual_norm,
        covariance,
        rank_deficient: outcome.rank_deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_e() -> CrossingFrame {
        // Narrow s-d crossing: 2.36 MHz splitting.
        CrossingFrame::new(2.36, 2.3, 4.6, 466.1)
    }

    fn frame_a() -> CrossingFrame {
        CrossingFrame::new(13.33210, 0.0, 2.8, 1001.4)
    }

    #[test]
    fn scan_grid_must_bracket_the_splitting() {
        let f = frame_e();
        let grid: Vec<f64> = (0..10).map(|k| 3.0 + 0.1 * k as f64).collect();
        assert!(matches!(
            simulate_resonance_scan(&f, f.b0, 0.05, 0.01, &grid, &MeasureOptions::default()),
            Err(SpectroscopyError::GridDoesNotBracket { .. })
        ));
    }

    #[test]
    fn scan_at_crossing_peaks_at_the_minimal_splitting() {
        let f = frame_e();
        let gap = 0.01 * transition_moment_braket(&f).abs();
        let pulse_ms = crate::dynamics::pi_pulse_us(gap) * 1e-3;
        let grid: Vec<f64> = (0..=24).map(|k| 2.36 - 0.06 + 0.005 * k as f64).collect();
        let scan =
            simulate_resonance_scan(&f, f.b0, pulse_ms, 0.01, &grid, &MeasureOptions::default())
                .unwrap();
        let peak = peak_frequency(&scan).unwrap();
        assert!((peak.freq_mhz - 2.36).abs() < 0.01, "peak at {} MHz", peak.freq_mhz);
        // On-resonance π pulse transfers essentially everything.
        let k_res = grid.iter().position(|&f| (f - 2.36).abs() < 2.6e-3).unwrap();
        assert!(scan.transfer[k_res] > 0.99);
    }

    #[test]
    fn detuned_pulse_follows_the_rabi_formula() {
        // Detuning equal to the gap: P = sin²(π√2/2)/2 at the π-pulse
        // length, straight from P = g²/(g²+Δ²)·sin²(π·sqrt(g²+Δ²)·t).
        let f = frame_e();
        let b_rf = 0.01;
        let gap = b_rf * transition_moment_braket(&f).abs();
        let pulse_ms = crate::dynamics::pi_pulse_us(gap) * 1e-3;
        let f_res = f.splitting();
        let grid =
            vec![f_res - 3.0 * gap, f_res - gap, f_res, f_res + gap, f_res + 3.0 * gap];
        let scan =
            simulate_resonance_scan(&f, f.b0, pulse_ms, b_rf, &grid, &MeasureOptions::default())
                .unwrap();
        let expected = 0.5 * (std::f64::consts::PI * 2f64.sqrt() / 2.0).sin().powi(2);
        assert!((scan.transfer[1] - expected).abs() < 5e-3);
        assert!((scan.transfer[3] - expected).abs() < 5e-3);
    }

    #[test]
    fn symmetric_lineshape_peaks_at_center() {
        let freqs: Vec<f64> = (0..11).map(|k| 10.0 + 0.01 * k as f64).collect();
        let transfer: Vec<f64> =
            freqs.iter().map(|&f| 1.0 - ((f - 10.05) / 0.03).powi(2)).collect();
        let scan = ResonanceScan {
            b: 0.0,
            pulse_length_ms: 1.0,
            b_rf: 0.01,
            frequencies: freqs,
            transfer,
        };
        let peak = peak_frequency(&scan).unwrap();
        assert!((peak.freq_mhz - 10.05).abs() < 1e-12);
    }

    #[test]
    fn edge_peak_and_flat_scans_are_rejected() {
        let freqs: Vec<f64> = (0..8).map(|k| k as f64).collect();
        let rising: Vec<f64> = freqs.clone();
        let scan = ResonanceScan {
            b: 0.0,
            pulse_length_ms: 1.0,
            b_rf: 0.0,
            frequencies: freqs.clone(),
            transfer: rising,
        };
        assert!(matches!(peak_frequency(&scan), Err(SpectroscopyError::PeakAtEdge)));

        let mut flat = vec![0.5; 8];
        flat[3] = 0.5 + 1e-18; // maximum without meaningful curvature
        let scan = ResonanceScan {
            b: 0.0,
            pulse_length_ms: 1.0,
            b_rf: 0.0,
            frequencies: freqs,
            transfer: flat,
        };
        match peak_frequency(&scan) {
            Err(SpectroscopyError::FlatScan) | Err(SpectroscopyError::PeakAtEdge) => {}
            other => panic!("expected flat-scan rejection, got {other:?}"),
        }
    }

    #[test]
    fn ramsey_pulse_pair_empties_the_branch_on_resonance() {
        // Two π/2 pulses back to back act as a π pulse.
        let f = frame_a();
        let rec = simulate_ramsey(
            &f,
            f.b0,
            f.omega, // zero detuning
            TAU * 0.05,
            &[0.0],
            None,
            1,
            &MeasureOptions::default(),
        )
        .unwrap();
        assert!(rec.remaining_fraction[0] < 1e-3);
    }

    #[test]
    fn fringe_frequency_equals_detuning() {
        let f = frame_a();
        let detuning = 0.005; // 5 kHz
        let holds: Vec<f64> = (0..=60).map(|k| k as f64 * 0.01).collect(); // to 0.6 ms
        let rec = simulate_ramsey(
            &f,
            f.b0,
            f.omega + detuning,
            TAU * 0.05,
            &holds,
            None,
            1,
            &MeasureOptions::default(),
        )
        .unwrap();
        let fitted = rec.fitted_fringe_mhz.expect("fit must succeed");
        assert!(
            (fitted - detuning).abs() < 1e-3 * detuning,
            "fringe {fitted} MHz vs detuning {detuning} MHz"
        );
    }

    #[test]
    fn fringe_sign_symmetry() {
        let f = frame_a();
        let detuning = 0.004;
        let holds: Vec<f64> = (0..=80).map(|k| k as f64 * 0.01).collect();
        let opts = MeasureOptions::default();
        let plus =
            simulate_ramsey(&f, f.b0, f.omega + detuning, TAU * 0.05, &holds, None, 1, &opts)
                .unwrap();
        let minus =
            simulate_ramsey(&f, f.b0, f.omega - detuning, TAU * 0.05, &holds, None, 1, &opts)
                .unwrap();
        let (fp, fm) = (plus.fitted_fringe_mhz.unwrap(), minus.fitted_fringe_mhz.unwrap());
        assert!((fp - fm).abs() < 1e-3 * fp, "+{fp} vs -{fm}");
    }

    #[test]
    fn fringe_matches_analytic_ramsey_period() {
        // Ideal interference: remaining = sin²(π·Δf·t_h) up to a constant
        // pulse phase, so values one period apart must agree.
        let f = frame_a();
        let detuning = 0.01;
        let holds: Vec<f64> = (0..=100).map(|k| k as f64 * 0.004).collect();
        let rec = simulate_ramsey(
            &f,
            f.b0,
            f.omega + detuning,
            TAU * 0.07,
            &holds,
            None,
            1,
            &MeasureOptions::default(),
        )
        .unwrap();
        let per_points = 25; // 0.004 ms grid, 0.1 ms fringe period
        for i in 0..(holds.len() - per_points) {
            let a = rec.remaining_fraction[i];
            let b = rec.remaining_fraction[i + per_points];
            assert!((a - b).abs() < 5e-3, "period mismatch at {i}: {a} vs {b}");
        }
    }

    #[test]
    fn single_period_record_is_undersampled() {
        // One fringe period across the whole record: well sampled but too
        // short to pin the frequency.
        let f_true = 0.01; // MHz, period 100 µs
        let holds: Vec<f64> = (0..=50).map(|k| k as f64 * 0.002).collect(); // to 0.1 ms
        let rec = RamseyRecord {
            b: 0.0,
            f_rf: 1.0,
            hold_times_ms: holds.clone(),
            remaining_fraction: holds
                .iter()
                .map(|&t| (std::f64::consts::PI * f_true * t * 1e3).sin().powi(2))
                .collect(),
            fitted_fringe_mhz: None,
            fitted_fringe_sigma_mhz: None,
        };
        assert!(matches!(fringe_frequency(&rec), Err(SpectroscopyError::Undersampled(_))));
    }

    #[test]
    fn noisy_fringe_mean_recovery() {
        // 5% amplitude noise, 50 seeds: mean fitted frequency within 0.5%.
        let f_true = 0.008;
        let holds: Vec<f64> = (0..=80).map(|k| k as f64 * 0.01).collect();
        let mut sum = 0.0;
        let mut count = 0;
        for seed in 0..50u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let y: Vec<f64> = holds
                .iter()
                .map(|&t| {
                    let clean = (std::f64::consts::PI * f_true * t * 1e3).sin().powi(2);
                    clean + 0.05 * (rng.random::<f64>() - 0.5)
                })
                .collect();
            let rec = RamseyRecord {
                b: 0.0,
                f_rf: 1.0,
                hold_times_ms: holds.clone(),
                remaining_fraction: y,
                fitted_fringe_mhz: None,
                fitted_fringe_sigma_mhz: None,
            };
            if let Ok(fitted) = fringe_frequency(&rec) {
                sum += fitted.freq_mhz;
                count += 1;
            }
        }
        assert!(count >= 45, "most fits must converge, got {count}");
        let mean = sum / count as f64;
        assert!((mean - f_true).abs() < 5e-3 * f_true, "mean {mean}");
    }

    #[test]
    fn hyperbola_fit_recovers_exact_parameters() {
        let truth = Hyperbola { delta_min: 13.3321, slope_k: 2.8, b0: 1001.4 };
        let points: Vec<(f64, f64)> = (0..15)
            .map(|k| {
                let b = 1001.4 - 3.5 + 0.5 * k as f64;
                (b, truth.eval(b))
            })
            .collect();
        let fitted = hyperbola_fit(&points, None).unwrap();
        assert!((fitted.hyperbola.delta_min - truth.delta_min).abs() < 1e-6 * truth.delta_min);
        assert!((fitted.hyperbola.slope_k - truth.slope_k).abs() < 1e-6 * truth.slope_k);
        assert!((fitted.hyperbola.b0 - truth.b0).abs() < 1e-6 * truth.b0);
    }

    #[test]
    fn hyperbola_fit_needs_four_points() {
        let pts = vec![(1.0, 2.0), (2.0, 1.5), (3.0, 2.0)];
        assert!(matches!(
            hyperbola_fit(&pts, None),
            Err(SpectroscopyError::TooFewPoints { needed: 4, .. })
        ));
    }

    #[test]
    fn hyperbola_fit_is_scale_equivariant() {
        let truth = Hyperbola { delta_min: 5.0, slope_k: 1.7, b0: 300.0 };
        let points: Vec<(f64, f64)> = (0..12)
            .map(|k| {
                let b = 295.0 + 0.9 * k as f64;
                (b, truth.eval(b))
            })
            .collect();
        let fit1 = hyperbola_fit(&points, None).unwrap();
        let scaled: Vec<(f64, f64)> = points.iter().map(|&(b, y)| (b * 10.0, y)).collect();
        let fit2 = hyperbola_fit(&scaled, None).unwrap();
        assert!(
            (fit1.hyperbola.delta_min - fit2.hyperbola.delta_min).abs()
                <= 1e-9 * fit1.hyperbola.delta_min
        );
        assert!((fit2.hyperbola.slope_k - fit1.hyperbola.slope_k / 10.0).abs() < 1e-9);
        assert!((fit2.hyperbola.b0 - fit1.hyperbola.b0 * 10.0).abs() < 1e-6);
    }

    #[test]
    fn one_sided_data_is_flagged_not_fatal() {
        // Points far out on one asymptote leave the minimum poorly
        // constrained: the fit must still succeed, with the uncertainty
        // inflated far beyond the two-sided case at the same noise level.
        let truth = Hyperbola { delta_min: 5.0, slope_k: 1.7, b0: 300.0 };
        let jitter = |k: usize| 1.0 + 1e-4 * if k % 2 == 0 { 1.0 } else { -1.0 };
        let one_sided: Vec<(f64, f64)> = (0..10)
            .map(|k| {
                let b = 360.0 + 2.0 * k as f64;
                (b, truth.eval(b) * jitter(k))
            })
            .collect();
        let two_sided: Vec<(f64, f64)> = (0..10)
            .map(|k| {
                let b = 294.0 + 1.2 * k as f64;
                (b, truth.eval(b) * jitter(k))
            })
            .collect();
        let lopsided = hyperbola_fit(&one_sided, None).unwrap();
        let balanced = hyperbola_fit(&two_sided, None).unwrap();
        let inflation = lopsided.sigma_delta_min / balanced.sigma_delta_min.max(1e-12);
        assert!(
            lopsided.rank_deficient || inflation > 10.0,
            "expected inflated uncertainty, got ratio {inflation}"
        );
    }

    #[test]
    fn noise_free_average_is_the_hyperbola() {
        let h = Hyperbola { delta_min: 13.3321, slope_k: 2.8, b0: 1001.4 };
        let noise = NoiseModel::new(0.0, 0.0, 0.0, NoiseDistribution::UniformCloudGaussianTime);
        let avg = noise_averaged_splitting(1001.2, &h, &noise, 1000, 7);
        assert!((avg - h.eval(1001.2)).abs() < 1e-12);
    }

    #[test]
    fn small_sigma_upshift_matches_taylor_expansion() {
        let h = Hyperbola { delta_min: 13.3321, slope_k: 2.8, b0: 1001.4 };
        let noise = NoiseModel::new(2.0, 0.02, 0.02, NoiseDistribution::UniformCloudGaussianTime);
        let sigma = noise.sigma_eff_g();
        assert!(sigma * h.slope_k <= 0.1 * h.delta_min, "small-σ regime");
        let mc = noise_averaged_splitting(h.b0, &h, &noise, 400_000, 11) - h.delta_min;
        let taylor = analytic_upshift_at_minimum(&h, sigma);
        assert!(
            (mc - taylor).abs() <= 0.1 * taylor,
            "Monte-Carlo upshift {mc} vs analytic {taylor}"
        );
        // With these parameters the upshift lands on the 150 Hz scale.
        assert!(taylor > 100e-6 && taylor < 250e-6, "upshift {taylor} MHz");
    }

    #[test]
    fn averaged_curve_dominates_the_hyperbola() {
        let h = Hyperbola { delta_min: 2.36, slope_k: 2.3, b0: 466.1 };
        let noise = NoiseModel::new(2.0, 0.02, 0.02, NoiseDistribution::UniformCloudGaussianTime);
        for k in 0..40 {
            let b = h.b0 - 0.2 + 0.01 * k as f64;
            let avg = noise_averaged_splitting(b, &h, &noise, 20_000, 3);
            assert!(avg >= h.eval(b) - 1e-9, "Jensen violated at B = {b}");
        }
    }

    #[test]
    fn minimum_estimate_reduces_to_hyperbola_fit_without_noise() {
        let truth = Hyperbola { delta_min: 13.3321, slope_k: 2.8, b0: 1001.4 };
        let records: Vec<RamseyRecord> = (0..8)
            .map(|k| {
                let b = 1001.4 - 0.21 + 0.06 * k as f64;
                let split = truth.eval(b);
                RamseyRecord {
                    b,
                    f_rf: split + 0.004,
                    hold_times_ms: Vec::new(),
                    remaining_fraction: Vec::new(),
                    fitted_fringe_mhz: Some(0.004),
                    fitted_fringe_sigma_mhz: Some(1e-6),
                }
            })
            .collect();
        let zero_noise =
            NoiseModel::new(0.0, 0.0, 0.0, NoiseDistribution::UniformCloudGaussianTime);
        let est = ramsey_minimum_estimate(&records, &zero_noise, 100, 5).unwrap();
        let points: Vec<(f64, f64)> =
            records.iter().map(|r| (r.b, r.f_rf - r.fitted_fringe_mhz.unwrap())).collect();
        let plain = hyperbola_fit(&points, None).unwrap();
        assert!((est.hyperbola.delta_min - plain.hyperbola.delta_min).abs() < 1e-9);
        assert!((est.hyperbola.b0 - plain.hyperbola.b0).abs() < 1e-9);
    }

    #[test]
    fn minimum_estimate_removes_the_averaging_upshift() {
        // Splittings generated from the averaged model; the estimator must
        // return the ideal minimum, not the upshifted one.
        let truth = Hyperbola { delta_min: 13.33210, slope_k: 2.8, b0: 1001.4 };
        let noise = NoiseModel::new(2.0, 0.02, 0.02, NoiseDistribution::UniformCloudGaussianTime);
        let records: Vec<RamseyRecord> = (0..10)
            .map(|k| {
                let b = 1001.4 - 0.27 + 0.06 * k as f64;
                let split = noise_averaged_splitting(b, &truth, &noise, 200_000, 1000 + k);
                RamseyRecord {
                    b,
                    f_rf: split + 0.005,
                    hold_times_ms: Vec::new(),
                    remaining_fraction: Vec::new(),
                    fitted_fringe_mhz: Some(0.005),
                    fitted_fringe_sigma_mhz: Some(1e-6),
                }
            })
            .collect();
        let est = ramsey_minimum_estimate(&records, &noise, 200_000, 77).unwrap();
        let upshift = analytic_upshift_at_minimum(&truth, noise.sigma_eff_g());
        assert!(
            (est.hyperbola.delta_min - truth.delta_min).abs() < 1.5e-4,
            "estimated {} vs truth {} (upshift {upshift})",
            est.hyperbola.delta_min,
            truth.delta_min
        );
        // The raw minimum of the measured points sits above the truth.
        let min_meas = records
            .iter()
            .map(|r| r.f_rf - r.fitted_fringe_mhz.unwrap())
            .fold(f64::MAX, f64::min);
        assert!(min_meas > truth.delta_min + 0.5 * upshift);
    }
}
