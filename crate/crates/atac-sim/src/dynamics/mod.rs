//! Time-dependent two-level dynamics under programmed field ramps and rf
//! pulses.
//!
//! States evolve in the bare basis {|b1⟩, |b2⟩} of a [`CrossingFrame`] under
//!
//! ```text
//!   H(t)/h = (B(t) − B0 + B_rf(t) cos(2π f_rf t' + φ)) · diag(µ1, µ2)
//!            + (Ω/2) · offdiag
//! ```
//!
//! with the lab-frame cosine drive resolved explicitly by default (no
//! rotating-wave approximation). An optional rotating-wave mode propagates
//! in the dressed basis instead and is orders of magnitude faster for long
//! resonant pulses; it treats field ramps adiabatically, so it is only valid
//! where the static crossing itself is traversed adiabatically (scans,
//! Ramsey sequences, rf transfer windows), not for diabatic jumps.

mod stepper;

use num_complex::Complex64 as C64;

use crate::crossing::{
    mixing_angle, rf_gap, rf_induced_crossings, transition_moment_braket, CrossingFrame,
};
use crate::fit::{self, Bounds, FitOptions};
use crate::units::{g_per_ms_to_g_per_us, TAU};

pub use stepper::StepError;

/// Complex amplitude pair over the active bare levels, with the running
/// norm-drift diagnostic. The norm is never silently restored.
#[derive(Clone, Copy, Debug)]
pub struct QuantumState {
    pub amps: [C64; 2],
    pub time_us: f64,
    /// Max |1 − ⟨ψ|ψ⟩| accumulated so far.
    pub norm_drift: f64,
}

impl QuantumState {
    pub fn new(amps: [C64; 2]) -> Self {
        Self { amps, time_us: 0.0, norm_drift: 0.0 }
    }

    /// |b1⟩ at t = 0.
    pub fn bare1() -> Self {
        Self::new([C64::new(1.0, 0.0), C64::new(0.0, 0.0)])
    }

    /// |b2⟩ at t = 0.
    pub fn bare2() -> Self {
        Self::new([C64::new(0.0, 0.0), C64::new(1.0, 0.0)])
    }

    /// Upper dressed state of `frame` at field `b`, at t = 0.
    pub fn dressed_upper(frame: &CrossingFrame, b: f64) -> Self {
        let th = mixing_angle(&frame.at_field(b));
        Self::new([C64::new(th.cos(), 0.0), C64::new(th.sin(), 0.0)])
    }

    /// Lower dressed state of `frame` at field `b`, at t = 0.
    pub fn dressed_lower(frame: &CrossingFrame, b: f64) -> Self {
        let th = mixing_angle(&frame.at_field(b));
        Self::new([C64::new(-th.sin(), 0.0), C64::new(th.cos(), 0.0)])
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps[0].norm_sqr() + self.amps[1].norm_sqr()
    }

    pub fn pop_b1(&self) -> f64 {
        self.amps[0].norm_sqr()
    }

    pub fn pop_b2(&self) -> f64 {
        self.amps[1].norm_sqr()
    }

    /// (upper, lower) dressed populations at field `b`.
    pub fn dressed_populations(&self, frame: &CrossingFrame, b: f64) -> (f64, f64) {
        let th = mixing_angle(&frame.at_field(b));
        let (s, c) = th.sin_cos();
        let a_u = self.amps[0] * c + self.amps[1] * s;
        let a_l = -self.amps[0] * s + self.amps[1] * c;
        (a_u.norm_sqr(), a_l.norm_sqr())
    }
}

/// Rf drive attached to a schedule segment. The drive field is
/// `amplitude · env(t) · cos(2π f (t − t_segment_start) + phase)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RfDrive {
    /// Amplitude B_rf, G.
    pub amplitude_g: f64,
    /// Frequency, MHz.
    pub freq_mhz: f64,
    /// Phase at segment start, rad.
    pub phase_rad: f64,
    pub envelope: Envelope,
}

/// Envelope of an rf segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Envelope {
    /// Hard switch-on and switch-off.
    Rectangular,
    /// Linear rise after switch-on and symmetric fall before switch-off.
    LinearRamp { rise_us: f64 },
}

impl Envelope {
    fn value(&self, t_local_us: f64, duration_us: f64) -> f64 {
        match *self {
            Envelope::Rectangular => 1.0,
            Envelope::LinearRamp { rise_us } => {
                if rise_us <= 0.0 {
                    return 1.0;
                }
                (t_local_us / rise_us)
                    .min((duration_us - t_local_us) / rise_us)
                    .clamp(0.0, 1.0)
            }
        }
    }
}

/// One timed segment: a linear field ramp with an optional rf drive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampSegment {
    pub duration_ms: f64,
    pub b_start: f64,
    pub b_end: f64,
    pub rf: Option<RfDrive>,
}

impl RampSegment {
    pub fn hold(duration_ms: f64, b: f64, rf: Option<RfDrive>) -> Self {
        Self { duration_ms, b_start: b, b_end: b, rf }
    }

    /// Ramp between two fields at `speed` G/ms.
    pub fn ramp(b_start: f64, b_end: f64, speed_g_per_ms: f64, rf: Option<RfDrive>) -> Self {
        assert!(speed_g_per_ms > 0.0);
        let duration_ms = (b_end - b_start).abs() / speed_g_per_ms;
        Self { duration_ms, b_start, b_end, rf }
    }
}

/// A contiguous, field-continuous sequence of segments.
#[derive(Clone, Debug, PartialEq)]
pub struct PulseSchedule {
    pub b_initial: f64,
    pub segments: Vec<RampSegment>,
}

impl PulseSchedule {
    pub fn new(b_initial: f64, segments: Vec<RampSegment>) -> Result<Self, DynamicsError> {
        let schedule = Self { b_initial, segments };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let mut b_prev = self.b_initial;
        for (k, seg) in self.segments.iter().enumerate() {
            if !(seg.duration_ms > 0.0) {
                return Err(DynamicsError::InvalidSchedule(format!(
                    "segment {k} has non-positive duration {}",
                    seg.duration_ms
                )));
            }
            if let Some(rf) = &seg.rf {
                if rf.amplitude_g < 0.0 {
                    return Err(DynamicsError::InvalidSchedule(format!(
                        "segment {k} has negative rf amplitude"
                    )));
                }
                if rf.freq_mhz <= 0.0 {
                    return Err(DynamicsError::InvalidSchedule(format!(
                        "segment {k} has non-positive rf frequency"
                    )));
                }
            }
            let tol = 1e-9 * b_prev.abs().max(1.0);
            if (seg.b_start - b_prev).abs() > tol {
                return Err(DynamicsError::InvalidSchedule(format!(
                    "segment {k} starts at {} G but the field is at {} G",
                    seg.b_start, b_prev
                )));
            }
            b_prev = seg.b_end;
        }
        Ok(())
    }

    pub fn total_duration_ms(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_ms).sum()
    }

    pub fn total_duration_us(&self) -> f64 {
        self.total_duration_ms() * 1e3
    }

    pub fn b_final(&self) -> f64 {
        self.segments.last().map(|s| s.b_end).unwrap_or(self.b_initial)
    }

    /// Field at schedule time `t_us`.
    pub fn b_at(&self, t_us: f64) -> f64 {
        let mut t0 = 0.0;
        for seg in &self.segments {
            let dur = seg.duration_ms * 1e3;
            if t_us <= t0 + dur {
                let frac = ((t_us - t0) / dur).clamp(0.0, 1.0);
                return seg.b_start + (seg.b_end - seg.b_start) * frac;
            }
            t0 += dur;
        }
        self.b_final()
    }

    /// The exact time-mirrored schedule: segments in reverse order, each
    /// with its endpoints swapped. Envelopes are symmetric, so mirroring a
    /// segment leaves its drive shape intact.
    pub fn reversed(&self) -> Self {
        let segments = self
            .segments
            .iter()
            .rev()
            .map(|s| RampSegment { b_start: s.b_end, b_end: s.b_start, ..*s })
            .collect();
        Self { b_initial: self.b_final(), segments }
    }
}

/// Sampled population history of one propagation.
#[derive(Clone, Debug, Default)]
pub struct PopulationTrace {
    pub rows: Vec<TraceRow>,
}

#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub time_us: f64,
    pub b_gauss: f64,
    pub pop_b1: f64,
    pub pop_b2: f64,
    pub pop_upper_dressed: f64,
    pub pop_lower_dressed: f64,
    pub norm: f64,
}

/// Propagation scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Method {
    /// Integrate the printed Hamiltonian with the explicit cosine drive.
    #[default]
    LabFrame,
    /// Rotating-wave propagation in the dressed basis.
    RotatingWave,
}

#[derive(Clone, Copy, Debug)]
pub struct PropagateOptions {
    /// Per-step local error bound; accepted range 1e-12 ..= 1e-4.
    pub tol: f64,
    pub method: Method,
    /// Number of uniformly spaced trace samples over the schedule.
    pub trace_samples: usize,
    /// Hard cap on accepted integrator steps.
    pub max_steps: usize,
}

impl Default for PropagateOptions {
    fn default() -> Self {
        Self { tol: 1e-9, method: Method::LabFrame, trace_samples: 800, max_steps: 200_000_000 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DynamicsError {
    #[error("dynamics: invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("dynamics: tolerance {0} outside the accepted range [1e-12, 1e-4]")]
    InvalidTolerance(f64),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error("dynamics: rotating-wave mode needs a single rf frequency per schedule; found {0} and {1} MHz")]
    RwaFrequencyMismatch(f64, f64),
    #[error("dynamics: transfer geometry: {0}")]
    Geometry(String),
    #[error("dynamics: degenerate data: {0}")]
    DegenerateData(String),
    #[error(transparent)]
    Fit(#[from] fit::FitError),
}

/// Result of one propagation.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub final_state: QuantumState,
    pub trace: PopulationTrace,
}

struct SegmentChart<'a> {
    frame: &'a CrossingFrame,
    seg: &'a RampSegment,
    t_start_us: f64,
    duration_us: f64,
    rwa_freq: f64,
}

impl SegmentChart<'_> {
    #[inline]
    fn b_at(&self, t_us: f64) -> f64 {
        let frac = (t_us - self.t_start_us) / self.duration_us;
        self.seg.b_start + (self.seg.b_end - self.seg.b_start) * frac
    }

    /// Lab-frame traceless Pauli coefficients at global time `t_us`.
    #[inline]
    fn lab_coeffs(&self, t_us: f64) -> [f64; 3] {
        let t_local = t_us - self.t_start_us;
        let mut x = self.b_at(t_us) - self.frame.b0;
        if let Some(rf) = &self.seg.rf {
            let env = rf.envelope.value(t_local, self.duration_us);
            x += rf.amplitude_g * env * (TAU * rf.freq_mhz * t_local + rf.phase_rad).cos();
        }
        [0.5 * self.frame.omega, 0.0, -0.5 * self.frame.dmu() * x]
    }

    /// Rotating-frame dressed-basis coefficients at global time `t_us`.
    #[inline]
    fn rwa_coeffs(&self, t_us: f64) -> [f64; 3] {
        let b = self.b_at(t_us);
        let local = self.frame.at_field(b);
        let hz = 0.5 * (local.splitting() - self.rwa_freq);
        match &self.seg.rf {
            None => [0.0, 0.0, hz],
            Some(rf) => {
                let t_local = t_us - self.t_start_us;
                let v = rf.amplitude_g
                    * rf.envelope.value(t_local, self.duration_us)
                    * transition_moment_braket(&local);
                [0.5 * v * rf.phase_rad.cos(), 0.5 * v * rf.phase_rad.sin(), hz]
            }
        }
    }
}

fn bare_to_dressed(amps: &[C64; 2], theta: f64) -> [C64; 2] {
    let (s, c) = theta.sin_cos();
    [amps[0] * c + amps[1] * s, -amps[0] * s + amps[1] * c]
}

fn dressed_to_bare(amps: &[C64; 2], theta: f64) -> [C64; 2] {
    let (s, c) = theta.sin_cos();
    [amps[0] * c - amps[1] * s, amps[0] * s + amps[1] * c]
}

/// Rotating-frame phase factor diag(e^{-iπft}, e^{+iπft}).
fn frame_rotation(f_mhz: f64, t_us: f64) -> [C64; 2] {
    let half = std::f64::consts::PI * f_mhz * t_us;
    [C64::from_polar(1.0, -half), C64::from_polar(1.0, half)]
}

/// Solve the Schrödinger equation over `schedule` starting from `initial`.
///
/// The state is interpreted in the bare basis of `frame` (the frame's own
/// `delta` is ignored; the schedule dictates the field). Per-step local
/// error is bounded by `opts.tol`; steps are exactly unitary, so norm drift
/// stays at rounding level and is reported, never repaired.
pub fn propagate(
    initial: &QuantumState,
    frame: &CrossingFrame,
    schedule: &PulseSchedule,
    opts: &PropagateOptions,
) -> Result<Propagation, DynamicsError> {
    if !(1e-12..=1e-4).contains(&opts.tol) {
        return Err(DynamicsError::InvalidTolerance(opts.tol));
    }
    schedule.validate()?;

    let total_us = schedule.total_duration_us();
    let rwa_freq = match opts.method {
        Method::LabFrame => 0.0,
        Method::RotatingWave => {
            let mut freq: Option<f64> = None;
            for seg in &schedule.segments {
                if let Some(rf) = &seg.rf {
                    match freq {
                        None => freq = Some(rf.freq_mhz),
                        Some(f) if f != rf.freq_mhz => {
                            return Err(DynamicsError::RwaFrequencyMismatch(f, rf.freq_mhz))
                        }
                        _ => {}
                    }
                }
            }
            freq.unwrap_or(0.0)
        }
    };

    // Uniform sample grid; segment boundaries are always hit exactly.
    let n_samples = opts.trace_samples.max(2);
    let sample_dt = total_us / (n_samples - 1) as f64;

    let mut psi = initial.amps;
    let t_offset = initial.time_us;
    if opts.method == Method::RotatingWave {
        let theta = mixing_angle(&frame.at_field(schedule.b_initial));
        let rot = frame_rotation(rwa_freq, t_offset);
        let dressed = bare_to_dressed(&psi, theta);
        psi = [dressed[0] * rot[0].conj(), dressed[1] * rot[1].conj()];
    }

    let mut stepper = stepper::Stepper::new(opts.tol, (total_us * 1e-6).max(1e-6), opts.max_steps);
    stepper.norm_drift = initial.norm_drift;

    let mut trace = PopulationTrace::default();
    let mut record = |t_rel: f64, b: f64, psi: &[C64; 2], drift: f64| {
        let t_abs = t_offset + t_rel;
        let bare = match opts.method {
            Method::LabFrame => *psi,
            Method::RotatingWave => {
                let rot = frame_rotation(rwa_freq, t_abs);
                let lab_dressed = [psi[0] * rot[0], psi[1] * rot[1]];
                dressed_to_bare(&lab_dressed, mixing_angle(&frame.at_field(b)))
            }
        };
        let state = QuantumState { amps: bare, time_us: t_abs, norm_drift: drift };
        let (up, lo) = state.dressed_populations(frame, b);
        trace.rows.push(TraceRow {
            time_us: t_abs,
            b_gauss: b,
            pop_b1: state.pop_b1(),
            pop_b2: state.pop_b2(),
            pop_upper_dressed: up,
            pop_lower_dressed: lo,
            norm: state.norm_sqr().sqrt(),
        });
        state
    };

    record(0.0, schedule.b_initial, &psi, stepper.norm_drift);

    let mut t = 0.0;
    let mut next_sample = sample_dt;
    let mut final_state = None;
    for seg in &schedule.segments {
        let duration_us = seg.duration_ms * 1e3;
        let chart = SegmentChart {
            frame,
            seg,
            t_start_us: t_offset + t,
            duration_us,
            rwa_freq,
        };
        let seg_end = t + duration_us;
        while t < seg_end - 1e-12 * total_us.max(1.0) {
            let target = next_sample.min(seg_end);
            match opts.method {
                Method::LabFrame => {
                    let h = |tt: f64| chart.lab_coeffs(tt);
                    stepper.advance(&mut psi, t_offset + t, t_offset + target, &h)?
                }
                Method::RotatingWave => {
                    let h = |tt: f64| chart.rwa_coeffs(tt);
                    stepper.advance(&mut psi, t_offset + t, t_offset + target, &h)?
                }
            }
            t = target;
            let state = record(t, chart.b_at(t_offset + t), &psi, stepper.norm_drift);
            if t >= next_sample {
                next_sample += sample_dt;
            }
            final_state = Some(state);
        }
        t = seg_end;
    }

    let final_state = match final_state {
        Some(s) => s,
        None => record(0.0, schedule.b_initial, &psi, stepper.norm_drift),
    };
    Ok(Propagation { final_state, trace })
}

/// Landau-Zener branch-transfer probability for a linear sweep.
///
/// `omega_r` is the angular gap frequency in rad/µs (the rf Rabi frequency
/// for a drive-induced crossing, or 2π·Ω for a bare crossing), `ramp_speed`
/// the field sweep rate in G/ms, `dmu` the relative slope of the crossing
/// lines in MHz/G.
///
/// Unit bookkeeping for the exponent π ω_R² ħ / (2 |Ḃ| |µ2 − µ1|): write
/// ω_R = 2π f_R with f_R in MHz = 1/µs and the moment difference as an
/// E/h slope in MHz/G, so ħ ω_R² / |µ| has units MHz·µs⁻¹·G = G/µs² after
/// dividing by h, and dividing by |Ḃ| in G/µs makes the exponent the pure
/// number π² f_R² / (|Ḃ| |Δµ|) = ω_R² / (4 |Ḃ| |Δµ|).
pub fn landau_zener_probability(
    omega_r_rad_per_us: f64,
    ramp_speed_g_per_ms: f64,
    dmu_mhz_per_g: f64,
) -> f64 {
    assert!(ramp_speed_g_per_ms > 0.0, "ramp speed must be positive");
    assert!(dmu_mhz_per_g != 0.0, "moment difference must be nonzero");
    let bdot = g_per_ms_to_g_per_us(ramp_speed_g_per_ms);
    let exponent = omega_r_rad_per_us * omega_r_rad_per_us / (4.0 * bdot * dmu_mhz_per_g.abs());
    -(-exponent).exp_m1()
}

/// Landau-Zener exponent for the same arguments; exposed for fit seeding
/// and diagnostics.
pub fn landau_zener_exponent(
    omega_r_rad_per_us: f64,
    ramp_speed_g_per_ms: f64,
    dmu_mhz_per_g: f64,
) -> f64 {
    let bdot = g_per_ms_to_g_per_us(ramp_speed_g_per_ms);
    omega_r_rad_per_us * omega_r_rad_per_us / (4.0 * bdot * dmu_mhz_per_g.abs())
}

/// Local Landau-Zener data of the rf-induced crossing that a transfer sweep
/// actually traverses.
#[derive(Clone, Copy, Debug)]
pub struct RfCrossingLz {
    /// Bare detuning at the rf-induced crossing, MHz.
    pub detuning_mhz: f64,
    /// Physical gap B_rf·|⟨u|M|l⟩| there, MHz.
    pub gap_mhz: f64,
    /// Relative slope |d(splitting − f_rf)/dB| there, MHz/G.
    pub slope_mhz_per_g: f64,
}

/// Effective gap and slope at the rf-induced crossing for a blue-detuned
/// drive; `None` when `f_rf <= Ω` (no crossing is induced).
///
/// The dressed branches approach each other with relative slope
/// (δc/f_rf)·|Δµ| rather than the full |Δµ|, and the gap is set by the
/// bra-ket coupling element, half the peak-normalized moment. Both
/// corrections matter when predictions are compared against propagation.
pub fn rf_crossing_lz(frame: &CrossingFrame, b_rf: f64, f_rf: f64) -> Option<RfCrossingLz> {
    if f_rf <= frame.omega {
        return None;
    }
    let detuning = ((f_rf - frame.omega) * (f_rf + frame.omega)).sqrt();
    let gap = rf_gap(&frame.at_detuning(detuning), b_rf);
    let slope = detuning / f_rf * frame.dmu().abs();
    Some(RfCrossingLz { detuning_mhz: detuning, gap_mhz: gap, slope_mhz_per_g: slope })
}

/// Predicted transfer efficiency of a single rf-crossing sweep.
pub fn rf_sweep_efficiency(
    frame: &CrossingFrame,
    b_rf: f64,
    f_rf: f64,
    ramp_speed_g_per_ms: f64,
) -> Option<f64> {
    rf_crossing_lz(frame, b_rf, f_rf).map(|lz| {
        landau_zener_probability(TAU * lz.gap_mhz, ramp_speed_g_per_ms, lz.slope_mhz_per_g)
    })
}

/// Which dressed branch a state mostly occupies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Upper,
    Lower,
}

/// Outcome of a transfer protocol run.
#[derive(Clone, Debug)]
pub struct TransferResult {
    /// Population of the branch opposite the initial one at schedule end.
    pub efficiency: f64,
    pub initial_branch: Branch,
    pub final_state: QuantumState,
    pub trace: PopulationTrace,
    pub schedule_duration_ms: f64,
}

/// Options for [`atac_transfer`].
#[derive(Clone, Copy, Debug)]
pub struct AtacOptions {
    /// Linear rf rise/fall time; `None` keeps the rectangular default.
    pub rise_us: Option<f64>,
    pub propagate: PropagateOptions,
}

impl Default for AtacOptions {
    fn default() -> Self {
        Self { rise_us: None, propagate: PropagateOptions::default() }
    }
}

/// Build the transfer schedule: ramp to the crossing field with rf off,
/// switch the blue-detuned drive on between the two rf-induced crossings,
/// then ramp out through the one on the destination side and switch off.
pub fn atac_schedule(
    frame: &CrossingFrame,
    b_rf: f64,
    f_rf: f64,
    b_from: f64,
    b_to: f64,
    ramp_speed_g_per_ms: f64,
    rise_us: Option<f64>,
) -> Result<PulseSchedule, DynamicsError> {
    if f_rf <= frame.omega {
        return Err(DynamicsError::Geometry(format!(
            "rf frequency {f_rf} MHz is not blue-detuned against the {} MHz splitting",
            frame.omega
        )));
    }
    let induced = rf_induced_crossings(frame, f_rf);
    let (lo, hi) = (induced[0], induced[1]);
    let (b_min, b_max) = (b_from.min(b_to), b_from.max(b_to));
    if !(b_min < lo && hi < b_max) {
        return Err(DynamicsError::Geometry(format!(
            "rf-induced crossings at {lo} and {hi} G must lie strictly between \
             the sweep endpoints {b_from} and {b_to} G"
        )));
    }

    let envelope = match rise_us {
        Some(rise) => Envelope::LinearRamp { rise_us: rise },
        None => Envelope::Rectangular,
    };
    let rf = RfDrive { amplitude_g: b_rf, freq_mhz: f_rf, phase_rad: 0.0, envelope };

    let b_on = frame.b0;
    let mut segments = Vec::new();
    if (b_from - b_on).abs() > 0.0 {
        segments.push(RampSegment::ramp(b_from, b_on, ramp_speed_g_per_ms, None));
    }
    segments.push(RampSegment::ramp(b_on, b_to, ramp_speed_g_per_ms, Some(rf)));
    PulseSchedule::new(b_from, segments)
}

/// Run the adiabatic rf transfer across one crossing and report the branch
/// populations. Starts from the upper dressed state at `b_from` unless
/// `initial` is given (e.g. to chain a return pass).
pub fn atac_transfer(
    frame: &CrossingFrame,
    b_rf: f64,
    f_rf: f64,
    b_from: f64,
    b_to: f64,
    ramp_speed_g_per_ms: f64,
    initial: Option<QuantumState>,
    opts: &AtacOptions,
) -> Result<TransferResult, DynamicsError> {
    let schedule =
        atac_schedule(frame, b_rf, f_rf, b_from, b_to, ramp_speed_g_per_ms, opts.rise_us)?;
    transfer_over(frame, &schedule, initial, &opts.propagate)
}

/// Propagate `schedule` and summarize it as a branch transfer.
pub fn transfer_over(
    frame: &CrossingFrame,
    schedule: &PulseSchedule,
    initial: Option<QuantumState>,
    opts: &PropagateOptions,
) -> Result<TransferResult, DynamicsError> {
    let initial = initial.unwrap_or_else(|| QuantumState::dressed_upper(frame, schedule.b_initial));
    let (u0, l0) = initial.dressed_populations(frame, schedule.b_initial);
    let initial_branch = if u0 >= l0 { Branch::Upper } else { Branch::Lower };

    let run = propagate(&initial, frame, schedule, opts)?;
    let (uf, lf) = run.final_state.dressed_populations(frame, schedule.b_final());
    let efficiency = match initial_branch {
        Branch::Upper => lf,
        Branch::Lower => uf,
    };
    Ok(TransferResult {
        efficiency,
        initial_branch,
        final_state: run.final_state,
        trace: run.trace,
        schedule_duration_ms: schedule.total_duration_ms(),
    })
}

/// Time to a π pulse for a physical gap in MHz: population follows
/// sin²(π·gap·t).
pub fn pi_pulse_us(gap_mhz: f64) -> f64 {
    0.5 / gap_mhz
}

/// Transition moment fitted from a transfer-efficiency-vs-amplitude curve.
#[derive(Clone, Copy, Debug)]
pub struct LzMomentFit {
    pub moment_mhz_per_g: f64,
    pub sigma_mhz_per_g: f64,
}

/// Fit the Landau-Zener saturation curve
/// P(B_rf) = 1 − exp(−(2π B_rf µ)² / (4 Ḃ |Δµ|)) to an efficiency series
/// and extract the transition moment µ with its standard error.
pub fn extract_lz_fit(
    efficiency_vs_brf: &[(f64, f64)],
    ramp_speed_g_per_ms: f64,
    dmu_mhz_per_g: f64,
) -> Result<LzMomentFit, DynamicsError> {
    if efficiency_vs_brf.len() < 5 {
        return Err(DynamicsError::DegenerateData(format!(
            "need at least 5 points, got {}",
            efficiency_vs_brf.len()
        )));
    }
    let max_eff = efficiency_vs_brf.iter().map(|p| p.1).fold(f64::MIN, f64::max);
    let min_eff = efficiency_vs_brf.iter().map(|p| p.1).fold(f64::MAX, f64::min);
    if max_eff < 0.02 {
        return Err(DynamicsError::DegenerateData(
            "all efficiencies are zero; no transfer to fit".into(),
        ));
    }
    if min_eff > 0.98 {
        return Err(DynamicsError::DegenerateData(
            "all efficiencies are saturated; the moment is unconstrained".into(),
        ));
    }

    // Seed from the most informative point (efficiency nearest 0.5).
    let bdot = g_per_ms_to_g_per_us(ramp_speed_g_per_ms);
    let seed_point = efficiency_vs_brf
        .iter()
        .filter(|p| p.0 > 0.0 && p.1 > 0.001 && p.1 < 0.999)
        .min_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()))
        .ok_or_else(|| {
            DynamicsError::DegenerateData("no unsaturated nonzero point to seed the fit".into())
        })?;
    let x0 = -(-seed_point.1).ln_1p();
    let mu0 = (x0 * 4.0 * bdot * dmu_mhz_per_g.abs()).sqrt() / (TAU * seed_point.0);

    let data = efficiency_vs_brf.to_vec();
    let outcome = fit::levenberg_marquardt(
        |p, out| {
            for (i, (brf, eff)) in data.iter().enumerate() {
                out[i] =
                    landau_zener_probability(TAU * brf * p[0], ramp_speed_g_per_ms, dmu_mhz_per_g)
                        - eff;
            }
        },
        &[mu0],
        data.len(),
        &Bounds { lower: vec![0.0], upper: vec![f64::INFINITY] },
        &FitOptions::default(),
    )?;
    Ok(LzMomentFit { moment_mhz_per_g: outcome.params[0], sigma_mhz_per_g: outcome.sigmas[0] })
}

/// Survival factor of a one-body lifetime over a duration.
pub fn lifetime_survival(duration_ms: f64, lifetime_tau_ms: Option<f64>) -> f64 {
    match lifetime_tau_ms {
        Some(tau) => (-duration_ms / tau).exp(),
        None => 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossing::rabi_frequency;

    fn frame_a() -> CrossingFrame {
        CrossingFrame::new(13.332, 0.0, 2.8, 1001.4)
    }

    fn hold_schedule(b: f64, duration_ms: f64, rf: Option<RfDrive>) -> PulseSchedule {
        PulseSchedule::new(b, vec![RampSegment::hold(duration_ms, b, rf)]).unwrap()
    }

    #[test]
    fn schedule_validation_catches_discontinuity() {
        let bad = PulseSchedule::new(
            1000.0,
            vec![
                RampSegment { duration_ms: 1.0, b_start: 1000.0, b_end: 999.0, rf: None },
                RampSegment { duration_ms: 1.0, b_start: 998.5, b_end: 998.0, rf: None },
            ],
        );
        assert!(matches!(bad, Err(DynamicsError::InvalidSchedule(_))));
    }

    #[test]
    fn reversed_schedule_mirrors_fields() {
        let s = PulseSchedule::new(
            1000.0,
            vec![
                RampSegment { duration_ms: 1.0, b_start: 1000.0, b_end: 999.0, rf: None },
                RampSegment { duration_ms: 2.0, b_start: 999.0, b_end: 997.0, rf: None },
            ],
        )
        .unwrap();
        let r = s.reversed();
        r.validate().unwrap();
        assert_eq!(r.b_initial, 997.0);
        assert_eq!(r.b_final(), 1000.0);
        assert_eq!(r.total_duration_ms(), 3.0);
    }

    #[test]
    fn uncoupled_levels_keep_their_populations() {
        // Zero coupling and no drive: diagonal Hamiltonian.
        let frame = CrossingFrame { delta: 0.0, omega: 0.0, mu1: 0.0, mu2: 2.8, b0: 1001.4 };
        let schedule = hold_schedule(1003.0, 0.5, None);
        let initial = QuantumState::new([
            C64::new(0.6, 0.0),
            C64::new(0.0, 0.8),
        ]);
        let run = propagate(&initial, &frame, &schedule, &PropagateOptions::default()).unwrap();
        assert!((run.final_state.pop_b1() - 0.36).abs() < 1e-12);
        assert!((run.final_state.pop_b2() - 0.64).abs() < 1e-12);
    }

    #[test]
    fn bare_states_flop_at_the_coupling_frequency() {
        // At B0 with no drive, P_b2(t) = sin²(π Ω t).
        let frame = CrossingFrame::new(0.8, 0.0, 2.8, 1001.4);
        let t_ms = 2.3e-3;
        let schedule = hold_schedule(frame.b0, t_ms, None);
        let run =
            propagate(&QuantumState::bare1(), &frame, &schedule, &PropagateOptions::default())
                .unwrap();
        let expected = (std::f64::consts::PI * frame.omega * t_ms * 1e3).sin().powi(2);
        assert!((run.final_state.pop_b2() - expected).abs() < 1e-7);
    }

    /// Population oscillation under a resonant cosine drive proceeds at the
    /// bra-ket gap B_rf·|⟨u|M|l⟩|, i.e. at half the conventional Rabi rate
    /// built on the peak-normalized moment. Measured from the spacing of
    /// the half-population crossings of a lab-frame propagation.
    #[test]
    fn resonant_drive_gap_is_half_the_conventional_rabi_rate() {
        let frame = frame_a();
        let b_rf = 0.05;
        let f_rf = frame.omega; // resonant at B0
        let gap = rf_gap(&frame, b_rf); // MHz
        let rf = RfDrive {
            amplitude_g: b_rf,
            freq_mhz: f_rf,
            phase_rad: 0.0,
            envelope: Envelope::Rectangular,
        };
        // Simulate one full flop cycle.
        let t_ms = 1.0 / gap * 1.1e-3;
        let schedule = hold_schedule(frame.b0, t_ms, Some(rf));
        let initial = QuantumState::dressed_upper(&frame, frame.b0);
        let opts = PropagateOptions { trace_samples: 4000, ..Default::default() };
        let run = propagate(&initial, &frame, &schedule, &opts).unwrap();

        // Times where the lower-branch population crosses one half.
        let mut crossings = Vec::new();
        for pair in run.trace.rows.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if (a.pop_lower_dressed - 0.5) * (b.pop_lower_dressed - 0.5) < 0.0 {
                let frac = (0.5 - a.pop_lower_dressed)
                    / (b.pop_lower_dressed - a.pop_lower_dressed);
                crossings.push(a.time_us + frac * (b.time_us - a.time_us));
            }
        }
        assert!(crossings.len() >= 2, "expected at least two half crossings");
        let measured_gap = 0.5 / (crossings[1] - crossings[0]);
        assert!(
            (measured_gap - gap).abs() < 5e-3 * gap,
            "measured {measured_gap} MHz vs physical gap {gap} MHz"
        );
        // And the conventional rate is exactly twice that.
        let omega_r = rabi_frequency(&frame, b_rf);
        assert!((omega_r / TAU - 2.0 * gap).abs() < 1e-12);
    }

    #[test]
    fn landau_zener_limits_and_paper_scale() {
        assert_eq!(landau_zener_probability(0.0, 1.3, 2.8), 0.0);
        // Adiabatic limit.
        assert!((landau_zener_probability(1.0, 1e-9, 2.8) - 1.0).abs() < 1e-12);
        // 2π × 70 kHz drive, 1.3 G/ms, 2.8 MHz/G: exponent ≈ 13.3.
        let x = landau_zener_exponent(TAU * 0.07, 1.3, 2.8);
        assert!((x - 13.29).abs() < 0.05);
        let p = landau_zener_probability(TAU * 0.07, 1.3, 2.8);
        assert!(1.0 - p < 2.5e-6 && 1.0 - p > 1.0e-6);
    }

    #[test]
    fn single_bare_crossing_sweep_matches_landau_zener() {
        // Sweep a weakly coupled synthetic crossing from far above to far
        // below at a speed placing the exponent near one.
        let omega = 0.05;
        let frame = CrossingFrame::new(omega, 0.0, 1.0, 500.0);
        let exponent = 1.0;
        let speed_g_per_us = std::f64::consts::PI.powi(2) * omega * omega / exponent;
        let speed = speed_g_per_us * 1e3; // G/ms
        let span = 40.0 * omega / frame.dmu(); // |δ| = 40 Ω at the ends
        let schedule = PulseSchedule::new(
            frame.b0 + span,
            vec![RampSegment::ramp(frame.b0 + span, frame.b0 - span, speed, None)],
        )
        .unwrap();
        // Dressed endpoints suppress the finite-window boundary term that a
        // bare-state start would leave at O(Ω/δ_max).
        let run = propagate(
            &QuantumState::dressed_upper(&frame, frame.b0 + span),
            &frame,
            &schedule,
            &PropagateOptions { tol: 1e-10, ..Default::default() },
        )
        .unwrap();
        let (stayed_adiabatic, _) =
            run.final_state.dressed_populations(&frame, frame.b0 - span);
        let analytic = landau_zener_probability(TAU * omega, speed, frame.dmu());
        assert!(
            (stayed_adiabatic - analytic).abs() < 5e-3,
            "sweep gave {stayed_adiabatic}, analytic {analytic}"
        );
    }

    #[test]
    fn atac_geometry_is_checked() {
        let frame = frame_a();
        // Red-detuned drive.
        assert!(matches!(
            atac_schedule(&frame, 0.05, 10.0, 1007.4, 1000.0, 1.3, None),
            Err(DynamicsError::Geometry(_))
        ));
        // Endpoints do not bracket the induced crossings.
        assert!(matches!(
            atac_schedule(&frame, 0.05, 13.6, 1002.0, 1001.0, 1.3, None),
            Err(DynamicsError::Geometry(_))
        ));
        let ok = atac_schedule(&frame, 0.05, 13.6, 1007.4, 999.5, 1.3, None).unwrap();
        ok.validate().unwrap();
        assert_eq!(ok.b_initial, 1007.4);
        assert_eq!(ok.b_final(), 999.5);
    }

    #[test]
    fn zero_amplitude_transfer_does_nothing() {
        let frame = frame_a();
        let res = atac_transfer(
            &frame,
            0.0,
            13.6,
            1004.0,
            999.5,
            4.0,
            None,
            &AtacOptions::default(),
        )
        .unwrap();
        assert!(res.efficiency < 1e-3, "efficiency {} without drive", res.efficiency);
        assert_eq!(res.initial_branch, Branch::Upper);
    }

    #[test]
    fn norm_is_conserved_without_renormalization() {
        let frame = frame_a();
        let res = atac_transfer(
            &frame,
            0.05,
            13.6,
            1003.0,
            999.8,
            1.3,
            None,
            &AtacOptions { rise_us: Some(10.0), ..Default::default() },
        )
        .unwrap();
        for row in &res.trace.rows {
            assert!((row.norm - 1.0).abs() <= 100.0 * 1e-9);
            assert!((row.pop_b1 + row.pop_b2 - 1.0).abs() < 1e-9);
            assert!((row.pop_upper_dressed + row.pop_lower_dressed - 1.0).abs() < 1e-9);
        }
        assert!(res.final_state.norm_drift <= 100.0 * 1e-9);
    }

    #[test]
    fn lz_fit_recovers_synthetic_moment() {
        let (moment, speed, dmu) = (1.4, 1.3, 2.8);
        let points: Vec<(f64, f64)> = (1..=12)
            .map(|k| {
                let brf = k as f64 * 0.004;
                (brf, landau_zener_probability(TAU * brf * moment, speed, dmu))
            })
            .collect();
        let fit = extract_lz_fit(&points, speed, dmu).unwrap();
        assert!(
            (fit.moment_mhz_per_g - moment).abs() < 0.01 * moment,
            "recovered {}",
            fit.moment_mhz_per_g
        );
    }

    #[test]
    fn lz_fit_rejects_degenerate_data() {
        let zeros: Vec<(f64, f64)> = (1..=6).map(|k| (k as f64 * 0.01, 0.0)).collect();
        assert!(matches!(
            extract_lz_fit(&zeros, 1.3, 2.8),
            Err(DynamicsError::DegenerateData(_))
        ));
        let saturated: Vec<(f64, f64)> = (1..=6).map(|k| (k as f64 * 0.01, 1.0)).collect();
        assert!(matches!(
            extract_lz_fit(&saturated, 1.3, 2.8),
            Err(DynamicsError::DegenerateData(_))
        ));
        let short = vec![(0.01, 0.5), (0.02, 0.9)];
        assert!(matches!(
            extract_lz_fit(&short, 1.3, 2.8),
            Err(DynamicsError::DegenerateData(_))
        ));
    }

    #[test]
    fn tolerance_bounds_enforced() {
        let frame = frame_a();
        let schedule = hold_schedule(frame.b0, 0.01, None);
        let opts = PropagateOptions { tol: 1e-3, ..Default::default() };
        assert!(matches!(
            propagate(&QuantumState::bare1(), &frame, &schedule, &opts),
            Err(DynamicsError::InvalidTolerance(_))
        ));
    }
}
