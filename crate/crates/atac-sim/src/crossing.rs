//! Closed-form two-level algebra for a single avoided crossing.
//!
//! Two bare levels |b1⟩, |b2⟩ with magnetic moments µ1, µ2 cross at a field
//! B0 and are coupled with strength Ω (quoted as the minimal energy
//! splitting, E/h in MHz). In the bare basis the static Hamiltonian is
//!
//! ```text
//!     H(B)/h = (B − B0) · diag(µ1, µ2) + (Ω/2) · offdiag
//! ```
//!
//! and everything in this module is a function of the detuning
//! δ = (µ2 − µ1)(B − B0) and Ω: dressed energies, mixing angle, the rf
//! transition moment between the dressed branches, and the fields where a
//! blue-detuned rf drive induces crossings in the dressed picture.

use serde::{Deserialize, Serialize};

use crate::units::TAU;

/// A single avoided crossing evaluated at one operating point.
///
/// `delta` is the detuning at the operating field; the remaining fields are
/// the chart of the crossing itself. Construct with [`CrossingFrame::new`]
/// (which sits at B0, δ = 0) and move along the field axis with
/// [`CrossingFrame::at_field`] or [`CrossingFrame::at_detuning`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingFrame {
    /// Detuning δ = (µ2 − µ1)(B − B0) at the operating point, MHz.
    pub delta: f64,
    /// Coupling Ω, equal to the minimal energy splitting, MHz.
    pub omega: f64,
    /// Magnetic moment of bare level |b1⟩, MHz/G.
    pub mu1: f64,
    /// Magnetic moment of bare level |b2⟩, MHz/G.
    pub mu2: f64,
    /// Field where the bare levels intersect, G.
    pub b0: f64,
}

/// Dressed eigenpair of the static two-level Hamiltonian at one field.
///
/// `state_upper`/`state_lower` are real unit vectors in the bare basis
/// {|b1⟩, |b2⟩}: upper = (cos θ, sin θ), lower = (−sin θ, cos θ).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DressedPair {
    /// Upper-branch energy relative to the bare crossing energy, MHz.
    pub e_upper: f64,
    /// Lower-branch energy relative to the bare crossing energy, MHz.
    pub e_lower: f64,
    /// Mixing angle θ ∈ (0, π/2).
    pub theta: f64,
    pub state_upper: [f64; 2],
    pub state_lower: [f64; 2],
}

impl CrossingFrame {
    /// Frame sitting exactly at the crossing field (δ = 0).
    ///
    /// Panics if `omega <= 0` or `mu1 == mu2`; loaded manifolds validate
    /// these before any frame is built.
    pub fn new(omega: f64, mu1: f64, mu2: f64, b0: f64) -> Self {
        assert!(omega > 0.0, "coupling must be positive");
        assert!(mu1 != mu2, "magnetic moments must differ");
        Self { delta: 0.0, omega, mu1, mu2, b0 }
    }

    /// Moment difference µ2 − µ1, MHz/G.
    #[inline]
    pub fn dmu(&self) -> f64 {
        self.mu2 - self.mu1
    }

    /// Same crossing, operating point moved to field `b`.
    #[inline]
    pub fn at_field(&self, b: f64) -> Self {
        Self { delta: self.dmu() * (b - self.b0), ..*self }
    }

    /// Same crossing, operating point moved to detuning `delta`.
    #[inline]
    pub fn at_detuning(&self, delta: f64) -> Self {
        Self { delta, ..*self }
    }

    /// Field corresponding to detuning `delta`, G.
    #[inline]
    pub fn field_at_detuning(&self, delta: f64) -> f64 {
        self.b0 + delta / self.dmu()
    }

    /// Operating field of this frame, G.
    #[inline]
    pub fn field(&self) -> f64 {
        self.field_at_detuning(self.delta)
    }

    /// Dressed energy splitting sqrt(δ² + Ω²) at the operating point, MHz.
    #[inline]
    pub fn splitting(&self) -> f64 {
        self.delta.hypot(self.omega)
    }

    /// Dressed energy splitting at field `b`, MHz.
    #[inline]
    pub fn splitting_at_field(&self, b: f64) -> f64 {
        self.at_field(b).splitting()
    }
}

/// Mixing angle θ = arctan((δ + sqrt(δ² + Ω²)) / Ω) ∈ (0, π/2).
///
/// θ = π/4 at the crossing, → 0 for δ → −∞ and → π/2 for δ → +∞. The
/// expression is evaluated in a cancellation-free form for δ < 0.
pub fn mixing_angle(frame: &CrossingFrame) -> f64 {
    let (d, w) = (frame.delta, frame.omega);
    let hyp = d.hypot(w);
    let t = if d >= 0.0 {
        (d + hyp) / w
    } else {
        // δ + sqrt(δ² + Ω²) loses precision for large negative δ.
        w / (hyp - d)
    };
    t.atan()
}

/// Dressed eigenpair of the static Hamiltonian at the frame's field.
///
/// Energies are measured relative to the degeneracy point: the mean shift
/// (µ1 + µ2)(B − B0)/2 is included so that E_upper and E_lower track the
/// actual branch energies, and E_upper − E_lower = sqrt(δ² + Ω²).
pub fn dressed_pair(frame: &CrossingFrame) -> DressedPair {
    let theta = mixing_angle(frame);
    let half = 0.5 * frame.splitting();
    let mean = 0.5 * (frame.mu1 + frame.mu2) * frame.delta / frame.dmu();
    let (s, c) = theta.sin_cos();
    DressedPair {
        e_upper: mean + half,
        e_lower: mean - half,
        theta,
        state_upper: [c, s],
        state_lower: [-s, c],
    }
}

/// Magnetic-dipole transition moment µ_{u,l} between the dressed branches,
/// MHz/G.
///
/// This is the closed form (µ2 − µ1) · Ω / sqrt(δ² + Ω²), equivalently
/// (µ2 − µ1) sin 2θ: peaked at the crossing with value µ2 − µ1, half
/// maximum at δ = ±√3 Ω (FWHM 2√3 Ω), and falling off as Ω/|δ| far away.
///
/// The direct matrix element ⟨u| diag(µ1, µ2) |l⟩ evaluates to exactly half
/// this value (see [`transition_moment_braket`]); the conventional moment
/// counts both rotating components of a cosine drive, and it is the one
/// that pairs with [`rabi_frequency`] in the Landau-Zener fits.
pub fn transition_moment(frame: &CrossingFrame) -> f64 {
    frame.dmu() * frame.omega / frame.splitting()
}

/// Direct bra-ket evaluation ⟨u| diag(µ1, µ2) |l⟩ = (µ2 − µ1) sin θ cos θ.
///
/// Equal to [`transition_moment`] / 2 identically in δ. This is the
/// coupling element that actually appears in the dressed-basis Hamiltonian,
/// so the physical splitting of an rf-induced crossing driven by
/// B_rf cos(ωt) is B_rf · |transition_moment_braket| (see [`rf_gap`]).
pub fn transition_moment_braket(frame: &CrossingFrame) -> f64 {
    let theta = mixing_angle(frame);
    frame.dmu() * theta.sin() * theta.cos()
}

/// Rabi frequency ω_R = 2π · B_rf · |µ_{u,l}| in rad/µs.
///
/// `b_rf` is the rf field amplitude in G. This is the conventional rate
/// B_rf µ_{u,l} built on the peak-normalized closed-form moment; the
/// population oscillation of the driven pair proceeds at half this rate
/// (see [`rf_gap`]).
pub fn rabi_frequency(frame: &CrossingFrame, b_rf: f64) -> f64 {
    assert!(b_rf >= 0.0, "rf amplitude must be non-negative");
    TAU * b_rf * transition_moment(frame).abs()
}

/// Physical splitting (E/h, MHz) of an rf-induced crossing under a drive
/// B_rf cos(2π f t): B_rf · |⟨u| diag(µ1, µ2) |l⟩|.
///
/// Equals [`rabi_frequency`] / (4π). Population at resonance oscillates as
/// sin²(π · rf_gap · t).
pub fn rf_gap(frame: &CrossingFrame, b_rf: f64) -> f64 {
    b_rf * transition_moment_braket(frame).abs()
}

/// Fields where a drive at `f_rf` (MHz) induces avoided crossings in the
/// dressed picture, i.e. solutions of sqrt(δ(B)² + Ω²) = f_rf.
///
/// Returns two fields B0 ± sqrt(f_rf² − Ω²)/|µ2 − µ1| for blue detuning
/// (f_rf > Ω), the single tangency field B0 for f_rf = Ω, and nothing for
/// red detuning. Results are sorted ascending.
pub fn rf_induced_crossings(frame: &CrossingFrame, f_rf: f64) -> Vec<f64> {
    assert!(f_rf > 0.0, "rf frequency must be positive");
    if f_rf < frame.omega {
        return Vec::new();
    }
    if f_rf == frame.omega {
        return vec![frame.b0];
    }
    let dc = ((f_rf - frame.omega) * (f_rf + frame.omega)).sqrt();
    let half_span = dc / frame.dmu().abs();
    vec![frame.b0 - half_span, frame.b0 + half_span]
}
