//! Unit conventions and physical constants.
//!
//! | quantity           | unit    |
//! |--------------------|---------|
//! | magnetic field     | G       |
//! | energy             | E/h MHz |
//! | magnetic moment    | MHz/G   |
//! | schedule duration  | ms      |
//! | dynamics time      | µs      |
//! | angular frequency  | rad/µs  |
//!
//! Energies are stored as E/h, so 1 MHz of "energy" accumulates a phase of
//! 2π per µs and no factor of ħ ever appears in the propagation equations.

/// Bohr magneton divided by Planck's constant, in MHz/G.
pub const MU_B_MHZ_PER_G: f64 = 1.399624;

/// 2π, the cyclic-to-angular frequency factor.
pub const TAU: f64 = std::f64::consts::TAU;

/// Convert a cyclic frequency in MHz to an angular frequency in rad/µs.
#[inline]
pub fn mhz_to_rad_per_us(f_mhz: f64) -> f64 {
    TAU * f_mhz
}

/// Convert an angular frequency in rad/µs to a cyclic frequency in MHz.
#[inline]
pub fn rad_per_us_to_mhz(omega: f64) -> f64 {
    omega / TAU
}

/// Convert a ramp speed in G/ms to G/µs.
#[inline]
pub fn g_per_ms_to_g_per_us(v: f64) -> f64 {
    v * 1e-3
}
