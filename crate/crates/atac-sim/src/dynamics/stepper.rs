//! Adaptive unitary stepper for the two-level Schrödinger equation.
//!
//! The Hamiltonian is supplied as real Pauli coefficients h(t) = (hx, hy, hz)
//! in E/h MHz (traceless part only; the mean energy is a global phase). A
//! step is the exact exponential of the fourth-order Magnus expansion on two
//! Gauss-Legendre nodes,
//!
//! ```text
//!   Ω(dt) = -i [ 2π dt h̄ + (2π dt)² (√3/6) (h₂ × h₁) ] · σ
//! ```
//!
//! which is unitary to machine precision for any step size, so norm is
//! conserved exactly and the tolerance only controls phase/population
//! accuracy. Step-size control is by step doubling with the fifth-order
//! local error exponent.

use num_complex::Complex64 as C64;

use crate::units::TAU;

/// Gauss-Legendre nodes on [0, 1].
const GAUSS_LO: f64 = 0.5 - 0.288675134594812882; // 1/2 - √3/6
const GAUSS_HI: f64 = 0.5 + 0.288675134594812882;

const SAFETY: f64 = 0.9;
const GROW_MAX: f64 = 5.0;
const SHRINK_MIN: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum StepError {
    #[error("dynamics: step size underflow at t = {t_us} µs; the schedule is too stiff for the requested tolerance")]
    Underflow { t_us: f64 },
    #[error("dynamics: step budget exhausted at t = {t_us} µs")]
    Budget { t_us: f64 },
}

/// Apply exp(-i v·σ) to the state in place.
#[inline]
fn rotate(psi: &mut [C64; 2], v: [f64; 3]) {
    let angle = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if angle == 0.0 {
        return;
    }
    let (s, c) = angle.sin_cos();
    let k = s / angle;
    let (nx, ny, nz) = (v[0] * k, v[1] * k, v[2] * k);
    let (a, b) = (psi[0], psi[1]);
    // U = c·I - i(nx σx + ny σy + nz σz)
    psi[0] = C64::new(c, -nz) * a + C64::new(-ny, -nx) * b;
    psi[1] = C64::new(ny, -nx) * a + C64::new(c, nz) * b;
}

/// Magnus rotation vector for one step of size `dt` starting at `t`.
#[inline]
fn magnus_vector<H: Fn(f64) -> [f64; 3]>(h: &H, t: f64, dt: f64) -> [f64; 3] {
    let h1 = h(t + GAUSS_LO * dt);
    let h2 = h(t + GAUSS_HI * dt);
    let w = TAU * dt;
    let cross_scale = w * w * (3f64.sqrt() / 6.0);
    [
        w * 0.5 * (h1[0] + h2[0]) + cross_scale * (h2[1] * h1[2] - h2[2] * h1[1]),
        w * 0.5 * (h1[1] + h2[1]) + cross_scale * (h2[2] * h1[0] - h2[0] * h1[2]),
        w * 0.5 * (h1[2] + h2[2]) + cross_scale * (h2[0] * h1[1] - h2[1] * h1[0]),
    ]
}

/// Integration bookkeeping carried across spans of one propagation.
pub struct Stepper {
    /// Per-step local error bound.
    pub tol: f64,
    /// Current trial step, µs.
    pub dt: f64,
    /// Remaining accepted-step budget.
    pub budget: usize,
    /// Running maximum of |1 - ⟨ψ|ψ⟩| over accepted steps.
    pub norm_drift: f64,
}

impl Stepper {
    pub fn new(tol: f64, dt_init: f64, budget: usize) -> Self {
        Self { tol, dt: dt_init, budget, norm_drift: 0.0 }
    }

    /// Advance `psi` from `t0` to `t1` under the Hamiltonian closure `h`.
    pub fn advance<H: Fn(f64) -> [f64; 3]>(
        &mut self,
        psi: &mut [C64; 2],
        t0: f64,
        t1: f64,
        h: &H,
    ) -> Result<(), StepError> {
        debug_assert!(t1 >= t0);
        let span = t1 - t0;
        if span == 0.0 {
            return Ok(());
        }
        let dt_floor = (span * 1e-14).max(1e-13);
        let mut t = t0;
        while t < t1 {
            // Remaining interval at rounding level: the target is reached.
            if t1 - t <= (t1.abs() + 1.0) * 1e-15 {
                break;
            }
            let dt = self.dt.min(t1 - t);
            if dt < dt_floor && t + dt < t1 {
                return Err(StepError::Underflow { t_us: t });
            }

            // One full step against two half steps.
            let mut full = *psi;
            rotate(&mut full, magnus_vector(h, t, dt));
            let mut halves = *psi;
            rotate(&mut halves, magnus_vector(h, t, 0.5 * dt));
            rotate(&mut halves, magnus_vector(h, t + 0.5 * dt, 0.5 * dt));

            let err = ((full[0] - halves[0]).norm_sqr() + (full[1] - halves[1]).norm_sqr())
                .sqrt();

            if err <= self.tol {
                *psi = halves;
                t += dt;
                if self.budget == 0 {
                    return Err(StepError::Budget { t_us: t });
                }
                self.budget -= 1;
                let n2 = psi[0].norm_sqr() + psi[1].norm_sqr();
                let drift = (1.0 - n2).abs();
                if drift > self.norm_drift {
                    self.norm_drift = drift;
                }
                let grow = if err == 0.0 {
                    GROW_MAX
                } else {
                    (SAFETY * (self.tol / err).powf(0.2)).min(GROW_MAX)
                };
                self.dt = dt * grow.max(1.0);
            } else {
                let shrink = (SAFETY * (self.tol / err).powf(0.2)).max(SHRINK_MIN);
                self.dt = dt * shrink;
                if self.dt < dt_floor {
                    return Err(StepError::Underflow { t_us: t });
                }
            }
        }
        Ok(())
    }
}
