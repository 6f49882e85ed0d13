//! Route planning and schedule compilation over a level manifold.
//!
//! Levels are nodes and avoided crossings are edges. A route from the start
//! level to the goal level is found on that graph, each crossing on the
//! route is assigned an action — an rf transfer window for ordinary
//! splittings, a fast diabatic jump for very narrow ones — and the actions
//! are compiled into one continuous, monotone pulse schedule with travel
//! ramps in between. Predicted per-crossing successes come from the local
//! Landau-Zener data of the traversed rf-induced crossing, and end-to-end
//! survival folds in the one-body lifetime.

use std::collections::VecDeque;
use std::fmt;

use crate::crossing::{transition_moment_braket, CrossingFrame};
use crate::dynamics::{
    landau_zener_exponent, landau_zener_probability, lifetime_survival, rf_crossing_lz,
    transfer_over, DynamicsError, Envelope, PropagateOptions, PulseSchedule, RampSegment, RfDrive,
};
use crate::manifold::{LevelManifold, ManifoldError};
use crate::units::TAU;

/// Tunable planning policy; the defaults reproduce the reference transport
/// scenario (50 mG rf windows swept at 1.3 G/ms, ~2% blue detuning, jumps
/// below 0.2 MHz, ~90 ms for the full eleven-crossing descent).
#[derive(Clone, Copy, Debug)]
pub struct PlannerPolicy {
    /// Crossings at or below this splitting are jumped diabatically, MHz.
    pub jump_threshold_mhz: f64,
    /// Rf amplitude for transfer windows, G.
    pub atac_b_rf_g: f64,
    /// Sweep speed inside transfer windows, G/ms.
    pub atac_ramp_speed_g_per_ms: f64,
    /// Travel speed between action windows, G/ms.
    pub travel_ramp_speed_g_per_ms: f64,
    /// Sweep speed for diabatic jumps, G/ms.
    pub jump_ramp_speed_g_per_ms: f64,
    /// Half width of a jump window, G.
    pub jump_half_window_g: f64,
    /// Blue detuning as a fraction of the splitting.
    pub blue_detuning_frac: f64,
    /// Absolute floor on the blue detuning, MHz; keeps the switch-on
    /// comfortably off-resonant for narrow crossings.
    pub blue_detuning_min_mhz: f64,
    /// Exclusion half-width around foreign crossings, G.
    pub detour_guard_g: f64,
    /// Spacing between the shifted window edge, its rf-induced crossing and
    /// the switch-on point, G.
    pub detour_margin_g: f64,
    /// Minimum acceptable predicted success for a shifted window.
    pub success_floor: f64,
    /// Rf rise/fall time inside windows, µs.
    pub rise_us: Option<f64>,
    /// Field margin above the first window where the schedule starts, G.
    pub approach_margin_g: f64,
    /// Field the schedule descends to after the last action.
    pub final_field_g: Option<f64>,
    /// Route objective: fewest crossings or best estimated survival.
    pub route_objective: RouteObjective,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouteObjective {
    FewestCrossings,
    BestSurvival,
}

impl Default for PlannerPolicy {
    fn default() -> Self {
        Self {
            jump_threshold_mhz: 0.2,
            atac_b_rf_g: 0.05,
            atac_ramp_speed_g_per_ms: 1.3,
            travel_ramp_speed_g_per_ms: 14.0,
            jump_ramp_speed_g_per_ms: 20_000.0,
            jump_half_window_g: 2.5,
            blue_detuning_frac: 0.02,
            blue_detuning_min_mhz: 0.25,
            detour_guard_g: 2.0,
            detour_margin_g: 1.0,
            success_floor: 0.98,
            rise_us: Some(10.0),
            approach_margin_g: 5.0,
            final_field_g: Some(0.0),
            route_objective: RouteObjective::FewestCrossings,
        }
    }
}

/// How one crossing on the route is traversed.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionKind {
    /// Rf transfer window: switch the drive on at `b_on`, sweep to `b_off`
    /// through the rf-induced crossing at `b_crossing`.
    Atac {
        b_rf: f64,
        f_rf: f64,
        ramp_speed_g_per_ms: f64,
        b_on: f64,
        b_off: f64,
        b_crossing: f64,
        /// Window moved off the crossing to clear an obstacle.
        shifted: bool,
    },
    /// Fast sweep straight through the bare crossing.
    DiabaticJump { ramp_speed_g_per_ms: f64, b_enter: f64, b_exit: f64 },
    /// Slow rf-free passage that follows the adiabatic branch.
    AdiabaticTurn,
}

/// One planned crossing traversal.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossingAction {
    pub crossing_id: String,
    pub kind: ActionKind,
    pub predicted_success: f64,
    /// Field span reserved for this action (high, low), G.
    pub window: (f64, f64),
}

impl CrossingAction {
    fn entry_field(&self) -> f64 {
        match &self.kind {
            ActionKind::Atac { b_on, .. } => *b_on,
            ActionKind::DiabaticJump { b_enter, .. } => *b_enter,
            ActionKind::AdiabaticTurn => self.window.0,
        }
    }

    fn exit_field(&self) -> f64 {
        match &self.kind {
            ActionKind::Atac { b_off, .. } => *b_off,
            ActionKind::DiabaticJump { b_exit, .. } => *b_exit,
            ActionKind::AdiabaticTurn => self.window.1,
        }
    }
}

/// A compiled transport plan.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// Level ids along the route, start first.
    pub route_levels: Vec<String>,
    /// Actions in execution (descending-field) order.
    pub actions: Vec<CrossingAction>,
    pub schedule: PulseSchedule,
    pub total_duration_ms: f64,
    /// exp(−T/τ)·Π success, with τ from the manifold when present.
    pub survival: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error("planner: no route from `{start}` to `{goal}` in the crossing graph")]
    Unreachable { start: String, goal: String },
    #[error("planner: crossing `{crossing}`: no valid transfer window ({reason})")]
    NoValidWindow { crossing: String, reason: String },
    #[error("planner: crossing `{crossing}` has ambiguous geometry: {reason}")]
    AmbiguousGeometry { crossing: String, reason: String },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

fn blue_detuned_freq(omega: f64, policy: &PlannerPolicy) -> f64 {
    omega + (policy.blue_detuning_frac * omega).max(policy.blue_detuning_min_mhz)
}

/// Default (on-crossing) transfer window for a descending sweep.
fn default_window(
    frame: &CrossingFrame,
    policy: &PlannerPolicy,
) -> (ActionKind, (f64, f64), f64) {
    let f_rf = blue_detuned_freq(frame.omega, policy);
    let lz = rf_crossing_lz(frame, policy.atac_b_rf_g, f_rf)
        .expect("blue-detuned drive always induces crossings");
    let half_span = lz.detuning_mhz / frame.dmu().abs();
    let b_crossing = frame.b0 - half_span;
    let b_on = frame.b0;
    let b_off = frame.b0 - 2.0 * half_span;
    let pad = (0.25 * half_span).min(1.0);
    let window = (frame.b0 + half_span + pad, b_off);
    let predicted = landau_zener_probability(
        TAU * lz.gap_mhz,
        policy.atac_ramp_speed_g_per_ms,
        lz.slope_mhz_per_g,
    );
    let kind = ActionKind::Atac {
        b_rf: policy.atac_b_rf_g,
        f_rf,
        ramp_speed_g_per_ms: policy.atac_ramp_speed_g_per_ms,
        b_on,
        b_off,
        b_crossing,
        shifted: false,
    };
    (kind, window, predicted)
}

/// Transfer window displaced above the crossing, used to clear an obstacle
/// at higher field: the rf is retuned to the local splitting so that one
/// rf-induced crossing sits inside the displaced window.
fn shifted_window(
    frame: &CrossingFrame,
    policy: &PlannerPolicy,
    clear_above_g: f64,
) -> (ActionKind, (f64, f64), f64) {
    let b_off = clear_above_g;
    let b_crossing = b_off + policy.detour_margin_g;
    let b_on = b_crossing + policy.detour_margin_g;
    let local = frame.at_field(b_crossing);
    let f_rf = local.splitting();
    let gap = policy.atac_b_rf_g * transition_moment_braket(&local).abs();
    let slope = (local.delta.abs() / f_rf) * frame.dmu().abs();
    let predicted =
        landau_zener_probability(TAU * gap, policy.atac_ramp_speed_g_per_ms, slope);
    let kind = ActionKind::Atac {
        b_rf: policy.atac_b_rf_g,
        f_rf,
        ramp_speed_g_per_ms: policy.atac_ramp_speed_g_per_ms,
        b_on,
        b_off,
        b_crossing,
        shifted: true,
    };
    (kind, (b_on, b_off), predicted)
}

fn jump_action(frame: &CrossingFrame, policy: &PlannerPolicy) -> (ActionKind, (f64, f64), f64) {
    let hw = policy.jump_half_window_g;
    let exponent =
        landau_zener_exponent(TAU * frame.omega, policy.jump_ramp_speed_g_per_ms, frame.dmu());
    let predicted = (-exponent).exp();
    let kind = ActionKind::DiabaticJump {
        ramp_speed_g_per_ms: policy.jump_ramp_speed_g_per_ms,
        b_enter: frame.b0 + hw,
        b_exit: frame.b0 - hw,
    };
    (kind, (frame.b0 + hw, frame.b0 - hw), predicted)
}

/// Breadth-first (or survival-weighted) route through the crossing graph.
fn find_route(
    manifold: &LevelManifold,
    start: &str,
    goal: &str,
    policy: &PlannerPolicy,
) -> Result<Vec<usize>, PlanError> {
    manifold.level(start)?;
    manifold.level(goal)?;
    let level_ids: Vec<&str> = manifold.levels().iter().map(|l| l.id.as_str()).collect();
    let index_of = |id: &str| level_ids.iter().position(|&l| l == id).unwrap();
    let (s, g) = (index_of(start), index_of(goal));
    if s == g {
        return Ok(Vec::new());
    }

    // Edge list: (level a, level b, crossing index, cost).
    let edges: Vec<(usize, usize, usize, f64)> = manifold
        .crossings()
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            let cost = match policy.route_objective {
                RouteObjective::FewestCrossings => 1.0,
                RouteObjective::BestSurvival => {
                    let frame = manifold.frame(&c.id).expect("validated crossing");
                    let predicted = if frame.omega <= policy.jump_threshold_mhz {
                        jump_action(&frame, policy).2
                    } else {
                        default_window(&frame, policy).2
                    };
                    -(predicted.max(1e-300)).ln() + 1e-12
                }
            };
            (index_of(&c.lower), index_of(&c.upper), ci, cost)
        })
        .collect();

    // Uniform-cost search; with unit costs this is plain BFS. Ties resolve
    // by insertion order, so planning is deterministic.
    let n = level_ids.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut queue: VecDeque<usize> = VecDeque::new();
    dist[s] = 0.0;
    queue.push_back(s);
    let mut frontier = vec![false; n];
    frontier[s] = true;
    // Bellman-Ford style relaxation (graphs here are tiny).
    while let Some(u) = queue.pop_front() {
        frontier[u] = false;
        for &(a, b, ci, w) in &edges {
            let (from, to) = if a == u {
                (a, b)
            } else if b == u {
                (b, a)
            } else {
                continue;
            };
            if dist[from] + w < dist[to] - 1e-15 {
                dist[to] = dist[from] + w;
                parent[to] = Some((from, ci));
                if !frontier[to] {
                    frontier[to] = true;
                    queue.push_back(to);
                }
            }
        }
    }

    if dist[g].is_infinite() {
        return Err(PlanError::Unreachable { start: start.into(), goal: goal.into() });
    }
    let mut route = Vec::new();
    let mut cur = g;
    while cur != s {
        let (prev, ci) = parent[cur].expect("reachable node has a parent");
        route.push(ci);
        cur = prev;
    }
    route.reverse();
    Ok(route)
}

fn route_level_ids(manifold: &LevelManifold, start: &str, route: &[usize]) -> Vec<String> {
    let mut levels = vec![start.to_string()];
    let mut cur = start.to_string();
    for &ci in route {
        let c = &manifold.crossings()[ci];
        let next = if c.lower == cur { c.upper.clone() } else { c.lower.clone() };
        levels.push(next.clone());
        cur = next;
    }
    levels
}

/// Plan a transport route from `start_level` to `goal_level` and compile it
/// into an executable schedule. Windows are placed on their crossings; run
/// [`detour_check`] afterwards to displace windows that collide with
/// foreign crossings.
pub fn plan_path(
    manifold: &LevelManifold,
    start_level: &str,
    goal_level: &str,
    policy: &PlannerPolicy,
) -> Result<TransportPlan, PlanError> {
    let route = find_route(manifold, start_level, goal_level, policy)?;
    let route_levels = route_level_ids(manifold, start_level, &route);

    let mut actions = Vec::with_capacity(route.len());
    for &ci in &route {
        let c = &manifold.crossings()[ci];
        let frame = manifold.frame(&c.id)?;
        let (kind, window, predicted) = if frame.omega <= policy.jump_threshold_mhz {
            jump_action(&frame, policy)
        } else {
            default_window(&frame, policy)
        };
        actions.push(CrossingAction {
            crossing_id: c.id.clone(),
            kind,
            predicted_success: predicted,
            window,
        });
    }
    compile(manifold, route_levels, actions, policy)
}

/// Re-examine a plan for transfer windows that overlap the exclusion zone
/// of another crossing and displace them to the high-field side of the
/// obstacle (early transfer), re-verifying that the off-crossing coupling
/// still supports the required success.
pub fn detour_check(
    manifold: &LevelManifold,
    plan: &TransportPlan,
    policy: &PlannerPolicy,
) -> Result<TransportPlan, PlanError> {
    let mut actions = plan.actions.clone();
    let mut changed = false;

    for _pass in 0..4 {
        let mut pass_changed = false;
        for action in actions.iter_mut() {
            if !matches!(action.kind, ActionKind::Atac { .. }) {
                continue;
            }
            let own = manifold.crossing(&action.crossing_id)?;
            // Highest-field obstacle whose exclusion zone intrudes into the
            // window.
            let mut clear_above: Option<f64> = None;
            let (w_hi, w_lo) = action.window;
            for other in manifold.crossings() {
                if other.id == own.id {
                    continue;
                }
                let zone = (other.b0 - policy.detour_guard_g, other.b0 + policy.detour_guard_g);
                if zone.0 < w_hi && w_lo < zone.1 {
                    let top = other.b0 + policy.detour_guard_g;
                    clear_above = Some(clear_above.map_or(top, |c: f64| c.max(top)));
                }
            }
            let Some(clear) = clear_above else { continue };

            let frame = manifold.frame(&own.id)?;
            let (kind, window, predicted) = shifted_window(&frame, policy, clear);
            if predicted < policy.success_floor {
                return Err(PlanError::NoValidWindow {
                    crossing: own.id.clone(),
                    reason: format!(
                        "displaced to {clear} G the predicted success {predicted:.4} falls \
                         below the policy floor {}",
                        policy.success_floor
                    ),
                });
            }
            action.kind = kind;
            action.window = window;
            action.predicted_success = predicted;
            pass_changed = true;
            changed = true;
        }
        if !pass_changed {
            break;
        }
    }

    if !changed {
        return Ok(plan.clone());
    }
    compile(manifold, plan.route_levels.clone(), actions, policy)
}

/// Compile actions into one monotone descending schedule.
fn compile(
    manifold: &LevelManifold,
    route_levels: Vec<String>,
    mut actions: Vec<CrossingAction>,
    policy: &PlannerPolicy,
) -> Result<TransportPlan, PlanError> {
    actions.sort_by(|a, b| b.entry_field().total_cmp(&a.entry_field()));

    let mut segments: Vec<RampSegment> = Vec::new();
    let b_start = actions
        .first()
        .map(|a| a.window.0 + policy.approach_margin_g)
        .unwrap_or(policy.final_field_g.unwrap_or(0.0));
    let mut b_cur = b_start;

    for action in &actions {
        let entry = action.entry_field();
        if entry > b_cur + 1e-12 {
            return Err(PlanError::AmbiguousGeometry {
                crossing: action.crossing_id.clone(),
                reason: format!(
                    "window entry {entry} G lies above the current field {b_cur} G; \
                     action windows overlap"
                ),
            });
        }
        if entry < b_cur {
            segments.push(RampSegment::ramp(
                b_cur,
                entry,
                policy.travel_ramp_speed_g_per_ms,
                None,
            ));
        }
        match &action.kind {
            ActionKind::Atac { b_rf, f_rf, ramp_speed_g_per_ms, b_on, b_off, .. } => {
                let envelope = match policy.rise_us {
                    Some(rise) => Envelope::LinearRamp { rise_us: rise },
                    None => Envelope::Rectangular,
                };
                let rf = RfDrive {
                    amplitude_g: *b_rf,
                    freq_mhz: *f_rf,
                    phase_rad: 0.0,
                    envelope,
                };
                segments.push(RampSegment::ramp(*b_on, *b_off, *ramp_speed_g_per_ms, Some(rf)));
            }
            ActionKind::DiabaticJump { ramp_speed_g_per_ms, b_enter, b_exit } => {
                segments.push(RampSegment::ramp(*b_enter, *b_exit, *ramp_speed_g_per_ms, None));
            }
            ActionKind::AdiabaticTurn => {}
        }
        b_cur = action.exit_field();
    }

    if let Some(b_final) = policy.final_field_g {
        if b_final < b_cur {
            segments.push(RampSegment::ramp(
                b_cur,
                b_final,
                policy.travel_ramp_speed_g_per_ms,
                None,
            ));
        }
    }
    if segments.is_empty() {
        segments.push(RampSegment::hold(1e-3, b_cur, None));
    }

    let schedule = PulseSchedule::new(b_start, segments)?;
    let total_duration_ms = schedule.total_duration_ms();
    let survival = survival_estimate_parts(
        &actions,
        total_duration_ms,
        manifold.lifetime_tau_ms(),
    );
    Ok(TransportPlan { route_levels, actions, schedule, total_duration_ms, survival })
}

fn survival_estimate_parts(
    actions: &[CrossingAction],
    total_duration_ms: f64,
    lifetime_tau_ms: Option<f64>,
) -> f64 {
    let product: f64 = actions.iter().map(|a| a.predicted_success).product();
    lifetime_survival(total_duration_ms, lifetime_tau_ms) * product
}

/// End-to-end survival: exp(−T/τ) times the product of per-action
/// predicted successes. With no lifetime the exponential factor is one.
pub fn survival_estimate(plan: &TransportPlan, lifetime_tau_ms: Option<f64>) -> f64 {
    if let Some(tau) = lifetime_tau_ms {
        assert!(tau > 0.0, "lifetime must be positive");
    }
    survival_estimate_parts(&plan.actions, plan.total_duration_ms, lifetime_tau_ms)
}

/// Per-crossing outcome of running a plan through the dynamics engine.
#[derive(Clone, Debug)]
pub struct CrossingSim {
    pub crossing_id: String,
    pub predicted: f64,
    pub simulated: f64,
}

/// Simulation report for a whole plan.
#[derive(Clone, Debug)]
pub struct PlanSimulation {
    pub per_crossing: Vec<CrossingSim>,
    pub total_predicted: f64,
    pub total_simulated: f64,
}

/// Run every action of the plan through the dynamics engine in its local
/// two-level frame and compare against the predictions.
pub fn simulate_plan(
    manifold: &LevelManifold,
    plan: &TransportPlan,
    opts: &PropagateOptions,
) -> Result<PlanSimulation, PlanError> {
    let mut per_crossing = Vec::with_capacity(plan.actions.len());
    for action in &plan.actions {
        let frame = manifold.frame(&action.crossing_id)?;
        let simulated = match &action.kind {
            ActionKind::Atac { b_rf, f_rf, ramp_speed_g_per_ms, b_on, b_off, .. } => {
                let envelope = match plan_rise(plan, action) {
                    Some(rise) => Envelope::LinearRamp { rise_us: rise },
                    None => Envelope::Rectangular,
                };
                let rf = RfDrive {
                    amplitude_g: *b_rf,
                    freq_mhz: *f_rf,
                    phase_rad: 0.0,
                    envelope,
                };
                let schedule = PulseSchedule::new(
                    *b_on,
                    vec![RampSegment::ramp(*b_on, *b_off, *ramp_speed_g_per_ms, Some(rf))],
                )
                .map_err(PlanError::Dynamics)?;
                let result = transfer_over(&frame, &schedule, None, opts)
                    .map_err(|e| annotate(e, &action.crossing_id))?;
                result.efficiency
            }
            ActionKind::DiabaticJump { ramp_speed_g_per_ms, b_enter, b_exit } => {
                let schedule = PulseSchedule::new(
                    *b_enter,
                    vec![RampSegment::ramp(*b_enter, *b_exit, *ramp_speed_g_per_ms, None)],
                )
                .map_err(PlanError::Dynamics)?;
                // Staying on the bare level means ending in the opposite
                // dressed branch, which is exactly the transfer efficiency.
                let result = transfer_over(&frame, &schedule, None, opts)
                    .map_err(|e| annotate(e, &action.crossing_id))?;
                result.efficiency
            }
            ActionKind::AdiabaticTurn => 1.0,
        };
        per_crossing.push(CrossingSim {
            crossing_id: action.crossing_id.clone(),
            predicted: action.predicted_success,
            simulated,
        });
    }
    let total_predicted = per_crossing.iter().map(|c| c.predicted).product();
    let total_simulated = per_crossing.iter().map(|c| c.simulated).product();
    Ok(PlanSimulation { per_crossing, total_predicted, total_simulated })
}

fn annotate(e: DynamicsError, crossing: &str) -> PlanError {
    PlanError::AmbiguousGeometry { crossing: crossing.into(), reason: e.to_string() }
}

/// Rise time actually used in the plan's schedule for this action.
fn plan_rise(plan: &TransportPlan, action: &CrossingAction) -> Option<f64> {
    if let ActionKind::Atac { f_rf, .. } = &action.kind {
        for seg in &plan.schedule.segments {
            if let Some(rf) = &seg.rf {
                if rf.freq_mhz == *f_rf {
                    return match rf.envelope {
                        Envelope::LinearRamp { rise_us } => Some(rise_us),
                        Envelope::Rectangular => None,
                    };
                }
            }
        }
    }
    None
}

impl fmt::Display for TransportPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "transport plan")?;
        writeln!(f, "route: {}", self.route_levels.join(" -> "))?;
        writeln!(f, "total_duration_ms: {:.6}", self.total_duration_ms)?;
        writeln!(f, "survival_estimate: {:.6}", self.survival)?;
        writeln!(f, "actions ({} total):", self.actions.len())?;
        for a in &self.actions {
            match &a.kind {
                ActionKind::Atac {
                    b_rf,
                    f_rf,
                    ramp_speed_g_per_ms,
                    b_on,
                    b_off,
                    b_crossing,
                    shifted,
                } => writeln!(
                    f,
                    "  {id}: rf-transfer b_rf={b_rf} G f_rf={f_rf:.6} MHz ramp={ramp} G/ms \
                     on={b_on:.4} G off={b_off:.4} G through={b_crossing:.4} G \
                     shifted={shifted} predicted={p:.6}",
                    id = a.crossing_id,
                    ramp = ramp_speed_g_per_ms,
                    p = a.predicted_success,
                )?,
                ActionKind::DiabaticJump { ramp_speed_g_per_ms, b_enter, b_exit } => writeln!(
                    f,
                    "  {id}: diabatic-jump ramp={ramp} G/ms enter={b_enter:.4} G \
                     exit={b_exit:.4} G predicted={p:.6}",
                    id = a.crossing_id,
                    ramp = ramp_speed_g_per_ms,
                    p = a.predicted_success,
                )?,
                ActionKind::AdiabaticTurn => writeln!(
                    f,
                    "  {id}: adiabatic-turn predicted={p:.6}",
                    id = a.crossing_id,
                    p = a.predicted_success,
                )?,
            }
        }
        Ok(())
    }
}
