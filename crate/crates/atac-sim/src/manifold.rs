//! Level-manifold data model and config ingestion.
//!
//! A manifold is a set of bare molecular levels, each strictly linear in
//! magnetic field, plus the avoided crossings that couple pairs of them.
//! Manifold files are TOML documents with top-level keys `levels`,
//! `crossings` and optional `lifetime_ms`; see `fixtures/` for examples.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crossing::CrossingFrame;

/// Tolerance for the declared crossing field against the intersection of the
/// two bare lines, G.
pub const B0_CONSISTENCY_TOL_G: f64 = 1e-6;

/// Zero-field quantum numbers identifying a bare level.
// Unknown-key strictness is enforced by the loader's key scan, which knows
// about the lax flag; serde stays permissive here.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantumLabels {
    /// Partial wave l; only s, d and g waves (0, 2, 4) occur here.
    pub l: u32,
    #[serde(rename = "F_tot")]
    pub f_tot: i32,
    #[serde(rename = "m_Ftot")]
    pub m_ftot: i32,
    #[serde(rename = "F")]
    pub f: i32,
    pub f1: i32,
    pub f2: i32,
    /// Vibrational index, counted negative from threshold.
    pub nu: i32,
}

/// A bare molecular level with linear Zeeman energy
/// E(B) = energy_at_zero + magnetic_moment · B.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BareLevel {
    pub id: String,
    pub labels: QuantumLabels,
    /// E/h at B = 0 relative to the dissociation threshold, MHz (≤ 0).
    pub energy_at_zero: f64,
    /// dE/dB in E/h units, MHz/G.
    pub magnetic_moment: f64,
}

impl BareLevel {
    /// E/h at field `b`, MHz.
    #[inline]
    pub fn energy_at(&self, b: f64) -> f64 {
        self.energy_at_zero + self.magnetic_moment * b
    }
}

/// A coupled pair of bare levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvoidedCrossing {
    pub id: String,
    /// Id of the bare level taken as |b1⟩ in the two-level frame.
    pub lower: String,
    /// Id of the bare level taken as |b2⟩ in the two-level frame.
    pub upper: String,
    /// Minimal energy splitting Ω, E/h in MHz.
    pub splitting_min: f64,
    /// Field where the bare lines intersect, G.
    pub b0: f64,
}

/// A validated level manifold.
///
/// Immutable after load; crossings are kept sorted by crossing field in
/// strictly descending order.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelManifold {
    levels: Vec<BareLevel>,
    crossings: Vec<AvoidedCrossing>,
    lifetime_tau_ms: Option<f64>,
    level_index: HashMap<String, usize>,
    crossing_index: HashMap<String, usize>,
}

/// A pairwise intersection of two bare levels found by scanning.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelIntersection {
    pub level_a: String,
    pub level_b: String,
    pub b0: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifoldError {
    #[error("manifold: cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifold: parse error: {0}")]
    Parse(String),
    #[error("manifold: unknown key `{key}` in {location}")]
    UnknownKey { location: String, key: String },
    #[error("manifold: duplicate level id `{0}`")]
    DuplicateLevelId(String),
    #[error("manifold: duplicate crossing id `{0}`")]
    DuplicateCrossingId(String),
    #[error("manifold: crossing `{crossing}` references unknown level `{level}`")]
    UnknownLevelRef { crossing: String, level: String },
    #[error("manifold: level `{level}` has partial wave l = {l}; only 0, 2 and 4 are allowed")]
    InvalidPartialWave { level: String, l: u32 },
    #[error("manifold: level `{level}` has positive zero-field energy {energy} MHz; bound levels lie below threshold")]
    UnboundLevel { level: String, energy: f64 },
    #[error("manifold: crossing `{0}` must have a positive minimal splitting")]
    NonPositiveSplitting(String),
    #[error("manifold: crossing `{crossing}` joins levels with equal magnetic moments; parallel lines never cross")]
    EqualMoments { crossing: String },
    #[error("manifold: crossing `{crossing}` declares B0 = {declared} G but the levels intersect at {computed} G")]
    CrossingFieldMismatch { crossing: String, declared: f64, computed: f64 },
    #[error("manifold: crossings `{a}` and `{b}` share the crossing field {b0} G")]
    TiedCrossingFields { a: String, b: String, b0: f64 },
    #[error("manifold: unknown level id `{0}`")]
    NoSuchLevel(String),
    #[error("manifold: unknown crossing id `{0}`")]
    NoSuchCrossing(String),
}

// --- file schema ---------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct LevelRecord {
    id: String,
    labels: QuantumLabels,
    energy_at_zero_mhz: f64,
    magnetic_moment_mhz_per_g: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CrossingRecord {
    id: String,
    lower: String,
    upper: String,
    splitting_min_mhz: f64,
    b0_gauss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifoldFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    lifetime_ms: Option<f64>,
    levels: Vec<LevelRecord>,
    crossings: Vec<CrossingRecord>,
}

const ROOT_KEYS: &[&str] = &["levels", "crossings", "lifetime_ms"];
const LEVEL_KEYS: &[&str] = &["id", "labels", "energy_at_zero_mhz", "magnetic_moment_mhz_per_g"];
const LABEL_KEYS: &[&str] = &["l", "F_tot", "m_Ftot", "F", "f1", "f2", "nu"];
const CROSSING_KEYS: &[&str] = &["id", "lower", "upper", "splitting_min_mhz", "b0_gauss"];

fn check_keys(
    table: &toml::Table,
    allowed: &[&str],
    location: &str,
    lax: bool,
    warnings: &mut Vec<String>,
) -> Result<(), ManifoldError> {
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            if lax {
                warnings.push(format!("ignoring unknown key `{key}` in {location}"));
            } else {
                return Err(ManifoldError::UnknownKey {
                    location: location.to_string(),
                    key: key.clone(),
                });
            }
        }
    }
    Ok(())
}

fn scan_unknown_keys(
    doc: &toml::Table,
    lax: bool,
    warnings: &mut Vec<String>,
) -> Result<(), ManifoldError> {
    check_keys(doc, ROOT_KEYS, "the top level", lax, warnings)?;
    if let Some(toml::Value::Array(levels)) = doc.get("levels") {
        for (i, entry) in levels.iter().enumerate() {
            if let toml::Value::Table(t) = entry {
                let loc = t
                    .get("id")
                    .and_then(|v| v.as_str())
                    .map(|id| format!("level `{id}`"))
                    .unwrap_or_else(|| format!("levels[{i}]"));
                check_keys(t, LEVEL_KEYS, &loc, lax, warnings)?;
                if let Some(toml::Value::Table(labels)) = t.get("labels") {
                    check_keys(labels, LABEL_KEYS, &format!("{loc} labels"), lax, warnings)?;
                }
            }
        }
    }
    if let Some(toml::Value::Array(crossings)) = doc.get("crossings") {
        for (i, entry) in crossings.iter().enumerate() {
            if let toml::Value::Table(t) = entry {
                let loc = t
                    .get("id")
                    .and_then(|v| v.as_str())
                    .map(|id| format!("crossing `{id}`"))
                    .unwrap_or_else(|| format!("crossings[{i}]"));
                check_keys(t, CROSSING_KEYS, &loc, lax, warnings)?;
            }
        }
    }
    Ok(())
}

// --- loading -------------------------------------------------------------

/// Load and validate a manifold file, rejecting unknown keys.
pub fn load_manifold<P: AsRef<Path>>(path: P) -> Result<LevelManifold, ManifoldError> {
    let (manifold, _warnings) = load_manifold_with(path, false)?;
    Ok(manifold)
}

/// Load a manifold file; with `lax = true` unknown keys are returned as
/// warnings instead of errors.
pub fn load_manifold_with<P: AsRef<Path>>(
    path: P,
    lax: bool,
) -> Result<(LevelManifold, Vec<String>), ManifoldError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ManifoldError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifold(&text, lax)
}

/// Parse a manifold from TOML text. See [`load_manifold_with`].
pub fn parse_manifold(text: &str, lax: bool) -> Result<(LevelManifold, Vec<String>), ManifoldError> {
    let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        ManifoldError::Parse(e.message().to_string())
    })?;
    let mut warnings = Vec::new();
    scan_unknown_keys(&doc, lax, &mut warnings)?;

    // Unknown keys have been handled above; deserialize leniently here so
    // that lax mode can actually proceed past them.
    let mut file: ManifoldFile = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| ManifoldError::Parse(e.message().to_string()))?;

    let levels: Vec<BareLevel> = file
        .levels
        .drain(..)
        .map(|r| BareLevel {
            id: r.id,
            labels: r.labels,
            energy_at_zero: r.energy_at_zero_mhz,
            magnetic_moment: r.magnetic_moment_mhz_per_g,
        })
        .collect();
    let crossings: Vec<AvoidedCrossing> = file
        .crossings
        .drain(..)
        .map(|r| AvoidedCrossing {
            id: r.id,
            lower: r.lower,
            upper: r.upper,
            splitting_min: r.splitting_min_mhz,
            b0: r.b0_gauss,
        })
        .collect();

    let manifold = LevelManifold::new(levels, crossings, file.lifetime_ms)?;
    Ok((manifold, warnings))
}

/// Serialize a manifold back to the file schema.
pub fn save_manifold<P: AsRef<Path>>(
    manifold: &LevelManifold,
    path: P,
) -> Result<(), ManifoldError> {
    let path = path.as_ref();
    std::fs::write(path, manifold_to_toml(manifold)).map_err(|source| ManifoldError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Render a manifold in the file schema.
pub fn manifold_to_toml(manifold: &LevelManifold) -> String {
    let file = ManifoldFile {
        lifetime_ms: manifold.lifetime_tau_ms,
        levels: manifold
            .levels
            .iter()
            .map(|l| LevelRecord {
                id: l.id.clone(),
                labels: l.labels,
                energy_at_zero_mhz: l.energy_at_zero,
                magnetic_moment_mhz_per_g: l.magnetic_moment,
            })
            .collect(),
        crossings: manifold
            .crossings
            .iter()
            .map(|c| CrossingRecord {
                id: c.id.clone(),
                lower: c.lower.clone(),
                upper: c.upper.clone(),
                splitting_min_mhz: c.splitting_min,
                b0_gauss: c.b0,
            })
            .collect(),
    };
    toml::to_string_pretty(&file).expect("manifold serialization cannot fail")
}

impl LevelManifold {
    /// Build a manifold from parts, running the full validation suite.
    pub fn new(
        levels: Vec<BareLevel>,
        mut crossings: Vec<AvoidedCrossing>,
        lifetime_tau_ms: Option<f64>,
    ) -> Result<Self, ManifoldError> {
        let mut level_index = HashMap::new();
        for (i, level) in levels.iter().enumerate() {
            if level_index.insert(level.id.clone(), i).is_some() {
                return Err(ManifoldError::DuplicateLevelId(level.id.clone()));
            }
            if !matches!(level.labels.l, 0 | 2 | 4) {
                return Err(ManifoldError::InvalidPartialWave {
                    level: level.id.clone(),
                    l: level.labels.l,
                });
            }
            if level.energy_at_zero > 0.0 {
                return Err(ManifoldError::UnboundLevel {
                    level: level.id.clone(),
                    energy: level.energy_at_zero,
                });
            }
        }

        let mut seen = HashSet::new();
        for c in &crossings {
            if !seen.insert(c.id.clone()) {
                return Err(ManifoldError::DuplicateCrossingId(c.id.clone()));
            }
            if c.splitting_min <= 0.0 {
                return Err(ManifoldError::NonPositiveSplitting(c.id.clone()));
            }
            for level in [&c.lower, &c.upper] {
                if !level_index.contains_key(level) {
                    return Err(ManifoldError::UnknownLevelRef {
                        crossing: c.id.clone(),
                        level: level.clone(),
                    });
                }
            }
            let lo = &levels[level_index[&c.lower]];
            let up = &levels[level_index[&c.upper]];
            if lo.magnetic_moment == up.magnetic_moment {
                return Err(ManifoldError::EqualMoments { crossing: c.id.clone() });
            }
            let computed =
                (lo.energy_at_zero - up.energy_at_zero) / (up.magnetic_moment - lo.magnetic_moment);
            if (computed - c.b0).abs() > B0_CONSISTENCY_TOL_G {
                return Err(ManifoldError::CrossingFieldMismatch {
                    crossing: c.id.clone(),
                    declared: c.b0,
                    computed,
                });
            }
        }

        crossings.sort_by(|a, b| b.b0.total_cmp(&a.b0));
        for pair in crossings.windows(2) {
            if pair[0].b0 == pair[1].b0 {
                return Err(ManifoldError::TiedCrossingFields {
                    a: pair[0].id.clone(),
                    b: pair[1].id.clone(),
                    b0: pair[0].b0,
                });
            }
        }
        let crossing_index =
            crossings.iter().enumerate().map(|(i, c)| (c.id.clone(), i)).collect();

        Ok(Self { levels, crossings, lifetime_tau_ms, level_index, crossing_index })
    }

    pub fn levels(&self) -> &[BareLevel] {
        &self.levels
    }

    /// Crossings in strictly descending order of crossing field.
    pub fn crossings(&self) -> &[AvoidedCrossing] {
        &self.crossings
    }

    /// One-body lifetime τ in ms, if configured.
    pub fn lifetime_tau_ms(&self) -> Option<f64> {
        self.lifetime_tau_ms
    }

    pub fn level(&self, id: &str) -> Result<&BareLevel, ManifoldError> {
        self.level_index
            .get(id)
            .map(|&i| &self.levels[i])
            .ok_or_else(|| ManifoldError::NoSuchLevel(id.to_string()))
    }

    pub fn crossing(&self, id: &str) -> Result<&AvoidedCrossing, ManifoldError> {
        self.crossing_index
            .get(id)
            .map(|&i| &self.crossings[i])
            .ok_or_else(|| ManifoldError::NoSuchCrossing(id.to_string()))
    }

    /// Two-level frame of a crossing, seated at its crossing field.
    ///
    /// |b1⟩ is the configured `lower` level and |b2⟩ the `upper` one.
    pub fn frame(&self, crossing_id: &str) -> Result<CrossingFrame, ManifoldError> {
        let c = self.crossing(crossing_id)?;
        let lo = self.level(&c.lower)?;
        let up = self.level(&c.upper)?;
        Ok(CrossingFrame::new(
            c.splitting_min,
            lo.magnetic_moment,
            up.magnetic_moment,
            c.b0,
        ))
    }
}

/// Bare level energies E(B) per level id at field `b`, MHz.
pub fn bare_energies(manifold: &LevelManifold, b: f64) -> BTreeMap<String, f64> {
    manifold
        .levels()
        .iter()
        .map(|l| (l.id.clone(), l.energy_at(b)))
        .collect()
}

/// All pairwise intersections of bare levels inside `b_range`, sorted by
/// field in descending order. Parallel pairs produce no entry.
pub fn find_crossings(levels: &[BareLevel], b_range: (f64, f64)) -> Vec<LevelIntersection> {
    assert!(b_range.0 < b_range.1, "field range must be ordered");
    let mut out = Vec::new();
    for i in 0..levels.len() {
        for j in (i + 1)..levels.len() {
            let (a, b) = (&levels[i], &levels[j]);
            let dmu = a.magnetic_moment - b.magnetic_moment;
            if dmu == 0.0 {
                continue;
            }
            let b0 = (b.energy_at_zero - a.energy_at_zero) / dmu;
            if b0 >= b_range.0 && b0 <= b_range.1 {
                out.push(LevelIntersection {
                    level_a: a.id.clone(),
                    level_b: b.id.clone(),
                    b0,
                });
            }
        }
    }
    out.sort_by(|a, b| b.b0.total_cmp(&a.b0));
    out
}
