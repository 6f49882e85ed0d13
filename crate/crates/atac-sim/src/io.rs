//! CSV export/import helpers shared by the library and the command-line
//! front end.
//!
//! Floats are written with 12 significant digits, `.` decimal separator and
//! no locale dependence, so reruns with identical inputs produce
//! byte-identical bodies.

use std::fmt::Write as _;
use std::path::Path;

use crate::dynamics::PopulationTrace;

/// Render a float with 12 significant digits.
pub fn fmt_float(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let formatted = format!("{x:.11e}");
    // Trim trailing zeros in the mantissa for readability while keeping the
    // representation deterministic.
    match formatted.split_once('e') {
        Some((mantissa, exp)) => {
            let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
            let exp: i32 = exp.parse().unwrap_or(0);
            if (-4..=8).contains(&exp) {
                // Re-render small exponents in plain notation.
                let digits = 11 - exp.clamp(-4, 8);
                let plain = format!("{x:.*}", digits.max(0) as usize);
                let plain = plain.trim_end_matches('0').trim_end_matches('.');
                plain.to_string()
            } else {
                format!("{mantissa}e{exp}")
            }
        }
        None => formatted,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("io: cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("io: cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("io: {path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
}

/// Write a generic table: comment lines, a header row, then data rows.
pub fn write_table<P: AsRef<Path>>(
    path: P,
    comments: &[String],
    header: &[&str],
    rows: &[Vec<f64>],
) -> Result<(), IoError> {
    let mut out = String::new();
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    let _ = writeln!(out, "{}", header.join(","));
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&v| fmt_float(v)).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    std::fs::write(path.as_ref(), out).map_err(|source| IoError::Write {
        path: path.as_ref().display().to_string(),
        source,
    })
}

/// Export a population trace with the standard column set.
pub fn write_trace_csv<P: AsRef<Path>>(
    trace: &PopulationTrace,
    path: P,
    comments: &[String],
) -> Result<(), IoError> {
    let rows: Vec<Vec<f64>> = trace
        .rows
        .iter()
        .map(|r| {
            vec![
                r.time_us,
                r.b_gauss,
                r.pop_b1,
                r.pop_b2,
                r.pop_upper_dressed,
                r.pop_lower_dressed,
                r.norm,
            ]
        })
        .collect();
    write_table(
        path,
        comments,
        &["time_us", "b_gauss", "pop_b1", "pop_b2", "pop_upper_dressed", "pop_lower_dressed", "norm"],
        &rows,
    )
}

/// Flatten a schedule to CSV rows: one row per segment boundary carrying
/// the time, the field, and the rf drive of the segment that starts there
/// (zeros on the final row). Readable back via [`read_schedule_csv`].
pub fn write_schedule_csv<P: AsRef<Path>>(
    schedule: &crate::dynamics::PulseSchedule,
    path: P,
    comments: &[String],
) -> Result<(), IoError> {
    let mut rows = Vec::with_capacity(schedule.segments.len() + 1);
    let mut t_ms = 0.0;
    for seg in &schedule.segments {
        let (amp, freq) = seg.rf.map(|rf| (rf.amplitude_g, rf.freq_mhz)).unwrap_or((0.0, 0.0));
        rows.push(vec![t_ms, seg.b_start, amp, freq]);
        t_ms += seg.duration_ms;
    }
    rows.push(vec![t_ms, schedule.b_final(), 0.0, 0.0]);
    write_table(path, comments, &["time_ms", "B_gauss", "rf_amplitude_g", "rf_freq_mhz"], &rows)
}

/// Rebuild a schedule from the flattened CSV form. Envelopes come back
/// rectangular; rise times are not part of the wire format.
pub fn read_schedule_csv<P: AsRef<Path>>(
    path: P,
) -> Result<crate::dynamics::PulseSchedule, IoError> {
    use crate::dynamics::{Envelope, PulseSchedule, RampSegment, RfDrive};
    let path_str = path.as_ref().display().to_string();
    let rows = read_numeric_csv(&path)?;
    if rows.len() < 2 || rows.iter().any(|r| r.len() != 4) {
        return Err(IoError::Malformed {
            path: path_str,
            line: 0,
            message: "schedule needs >= 2 rows of (time_ms, B, rf_amp, rf_freq)".into(),
        });
    }
    let mut segments = Vec::with_capacity(rows.len() - 1);
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let rf = if a[2] > 0.0 && a[3] > 0.0 {
            Some(RfDrive {
                amplitude_g: a[2],
                freq_mhz: a[3],
                phase_rad: 0.0,
                envelope: Envelope::Rectangular,
            })
        } else {
            None
        };
        segments.push(RampSegment {
            duration_ms: b[0] - a[0],
            b_start: a[1],
            b_end: b[1],
            rf,
        });
    }
    PulseSchedule::new(rows[0][1], segments).map_err(|e| IoError::Malformed {
        path: path_str,
        line: 0,
        message: e.to_string(),
    })
}

/// Read a numeric CSV table, skipping `#` comments and the header row.
/// Returns the rows; every row must have the same number of columns.
pub fn read_numeric_csv<P: AsRef<Path>>(path: P) -> Result<Vec<Vec<f64>>, IoError> {
    let path_str = path.as_ref().display().to_string();
    let text = std::fs::read_to_string(path.as_ref()).map_err(|source| IoError::Read {
        path: path_str.clone(),
        source,
    })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    let mut header_skipped = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Result<Vec<f64>, _> = cells.iter().map(|c| c.parse::<f64>()).collect();
        match parsed {
            Ok(row) => {
                match width {
                    None => width = Some(row.len()),
                    Some(w) if w != row.len() => {
                        return Err(IoError::Malformed {
                            path: path_str,
                            line: lineno + 1,
                            message: format!("expected {w} columns, found {}", row.len()),
                        })
                    }
                    _ => {}
                }
                rows.push(row);
            }
            Err(_) if !header_skipped => {
                header_skipped = true;
            }
            Err(e) => {
                return Err(IoError::Malformed {
                    path: path_str,
                    line: lineno + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_is_precise_and_clean() {
        assert_eq!(fmt_float(0.0), "0");
        assert_eq!(fmt_float(1.0), "1");
        assert_eq!(fmt_float(13.33210), "13.3321");
        assert_eq!(fmt_float(-0.05), "-0.05");
        // 12 significant digits survive a round trip.
        let x = 13.332104567891;
        let back: f64 = fmt_float(x).parse().unwrap();
        assert!((back - x).abs() < 1e-11);
        assert!(fmt_float(1.5e-11).contains('e'));
    }

    #[test]
    fn schedule_round_trip() {
        use crate::dynamics::{Envelope, PulseSchedule, RampSegment, RfDrive};
        let rf = RfDrive {
            amplitude_g: 0.05,
            freq_mhz: 13.6,
            phase_rad: 0.0,
            envelope: Envelope::Rectangular,
        };
        let schedule = PulseSchedule::new(
            1003.0,
            vec![
                RampSegment { duration_ms: 1.5, b_start: 1003.0, b_end: 1001.4, rf: None },
                RampSegment { duration_ms: 1.4, b_start: 1001.4, b_end: 999.6, rf: Some(rf) },
            ],
        )
        .unwrap();
        let dir = std::env::temp_dir().join("atac_sim_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("schedule.csv");
        write_schedule_csv(&schedule, &path, &[]).unwrap();
        let back = read_schedule_csv(&path).unwrap();
        assert_eq!(back, schedule);
    }

    #[test]
    fn table_round_trip() {
        let dir = std::env::temp_dir().join("atac_sim_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        let rows = vec![vec![1.0, 2.5], vec![3.0, -4.25]];
        write_table(&path, &["note".into()], &["a", "b"], &rows).unwrap();
        let back = read_numeric_csv(&path).unwrap();
        assert_eq!(back, rows);
    }
}
