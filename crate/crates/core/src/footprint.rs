//! Footprint accounting: power sample series, trapezoidal energy
//! integration, average power, and CO2 conversion at a configurable grid
//! intensity.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid carbon intensity default, grams of CO2 per kWh.
pub const DEFAULT_INTENSITY_G_PER_KWH: f64 = 230.7;

/// One instantaneous power reading `t` seconds after run start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub t_seconds: f64,
    pub watts: f64,
}

/// Trapezoidal energy integral over a sample series.
/// Returns (energy_kwh, p_avg_watts, duration_hours).
pub fn integrate_energy(samples: &[PowerSample]) -> Result<(f64, f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::Sample(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    for pair in samples.windows(2) {
        if pair[1].t_seconds < pair[0].t_seconds {
            return Err(Error::Sample(format!(
                "time went backwards: {} -> {}",
                pair[0].t_seconds, pair[1].t_seconds
            )));
        }
    }
    if let Some(s) = samples.iter().find(|s| s.watts < 0.0 || !s.watts.is_finite()) {
        return Err(Error::Sample(format!("invalid power reading {}", s.watts)));
    }
    let mut joules = 0.0;
    for pair in samples.windows(2) {
        let dt = pair[1].t_seconds - pair[0].t_seconds;
        joules += 0.5 * (pair[0].watts + pair[1].watts) * dt;
    }
    let duration_seconds = samples[samples.len() - 1].t_seconds - samples[0].t_seconds;
    let energy_kwh = joules / 3_600_000.0;
    let duration_hours = duration_seconds / 3600.0;
    let p_avg_watts = if duration_hours > 0.0 {
        energy_kwh * 1000.0 / duration_hours
    } else {
        0.0
    };
    Ok((energy_kwh, p_avg_watts, duration_hours))
}

/// CO2 mass in kg for an energy amount at a grid intensity in g/kWh.
pub fn co2_of(energy_kwh: f64, intensity_g_per_kwh: f64) -> Result<f64> {
    if energy_kwh < 0.0 || intensity_g_per_kwh < 0.0 {
        return Err(Error::Config(format!(
            "energy and intensity must be non-negative, got {energy_kwh}, {intensity_g_per_kwh}"
        )));
    }
    Ok(energy_kwh * intensity_g_per_kwh / 1000.0)
}

/// Energy, average power and CO2 of one measured run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub energy_kwh: f64,
    pub p_avg_watts: f64,
    pub e_co2_kg: f64,
    pub intensity_g_per_kwh: f64,
    pub duration_hours: f64,
}

impl FootprintReport {
    pub fn from_samples(samples: &[PowerSample], intensity_g_per_kwh: f64) -> Result<Self> {
        let (energy_kwh, p_avg_watts, duration_hours) = integrate_energy(samples)?;
        Ok(FootprintReport {
            energy_kwh,
            p_avg_watts,
            e_co2_kg: co2_of(energy_kwh, intensity_g_per_kwh)?,
            intensity_g_per_kwh,
            duration_hours,
        })
    }

    /// Ratio identities between the report fields, to relative 1e-9.
    pub fn check_invariants(&self) -> Result<()> {
        let co2 = self.energy_kwh * self.intensity_g_per_kwh / 1000.0;
        if relative_gap(self.e_co2_kg, co2) > 1e-9 {
            return Err(Error::Metric(format!(
                "co2 {} inconsistent with energy x intensity {co2}",
                self.e_co2_kg
            )));
        }
        if self.duration_hours > 0.0 {
            let p = self.energy_kwh * 1000.0 / self.duration_hours;
            if relative_gap(self.p_avg_watts, p) > 1e-9 {
                return Err(Error::Metric(format!(
                    "p_avg {} inconsistent with energy/duration {p}",
                    self.p_avg_watts
                )));
            }
        }
        Ok(())
    }
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Writes a sample series as CSV with a `t_seconds,watts` header.
pub fn save_samples_csv(path: &Path, samples: &[PowerSample]) -> Result<()> {
    let mut out = String::from("t_seconds,watts\n");
    for s in samples {
        out.push_str(&format!("{},{}\n", s.t_seconds, s.watts));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_samples_csv(path: &Path) -> Result<Vec<PowerSample>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("t_seconds,watts") => {}
        other => {
            return Err(Error::Sample(format!(
                "expected 't_seconds,watts' header, got {other:?}"
            )))
        }
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Sample(format!("bad csv row {}: {line:?}", i + 2)))
        };
        samples.push(PowerSample {
            t_seconds: parse(parts.next())?,
            watts: parse(parts.next())?,
        });
    }
    Ok(samples)
}

/// A power source measured alongside one experiment. `start` marks the
/// beginning of the run; `finish` returns the series covering it.
pub trait PowerSampler: Send {
    fn start(&mut self);
    fn finish(&mut self) -> Result<Vec<PowerSample>>;
}

/// Replays a fixed series; timing and energy become deterministic, which the
/// reproducibility suites rely on.
#[derive(Debug, Clone)]
pub struct ScriptedSampler {
    pub samples: Vec<PowerSample>,
}

impl ScriptedSampler {
    /// Constant `watts` over `duration_hours`, as two bracketing samples.
    pub fn constant(watts: f64, duration_hours: f64) -> Self {
        ScriptedSampler {
            samples: vec![
                PowerSample {
                    t_seconds: 0.0,
                    watts,
                },
                PowerSample {
                    t_seconds: duration_hours * 3600.0,
                    watts,
                },
            ],
        }
    }
}

impl PowerSampler for ScriptedSampler {
    fn start(&mut self) {}

    fn finish(&mut self) -> Result<Vec<PowerSample>> {
        Ok(self.samples.clone())
    }
}

/// Assumes a constant power draw over the real (wall-clock) run duration.
/// The result is an estimate, not a measurement.
#[derive(Debug)]
pub struct ConstantPowerSampler {
    pub watts: f64,
    started: Option<Instant>,
}

impl ConstantPowerSampler {
    pub fn new(watts: f64) -> Self {
        ConstantPowerSampler {
            watts,
            started: None,
        }
    }
}

impl PowerSampler for ConstantPowerSampler {
    fn start(&mut self) {
        self.started = Some(Instant::now());
    }

    fn finish(&mut self) -> Result<Vec<PowerSample>> {
        let started = self
            .started
            .take()
            .ok_or_else(|| Error::Sample("sampler finished before start".into()))?;
        let elapsed = started.elapsed().as_secs_f64();
        Ok(vec![
            PowerSample {
                t_seconds: 0.0,
                watts: self.watts,
            },
            PowerSample {
                t_seconds: elapsed,
                watts: self.watts,
            },
        ])
    }
}

/// Best-effort CPU energy counters via Linux powercap (RAPL). Reads total
/// microjoules at start and finish and reports the average power over the
/// wall-clock interval. Needs readable
/// `/sys/class/powercap/intel-rapl:*/energy_uj` files.
#[derive(Debug, Default)]
pub struct RaplSampler {
    started: Option<(Instant, f64)>,
}

impl RaplSampler {
    pub fn available() -> bool {
        read_rapl_uj().is_some()
    }
}

fn read_rapl_uj() -> Option<f64> {
    let mut total = 0.0;
    let mut found = false;
    let entries = fs::read_dir("/sys/class/powercap").ok()?;
    for entry in entries.flatten() {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        // top-level package domains only; subdomains would double-count
        if !name.starts_with("intel-rapl:") || name.matches(':').count() != 1 {
            continue;
        }
        if let Ok(text) = fs::read_to_string(entry.path().join("energy_uj")) {
            if let Ok(uj) = text.trim().parse::<f64>() {
                total += uj;
                found = true;
            }
        }
    }
    if found {
        Some(total)
    } else {
        None
    }
}

impl PowerSampler for RaplSampler {
    fn start(&mut self) {
        self.started = read_rapl_uj().map(|uj| (Instant::now(), uj));
    }

    fn finish(&mut self) -> Result<Vec<PowerSample>> {
        let (started, uj0) = self
            .started
            .take()
            .ok_or_else(|| Error::Sample("energy counters unavailable".into()))?;
        let uj1 =
            read_rapl_uj().ok_or_else(|| Error::Sample("energy counters unavailable".into()))?;
        let elapsed = started.elapsed().as_secs_f64();
        if elapsed <= 0.0 {
            return Err(Error::Sample("zero-length measurement window".into()));
        }
        // Counters wrap rarely; on wrap, fall back to zero consumption.
        let joules = ((uj1 - uj0) / 1e6).max(0.0);
        let watts = joules / elapsed;
        Ok(vec![
            PowerSample {
                t_seconds: 0.0,
                watts,
            },
            PowerSample {
                t_seconds: elapsed,
                watts,
            },
        ])
    }
}
