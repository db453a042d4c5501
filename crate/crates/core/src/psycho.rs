//! Absolute threshold of hearing and level conventions.
//!
//! Levels are in dBFS where 0 dBFS is the mean-square power of a full-scale
//! sine (0.5). Sound pressure maps to the digital scale with 90 dB SPL at
//! 0 dBFS.

/// dB SPL that corresponds to 0 dBFS.
pub const SPL_AT_FULL_SCALE: f64 = 90.0;
/// Mean-square power of a full-scale sine.
pub const FULL_SCALE_POWER: f64 = 0.5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PsychoError {
    #[error("frequency {0} Hz outside the supported range [20, 8000] Hz")]
    Domain(f64),
}

/// Terhardt's approximation of the threshold in quiet, in dB SPL.
pub fn threshold_in_quiet_spl(freq_hz: f64) -> Result<f64, PsychoError> {
    if !(20.0..=8000.0).contains(&freq_hz) {
        return Err(PsychoError::Domain(freq_hz));
    }
    let k = freq_hz / 1000.0;
    Ok(3.64 * k.powf(-0.8) - 6.5 * (-0.6 * (k - 3.3).powi(2)).exp() + 1e-3 * k.powi(4))
}

/// Threshold in quiet on the digital scale (dBFS).
pub fn threshold_in_quiet(freq_hz: f64) -> Result<f64, PsychoError> {
    Ok(threshold_in_quiet_spl(freq_hz)? - SPL_AT_FULL_SCALE)
}

pub fn power_to_dbfs(power: f64) -> f64 {
    10.0 * (power / FULL_SCALE_POWER).log10()
}

pub fn dbfs_to_power(dbfs: f64) -> f64 {
    FULL_SCALE_POWER * 10f64.powf(dbfs / 10.0)
}
