//! Run configuration: one section per command, every field optional.

use serde::{Deserialize, Serialize};

use emitterscope::fiducial::DetectParams;
use emitterscope::ple::PipelineConfig;
use emitterscope::scan::ScanConfig;
use emitterscope::synth::{FiducialFieldParams, LaserModulation, Noise, Template};

use crate::error::CliError;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub pipeline: PipelineConfig,
    pub qr: QrConfig,
    pub cluster: ClusterConfig,
    pub stats: StatsConfig,
    pub scan: ScanConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }
}

/// Frequency axis of a rendered stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyScan {
    pub start_thz: f64,
    pub stop_thz: f64,
    pub step_mhz: f64,
}

impl FrequencyScan {
    pub fn frequencies(&self) -> Result<Vec<f64>, CliError> {
        if !(self.step_mhz > 0.0) || !(self.stop_thz >= self.start_thz) {
            return Err(CliError::Config(format!(
                "frequency scan needs step_mhz > 0 and stop >= start, got {self:?}"
            )));
        }
        let n = ((self.stop_thz - self.start_thz) * 1e6 / self.step_mhz + 1e-6).floor() as usize + 1;
        if n > 1_000_000 {
            return Err(CliError::Config(format!("frequency scan has {n} frames")));
        }
        Ok((0..n).map(|i| self.start_thz + i as f64 * self.step_mhz * 1e-6).collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Full template with parameters; `--template` picks defaults by name.
    pub template: Option<Template>,
    pub pixel_size_um: f64,
    pub psf_sigma_px: f64,
    pub exposure_s: f64,
    pub laser_modulation: LaserModulation,
    pub noise: Noise,
    /// Sample-B stack axis. Defaults to 1 GHz from the low end of the
    /// template's center range.
    pub scan: Option<FrequencyScan>,
    /// Sample-A windows around each mean line.
    pub window_half_width_ghz: f64,
    pub window_step_mhz: f64,
    /// Parameters of the `fiducial` template (loose codes in one image).
    pub fiducial: FiducialFieldParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            template: None,
            pixel_size_um: 0.25,
            psf_sigma_px: 2.0,
            exposure_s: 1.0,
            laser_modulation: LaserModulation::default(),
            noise: Noise::Poisson,
            scan: None,
            window_half_width_ghz: 1.0,
            window_step_mhz: 10.0,
            fiducial: FiducialFieldParams::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QrConfig {
    pub module_pitch_px: f64,
    pub rotation_rad: f64,
    pub detect: DetectParams,
}

impl Default for QrConfig {
    fn default() -> Self {
        Self {
            module_pitch_px: 8.0,
            rotation_rad: 0.0,
            detect: DetectParams::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub threshold_um: f64,
    /// Experiment pair for the spectral difference table.
    pub diff: Option<(u32, u32)>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            threshold_um: 1.0,
            diff: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub kde_bandwidth_mhz: f64,
    pub populations: usize,
    pub bin_width_ghz: f64,
    pub min_count: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            kde_bandwidth_mhz: 10.0,
            populations: 2,
            bin_width_ghz: 20.0,
            min_count: 10,
        }
    }
}

/// Parses `10GHz`, `500MHz`, `0.01THz` or a bare number of GHz.
pub fn parse_ghz(text: &str) -> Result<f64, CliError> {
    let t = text.trim();
    let lower = t.to_ascii_lowercase();
    let (num, scale) = if let Some(n) = lower.strip_suffix("thz") {
        (n, 1e3)
    } else if let Some(n) = lower.strip_suffix("ghz") {
        (n, 1.0)
    } else if let Some(n) = lower.strip_suffix("mhz") {
        (n, 1e-3)
    } else {
        (lower.as_str(), 1.0)
    };
    match num.trim().parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v * scale),
        _ => Err(CliError::Config(format!("cannot read '{t}' as a frequency width"))),
    }
}

/// Arguments of the speed-up factor: `N=.. gamma=.. Gamma=.. tc=.. tw=..`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpeedupArgs {
    pub n: f64,
    pub gamma: f64,
    pub big_gamma: f64,
    pub t_c: f64,
    pub t_w: f64,
}

pub fn parse_speedup(args: &[String]) -> Result<SpeedupArgs, CliError> {
    let mut v: [Option<f64>; 5] = [None; 5];
    for a in args {
        let (k, val) = a
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--sf expects key=value, got '{a}'")))?;
        let slot = match k {
            "N" | "n" => 0,
            "gamma" => 1,
            "Gamma" => 2,
            "tc" | "t_c" => 3,
            "tw" | "t_w" => 4,
            _ => return Err(CliError::Config(format!("unknown --sf key '{k}' (N, gamma, Gamma, tc, tw)"))),
        };
        let x = val
            .parse::<f64>()
            .map_err(|_| CliError::Config(format!("--sf {k}: '{val}' is not a number")))?;
        v[slot] = Some(x);
    }
    let names = ["N", "gamma", "Gamma", "tc", "tw"];
    let mut out = [0.0; 5];
    for (i, x) in v.iter().enumerate() {
        out[i] = x.ok_or_else(|| CliError::Config(format!("--sf is missing {}", names[i])))?;
    }
    Ok(SpeedupArgs {
        n: out[0],
        gamma: out[1],
        big_gamma: out[2],
        t_c: out[3],
        t_w: out[4],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths() {
        assert_eq!(parse_ghz("10GHz").unwrap(), 10.0);
        assert_eq!(parse_ghz("500MHz").unwrap(), 0.5);
        assert_eq!(parse_ghz("0.01 THz").unwrap(), 10.0);
        assert_eq!(parse_ghz("20").unwrap(), 20.0);
        assert!(parse_ghz("-3GHz").is_err());
        assert!(parse_ghz("wide").is_err());
    }

    #[test]
    fn speedup_keys() {
        let a: Vec<String> = ["N=784", "gamma=1", "Gamma=1", "tc=1", "tw=1"].iter().map(|s| s.to_string()).collect();
        let s = parse_speedup(&a).unwrap();
        assert_eq!((s.n, s.gamma, s.big_gamma), (784.0, 1.0, 1.0));
        assert!(parse_speedup(&a[..4]).is_err());
        assert!(parse_speedup(&["x=1".to_string()]).is_err());
    }

    #[test]
    fn empty_config_is_default() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c.cluster.threshold_um, 1.0);
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let c = RunConfig::from_json(r#"{"pipeline": {"normalize": false}, "synth": {"template": {"template": "sample-b", "grid": [2, 2]}}}"#).unwrap();
        assert!(!c.pipeline.normalize);
        assert!(matches!(c.synth.template, Some(Template::SampleB(ref p)) if p.grid == [2, 2]));
    }

    #[test]
    fn scan_axis() {
        let f = FrequencyScan {
            start_thz: 406.0,
            stop_thz: 406.001,
            step_mhz: 10.0,
        }
        .frequencies()
        .unwrap();
        assert_eq!(f.len(), 101);
        assert!((f[100] - 406.001).abs() < 1e-12);
    }
}
