//! Transition labels for NV and SiV centers and the SiV strain forward model.
//!
//! Everything is in linear frequency: means in THz, splittings in GHz,
//! susceptibilities in GHz per unit strain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GHZ_PER_THZ: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NVLabels {
    pub mean_thz: f64,
    pub splitting_ghz: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiVLabels {
    pub mean_thz: f64,
    pub gs_split_ghz: f64,
    pub es_split_ghz: f64,
}

/// Symmetric strain tensor components (dimensionless).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StrainState {
    pub xx: f64,
    pub yy: f64,
    pub zz: f64,
    pub xy: f64,
    pub yz: f64,
    pub zx: f64,
}

impl StrainState {
    pub const MAX_MAGNITUDE: f64 = 1e-2;

    pub fn validate(&self) -> Result<()> {
        let comps = [
            ("epsilon_xx", self.xx),
            ("epsilon_yy", self.yy),
            ("epsilon_zz", self.zz),
            ("epsilon_xy", self.xy),
            ("epsilon_yz", self.yz),
            ("epsilon_zx", self.zx),
        ];
        for (name, value) in comps {
            if !value.is_finite() || value.abs() > Self::MAX_MAGNITUDE {
                return Err(Error::Range { name, value });
            }
        }
        Ok(())
    }
}

/// Strain susceptibilities (GHz per unit strain), spin-orbit splittings (GHz)
/// and the unstrained ZPL (THz).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiVSusceptibilities {
    pub t_par_g: f64,
    pub t_par_e: f64,
    pub t_perp_g: f64,
    pub t_perp_e: f64,
    pub d_g: f64,
    pub d_e: f64,
    pub f_g: f64,
    pub f_e: f64,
    pub lambda_so_g: f64,
    pub lambda_so_e: f64,
    pub zpl0_thz: f64,
}

impl SiVSusceptibilities {
    /// Representative literature-scale values. Not calibrated for any sample.
    pub fn representative() -> Self {
        Self {
            t_par_g: -1.7e6,
            t_par_e: -2.0e6,
            t_perp_g: 0.078e6,
            t_perp_e: -3.4e6,
            d_g: 1.3e6,
            d_e: 1.8e6,
            f_g: -1.7e6,
            f_e: -3.4e6,
            lambda_so_g: 48.0,
            lambda_so_e: 259.0,
            zpl0_thz: 406.7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_so_g > 0.0) {
            return Err(Error::Range {
                name: "lambda_so_g",
                value: self.lambda_so_g,
            });
        }
        if !(self.lambda_so_e > 0.0) {
            return Err(Error::Range {
                name: "lambda_so_e",
                value: self.lambda_so_e,
            });
        }
        let all = [
            self.t_par_g,
            self.t_par_e,
            self.t_perp_g,
            self.t_perp_e,
            self.d_g,
            self.d_e,
            self.f_g,
            self.f_e,
            self.zpl0_thz,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite susceptibility".into()));
        }
        Ok(())
    }

    /// Parses the unit-annotated JSON form (see [`SusceptibilityFile`]).
    pub fn from_config_str(text: &str) -> Result<Self> {
        let file: SusceptibilityFile = serde_json::from_str(text)?;
        file.resolve()
    }

    pub fn to_config_string(&self) -> String {
        let q = |value: f64, unit: &str| Quantity {
            value,
            unit: unit.to_string(),
        };
        let strain = "GHz/strain";
        let file = SusceptibilityFile {
            note: Some("representative values; not calibrated".into()),
            t_par_g: q(self.t_par_g, strain),
            t_par_e: q(self.t_par_e, strain),
            t_perp_g: q(self.t_perp_g, strain),
            t_perp_e: q(self.t_perp_e, strain),
            d_g: q(self.d_g, strain),
            d_e: q(self.d_e, strain),
            f_g: q(self.f_g, strain),
            f_e: q(self.f_e, strain),
            lambda_so_g: q(self.lambda_so_g, "GHz"),
            lambda_so_e: q(self.lambda_so_e, "GHz"),
            zpl0: q(self.zpl0_thz, "THz"),
        };
        serde_json::to_string_pretty(&file).expect("plain data serializes")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    pub unit: String,
}

impl Quantity {
    fn in_ghz_per_strain(&self, name: &'static str) -> Result<f64> {
        let scale = match self.unit.as_str() {
            "MHz/strain" => 1e-3,
            "GHz/strain" => 1.0,
            "THz/strain" => 1e3,
            "PHz/strain" => 1e6,
            other => return Err(Error::Format(format!("{name}: unsupported unit '{other}'"))),
        };
        Ok(self.value * scale)
    }

    fn in_ghz(&self, name: &'static str) -> Result<f64> {
        let scale = match self.unit.as_str() {
            "MHz" => 1e-3,
            "GHz" => 1.0,
            "THz" => 1e3,
            other => return Err(Error::Format(format!("{name}: unsupported unit '{other}'"))),
        };
        Ok(self.value * scale)
    }
}

/// On-disk susceptibility config: every field carries its unit.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SusceptibilityFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub t_par_g: Quantity,
    pub t_par_e: Quantity,
    pub t_perp_g: Quantity,
    pub t_perp_e: Quantity,
    pub d_g: Quantity,
    pub d_e: Quantity,
    pub f_g: Quantity,
    pub f_e: Quantity,
    pub lambda_so_g: Quantity,
    pub lambda_so_e: Quantity,
    pub zpl0: Quantity,
}

impl SusceptibilityFile {
    pub fn resolve(&self) -> Result<SiVSusceptibilities> {
        let s = SiVSusceptibilities {
            t_par_g: self.t_par_g.in_ghz_per_strain("t_par_g")?,
            t_par_e: self.t_par_e.in_ghz_per_strain("t_par_e")?,
            t_perp_g: self.t_perp_g.in_ghz_per_strain("t_perp_g")?,
            t_perp_e: self.t_perp_e.in_ghz_per_strain("t_perp_e")?,
            d_g: self.d_g.in_ghz_per_strain("d_g")?,
            d_e: self.d_e.in_ghz_per_strain("d_e")?,
            f_g: self.f_g.in_ghz_per_strain("f_g")?,
            f_e: self.f_e.in_ghz_per_strain("f_e")?,
            lambda_so_g: self.lambda_so_g.in_ghz("lambda_so_g")?,
            lambda_so_e: self.lambda_so_e.in_ghz("lambda_so_e")?,
            zpl0_thz: self.zpl0.in_ghz("zpl0")? / GHZ_PER_THZ,
        };
        s.validate()?;
        Ok(s)
    }
}

pub fn nv_labels(ex_thz: f64, ey_thz: f64) -> NVLabels {
    NVLabels {
        mean_thz: 0.5 * (ex_thz + ey_thz),
        splitting_ghz: (ey_thz - ex_thz).abs() * GHZ_PER_THZ,
    }
}

/// `(nu_plus, nu_minus)` in THz.
pub fn nv_levels_from_labels(labels: NVLabels) -> (f64, f64) {
    let half = 0.5 * labels.splitting_ghz / GHZ_PER_THZ;
    (labels.mean_thz + half, labels.mean_thz - half)
}

/// Labels from the four SiV lines, `A` highest in frequency.
pub fn siv_labels(a_thz: f64, b_thz: f64, c_thz: f64, d_thz: f64) -> Result<SiVLabels> {
    if !(a_thz >= b_thz && b_thz >= c_thz && c_thz >= d_thz) {
        return Err(Error::LabelOrder);
    }
    Ok(SiVLabels {
        mean_thz: 0.25 * (a_thz + b_thz + c_thz + d_thz),
        gs_split_ghz: (c_thz - d_thz) * GHZ_PER_THZ,
        es_split_ghz: (b_thz - d_thz) * GHZ_PER_THZ,
    })
}

/// `(A, B, C, D)` in THz.
pub fn siv_transitions_from_labels(labels: SiVLabels) -> Result<(f64, f64, f64, f64)> {
    let (gs, es) = (labels.gs_split_ghz, labels.es_split_ghz);
    if !(gs >= 0.0 && es >= gs) {
        return Err(Error::OrderingInfeasible { gs_ghz: gs, es_ghz: es });
    }
    let m = labels.mean_thz;
    let sum = 0.5 * (es + gs) / GHZ_PER_THZ;
    let diff = 0.5 * (es - gs) / GHZ_PER_THZ;
    Ok((m + sum, m + diff, m - diff, m - sum))
}

/// Strain-shifted SiV labels. The shear coupling `f` multiplies `epsilon_yz`
/// linearly, like its partner term `f epsilon_zx`.
pub fn siv_strain_forward(strain: &StrainState, s: &SiVSusceptibilities) -> SiVLabels {
    let e = strain;
    let shift_ghz = (s.t_par_e - s.t_par_g) * e.zz + (s.t_perp_e - s.t_perp_g) * (e.xx + e.yy);
    let split = |lambda: f64, d: f64, f: f64| -> f64 {
        let a = d * (e.xx - e.yy) + f * e.yz;
        let b = -2.0 * d * e.xy + f * e.zx;
        (lambda * lambda + 4.0 * a * a + 4.0 * b * b).sqrt()
    };
    SiVLabels {
        mean_thz: s.zpl0_thz + shift_ghz / GHZ_PER_THZ,
        gs_split_ghz: split(s.lambda_so_g, s.d_g, s.f_g),
        es_split_ghz: split(s.lambda_so_e, s.d_e, s.f_e),
    }
}
