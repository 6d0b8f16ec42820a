//! Ground-truth scenes and their forward rendering into frame stacks and
//! white-light fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fiducial::{layout_marks, splat_disks, Disk, FiducialGeometry, FiducialLayout, FiducialPayload};
use crate::image::Image;
use crate::imageproc::gaussian_blur;
use crate::physics::{nv_labels, siv_transitions_from_labels, SiVLabels, StrainState};
use crate::ple::{lifetime_limit_mhz, pseudo_voigt_shape, Frame, FrameStack, GHZ_PER_THZ, MHZ_PER_THZ};
use crate::registry::{fit_transform, ExperimentRecord, SimilarityTransform, SpectralLabels};
use crate::scan::StagePose;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Species {
    Nv,
    Siv,
    Generic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub center_thz: f64,
    pub fwhm_mhz: f64,
    /// Lorentzian fraction of the pseudo-Voigt lineshape.
    pub eta: f64,
    /// Count rate at line center, counts/s.
    pub brightness_cps: f64,
}

impl Transition {
    /// Emission rate at excitation frequency `nu_thz`.
    pub fn rate(&self, nu_thz: f64) -> f64 {
        let dx = (nu_thz - self.center_thz) * MHZ_PER_THZ;
        self.brightness_cps * pseudo_voigt_shape(dx, self.fwhm_mhz, self.eta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEmitter {
    pub position_um: [f64; 2],
    pub species: Species,
    pub transitions: Vec<Transition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strain: Option<StrainState>,
}

impl SceneEmitter {
    pub fn rate(&self, nu_thz: f64) -> f64 {
        self.transitions.iter().map(|t| t.rate(nu_thz)).sum()
    }

    /// Sum of line-center brightnesses, used for broadband fluorescence.
    pub fn total_brightness(&self) -> f64 {
        self.transitions.iter().map(|t| t.brightness_cps).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFiducial {
    pub payload: FiducialPayload,
    pub origin_um: [f64; 2],
}

/// Reflective debris on the chip surface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Particulate {
    pub position_um: [f64; 2],
    pub radius_um: f64,
    /// Relative to the fiducial mark reflectance.
    pub reflectance: f64,
}

/// In-focus stage height `z0 + slope_x x + slope_y y`, micrometers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FocusPlane {
    pub z0_um: f64,
    pub slope_x: f64,
    pub slope_y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScene {
    pub format_version: u32,
    /// Chip spans `[0, x] x [0, y]` micrometers.
    pub chip_extent_um: [f64; 2],
    /// Laser-induced background, counts/s per pixel.
    pub background_cps_per_px: f64,
    pub module_pitch_um: f64,
    pub emitters: Vec<SceneEmitter>,
    #[serde(default)]
    pub fiducials: Vec<SceneFiducial>,
    #[serde(default)]
    pub particulates: Vec<Particulate>,
    #[serde(default)]
    pub focus: FocusPlane,
}

impl GroundTruthScene {
    pub fn empty(chip_extent_um: [f64; 2]) -> Self {
        Self {
            format_version: crate::FORMAT_VERSION,
            chip_extent_um,
            background_cps_per_px: 0.0,
            module_pitch_um: 2.0,
            emitters: Vec::new(),
            fiducials: Vec::new(),
            particulates: Vec::new(),
            focus: FocusPlane::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.chip_extent_um;
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(Error::Contract(format!("chip extent must be positive, got {w} x {h}")));
        }
        if !(self.background_cps_per_px >= 0.0) {
            return Err(Error::Range {
                name: "background_cps_per_px",
                value: self.background_cps_per_px,
            });
        }
        if !(self.module_pitch_um > 0.0) {
            return Err(Error::Range {
                name: "module_pitch_um",
                value: self.module_pitch_um,
            });
        }
        let inside = |p: [f64; 2]| p[0] >= 0.0 && p[0] <= w && p[1] >= 0.0 && p[1] <= h;
        for (i, e) in self.emitters.iter().enumerate() {
            if !inside(e.position_um) {
                return Err(Error::Contract(format!("emitter {i} lies outside the chip")));
            }
            for t in &e.transitions {
                if !(t.fwhm_mhz > 0.0) || !(0.0..=1.0).contains(&t.eta) || !(t.brightness_cps >= 0.0) || !t.center_thz.is_finite() {
                    return Err(Error::Contract(format!("emitter {i} has an invalid transition")));
                }
            }
            if let Some(s) = &e.strain {
                s.validate()?;
            }
        }
        Ok(())
    }

    pub fn focus_z_um(&self, p: [f64; 2]) -> f64 {
        self.focus.z0_um + self.focus.slope_x * p[0] + self.focus.slope_y * p[1]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Self = serde_json::from_str(text)?;
        if scene.format_version != crate::FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported scene format version {}", scene.format_version)));
        }
        scene.validate()?;
        Ok(scene)
    }

    pub fn fiducial_layout(&self, code_pitch_um: f64) -> FiducialLayout {
        FiducialLayout {
            module_pitch_um: self.module_pitch_um,
            code_pitch_um,
            codes: self
                .fiducials
                .iter()
                .map(|f| crate::fiducial::LayoutEntry {
                    payload: f.payload,
                    origin_um: f.origin_um,
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------- templates

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub mean_thz: f64,
    pub sigma_mhz: f64,
    pub weight: f64,
}

/// Low-strain SiV field with a narrow, two-class mean-ZPL distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleAParams {
    pub n_emitters: usize,
    pub populations: Vec<Population>,
    pub gs_split_ghz: f64,
    pub gs_split_sigma_ghz: f64,
    pub es_split_ghz: f64,
    pub es_split_sigma_ghz: f64,
    pub fwhm_mhz: f64,
    pub fwhm_sigma_mhz: f64,
    pub brightness_cps: f64,
    pub background_cps_per_px: f64,
    pub field_px: [usize; 2],
    pub pixel_size_um: f64,
    pub min_separation_px: f64,
    pub margin_px: f64,
}

impl Default for SampleAParams {
    fn default() -> Self {
        Self {
            n_emitters: 600,
            populations: vec![
                Population {
                    mean_thz: 406.8141,
                    sigma_mhz: 59.0,
                    weight: 0.5,
                },
                Population {
                    mean_thz: 406.8136,
                    sigma_mhz: 48.0,
                    weight: 0.5,
                },
            ],
            gs_split_ghz: 48.0,
            gs_split_sigma_ghz: 0.02,
            es_split_ghz: 259.0,
            es_split_sigma_ghz: 0.03,
            fwhm_mhz: 140.0,
            fwhm_sigma_mhz: 15.0,
            brightness_cps: 4000.0,
            background_cps_per_px: 100.0,
            field_px: [384, 384],
            pixel_size_um: 0.25,
            min_separation_px: 9.0,
            margin_px: 12.0,
        }
    }
}

impl SampleAParams {
    /// Mean `(A, B, C, D)` line positions of the scene, THz.
    pub fn mean_lines(&self) -> Result<[f64; 4]> {
        let wsum: f64 = self.populations.iter().map(|p| p.weight).sum();
        let mean = self.populations.iter().map(|p| p.weight * p.mean_thz).sum::<f64>() / wsum;
        let (a, b, c, d) = siv_transitions_from_labels(SiVLabels {
            mean_thz: mean,
            gs_split_ghz: self.gs_split_ghz,
            es_split_ghz: self.es_split_ghz,
        })?;
        Ok([a, b, c, d])
    }

    /// One frequency axis per SiV line, `+-half_width_ghz` around its mean
    /// position in `step_mhz` steps.
    pub fn scan_windows(&self, half_width_ghz: f64, step_mhz: f64) -> Result<[Vec<f64>; 4]> {
        let lines = self.mean_lines()?;
        let n = (2.0 * half_width_ghz * 1e3 / step_mhz).round() as usize + 1;
        Ok(lines.map(|c| {
            let lo = c - half_width_ghz / GHZ_PER_THZ;
            (0..n).map(|i| lo + i as f64 * step_mhz / MHZ_PER_THZ).collect()
        }))
    }

    fn validate(&self) -> Result<()> {
        if self.populations.is_empty() || self.populations.iter().any(|p| !(p.sigma_mhz > 0.0) || !(p.weight > 0.0)) {
            return Err(Error::Contract("sample-A populations need positive widths and weights".into()));
        }
        if !(self.pixel_size_um > 0.0) || self.field_px[0] == 0 || self.field_px[1] == 0 {
            return Err(Error::Contract("sample-A field must be non-empty".into()));
        }
        if self.gs_split_ghz > self.es_split_ghz {
            return Err(Error::OrderingInfeasible {
                gs_ghz: self.gs_split_ghz,
                es_ghz: self.es_split_ghz,
            });
        }
        Ok(())
    }
}

/// Implanted grid of SiV sites with a broad center-frequency distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleBParams {
    pub grid: [usize; 2],
    pub grid_pitch_um: f64,
    pub margin_um: f64,
    pub center_range_thz: [f64; 2],
    pub transitions_per_site: [usize; 2],
    pub fwhm_mhz: f64,
    pub fwhm_sigma_mhz: f64,
    pub eta: f64,
    pub brightness_cps: f64,
    pub background_cps_per_px: f64,
}

impl Default for SampleBParams {
    fn default() -> Self {
        Self {
            grid: [32, 32],
            grid_pitch_um: 4.0,
            margin_um: 5.0,
            center_range_thz: [405.6, 406.72],
            transitions_per_site: [1, 3],
            fwhm_mhz: 210.0,
            fwhm_sigma_mhz: 30.0,
            eta: 1.0,
            brightness_cps: 5000.0,
            background_cps_per_px: 100.0,
        }
    }
}

impl SampleBParams {
    /// Global position of grid node `(row, col)`.
    pub fn node_um(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.margin_um + col as f64 * self.grid_pitch_um,
            self.margin_um + row as f64 * self.grid_pitch_um,
        ]
    }

    pub fn extent_um(&self) -> [f64; 2] {
        [
            2.0 * self.margin_um + (self.grid[1].max(1) - 1) as f64 * self.grid_pitch_um,
            2.0 * self.margin_um + (self.grid[0].max(1) - 1) as f64 * self.grid_pitch_um,
        ]
    }
}

/// Fiducial-patterned chip for traversal simulations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChipParams {
    pub version: u8,
    /// Code grid `[rows, cols]`.
    pub codes: [u32; 2],
    pub code_pitch_um: f64,
    pub module_pitch_um: f64,
    pub code_offset_um: [f64; 2],
    pub emitters_per_code: usize,
    pub emitter_brightness_cps: f64,
    pub focus: FocusPlane,
}

impl Default for ChipParams {
    fn default() -> Self {
        Self {
            version: 1,
            codes: [32, 32],
            code_pitch_um: 20.0,
            module_pitch_um: 2.0,
            code_offset_um: [2.0, 2.0],
            emitters_per_code: 2,
            emitter_brightness_cps: 5000.0,
            focus: FocusPlane {
                z0_um: 5.0,
                slope_x: 0.0,
                slope_y: 0.0,
            },
        }
    }
}

impl ChipParams {
    pub fn extent_um(&self) -> [f64; 2] {
        [self.codes[1] as f64 * self.code_pitch_um, self.codes[0] as f64 * self.code_pitch_um]
    }
}

/// Four registrations of one NV field with per-experiment frames, bounded
/// position jitter, dropout and an optional mean-frequency cohort shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistryParams {
    pub n_sites: usize,
    pub n_experiments: usize,
    pub region_um: [f64; 2],
    pub threshold_um: f64,
    /// Maximum per-experiment displacement of a site, micrometers.
    pub jitter_um: f64,
    pub dropout: f64,
    pub mean_thz: f64,
    pub mean_sigma_ghz: f64,
    pub splitting_range_ghz: [f64; 2],
    /// Per-measurement label noise, MHz.
    pub label_noise_mhz: f64,
    /// Experiment pair `(i, j)` between which half the sites shift by
    /// `+shift_mhz` and half by `-shift_mhz` in mean frequency.
    pub cohort: Option<(u32, u32)>,
    pub shift_mhz: f64,
    pub max_rotation_deg: f64,
    pub max_translation_um: f64,
    pub scale_sigma: f64,
    /// Fiducial localization noise, micrometers.
    pub fiducial_noise_um: f64,
    pub fiducial_grid: [u32; 2],
}

impl Default for RegistryParams {
    fn default() -> Self {
        Self {
            n_sites: 400,
            n_experiments: 4,
            region_um: [120.0, 120.0],
            threshold_um: 1.0,
            jitter_um: 0.2,
            dropout: 0.1,
            mean_thz: 470.45,
            mean_sigma_ghz: 20.0,
            splitting_range_ghz: [1.0, 10.0],
            label_noise_mhz: 5.0,
            cohort: Some((0, 1)),
            shift_mhz: 100.0,
            max_rotation_deg: 2.0,
            max_translation_um: 50.0,
            scale_sigma: 1e-3,
            fiducial_noise_um: 0.01,
            fiducial_grid: [4, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "template", rename_all = "kebab-case")]
pub enum Template {
    SampleA(SampleAParams),
    SampleB(SampleBParams),
    Registry(RegistryParams),
    Chip(ChipParams),
    Custom(GroundTruthScene),
}

impl Template {
    /// Template with default parameters by name.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "sample-a" => Self::SampleA(SampleAParams::default()),
            "sample-b" => Self::SampleB(SampleBParams::default()),
            "registry" | "registry-4" => Self::Registry(RegistryParams::default()),
            "chip" => Self::Chip(ChipParams::default()),
            other => return Err(Error::Contract(format!("unknown template '{other}' (sample-a, sample-b, registry, chip)"))),
        })
    }
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    if sd > 0.0 {
        Normal::new(mean, sd).expect("finite positive sd").sample(rng)
    } else {
        mean
    }
}

/// Rejection-sampled positions with a minimum pairwise distance.
fn scatter(rng: &mut ChaCha8Rng, n: usize, lo: [f64; 2], hi: [f64; 2], min_dist: f64) -> Result<Vec<[f64; 2]>> {
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while pts.len() < n {
        attempts += 1;
        if attempts > 1000 * n.max(1) {
            return Err(Error::Contract(format!(
                "cannot place {n} points with separation {min_dist} in the given region"
            )));
        }
        let p = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
        if pts.iter().all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) >= min_dist) {
            pts.push(p);
        }
    }
    Ok(pts)
}

fn fwhm_draw(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    normal(rng, mean, sd).max(lifetime_limit_mhz() * 1.05)
}

pub fn generate_scene(template: &Template, seed: u64) -> Result<GroundTruthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = match template {
        Template::Custom(scene) => scene.clone(),
        Template::SampleA(p) => sample_a(p, &mut rng)?,
        Template::SampleB(p) => sample_b(p, &mut rng)?,
        Template::Chip(p) => chip(p, &mut rng)?,
        Template::Registry(p) => generate_registry(p, seed)?.truth,
    };
    scene.validate()?;
    Ok(scene)
}

fn sample_a(p: &SampleAParams, rng: &mut ChaCha8Rng) -> Result<GroundTruthScene> {
    p.validate()?;
    let px = p.pixel_size_um;
    let extent = [p.field_px[0] as f64 * px, p.field_px[1] as f64 * px];
    let m = p.margin_px * px;
    let positions = scatter(rng, p.n_emitters, [m, m], [extent[0] - m, extent[1] - m], p.min_separation_px * px)?;
    let wsum: f64 = p.populations.iter().map(|q| q.weight).sum();
    let mut emitters = Vec::with_capacity(positions.len());
    for pos in positions {
        let mut u = rng.random_range(0.0..wsum);
        let pop = p
            .populations
            .iter()
            .find(|q| {
                u -= q.weight;
                u < 0.0
            })
            .unwrap_or(&p.populations[p.populations.len() - 1]);
        let labels = SiVLabels {
            mean_thz: pop.mean_thz + normal(rng, 0.0, pop.sigma_mhz) / MHZ_PER_THZ,
            gs_split_ghz: normal(rng, p.gs_split_ghz, p.gs_split_sigma_ghz),
            es_split_ghz: normal(rng, p.es_split_ghz, p.es_split_sigma_ghz),
        };
        let (a, b, c, d) = siv_transitions_from_labels(labels)?;
        let transitions = [a, b, c, d]
            .into_iter()
            .map(|center_thz| Transition {
                center_thz,
                fwhm_mhz: fwhm_draw(rng, p.fwhm_mhz, p.fwhm_sigma_mhz),
                eta: 1.0,
                brightness_cps: p.brightness_cps,
            })
            .collect();
        emitters.push(SceneEmitter {
            position_um: pos,
            species: Species::Siv,
            transitions,
            strain: None,
        });
    }
    Ok(GroundTruthScene {
        background_cps_per_px: p.background_cps_per_px,
        emitters,
        ..GroundTruthScene::empty(extent)
    })
}

fn sample_b(p: &SampleBParams, rng: &mut ChaCha8Rng) -> Result<GroundTruthScene> {
    let [lo, hi] = p.center_range_thz;
    if !(hi > lo) || p.transitions_per_site[0] > p.transitions_per_site[1] || !(p.grid_pitch_um > 0.0) {
        return Err(Error::Contract("invalid sample-B template".into()));
    }
    let mut emitters = Vec::with_capacity(p.grid[0] * p.grid[1]);
    for r in 0..p.grid[0] {
        for c in 0..p.grid[1] {
            let k = rng.random_range(p.transitions_per_site[0]..=p.transitions_per_site[1]);
            let transitions = (0..k)
                .map(|_| Transition {
                    center_thz: rng.random_range(lo..hi),
                    fwhm_mhz: fwhm_draw(rng, p.fwhm_mhz, p.fwhm_sigma_mhz),
                    eta: p.eta,
                    brightness_cps: p.brightness_cps,
                })
                .collect();
            emitters.push(SceneEmitter {
                position_um: p.node_um(r, c),
                species: Species::Siv,
                transitions,
                strain: None,
            });
        }
    }
    Ok(GroundTruthScene {
        background_cps_per_px: p.background_cps_per_px,
        emitters,
        ..GroundTruthScene::empty(p.extent_um())
    })
}

fn chip(p: &ChipParams, rng: &mut ChaCha8Rng) -> Result<GroundTruthScene> {
    let layout = FiducialLayout::grid(p.version, p.codes[0], p.codes[1], p.code_pitch_um, p.module_pitch_um, p.code_offset_um)?;
    let extent = p.extent_um();
    let mut emitters = Vec::new();
    let code_size = 7.0 * p.module_pitch_um;
    for entry in &layout.codes {
        for _ in 0..p.emitters_per_code {
            // Emitters in the open area beside each code.
            let x = entry.origin_um[0] + rng.random_range(code_size..p.code_pitch_um.max(code_size + 1e-6));
            let y = entry.origin_um[1] + rng.random_range(0.0..p.code_pitch_um);
            if x > extent[0] || y > extent[1] {
                continue;
            }
            let species = [Species::Nv, Species::Siv, Species::Generic][rng.random_range(0..3)];
            emitters.push(SceneEmitter {
                position_um: [x, y],
                species,
                transitions: vec![Transition {
                    center_thz: 406.7,
                    fwhm_mhz: 200.0,
                    eta: 1.0,
                    brightness_cps: p.emitter_brightness_cps,
                }],
                strain: None,
            });
        }
    }
    Ok(GroundTruthScene {
        module_pitch_um: p.module_pitch_um,
        emitters,
        fiducials: layout
            .codes
            .iter()
            .map(|e| SceneFiducial {
                payload: e.payload,
                origin_um: e.origin_um,
            })
            .collect(),
        focus: p.focus,
        ..GroundTruthScene::empty(extent)
    })
}

/// Random reflective debris, `density` particles per 100 x 100 um.
pub fn add_particulates(scene: &mut GroundTruthScene, density: f64, radius_um: [f64; 2], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x9e37);
    let [w, h] = scene.chip_extent_um;
    let n = (density * w * h / 1e4).round() as usize;
    for _ in 0..n {
        scene.particulates.push(Particulate {
            position_um: [rng.random_range(0.0..w), rng.random_range(0.0..h)],
            radius_um: rng.random_range(radius_um[0]..=radius_um[1]),
            reflectance: rng.random_range(0.5..1.5),
        });
    }
}

// ----------------------------------------------------------------- registry

/// One simulated registration: the experiment's local frame and what it saw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedExperiment {
    pub experiment_id: u32,
    /// True local-to-global map.
    pub transform: SimilarityTransform,
    /// Fiducial origins as localized in the local frame, with their layout
    /// (global) positions.
    pub fiducial_pairs: Vec<([f64; 2], [f64; 2])>,
    /// Observed sites in local coordinates, with labels.
    pub sites_local_um: Vec<[f64; 2]>,
    pub labels: Vec<SpectralLabels>,
    /// Index of the true site behind each observation.
    pub identity: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryScenario {
    pub truth: GroundTruthScene,
    pub threshold_um: f64,
    pub experiments: Vec<SimulatedExperiment>,
    /// `+1` / `-1` cohort membership per true site (0 without a cohort).
    pub cohort_sign: Vec<i8>,
}

impl RegistryScenario {
    /// Number of experiments each true site was observed in.
    pub fn true_occupancy(&self) -> Vec<usize> {
        let mut occ = vec![0; self.truth.emitters.len()];
        for e in &self.experiments {
            for &i in &e.identity {
                occ[i] += 1;
            }
        }
        occ
    }

    /// Registers every experiment from its fiducial pairs and maps its sites
    /// into the global frame.
    pub fn to_records(&self) -> Result<Vec<ExperimentRecord>> {
        self.experiments
            .iter()
            .map(|e| {
                let (local, global): (Vec<[f64; 2]>, Vec<[f64; 2]>) = e.fiducial_pairs.iter().copied().unzip();
                let fit = fit_transform(&local, &global)?;
                let sites: Vec<([f64; 2], Option<SpectralLabels>)> =
                    e.sites_local_um.iter().zip(&e.labels).map(|(p, l)| (*p, Some(*l))).collect();
                ExperimentRecord::from_local(e.experiment_id, fit.transform, &sites)
            })
            .collect()
    }
}

fn random_disk(rng: &mut ChaCha8Rng, radius: f64) -> [f64; 2] {
    let r = radius * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    [r * a.cos(), r * a.sin()]
}

pub fn generate_registry(p: &RegistryParams, seed: u64) -> Result<RegistryScenario> {
    if p.n_experiments == 0 || !(p.threshold_um > 0.0) || !(0.0..1.0).contains(&p.dropout) {
        return Err(Error::Contract("invalid registry template".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [w, h] = p.region_um;
    let sites = scatter(&mut rng, p.n_sites, [0.0, 0.0], [w, h], 2.0 * p.threshold_um + 2.0 * p.jitter_um)?;
    let base: Vec<(f64, f64)> = sites
        .iter()
        .map(|_| {
            (
                p.mean_thz + normal(&mut rng, 0.0, p.mean_sigma_ghz) / GHZ_PER_THZ,
                rng.random_range(p.splitting_range_ghz[0]..=p.splitting_range_ghz[1]),
            )
        })
        .collect();
    let mut signs: Vec<i8> = (0..sites.len()).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
    if p.cohort.is_none() {
        signs.iter_mut().for_each(|s| *s = 0);
    }
    let emitters = sites
        .iter()
        .zip(&base)
        .map(|(pos, &(mean, split))| {
            let half = 0.5 * split / GHZ_PER_THZ;
            SceneEmitter {
                position_um: *pos,
                species: Species::Nv,
                transitions: [mean - half, mean + half]
                    .into_iter()
                    .map(|c| Transition {
                        center_thz: c,
                        fwhm_mhz: 100.0,
                        eta: 1.0,
                        brightness_cps: 1000.0,
                    })
                    .collect(),
                strain: None,
            }
        })
        .collect();
    let layout = FiducialLayout::grid(
        1,
        p.fiducial_grid[0],
        p.fiducial_grid[1],
        w / p.fiducial_grid[1].max(1) as f64,
        2.0,
        [0.0, 0.0],
    )?;
    let truth = GroundTruthScene {
        emitters,
        fiducials: layout
            .codes
            .iter()
            .map(|e| SceneFiducial {
                payload: e.payload,
                origin_um: e.origin_um,
            })
            .collect(),
        ..GroundTruthScene::empty([w, h])
    };

    let mut experiments = Vec::with_capacity(p.n_experiments);
    for k in 0..p.n_experiments as u32 {
        let transform = SimilarityTransform {
            scale: normal(&mut rng, 1.0, p.scale_sigma),
            rotation: rng.random_range(-p.max_rotation_deg..=p.max_rotation_deg).to_radians(),
            translation: [
                rng.random_range(-p.max_translation_um..=p.max_translation_um),
                rng.random_range(-p.max_translation_um..=p.max_translation_um),
            ],
        };
        let fiducial_pairs = layout
            .codes
            .iter()
            .map(|c| {
                let l = transform.to_local(c.origin_um);
                let n = [normal(&mut rng, 0.0, p.fiducial_noise_um), normal(&mut rng, 0.0, p.fiducial_noise_um)];
                ([l[0] + n[0], l[1] + n[1]], c.origin_um)
            })
            .collect();
        let mut exp = SimulatedExperiment {
            experiment_id: k,
            transform,
            fiducial_pairs,
            sites_local_um: Vec::new(),
            labels: Vec::new(),
            identity: Vec::new(),
        };
        for (i, (pos, &(mean, split))) in sites.iter().zip(&base).enumerate() {
            if rng.random::<f64>() < p.dropout {
                continue;
            }
            let j = random_disk(&mut rng, p.jitter_um);
            exp.sites_local_um.push(transform.to_local([pos[0] + j[0], pos[1] + j[1]]));
            let shift = match p.cohort {
                Some((_, b)) if b == k => signs[i] as f64 * p.shift_mhz,
                _ => 0.0,
            };
            let m = mean + (shift + normal(&mut rng, 0.0, p.label_noise_mhz)) / MHZ_PER_THZ;
            let s = split + normal(&mut rng, 0.0, p.label_noise_mhz) / 1e3;
            let half = 0.5 * s.abs() / GHZ_PER_THZ;
            exp.labels.push(SpectralLabels::Nv(nv_labels(m - half, m + half)));
            exp.identity.push(i);
        }
        experiments.push(exp);
    }
    Ok(RegistryScenario {
        truth,
        threshold_um: p.threshold_um,
        experiments,
        cohort_sign: signs,
    })
}

// ----------------------------------------------------------------- rendering

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LaserModulation {
    Constant {
        level: f64,
    },
    /// `1 + depth sin(2 pi (nu - nu_first) / period + phase)`; the period
    /// defaults to the scan span.
    Sinusoid {
        depth: f64,
        #[serde(default)]
        period_ghz: Option<f64>,
        #[serde(default)]
        phase_rad: f64,
    },
}

impl Default for LaserModulation {
    fn default() -> Self {
        Self::Sinusoid {
            depth: 0.1,
            period_ghz: None,
            phase_rad: 0.0,
        }
    }
}

impl LaserModulation {
    fn validate(&self) -> Result<()> {
        match *self {
            Self::Constant { level } if !(level > 0.0) => Err(Error::Range { name: "modulation level", value: level }),
            Self::Sinusoid { depth, .. } if !(0.0..1.0).contains(&depth) => Err(Error::Range { name: "modulation depth", value: depth }),
            Self::Sinusoid {
                period_ghz: Some(p), ..
            } if !(p > 0.0) => Err(Error::Range { name: "modulation period", value: p }),
            _ => Ok(()),
        }
    }

    /// Multiplier at every frequency of `axis`.
    pub fn evaluate(&self, axis: &[f64]) -> Vec<f64> {
        match *self {
            Self::Constant { level } => vec![level; axis.len()],
            Self::Sinusoid {
                depth,
                period_ghz,
                phase_rad,
            } => {
                let first = axis.first().copied().unwrap_or(0.0);
                let span = axis.iter().map(|f| (f - first).abs()).fold(0.0, f64::max);
                let period = period_ghz.map(|p| p / GHZ_PER_THZ).unwrap_or(span).max(f64::MIN_POSITIVE);
                axis.iter()
                    .map(|f| 1.0 + depth * (std::f64::consts::TAU * (f - first).abs() / period + phase_rad).sin())
                    .collect()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    None,
    #[default]
    Poisson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width_px: usize,
    pub height_px: usize,
    /// Global position of the center of pixel (0, 0).
    pub origin_um: [f64; 2],
    pub pixel_size_um: f64,
    pub psf_sigma_px: f64,
    pub frequencies_thz: Vec<f64>,
    pub laser_modulation: LaserModulation,
    pub exposure_s: f64,
    pub noise: Noise,
    pub seed: u64,
}

impl RenderConfig {
    /// Covers the whole chip of `scene` at `pixel_size_um`.
    pub fn for_scene(scene: &GroundTruthScene, pixel_size_um: f64, frequencies_thz: Vec<f64>) -> Self {
        Self {
            width_px: (scene.chip_extent_um[0] / pixel_size_um).ceil() as usize,
            height_px: (scene.chip_extent_um[1] / pixel_size_um).ceil() as usize,
            origin_um: [0.0, 0.0],
            pixel_size_um,
            psf_sigma_px: 2.0,
            frequencies_thz,
            laser_modulation: LaserModulation::default(),
            exposure_s: 1.0,
            noise: Noise::Poisson,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::Contract("render size must be non-zero".into()));
        }
        for (name, v) in [
            ("psf_sigma_px", self.psf_sigma_px),
            ("pixel_size_um", self.pixel_size_um),
            ("exposure_s", self.exposure_s),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Range { name, value: v });
            }
        }
        if self.frequencies_thz.is_empty() {
            return Err(Error::EmptyInput("frequency axis"));
        }
        self.laser_modulation.validate()
    }

    /// Pixel coordinates of a global position.
    pub fn to_px(&self, um: [f64; 2]) -> [f64; 2] {
        [
            (um[0] - self.origin_um[0]) / self.pixel_size_um,
            (um[1] - self.origin_um[1]) / self.pixel_size_um,
        ]
    }
}

/// Point-sampled Gaussian PSF normalized to unit sum over its support.
#[derive(Clone, Debug)]
pub struct PsfStamp {
    pub x0: isize,
    pub y0: isize,
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
}

impl PsfStamp {
    pub fn new(center_px: [f64; 2], sigma_px: f64) -> Self {
        let r = (5.0 * sigma_px).ceil() as isize;
        let (cx, cy) = (center_px[0].round() as isize, center_px[1].round() as isize);
        let (x0, y0) = (cx - r, cy - r);
        let n = (2 * r + 1) as usize;
        let mut weights = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let dx = (x0 + x as isize) as f64 - center_px[0];
                let dy = (y0 + y as isize) as f64 - center_px[1];
                weights.push((-(dx * dx + dy * dy) / (2.0 * sigma_px * sigma_px)).exp());
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self {
            x0,
            y0,
            width: n,
            height: n,
            weights,
        }
    }

    /// Weight at image pixel `(x, y)`; zero outside the stamp.
    pub fn at(&self, x: isize, y: isize) -> f64 {
        let (dx, dy) = (x - self.x0, y - self.y0);
        if dx < 0 || dy < 0 || dx >= self.width as isize || dy >= self.height as isize {
            return 0.0;
        }
        self.weights[dy as usize * self.width + dx as usize]
    }

    /// Adds `scale * weight` into `image`, clipped at the borders.
    pub fn splat(&self, image: &mut Image, scale: f64) {
        let (w, h) = image.dims();
        for sy in 0..self.height {
            let y = self.y0 + sy as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            let row = &self.weights[sy * self.width..(sy + 1) * self.width];
            let data = image.data_mut();
            for (sx, &wt) in row.iter().enumerate() {
                let x = self.x0 + sx as isize;
                if x >= 0 && x < w as isize {
                    data[y as usize * w + x as usize] += scale * wt;
                }
            }
        }
    }
}

/// Random stream for frame `index`, independent of evaluation order.
pub fn frame_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn poisson_sample(image: &mut Image, rng: &mut ChaCha8Rng) {
    for v in image.data_mut() {
        *v = if *v > 0.0 {
            Poisson::new(*v).expect("positive finite rate").sample(rng)
        } else {
            0.0
        };
    }
}

/// Noise-free expected counts of frame `index` of `config`.
pub fn expected_frame(scene: &GroundTruthScene, config: &RenderConfig, stamps: &[PsfStamp], modulation: f64, nu_thz: f64) -> Image {
    let mut img = Image::filled(config.width_px, config.height_px, scene.background_cps_per_px);
    for (e, stamp) in scene.emitters.iter().zip(stamps) {
        let rate = e.rate(nu_thz);
        if rate > 0.0 {
            stamp.splat(&mut img, rate);
        }
    }
    img.scaled(modulation * config.exposure_s)
}

pub fn psf_stamps(scene: &GroundTruthScene, config: &RenderConfig) -> Vec<PsfStamp> {
    scene
        .emitters
        .iter()
        .map(|e| PsfStamp::new(config.to_px(e.position_um), config.psf_sigma_px))
        .collect()
}

/// Counts per frame: `(background + sum of PSF-weighted emitter rates) x
/// modulation x exposure`, Poisson-sampled when enabled. Frames render in
/// parallel; each draws from its own stream so the result does not depend
/// on scheduling.
pub fn render_stack(scene: &GroundTruthScene, config: &RenderConfig) -> Result<FrameStack> {
    scene.validate()?;
    config.validate()?;
    let stamps = psf_stamps(scene, config);
    let modulation = config.laser_modulation.evaluate(&config.frequencies_thz);
    let frames: Vec<Frame> = config
        .frequencies_thz
        .par_iter()
        .zip(modulation.par_iter())
        .enumerate()
        .map(|(i, (&nu, &m))| {
            let mut image = expected_frame(scene, config, &stamps, m, nu);
            if config.noise == Noise::Poisson {
                poisson_sample(&mut image, &mut frame_rng(config.seed, i as u64));
            }
            Frame {
                frequency_thz: nu,
                exposure_s: config.exposure_s,
                image,
            }
        })
        .collect();
    FrameStack::new(frames, config.pixel_size_um)
}

/// White-light imaging of a stage field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub width_px: usize,
    pub height_px: usize,
    pub pixel_size_um: f64,
    /// In-focus PSF sigma.
    pub psf_sigma_px: f64,
    /// Blur growth per micrometer of defocus, pixels.
    pub defocus_px_per_um: f64,
    /// Counts of a fully covered fiducial pixel.
    pub reflectance_counts: f64,
    pub background_counts: f64,
    /// Broadband fluorescence integration time; 0 disables the layer.
    pub fluorescence_exposure_s: f64,
    pub noise: Noise,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            width_px: 256,
            height_px: 256,
            pixel_size_um: 0.25,
            psf_sigma_px: 1.0,
            defocus_px_per_um: 1.5,
            reflectance_counts: 200.0,
            background_counts: 50.0,
            fluorescence_exposure_s: 0.01,
            noise: Noise::Poisson,
            seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn field_size_um(&self) -> [f64; 2] {
        [self.width_px as f64 * self.pixel_size_um, self.height_px as f64 * self.pixel_size_um]
    }

    pub fn module_pitch_px(&self, scene: &GroundTruthScene) -> f64 {
        scene.module_pitch_um / self.pixel_size_um
    }

    /// Pixel position of global point `um` in a field centered at `center_um`.
    pub fn to_px(&self, center_um: [f64; 2], um: [f64; 2]) -> [f64; 2] {
        [
            (um[0] - center_um[0]) / self.pixel_size_um + 0.5 * (self.width_px as f64 - 1.0),
            (um[1] - center_um[1]) / self.pixel_size_um + 0.5 * (self.height_px as f64 - 1.0),
        ]
    }

    /// Inverse of [`FieldConfig::to_px`].
    pub fn to_um(&self, center_um: [f64; 2], px: [f64; 2]) -> [f64; 2] {
        [
            center_um[0] + (px[0] - 0.5 * (self.width_px as f64 - 1.0)) * self.pixel_size_um,
            center_um[1] + (px[1] - 0.5 * (self.height_px as f64 - 1.0)) * self.pixel_size_um,
        ]
    }

    /// `sqrt(sigma0^2 + (k dz)^2)`.
    pub fn effective_sigma(&self, dz_um: f64) -> f64 {
        self.psf_sigma_px.hypot(self.defocus_px_per_um * dz_um)
    }

    fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::Contract("field size must be non-zero".into()));
        }
        for (name, v) in [("pixel_size_um", self.pixel_size_um), ("psf_sigma_px", self.psf_sigma_px)] {
            if !(v > 0.0) {
                return Err(Error::Range { name, value: v });
            }
        }
        if !(self.defocus_px_per_um >= 0.0) {
            return Err(Error::Range {
                name: "defocus_px_per_um",
                value: self.defocus_px_per_um,
            });
        }
        Ok(())
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Renders the field centered on `pose` with the stage `pose.z_um -
/// focus_z_um` out of focus: reflective fiducials and debris plus broadband
/// fluorescence, blurred by the defocused PSF, over a flat background.
pub fn render_field(scene: &GroundTruthScene, pose: &StagePose, focus_z_um: f64, config: &FieldConfig) -> Result<Image> {
    config.validate()?;
    let c = [pose.x_um, pose.y_um];
    let [w, h] = scene.chip_extent_um;
    if !(c[0] >= 0.0 && c[0] <= w && c[1] >= 0.0 && c[1] <= h) {
        return Err(Error::OutOfBounds(format!(
            "stage pose ({:.3}, {:.3}) um is outside the {w} x {h} um chip",
            c[0], c[1]
        )));
    }
    let (wp, hp) = (config.width_px, config.height_px);
    let mut img = Image::zeros(wp, hp);
    let pitch_px = config.module_pitch_px(scene);
    let geom = FiducialGeometry::canonical(pitch_px);
    let reach = 8.0 * pitch_px;
    let visible = |p: [f64; 2], pad: f64| p[0] > -pad && p[1] > -pad && p[0] < wp as f64 + pad && p[1] < hp as f64 + pad;
    for f in &scene.fiducials {
        let o = config.to_px(c, f.origin_um);
        if visible(o, reach) {
            let marks = layout_marks(f.payload, &geom)?;
            splat_disks(&mut img, &marks, o, config.reflectance_counts);
        }
    }
    for p in &scene.particulates {
        let o = config.to_px(c, p.position_um);
        let r = p.radius_um / config.pixel_size_um;
        if visible(o, r + 2.0) {
            let disk = Disk {
                center: [0.0, 0.0],
                radius: r,
            };
            splat_disks(&mut img, &[disk], o, config.reflectance_counts * p.reflectance);
        }
    }
    if config.fluorescence_exposure_s > 0.0 {
        for e in &scene.emitters {
            let o = config.to_px(c, e.position_um);
            if !visible(o, 2.0) {
                continue;
            }
            // Bilinear deposit; the blur below supplies the PSF.
            let counts = e.total_brightness() * config.fluorescence_exposure_s;
            let (x0, y0) = (o[0].floor(), o[1].floor());
            let (fx, fy) = (o[0] - x0, o[1] - y0);
            for (dx, dy, wgt) in [(0, 0, (1.0 - fx) * (1.0 - fy)), (1, 0, fx * (1.0 - fy)), (0, 1, (1.0 - fx) * fy), (1, 1, fx * fy)] {
                let (x, y) = (x0 as isize + dx, y0 as isize + dy);
                if x >= 0 && y >= 0 && (x as usize) < wp && (y as usize) < hp {
                    img.add(x as usize, y as usize, counts * wgt);
                }
            }
        }
    }
    let sigma = config.effective_sigma(pose.z_um - focus_z_um);
    let mut img = gaussian_blur(&img, sigma)?;
    for v in img.data_mut() {
        *v += config.background_counts;
    }
    if config.noise == Noise::Poisson {
        let stream = mix64(pose.x_um.to_bits() ^ mix64(pose.y_um.to_bits() ^ mix64(pose.z_um.to_bits())));
        poisson_sample(&mut img, &mut frame_rng(config.seed, stream));
    }
    Ok(img)
}

/// A white-light image of loose codes at known positions.
#[derive(Clone, Debug)]
pub struct FiducialField {
    pub image: Image,
    pub codes: Vec<(FiducialPayload, [f64; 2])>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FiducialFieldParams {
    pub width_px: usize,
    pub height_px: usize,
    pub module_pitch_px: f64,
    pub n_codes: [usize; 2],
    pub amplitude: f64,
    pub background: f64,
    pub blur_sigma_px: f64,
    pub noise: Noise,
}

impl Default for FiducialFieldParams {
    fn default() -> Self {
        Self {
            width_px: 512,
            height_px: 512,
            module_pitch_px: 8.0,
            n_codes: [1, 4],
            amplitude: 200.0,
            background: 50.0,
            blur_sigma_px: 1.0,
            noise: Noise::Poisson,
        }
    }
}

impl FiducialFieldParams {
    /// Peak signal over its Poisson noise, `A / sqrt(A + b)`.
    pub fn peak_snr(&self) -> f64 {
        self.amplitude / (self.amplitude + self.background).sqrt()
    }
}

/// Random payloads at random non-overlapping positions, fully inside the
/// image.
pub fn fiducial_field(params: &FiducialFieldParams, seed: u64) -> Result<FiducialField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = params.module_pitch_px;
    let n = rng.random_range(params.n_codes[0]..=params.n_codes[1]);
    let lo = [1.5 * p, 1.5 * p];
    let hi = [params.width_px as f64 - 8.0 * p, params.height_px as f64 - 8.0 * p];
    if !(hi[0] > lo[0] && hi[1] > lo[1]) {
        return Err(Error::Contract("field too small for a code".into()));
    }
    let origins = scatter(&mut rng, n, lo, hi, 10.0 * p)?;
    let geom = FiducialGeometry::canonical(p);
    let mut img = Image::zeros(params.width_px, params.height_px);
    let mut codes = Vec::with_capacity(n);
    for o in origins {
        let payload = FiducialPayload {
            version: rng.random_range(0..16),
            row: rng.random(),
            col: rng.random(),
        };
        splat_disks(&mut img, &layout_marks(payload, &geom)?, o, params.amplitude);
        codes.push((payload, o));
    }
    let mut img = if params.blur_sigma_px > 0.0 {
        gaussian_blur(&img, params.blur_sigma_px)?
    } else {
        img
    };
    for v in img.data_mut() {
        *v += params.background;
    }
    if params.noise == Noise::Poisson {
        poisson_sample(&mut img, &mut frame_rng(seed, u64::MAX));
    }
    Ok(FiducialField { image: img, codes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fiducial::detect;

    fn one_emitter(brightness: f64) -> GroundTruthScene {
        GroundTruthScene {
            background_cps_per_px: 0.0,
            emitters: vec![SceneEmitter {
                position_um: [8.0, 8.0],
                species: Species::Siv,
                transitions: vec![Transition {
                    center_thz: 406.0,
                    fwhm_mhz: 100.0,
                    eta: 1.0,
                    brightness_cps: brightness,
                }],
                strain: None,
            }],
            ..GroundTruthScene::empty([16.0, 16.0])
        }
    }

    fn quiet(scene: &GroundTruthScene, freqs: Vec<f64>) -> RenderConfig {
        RenderConfig {
            noise: Noise::None,
            laser_modulation: LaserModulation::Constant { level: 1.0 },
            ..RenderConfig::for_scene(scene, 0.25, freqs)
        }
    }

    #[test]
    fn peak_pixel_closed_form() {
        let scene = one_emitter(1000.0);
        let mut cfg = quiet(&scene, vec![406.0]);
        cfg.exposure_s = 0.5;
        let stack = render_stack(&scene, &cfg).unwrap();
        let img = &stack.frames()[0].image;
        let stamp = PsfStamp::new([32.0, 32.0], 2.0);
        let expected = 1000.0 * 0.5 * stamp.at(32, 32) * 1.0;
        assert_eq!(img.argmax(), (32, 32));
        assert!((img.get(32, 32) - expected).abs() <= 1e-12 * expected);

        cfg.exposure_s = 1.0;
        let double = render_stack(&scene, &cfg).unwrap();
        for (a, b) in img.data().iter().zip(double.frames()[0].image.data()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn energy_bookkeeping() {
        let mut scene = one_emitter(1000.0);
        scene.background_cps_per_px = 3.0;
        scene.emitters[0].transitions.push(Transition {
            center_thz: 406.0003,
            fwhm_mhz: 150.0,
            eta: 0.4,
            brightness_cps: 500.0,
        });
        let freqs: Vec<f64> = (0..20).map(|i| 405.9995 + i as f64 * 1e-4).collect();
        let mut cfg = quiet(&scene, freqs.clone());
        cfg.laser_modulation = LaserModulation::default();
        cfg.exposure_s = 0.7;
        let stack = render_stack(&scene, &cfg).unwrap();
        let mods = cfg.laser_modulation.evaluate(&freqs);
        let npx = (cfg.width_px * cfg.height_px) as f64;
        for ((f, m), nu) in stack.frames().iter().zip(&mods).zip(&freqs) {
            let expected = 0.7 * m * (scene.emitters[0].rate(*nu) + 3.0 * npx);
            assert!((f.image.sum() - expected).abs() <= 1e-6 * expected);
        }
    }

    #[test]
    fn modulation_shape() {
        let axis: Vec<f64> = (0..=100).map(|i| 406.0 + i as f64 * 1e-4).collect();
        let m = LaserModulation::default().evaluate(&axis);
        assert!((m[0] - 1.0).abs() < 1e-12 && (m[25] - 1.1).abs() < 1e-9 && (m[75] - 0.9).abs() < 1e-9);
        assert!(m.iter().all(|v| *v > 0.0));
        assert!(LaserModulation::Sinusoid {
            depth: 1.5,
            period_ghz: None,
            phase_rad: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn noise_is_deterministic_and_order_free() {
        let scene = one_emitter(2000.0);
        let freqs: Vec<f64> = (0..8).map(|i| 405.9998 + i as f64 * 5e-5).collect();
        let mut cfg = quiet(&scene, freqs.clone());
        cfg.noise = Noise::Poisson;
        cfg.seed = 11;
        let a = render_stack(&scene, &cfg).unwrap();
        let b = render_stack(&scene, &cfg).unwrap();
        assert_eq!(a, b);
        // Serial reconstruction of frame 5 from its own stream.
        let stamps = psf_stamps(&scene, &cfg);
        let mut f5 = expected_frame(&scene, &cfg, &stamps, 1.0, freqs[5]);
        poisson_sample(&mut f5, &mut frame_rng(11, 5));
        assert_eq!(f5, a.frames()[5].image);
        cfg.seed = 12;
        assert_ne!(render_stack(&scene, &cfg).unwrap(), a);
    }

    #[test]
    fn poisson_mean_matches_expectation() {
        // Per-pixel sample mean over 1000 seeds within 3 sigma of the mean.
        let scene = one_emitter(400.0);
        let cfg = quiet(&scene, vec![406.0]);
        let stamps = psf_stamps(&scene, &cfg);
        let truth = expected_frame(&scene, &cfg, &stamps, 1.0, 406.0);
        let pixels = [(32usize, 32usize), (33, 32), (30, 35)];
        let mut sums = [0.0; 3];
        for seed in 0..1000u64 {
            let mut img = truth.clone();
            poisson_sample(&mut img, &mut frame_rng(seed, 0));
            for (s, &(x, y)) in sums.iter_mut().zip(&pixels) {
                *s += img.get(x, y);
            }
        }
        for (s, &(x, y)) in sums.iter().zip(&pixels) {
            let lam = truth.get(x, y);
            assert!((s / 1000.0 - lam).abs() < 3.0 * (lam / 1000.0).sqrt(), "pixel ({x},{y})");
        }
    }

    #[test]
    fn templates_are_deterministic() {
        for name in ["sample-a", "sample-b", "registry", "chip"] {
            let t = Template::by_name(name).unwrap();
            let a = generate_scene(&t, 7).unwrap();
            let b = generate_scene(&t, 7).unwrap();
            assert_eq!(a.to_json(), b.to_json(), "{name}");
            assert_eq!(GroundTruthScene::from_json(&a.to_json()).unwrap(), a);
        }
        assert!(Template::by_name("sample-z").is_err());
    }

    #[test]
    fn sample_b_grid_nodes() {
        let p = SampleBParams::default();
        let s = generate_scene(&Template::SampleB(p.clone()), 1).unwrap();
        assert_eq!(s.emitters.len(), 1024);
        for (k, e) in s.emitters.iter().enumerate() {
            assert_eq!(e.position_um, p.node_um(k / 32, k % 32));
            assert!((1..=3).contains(&e.transitions.len()));
        }
    }

    #[test]
    fn sample_a_populations() {
        let p = SampleAParams {
            n_emitters: 200,
            field_px: [400, 400],
            ..Default::default()
        };
        let s = generate_scene(&Template::SampleA(p.clone()), 3).unwrap();
        let means: Vec<f64> = s
            .emitters
            .iter()
            .map(|e| e.transitions.iter().map(|t| t.center_thz).sum::<f64>() / 4.0)
            .collect();
        let avg = means.iter().sum::<f64>() / means.len() as f64;
        assert!((avg - 406.81385).abs() < 0.0001);
        // Every emitter sits near one of the two population centers.
        assert!(means.iter().all(|m| (m - 406.8141).abs().min((m - 406.8136).abs()) < 5.0 * 59e-6));
        let windows = p.scan_windows(1.0, 10.0).unwrap();
        assert_eq!(windows[0].len(), 201);
        for e in &s.emitters {
            for (t, w) in e.transitions.iter().zip(&windows) {
                assert!(t.center_thz > w[0] && t.center_thz < w[w.len() - 1]);
            }
        }
    }

    #[test]
    fn registry_template_truth() {
        let sc = generate_registry(&RegistryParams::default(), 5).unwrap();
        assert_eq!(sc.experiments.len(), 4);
        let occ = sc.true_occupancy();
        assert!(occ.iter().all(|&k| k <= 4));
        let recs = sc.to_records().unwrap();
        // Registered positions land within the jitter bound of the truth.
        for (rec, exp) in recs.iter().zip(&sc.experiments) {
            for (site, &id) in rec.sites.iter().zip(&exp.identity) {
                let t = sc.truth.emitters[id].position_um;
                assert!((site.global_um[0] - t[0]).hypot(site.global_um[1] - t[1]) < 0.2 + 0.05);
            }
        }
    }

    fn chip_scene() -> GroundTruthScene {
        generate_scene(&Template::Chip(ChipParams::default()), 2).unwrap()
    }

    #[test]
    fn field_defocus_and_bounds() {
        let scene = chip_scene();
        let cfg = FieldConfig::default();
        assert_eq!(cfg.effective_sigma(0.0), cfg.psf_sigma_px);
        let pose = |z| StagePose {
            x_um: 100.0,
            y_um: 100.0,
            z_um: z,
            jitter_sigma_um: 0.0,
        };
        let geom = FiducialGeometry::canonical(cfg.module_pitch_px(&scene));
        let score = |z| -> f64 {
            let img = render_field(&scene, &pose(z), 5.0, &cfg).unwrap();
            detect(&img, &geom).unwrap().iter().filter(|d| d.checksum_ok).map(|d| d.score).sum()
        };
        let focused = score(5.0);
        assert!(focused > 0.0);
        assert!(score(11.0) < focused);
        let out = StagePose {
            x_um: -1.0,
            ..pose(5.0)
        };
        assert!(matches!(render_field(&scene, &out, 5.0, &cfg), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn field_translation_shifts_content() {
        let scene = chip_scene();
        let cfg = FieldConfig {
            noise: Noise::None,
            ..Default::default()
        };
        let at = |x| StagePose {
            x_um: x,
            y_um: 100.0,
            z_um: 5.0,
            jitter_sigma_um: 0.0,
        };
        let a = render_field(&scene, &at(100.0), 5.0, &cfg).unwrap();
        let b = render_field(&scene, &at(102.0), 5.0, &cfg).unwrap();
        // 2 um = 8 px to the left.
        let mut max_err: f64 = 0.0;
        for y in 0..cfg.height_px {
            for x in 20..cfg.width_px - 20 {
                max_err = max_err.max((b.get(x - 8, y) - a.get(x, y)).abs());
            }
        }
        assert!(max_err < 1e-6 * a.max(), "{max_err}");
    }

    #[test]
    fn fiducial_field_detects() {
        let params = FiducialFieldParams::default();
        assert!(params.peak_snr() >= 10.0);
        let f = fiducial_field(&params, 4).unwrap();
        let dets = detect(&f.image, &FiducialGeometry::canonical(8.0)).unwrap();
        for (payload, origin) in &f.codes {
            assert!(dets.iter().any(|d| d.payload == Some(*payload)
                && (d.origin_px[0] - origin[0]).hypot(d.origin_px[1] - origin[1]) <= 1.0));
        }
    }
}
