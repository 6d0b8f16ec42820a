//! Simulated chip traversal: serpentine field planning, autofocus on
//! fiducial detection scores and stage correction from the field consensus.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fiducial::{detect_with, majority_vote, DetectParams, FiducialGeometry, FiducialPayload};
use crate::image::Image;
use crate::synth::{render_field, FieldConfig, GroundTruthScene, Species};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StagePose {
    pub x_um: f64,
    pub y_um: f64,
    pub z_um: f64,
    /// Per-move Gaussian position error, micrometers.
    pub jitter_sigma_um: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedField {
    pub row: usize,
    pub col: usize,
    pub center_um: [f64; 2],
}

/// Boustrophedon order over the largest field grid that fits on the chip:
/// even rows left to right, odd rows right to left.
pub fn plan_traversal(chip_extent_um: [f64; 2], field_size_um: [f64; 2]) -> Result<Vec<PlannedField>> {
    for (name, v) in [
        ("chip width", chip_extent_um[0]),
        ("chip height", chip_extent_um[1]),
        ("field width", field_size_um[0]),
        ("field height", field_size_um[1]),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Range { name, value: v });
        }
    }
    let cols = ((chip_extent_um[0] / field_size_um[0] + 1e-9).floor() as usize).max(1);
    let rows = ((chip_extent_um[1] / field_size_um[1] + 1e-9).floor() as usize).max(1);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for k in 0..cols {
            let c = if r % 2 == 0 { k } else { cols - 1 - k };
            out.push(PlannedField {
                row: r,
                col: c,
                center_um: [(c as f64 + 0.5) * field_size_um[0], (r as f64 + 0.5) * field_size_um[1]],
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocusResult {
    pub z_um: f64,
    pub score: f64,
    /// Coarse sweep `(z, score)`.
    pub sweep: Vec<(f64, f64)>,
}

/// Coarse sweep of `metric` over `steps` evenly spaced heights, then a
/// parabola through the best sample and its neighbours (in log score when
/// all three are positive). The refined height is kept only if it scores
/// at least as high as the best sample.
pub fn autofocus(mut metric: impl FnMut(f64) -> Result<f64>, z_range_um: (f64, f64), steps: usize) -> Result<FocusResult> {
    if steps < 3 {
        return Err(Error::Contract(format!("autofocus needs at least 3 steps, got {steps}")));
    }
    let (lo, hi) = z_range_um;
    if !(hi > lo) {
        return Err(Error::Contract(format!("empty focus range [{lo}, {hi}]")));
    }
    let dz = (hi - lo) / (steps - 1) as f64;
    let mut sweep = Vec::with_capacity(steps);
    for i in 0..steps {
        let z = lo + i as f64 * dz;
        sweep.push((z, metric(z)?));
    }
    let (best, &(z0, s0)) = sweep
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("steps >= 3");
    if !(s0 > 0.0) {
        return Err(Error::FocusFailure);
    }
    let mut result = FocusResult {
        z_um: z0,
        score: s0,
        sweep: sweep.clone(),
    };
    if best == 0 || best == steps - 1 {
        return Ok(result);
    }
    let (sm, sp) = (sweep[best - 1].1, sweep[best + 1].1);
    let (a, b, c) = if sm > 0.0 && sp > 0.0 {
        (sm.ln(), s0.ln(), sp.ln())
    } else {
        (sm, s0, sp)
    };
    let curv = a - 2.0 * b + c;
    if curv < 0.0 {
        let offset = (0.5 * (a - c) / curv).clamp(-0.5, 0.5);
        let z = z0 + offset * dz;
        let s = metric(z)?;
        if s >= s0 {
            result.z_um = z;
            result.score = s;
        }
    }
    Ok(result)
}

/// Sum of scores of checksum-valid detections.
pub fn focus_metric(image: &Image, geometry: &FiducialGeometry, params: &DetectParams) -> Result<f64> {
    Ok(detect_with(image, geometry, params)?
        .iter()
        .filter(|d| d.checksum_ok)
        .map(|d| d.score)
        .sum())
}

/// Broadband filter channel: transmission per emitter species.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterChannel {
    pub name: String,
    pub species: Vec<Species>,
    pub transmission: f64,
}

pub fn default_channels() -> Vec<FilterChannel> {
    vec![
        FilterChannel {
            name: "737nm".into(),
            species: vec![Species::Siv],
            transmission: 0.9,
        },
        FilterChannel {
            name: "620nm".into(),
            species: vec![Species::Nv],
            transmission: 0.8,
        },
        FilterChannel {
            name: "600nm".into(),
            species: vec![Species::Generic],
            transmission: 0.8,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    pub field: FieldConfig,
    /// Distance between neighbouring code origins on the chip.
    pub code_pitch_um: f64,
    pub jitter_sigma_um: f64,
    pub z_start_um: f64,
    pub initial_focus_half_range_um: f64,
    pub initial_focus_steps: usize,
    pub focus_half_range_um: f64,
    pub focus_steps: usize,
    pub channels: Vec<FilterChannel>,
    pub detect: DetectParams,
    pub seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            field: FieldConfig {
                width_px: 320,
                height_px: 320,
                ..FieldConfig::default()
            },
            code_pitch_um: 20.0,
            jitter_sigma_um: 0.0,
            z_start_um: 3.0,
            initial_focus_half_range_um: 6.0,
            initial_focus_steps: 13,
            focus_half_range_um: 2.0,
            focus_steps: 5,
            channels: default_channels(),
            detect: DetectParams::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub name: String,
    pub counts: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldRecord {
    pub index: usize,
    pub planned: [usize; 2],
    pub planned_center_um: [f64; 2],
    /// Simulator truth: where the stage actually was.
    pub actual_center_um: [f64; 2],
    pub estimated_center_um: Option<[f64; 2]>,
    /// Code nearest the field center according to the consensus.
    pub consensus: Option<FiducialPayload>,
    /// Simulator truth: code nearest the actual field center.
    pub truth: Option<FiducialPayload>,
    pub focus_z_um: Option<f64>,
    pub detections: usize,
    pub checksum_ok: usize,
    pub consensus_members: usize,
    pub flagged: usize,
    pub channels: Vec<ChannelSummary>,
    pub error: Option<String>,
}

impl FieldRecord {
    pub fn is_correct(&self) -> bool {
        self.consensus.is_some() && self.consensus == self.truth
    }
}

/// Code grid of the chip design: version, origin of code (0, 0) and pitch.
#[derive(Clone, Copy, Debug, PartialEq)]
struct CodeGrid {
    version: u8,
    offset_um: [f64; 2],
    pitch_um: f64,
    rows: u32,
    cols: u32,
}

impl CodeGrid {
    fn from_scene(scene: &GroundTruthScene, pitch_um: f64) -> Result<Self> {
        let first = scene
            .fiducials
            .first()
            .ok_or(Error::EmptyInput("scene fiducials"))?;
        let p = first.payload;
        Ok(Self {
            version: p.version,
            offset_um: [
                first.origin_um[0] - pitch_um * p.col as f64,
                first.origin_um[1] - pitch_um * p.row as f64,
            ],
            pitch_um,
            rows: scene.fiducials.iter().map(|f| f.payload.row as u32 + 1).max().unwrap_or(0),
            cols: scene.fiducials.iter().map(|f| f.payload.col as u32 + 1).max().unwrap_or(0),
        })
    }

    fn nearest(&self, um: [f64; 2]) -> Option<FiducialPayload> {
        let col = ((um[0] - self.offset_um[0]) / self.pitch_um).round();
        let row = ((um[1] - self.offset_um[1]) / self.pitch_um).round();
        if col < 0.0 || row < 0.0 || col >= self.cols as f64 || row >= self.rows as f64 {
            return None;
        }
        Some(FiducialPayload {
            version: self.version,
            row: row as u8,
            col: col as u8,
        })
    }
}

fn channel_summaries(scene: &GroundTruthScene, center: [f64; 2], cfg: &ScanConfig) -> Vec<ChannelSummary> {
    let [fw, fh] = cfg.field.field_size_um();
    let inside = |p: [f64; 2]| (p[0] - center[0]).abs() <= 0.5 * fw && (p[1] - center[1]).abs() <= 0.5 * fh;
    cfg.channels
        .iter()
        .map(|ch| ChannelSummary {
            name: ch.name.clone(),
            counts: scene
                .emitters
                .iter()
                .filter(|e| ch.species.contains(&e.species) && inside(e.position_um))
                .map(|e| e.total_brightness() * ch.transmission * cfg.field.fluorescence_exposure_s)
                .sum(),
        })
        .collect()
}

/// Moves to each planned field (relative moves with jitter), autofocuses,
/// detects codes, votes, and resets the believed stage position from the
/// consensus. Per-field failures are recorded and the scan continues.
pub fn run_chip_scan(scene: &GroundTruthScene, plan: &[PlannedField], config: &ScanConfig) -> Result<Vec<FieldRecord>> {
    if plan.is_empty() {
        return Err(Error::EmptyInput("traversal plan"));
    }
    if !(config.jitter_sigma_um >= 0.0) {
        return Err(Error::Range {
            name: "jitter_sigma_um",
            value: config.jitter_sigma_um,
        });
    }
    let grid = CodeGrid::from_scene(scene, config.code_pitch_um)?;
    let fcfg = &config.field;
    let pitch_px = fcfg.module_pitch_px(scene);
    let geom = FiducialGeometry::canonical(pitch_px);
    let code_pitch_px = config.code_pitch_um / fcfg.pixel_size_um;
    let center_px = [0.5 * (fcfg.width_px as f64 - 1.0), 0.5 * (fcfg.height_px as f64 - 1.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jitter = Normal::new(0.0, config.jitter_sigma_um.max(0.0)).expect("non-negative sigma");

    let mut believed = plan[0].center_um;
    let mut actual = believed;
    let mut z_prev: Option<f64> = None;
    let mut records = Vec::with_capacity(plan.len());
    for (index, field) in plan.iter().enumerate() {
        if index > 0 {
            let d = [field.center_um[0] - believed[0], field.center_um[1] - believed[1]];
            let noise = if config.jitter_sigma_um > 0.0 {
                [jitter.sample(&mut rng), jitter.sample(&mut rng)]
            } else {
                [0.0, 0.0]
            };
            actual = [actual[0] + d[0] + noise[0], actual[1] + d[1] + noise[1]];
            believed = field.center_um;
        }
        let mut rec = FieldRecord {
            index,
            planned: [field.row, field.col],
            planned_center_um: field.center_um,
            actual_center_um: actual,
            estimated_center_um: None,
            consensus: None,
            truth: grid.nearest(actual),
            focus_z_um: None,
            detections: 0,
            checksum_ok: 0,
            consensus_members: 0,
            flagged: 0,
            channels: Vec::new(),
            error: None,
        };
        let focus_true = scene.focus_z_um(actual);
        let pose = |z: f64| StagePose {
            x_um: actual[0],
            y_um: actual[1],
            z_um: z,
            jitter_sigma_um: config.jitter_sigma_um,
        };
        let (zc, half, steps) = match z_prev {
            Some(z) => (z, config.focus_half_range_um, config.focus_steps),
            None => (config.z_start_um, config.initial_focus_half_range_um, config.initial_focus_steps),
        };
        let focus = autofocus(
            |z| focus_metric(&render_field(scene, &pose(z), focus_true, fcfg)?, &geom, &config.detect),
            (zc - half, zc + half),
            steps,
        );
        let z = match focus {
            Ok(f) => {
                z_prev = Some(f.z_um);
                rec.focus_z_um = Some(f.z_um);
                f.z_um
            }
            Err(e) => {
                rec.error = Some(e.to_string());
                records.push(rec);
                continue;
            }
        };
        let outcome = render_field(scene, &pose(z), focus_true, fcfg).and_then(|img| {
            let dets = detect_with(&img, &geom, &config.detect)?;
            rec.detections = dets.len();
            rec.checksum_ok = dets.iter().filter(|d| d.checksum_ok).count();
            majority_vote(&dets, code_pitch_px, 0.0)
        });
        match outcome {
            Ok(cons) => {
                rec.consensus_members = cons.members.len();
                rec.flagged = cons.flagged.len();
                let off = [
                    (center_px[0] - cons.grid_origin_px[0]) * fcfg.pixel_size_um,
                    (center_px[1] - cons.grid_origin_px[1]) * fcfg.pixel_size_um,
                ];
                let est = [grid.offset_um[0] + off[0], grid.offset_um[1] + off[1]];
                rec.estimated_center_um = Some(est);
                rec.consensus = grid.nearest(est).map(|p| FiducialPayload {
                    version: cons.version,
                    ..p
                });
                believed = est;
                rec.channels = channel_summaries(scene, est, config);
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn correct_fraction(records: &[FieldRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.is_correct()).count() as f64 / records.len() as f64
}

/// One JSON object per line.
pub fn records_jsonl(records: &[FieldRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("plain data serializes"));
        s.push('\n');
    }
    s
}

pub fn summary_csv(records: &[FieldRecord]) -> String {
    let channels: Vec<String> = records
        .iter()
        .find(|r| !r.channels.is_empty())
        .map(|r| r.channels.iter().map(|c| format!("{}_counts", c.name)).collect())
        .unwrap_or_default();
    let mut s = String::from("index,row,col,consensus_version,consensus_row,consensus_col,focus_z_um,detections,checksum_ok");
    for c in &channels {
        s.push(',');
        s.push_str(c);
    }
    s.push_str(",error\n");
    for r in records {
        let (v, row, col) = match r.consensus {
            Some(p) => (p.version.to_string(), p.row.to_string(), p.col.to_string()),
            None => Default::default(),
        };
        let z = r.focus_z_um.map(|z| format!("{z:.4}")).unwrap_or_default();
        s.push_str(&format!("{},{},{},{v},{row},{col},{z},{},{}", r.index, r.planned[0], r.planned[1], r.detections, r.checksum_ok));
        for i in 0..channels.len() {
            s.push(',');
            if let Some(c) = r.channels.get(i) {
                s.push_str(&format!("{:.4}", c.counts));
            }
        }
        s.push(',');
        s.push_str(&r.error.clone().unwrap_or_default().replace([',', '\n'], " "));
        s.push('\n');
    }
    s
}
