use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use emitterscope::fiducial::{detect_with, detection_report_csv, FiducialGeometry};
use emitterscope::io::{read_catalog_peaks, read_frame, read_manifest, read_stack, write_frame, write_stack, MANIFEST_FILE};
use emitterscope::ple::{run_widefield_pipeline, FrameStack};
use emitterscope::registry::{cluster_sites, diff_spectral, occupancy_histogram, tracks_csv, ExperimentRecord};
use emitterscope::scan::{correct_fraction, plan_traversal, records_jsonl, run_chip_scan, summary_csv, StagePose};
use emitterscope::stats::{speedup_factor, stats_report};
use emitterscope::synth::{
    fiducial_field, generate_registry, generate_scene, render_field, render_stack, GroundTruthScene, RenderConfig,
    Template,
};
use emitterscope::FORMAT_VERSION;

use crate::config::{parse_ghz, parse_speedup, FrequencyScan, RunConfig, SynthConfig};
use crate::error::CliError;
use crate::summary::{sha256_hex, FileHash, RunSummary, RUN_SUMMARY_FILE};

/// Per-run state: output directory, seed, config and the hash ledger.
pub struct Context {
    out: PathBuf,
    seed: u64,
    threads: Option<usize>,
    config: RunConfig,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

impl Context {
    pub fn new(out: PathBuf, seed: u64, threads: Option<usize>, config: RunConfig, inputs: Vec<FileHash>) -> Result<Self, CliError> {
        fs::create_dir_all(&out).map_err(|e| CliError::input(&out, e))?;
        Ok(Self {
            out,
            seed,
            threads,
            config,
            inputs,
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::input(path, e))?;
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    fn input_text(&mut self, path: &Path) -> Result<String, CliError> {
        String::from_utf8(self.input(path)?).map_err(|e| CliError::input(path, e))
    }

    /// Writes `bytes` to `rel` under the output directory.
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::input(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::input(&path, e))?;
        self.record(rel, bytes);
        Ok(())
    }

    fn record(&mut self, rel: &str, bytes: &[u8]) {
        self.outputs.push(FileHash {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    /// Hashes files written by library code under `rel_dir`.
    fn record_dir(&mut self, rel_dir: &str) -> Result<(), CliError> {
        let dir = self.out.join(rel_dir);
        let mut names: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| CliError::input(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for n in names {
            let p = dir.join(&n);
            let bytes = fs::read(&p).map_err(|e| CliError::input(&p, e))?;
            self.record(&format!("{rel_dir}/{n}"), &bytes);
        }
        Ok(())
    }

    fn finish(&mut self, command: &str, args: serde_json::Value, result: serde_json::Value) -> Result<(), CliError> {
        let version = env!("CARGO_PKG_VERSION");
        let summary = RunSummary {
            command,
            version,
            format_version: FORMAT_VERSION,
            seed: self.seed,
            threads: self.threads,
            args,
            config: &self.config,
            inputs: &self.inputs,
            outputs: &self.outputs,
            result: result.clone(),
        };
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
        let path = self.out.join(RUN_SUMMARY_FILE);
        fs::write(&path, text).map_err(|e| CliError::input(&path, e))?;
        println!("{}", serde_json::to_string(&result).expect("result serializes"));
        Ok(())
    }
}

fn render_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_f7a3_e5ca_1e00
}

fn render_config(scene: &GroundTruthScene, s: &SynthConfig, freqs: Vec<f64>, seed: u64) -> RenderConfig {
    let mut cfg = RenderConfig::for_scene(scene, s.pixel_size_um, freqs);
    cfg.psf_sigma_px = s.psf_sigma_px;
    cfg.exposure_s = s.exposure_s;
    cfg.laser_modulation = s.laser_modulation.clone();
    cfg.noise = s.noise;
    cfg.seed = render_seed(seed);
    cfg
}

fn write_frames(ctx: &mut Context, rel: &str, stack: &FrameStack) -> Result<usize, CliError> {
    let (_, clamped) = write_stack(&ctx.out.join(rel), stack)?;
    ctx.record_dir(rel)?;
    Ok(clamped)
}

pub fn synth(ctx: &mut Context, name: Option<&str>) -> Result<(), CliError> {
    let s = ctx.config.synth.clone();
    let seed = ctx.seed;
    let kind_of = |t: &Template| match t {
        Template::SampleA(_) => "sample-a",
        Template::SampleB(_) => "sample-b",
        Template::Registry(_) => "registry",
        Template::Chip(_) => "chip",
        Template::Custom(_) => "custom",
    };
    let name = match (name, &s.template) {
        (Some(n), _) => n.to_string(),
        (None, Some(t)) => kind_of(t).to_string(),
        (None, None) => {
            return Err(CliError::Config(
                "synth needs --template (sample-a, sample-b, registry, chip, custom, fiducial)".into(),
            ))
        }
    };
    let args = json!({ "template": name });

    if name == "fiducial" {
        let field = fiducial_field(&s.fiducial, seed)?;
        let tmp = ctx.out.join("field.wfs");
        let clamped = write_frame(&tmp, &field.image)?;
        let bytes = fs::read(&tmp).map_err(|e| CliError::input(&tmp, e))?;
        ctx.record("field.wfs", &bytes);
        let codes: Vec<_> = field
            .codes
            .iter()
            .map(|(p, o)| json!({ "version": p.version, "row": p.row, "col": p.col, "origin_px": o }))
            .collect();
        ctx.write("codes.json", (serde_json::to_string_pretty(&codes).expect("json") + "\n").as_bytes())?;
        let result = json!({ "template": name, "codes": codes.len(), "clamped_pixels": clamped, "peak_snr": s.fiducial.peak_snr() });
        return ctx.finish("synth", args, result);
    }

    let template = match &s.template {
        Some(t) if kind_of(t) == name => t.clone(),
        _ if name == "custom" => {
            return Err(CliError::Config("template 'custom' needs a scene under synth.template in --config".into()))
        }
        _ => Template::by_name(&name).map_err(|e| CliError::Config(e.to_string()))?,
    };

    let result = match &template {
        Template::Registry(p) => {
            let scenario = generate_registry(p, seed)?;
            let records = scenario.to_records()?;
            for r in &records {
                ctx.write(&format!("registry/experiment_{:02}.json", r.experiment_id), (r.to_json() + "\n").as_bytes())?;
            }
            let truth = serde_json::to_string_pretty(&json!({
                "threshold_um": scenario.threshold_um,
                "true_occupancy": scenario.true_occupancy(),
                "cohort_sign": scenario.cohort_sign,
                "experiments": scenario.experiments,
            }))
            .expect("json");
            ctx.write("registry_truth.json", (truth + "\n").as_bytes())?;
            ctx.write("scene.json", (scenario.truth.to_json() + "\n").as_bytes())?;
            json!({ "template": name, "experiments": records.len(), "sites": scenario.truth.emitters.len() })
        }
        Template::Chip(_) => {
            let scene = generate_scene(&template, seed)?;
            ctx.write("scene.json", (scene.to_json() + "\n").as_bytes())?;
            json!({ "template": name, "fiducials": scene.fiducials.len(), "emitters": scene.emitters.len() })
        }
        Template::SampleA(p) => {
            let scene = generate_scene(&template, seed)?;
            ctx.write("scene.json", (scene.to_json() + "\n").as_bytes())?;
            let windows = p.scan_windows(s.window_half_width_ghz, s.window_step_mhz)?;
            let mut clamped = 0;
            for (k, freqs) in windows.into_iter().enumerate() {
                let mut cfg = render_config(&scene, &s, freqs, seed);
                cfg.seed = cfg.seed.wrapping_add(k as u64);
                let stack = render_stack(&scene, &cfg)?;
                let rel = format!("stack-{}", ["a", "b", "c", "d"][k]);
                clamped += write_frames(ctx, &rel, &stack)?;
            }
            json!({ "template": name, "emitters": scene.emitters.len(), "stacks": 4, "clamped_pixels": clamped })
        }
        Template::SampleB(_) | Template::Custom(_) => {
            let scene = generate_scene(&template, seed)?;
            ctx.write("scene.json", (scene.to_json() + "\n").as_bytes())?;
            let axis = match (&s.scan, &template) {
                (Some(a), _) => *a,
                (None, Template::SampleB(p)) => FrequencyScan {
                    start_thz: p.center_range_thz[0],
                    stop_thz: p.center_range_thz[0] + 1e-3,
                    step_mhz: 10.0,
                },
                _ => return Err(CliError::Config("template 'custom' needs synth.scan".into())),
            };
            let stack = render_stack(&scene, &render_config(&scene, &s, axis.frequencies()?, seed))?;
            let clamped = write_frames(ctx, "stack", &stack)?;
            json!({ "template": name, "emitters": scene.emitters.len(), "frames": stack.len(), "clamped_pixels": clamped })
        }
    };
    ctx.finish("synth", args, result)
}

pub fn pipeline(ctx: &mut Context, stack_dir: &Path, no_normalize: bool, bands: Option<&str>) -> Result<(), CliError> {
    if no_normalize {
        ctx.config.pipeline.normalize = false;
    }
    if let Some(b) = bands {
        ctx.config.pipeline.band_width_ghz = parse_ghz(b)?;
    }
    let manifest = read_manifest(stack_dir).map_err(|e| CliError::input(stack_dir, e))?;
    ctx.input(&stack_dir.join(MANIFEST_FILE))?;
    for f in &manifest.frames {
        ctx.input(&stack_dir.join(&f.file))?;
    }
    let stack = read_stack(stack_dir).map_err(|e| CliError::input(stack_dir, e))?;
    let pc = ctx.config.pipeline.clone();
    let catalog = run_widefield_pipeline(&stack, &pc)?;
    ctx.write("catalog.csv", catalog.to_csv().as_bytes())?;
    let edges: Vec<[f64; 2]> = catalog.bands.iter().map(|b| [b.lo_thz, b.hi_thz]).collect();
    let summary = json!({
        "bands_arg": bands,
        "bands_ghz": pc.band_width_ghz,
        "normalize": pc.normalize,
        "bands": edges,
        "summary": catalog.summary,
    });
    ctx.write("summary.json", (serde_json::to_string_pretty(&summary).expect("json") + "\n").as_bytes())?;
    let args = json!({ "stack": stack_dir.display().to_string(), "no_normalize": no_normalize, "bands": bands });
    let result = json!({ "rows": catalog.rows.len(), "sites": catalog.summary.sites, "bands": catalog.bands.len(), "bands_ghz": pc.band_width_ghz, "normalize": pc.normalize });
    ctx.finish("pipeline", args, result)
}

pub fn qr(ctx: &mut Context, image_path: &Path, pitch: Option<f64>) -> Result<(), CliError> {
    if let Some(p) = pitch {
        ctx.config.qr.module_pitch_px = p;
    }
    let q = ctx.config.qr.clone();
    ctx.input(image_path)?;
    let image = read_frame(image_path).map_err(|e| CliError::input(image_path, e))?;
    let geometry = FiducialGeometry::canonical(q.module_pitch_px).with_rotation(q.rotation_rad);
    let detections = detect_with(&image, &geometry, &q.detect)?;
    ctx.write("detections.csv", detection_report_csv(&detections).as_bytes())?;
    let ok = detections.iter().filter(|d| d.checksum_ok).count();
    let args = json!({ "image": image_path.display().to_string(), "pitch": q.module_pitch_px });
    ctx.finish("qr", args, json!({ "detections": detections.len(), "checksum_ok": ok }))
}

fn parse_pair(text: &str) -> Result<(u32, u32), CliError> {
    let bad = || CliError::Config(format!("--diff expects I,J experiment ids, got '{text}'"));
    let (a, b) = text.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

pub fn cluster(ctx: &mut Context, dir: &Path, threshold: Option<f64>, diff: Option<&str>) -> Result<(), CliError> {
    if let Some(t) = threshold {
        ctx.config.cluster.threshold_um = t;
    }
    if let Some(d) = diff {
        ctx.config.cluster.diff = Some(parse_pair(d)?);
    }
    let c = ctx.config.cluster.clone();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::input(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("experiment_") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::input(dir, "no experiment_*.json records"));
    }
    let mut records = Vec::with_capacity(files.len());
    for f in &files {
        let text = ctx.input_text(f)?;
        records.push(ExperimentRecord::from_json(&text).map_err(|e| CliError::input(f, e))?);
    }
    let tracks = cluster_sites(&records, c.threshold_um)?;
    let hist = occupancy_histogram(&tracks, records.len())?;
    ctx.write("tracks.csv", tracks_csv(&tracks).as_bytes())?;
    let occupancy = json!({
        "n_experiments": records.len(),
        "threshold_um": c.threshold_um,
        "counts": hist.counts,
        "overfull": hist.overfull,
    });
    ctx.write("occupancy.json", (serde_json::to_string_pretty(&occupancy).expect("json") + "\n").as_bytes())?;
    let mut n_diffs = None;
    if let Some((i, j)) = c.diff {
        let diffs = diff_spectral(&records, &tracks, i, j);
        let mut csv = String::from("track_id,d_mean_mhz,d_splitting_mhz\n");
        for d in &diffs {
            csv.push_str(&format!("{},{:.6},{:.6}\n", d.track_id, d.d_mean_mhz, d.d_splitting_mhz));
        }
        ctx.write("spectral_diff.csv", csv.as_bytes())?;
        n_diffs = Some(diffs.len());
    }
    let args = json!({ "registry": dir.display().to_string(), "threshold_um": c.threshold_um, "diff": c.diff });
    let result = json!({ "tracks": tracks.len(), "occupancy": hist.counts, "overfull": hist.overfull, "spectral_diffs": n_diffs });
    ctx.finish("cluster", args, result)
}

pub fn stats(ctx: &mut Context, catalog: Option<&Path>, sf: Option<&[String]>) -> Result<(), CliError> {
    if catalog.is_none() && sf.is_none() {
        return Err(CliError::Config("stats needs a catalog CSV, --sf, or both".into()));
    }
    let sf_args = sf.map(parse_speedup).transpose()?;
    let sf_value = match sf_args {
        Some(a) => Some(speedup_factor(a.n, a.gamma, a.big_gamma, a.t_c, a.t_w).map_err(|e| CliError::Config(e.to_string()))?),
        None => None,
    };
    let st = ctx.config.stats.clone();
    let report = match catalog {
        Some(path) => {
            let text = ctx.input_text(path)?;
            let peaks = read_catalog_peaks(&text).map_err(|e| CliError::input(path, e))?;
            let r = stats_report(&peaks, st.kde_bandwidth_mhz, st.populations, st.bin_width_ghz, st.min_count, sf_value)?;
            Some(r)
        }
        None => None,
    };
    let out = json!({ "speedup_factor": sf_value, "speedup_args": sf_args, "report": report });
    ctx.write("stats.json", (serde_json::to_string_pretty(&out).expect("json") + "\n").as_bytes())?;
    let args = json!({ "catalog": catalog.map(|p| p.display().to_string()), "sf": sf });
    let result = json!({
        "speedup_factor": sf_value,
        "n_peaks": report.as_ref().map(|r| r.n_peaks),
        "populations": report.as_ref().map(|r| r.populations.len()),
    });
    ctx.finish("stats", args, result)
}

/// 16-bit grayscale PNG stretched from the image minimum to its maximum.
fn png_gray16(image: &emitterscope::Image) -> Result<Vec<u8>, CliError> {
    let (w, h) = image.dims();
    let (lo, hi) = (image.min(), image.max());
    let scale = if hi > lo { u16::MAX as f64 / (hi - lo) } else { 0.0 };
    let mut raw = Vec::with_capacity(2 * w * h);
    for &v in image.data() {
        raw.extend_from_slice(&(((v - lo) * scale).round().clamp(0.0, u16::MAX as f64) as u16).to_be_bytes());
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().map_err(|e| CliError::Config(format!("png: {e}")))?;
        writer.write_image_data(&raw).map_err(|e| CliError::Config(format!("png: {e}")))?;
    }
    Ok(out)
}

pub fn scan(ctx: &mut Context, scene_path: &Path, jitter: Option<f64>, dump_fields: bool) -> Result<(), CliError> {
    ctx.config.scan.seed = ctx.seed;
    if let Some(j) = jitter {
        ctx.config.scan.jitter_sigma_um = j;
    }
    let cfg = ctx.config.scan.clone();
    let text = ctx.input_text(scene_path)?;
    let scene = GroundTruthScene::from_json(&text).map_err(|e| CliError::input(scene_path, e))?;
    let plan = plan_traversal(scene.chip_extent_um, cfg.field.field_size_um())?;
    let records = run_chip_scan(&scene, &plan, &cfg)?;
    ctx.write("fields.jsonl", records_jsonl(&records).as_bytes())?;
    ctx.write("fields.csv", summary_csv(&records).as_bytes())?;
    if dump_fields {
        for r in &records {
            let Some(z) = r.focus_z_um else { continue };
            let pose = StagePose {
                x_um: r.actual_center_um[0],
                y_um: r.actual_center_um[1],
                z_um: z,
                jitter_sigma_um: 0.0,
            };
            let focus = scene.focus_z_um(r.actual_center_um);
            if let Ok(img) = render_field(&scene, &pose, focus, &cfg.field) {
                ctx.write(&format!("fields/field_{:04}.png", r.index), &png_gray16(&img)?)?;
            }
        }
    }
    let args = json!({ "scene": scene_path.display().to_string(), "jitter_um": cfg.jitter_sigma_um, "dump_fields": dump_fields });
    let result = json!({ "fields": records.len(), "correct_fraction": correct_fraction(&records) });
    ctx.finish("scan", args, result)
}
