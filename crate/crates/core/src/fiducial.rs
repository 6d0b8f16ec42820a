//! 25-bit fiducial codes: bit layout, CRC-3 checksum, rendering,
//! convolutional detection and per-field majority vote.
//!
//! A code is an L-shaped pair of alignment arms (two large dots at the arm
//! ends, three small dots between them) with a 5x5 data grid inside the
//! corner. The corner dot is the code origin. In code coordinates (units of
//! module pitch, `u` along the horizontal arm, `v` along the vertical arm)
//! the horizontal arm dots sit at `u = 0, L/4, L/2, 3L/4, L` and data cell
//! `(r, c)` at `(c + 1, r + 1)`.
//!
//! Bit `i` (1-based) is grid cell `((i - 1) / 5, (i - 1) % 5)`. Bits 2-5 hold
//! the version, 7-14 the row, 15-22 the column (all MSB first), 23-25 the
//! CRC-3 of bits 1-22. Bits 1 and 6 are constant zero pads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Kernel, KernelNorm};
use crate::imageproc::reflect_index;
use crate::robust;

/// CRC-3 generator `x^3 + x + 1`.
pub const CRC3_POLY: u8 = 0b1011;
pub const N_BITS: usize = 25;
pub const N_DATA_BITS: usize = 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FiducialPayload {
    pub version: u8,
    pub row: u8,
    pub col: u8,
}

impl FiducialPayload {
    pub fn new(version: u32, row: u32, col: u32) -> Result<Self> {
        if version >= 16 {
            return Err(Error::Range {
                name: "version",
                value: version as f64,
            });
        }
        if row >= 256 {
            return Err(Error::Range {
                name: "row",
                value: row as f64,
            });
        }
        if col >= 256 {
            return Err(Error::Range {
                name: "col",
                value: col as f64,
            });
        }
        Ok(Self {
            version: version as u8,
            row: row as u8,
            col: col as u8,
        })
    }
}

/// The 25 code bits, indexed 1..=25 in row-major grid order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct BitGrid25 {
    // Bit i lives at position i - 1.
    word: u32,
}

impl BitGrid25 {
    pub fn from_bools(bits: &[bool]) -> Result<Self> {
        if bits.len() != N_BITS {
            return Err(Error::Contract(format!("expected 25 bits, got {}", bits.len())));
        }
        let mut g = Self::default();
        for (i, &b) in bits.iter().enumerate() {
            g.set(i + 1, b);
        }
        Ok(g)
    }

    pub fn all_ones() -> Self {
        Self { word: (1 << N_BITS) - 1 }
    }

    pub fn bit(&self, index: usize) -> bool {
        assert!((1..=N_BITS).contains(&index), "bit index {index} outside 1..=25");
        self.word >> (index - 1) & 1 == 1
    }

    pub fn set(&mut self, index: usize, value: bool) {
        assert!((1..=N_BITS).contains(&index), "bit index {index} outside 1..=25");
        if value {
            self.word |= 1 << (index - 1);
        } else {
            self.word &= !(1 << (index - 1));
        }
    }

    pub fn with_flipped(mut self, index: usize) -> Self {
        let b = self.bit(index);
        self.set(index, !b);
        self
    }

    /// Grid cell `(row, col)` of the 5x5 data grid.
    pub fn cell(&self, row: usize, col: usize) -> bool {
        self.bit(row * 5 + col + 1)
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (1..=N_BITS).map(|i| self.bit(i)).collect()
    }

    fn field(&self, first: usize, len: usize) -> u32 {
        (first..first + len).fold(0, |acc, i| acc << 1 | self.bit(i) as u32)
    }

    fn set_field(&mut self, first: usize, len: usize, value: u32) {
        for k in 0..len {
            self.set(first + k, value >> (len - 1 - k) & 1 == 1);
        }
    }

    /// Checksum stored in bits 23-25.
    pub fn stored_checksum(&self) -> u8 {
        self.field(23, 3) as u8
    }
}

/// CRC-3 (`x^3 + x + 1`, zero init, no reflection) over bits 1-22 in index order.
pub fn compute_checksum(data_bits: &[bool]) -> Result<u8> {
    if data_bits.len() != N_DATA_BITS {
        return Err(Error::Contract(format!(
            "checksum covers exactly 22 bits, got {}",
            data_bits.len()
        )));
    }
    Ok(crc3(data_bits.iter().copied()))
}

fn crc3(bits: impl Iterator<Item = bool>) -> u8 {
    let mut reg = 0u8;
    for b in bits {
        let feedback = (reg >> 2 & 1 == 1) ^ b;
        reg = reg << 1 & 0b111;
        if feedback {
            reg ^= CRC3_POLY & 0b111;
        }
    }
    reg
}

fn grid_checksum(grid: &BitGrid25) -> u8 {
    crc3((1..=N_DATA_BITS).map(|i| grid.bit(i)))
}

pub fn encode_payload(payload: FiducialPayload) -> Result<BitGrid25> {
    // Re-validate: the fields are public.
    let p = FiducialPayload::new(payload.version as u32, payload.row as u32, payload.col as u32)?;
    let mut g = BitGrid25::default();
    g.set_field(2, 4, p.version as u32);
    g.set_field(7, 8, p.row as u32);
    g.set_field(15, 8, p.col as u32);
    let crc = grid_checksum(&g);
    g.set_field(23, 3, crc as u32);
    Ok(g)
}

pub fn decode_payload(grid: &BitGrid25) -> Result<FiducialPayload> {
    let computed = grid_checksum(grid);
    let stored = grid.stored_checksum();
    if computed != stored {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    Ok(FiducialPayload {
        version: grid.field(2, 4) as u8,
        row: grid.field(7, 8) as u8,
        col: grid.field(15, 8) as u8,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiducialGeometry {
    /// Pixels per grid cell.
    pub module_pitch: f64,
    /// Direction of the horizontal arm, radians, image coordinates (y down).
    pub rotation: f64,
    pub large_dot_radius: f64,
    pub small_dot_radius: f64,
    pub data_dot_radius: f64,
    /// Arm length in grid cells.
    pub arm_length: f64,
}

impl FiducialGeometry {
    /// Arms of 6 pitches, large dots 0.5 pitch, small dots 0.25 pitch and
    /// data dots 0.3 pitch in radius.
    pub fn canonical(module_pitch: f64) -> Self {
        Self {
            module_pitch,
            rotation: 0.0,
            large_dot_radius: 0.5 * module_pitch,
            small_dot_radius: 0.25 * module_pitch,
            data_dot_radius: 0.3 * module_pitch,
            arm_length: 6.0,
        }
    }

    pub fn with_rotation(mut self, rotation: f64) -> Self {
        self.rotation = rotation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("module_pitch", self.module_pitch, self.module_pitch > 0.0),
            ("small_dot_radius", self.small_dot_radius, self.small_dot_radius > 0.0),
            ("data_dot_radius", self.data_dot_radius, self.data_dot_radius > 0.0),
            (
                "large_dot_radius",
                self.large_dot_radius,
                self.large_dot_radius > self.small_dot_radius,
            ),
            ("arm_length", self.arm_length, self.arm_length >= 6.0),
            ("rotation", self.rotation, self.rotation.is_finite()),
        ];
        for (name, value, ok) in checks {
            if !ok || !value.is_finite() {
                return Err(Error::Range { name, value });
            }
        }
        Ok(())
    }

    /// Unit vectors of the horizontal and vertical arms.
    pub fn axes(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.rotation.sin_cos();
        ([c, s], [-s, c])
    }

    /// Pixel offset of code coordinates `(u, v)` from the origin.
    pub fn to_px(&self, u: f64, v: f64) -> [f64; 2] {
        let (ex, ey) = self.axes();
        let p = self.module_pitch;
        [p * (u * ex[0] + v * ey[0]), p * (u * ex[1] + v * ey[1])]
    }

    fn arm_stations(&self) -> [(f64, bool); 5] {
        let l = self.arm_length;
        [
            (0.0, true),
            (0.25 * l, false),
            (0.5 * l, false),
            (0.75 * l, false),
            (l, true),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disk {
    /// Center offset from the code origin, pixels.
    pub center: [f64; 2],
    pub radius: f64,
}

/// Bright marks of a code at `payload`: alignment arms plus set data bits.
pub fn layout_marks(payload: FiducialPayload, geometry: &FiducialGeometry) -> Result<Vec<Disk>> {
    geometry.validate()?;
    let grid = encode_payload(payload)?;
    let mut marks = arm_disks(geometry);
    for r in 0..5 {
        for c in 0..5 {
            if grid.cell(r, c) {
                marks.push(Disk {
                    center: geometry.to_px(c as f64 + 1.0, r as f64 + 1.0),
                    radius: geometry.data_dot_radius,
                });
            }
        }
    }
    Ok(marks)
}

fn arm_disks(geometry: &FiducialGeometry) -> Vec<Disk> {
    let mut out = Vec::with_capacity(9);
    for (i, (t, large)) in geometry.arm_stations().into_iter().enumerate() {
        let radius = if large {
            geometry.large_dot_radius
        } else {
            geometry.small_dot_radius
        };
        out.push(Disk {
            center: geometry.to_px(t, 0.0),
            radius,
        });
        if i > 0 {
            out.push(Disk {
                center: geometry.to_px(0.0, t),
                radius,
            });
        }
    }
    out
}

const SUPERSAMPLE: usize = 4;

/// Adds `amplitude * coverage` of every disk, anchored at `origin_px`, into
/// `image`. Coverage is estimated on a 4x4 subpixel grid.
pub fn splat_disks(image: &mut Image, disks: &[Disk], origin_px: [f64; 2], amplitude: f64) {
    let (w, h) = image.dims();
    let sub: Vec<f64> = (0..SUPERSAMPLE)
        .map(|i| (i as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5)
        .collect();
    let n_sub = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for d in disks {
        let cx = origin_px[0] + d.center[0];
        let cy = origin_px[1] + d.center[1];
        let r2 = d.radius * d.radius;
        let x0 = (cx - d.radius - 1.0).floor().max(0.0) as usize;
        let y0 = (cy - d.radius - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + d.radius + 1.0).ceil().max(0.0) as usize).min(w.saturating_sub(1));
        let y1 = ((cy + d.radius + 1.0).ceil().max(0.0) as usize).min(h.saturating_sub(1));
        if cx + d.radius < -0.5 || cy + d.radius < -0.5 || x0 >= w || y0 >= h {
            continue;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                let mut hits = 0usize;
                for sy in &sub {
                    let dy = y as f64 + sy - cy;
                    for sx in &sub {
                        let dx = x as f64 + sx - cx;
                        if dx * dx + dy * dy <= r2 {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    image.add(x, y, amplitude * hits as f64 / n_sub);
                }
            }
        }
    }
}

/// A rendered code and the pixel position of its origin (corner dot center).
#[derive(Clone, Debug)]
pub struct FiducialRaster {
    pub image: Image,
    pub origin_px: [f64; 2],
}

/// Renders one code, marks at 1.0 on a zero background, into the tightest
/// image covering all arm and data-grid dots.
pub fn rasterize(payload: FiducialPayload, geometry: &FiducialGeometry) -> Result<FiducialRaster> {
    let marks = layout_marks(payload, geometry)?;
    // Bounding box over every possible dot so all payloads share dimensions.
    let mut envelope = arm_disks(geometry);
    for r in 0..5 {
        for c in 0..5 {
            envelope.push(Disk {
                center: geometry.to_px(c as f64 + 1.0, r as f64 + 1.0),
                radius: geometry.data_dot_radius,
            });
        }
    }
    let (mut min, mut max) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for d in &envelope {
        for k in 0..2 {
            min[k] = min[k].min(d.center[k] - d.radius);
            max[k] = max[k].max(d.center[k] + d.radius);
        }
    }
    let width = ((max[0] - min[0]) - 1e-9).ceil().max(1.0) as usize;
    let height = ((max[1] - min[1]) - 1e-9).ceil().max(1.0) as usize;
    let origin_px = [-0.5 - min[0], -0.5 - min[1]];
    let mut image = Image::zeros(width, height);
    splat_disks(&mut image, &marks, origin_px, 1.0);
    Ok(FiducialRaster { image, origin_px })
}

/// Zero-mean matched filter for one alignment arm along the geometry's
/// rotation, centered on the arm midpoint. Raw weights are 1 inside any arm
/// dot and 0 elsewhere before the mean is removed.
pub fn build_arm_kernel(geometry: &FiducialGeometry) -> Result<Kernel> {
    Ok(arm_mask(geometry)?.kernel)
}

struct ArmMask {
    kernel: Kernel,
    /// Raw (pre mean-removal) mask.
    mask: Vec<bool>,
    mean: f64,
}

fn arm_mask(geometry: &FiducialGeometry) -> Result<ArmMask> {
    geometry.validate()?;
    let half = 0.5 * geometry.arm_length;
    let dots: Vec<Disk> = geometry
        .arm_stations()
        .into_iter()
        .map(|(t, large)| Disk {
            center: geometry.to_px(t - half, 0.0),
            radius: if large {
                geometry.large_dot_radius
            } else {
                geometry.small_dot_radius
            },
        })
        .collect();
    let hx = dots
        .iter()
        .map(|d| ((d.center[0].abs() + d.radius) - 1e-9).ceil())
        .fold(0.0, f64::max) as isize;
    let hy = dots
        .iter()
        .map(|d| ((d.center[1].abs() + d.radius) - 1e-9).ceil())
        .fold(0.0, f64::max) as isize;
    let (w, h) = ((2 * hx + 1) as usize, (2 * hy + 1) as usize);
    let mut mask = vec![false; w * h];
    for y in -hy..=hy {
        for x in -hx..=hx {
            let inside = dots.iter().any(|d| {
                let dx = x as f64 - d.center[0];
                let dy = y as f64 - d.center[1];
                dx * dx + dy * dy <= d.radius * d.radius + 1e-9
            });
            mask[((y + hy) as usize) * w + (x + hx) as usize] = inside;
        }
    }
    let raw: Vec<f64> = mask.iter().map(|&m| m as u8 as f64).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let kernel = Kernel::new(w, h, raw, KernelNorm::ZeroMean)?;
    Ok(ArmMask { kernel, mask, mean })
}

/// Horizontal run of mask pixels `[x0, x1]` at row offset `dy`.
struct Run {
    dy: isize,
    x0: isize,
    x1: isize,
}

/// Run-length form of an arm kernel: exact correlation with the zero-mean
/// kernel via row prefix sums and an integral image.
struct ArmFilter {
    runs: Vec<Run>,
    mean: f64,
    hx: isize,
    hy: isize,
}

impl ArmFilter {
    fn new(geometry: &FiducialGeometry) -> Result<Self> {
        let m = arm_mask(geometry)?;
        let (w, h) = (m.kernel.width(), m.kernel.height());
        let (hx, hy) = ((w / 2) as isize, (h / 2) as isize);
        let mut runs = Vec::new();
        for y in 0..h {
            let mut x = 0;
            while x < w {
                if m.mask[y * w + x] {
                    let start = x;
                    while x + 1 < w && m.mask[y * w + x + 1] {
                        x += 1;
                    }
                    runs.push(Run {
                        dy: y as isize - hy,
                        x0: start as isize - hx,
                        x1: x as isize - hx,
                    });
                }
                x += 1;
            }
        }
        Ok(Self {
            runs,
            mean: m.mean,
            hx,
            hy,
        })
    }
}

/// Reflect-padded image with per-row prefix sums and a 2D integral image.
struct SummedImage {
    w: usize,
    h: usize,
    pad: usize,
    pw: usize,
    /// `(ph) x (pw + 1)` row prefix sums.
    rows: Vec<f64>,
    /// `(ph + 1) x (pw + 1)` integral image.
    integral: Vec<f64>,
}

impl SummedImage {
    fn new(image: &Image, pad: usize) -> Self {
        let (w, h) = image.dims();
        let pw = w + 2 * pad;
        let ph = h + 2 * pad;
        let mut rows = vec![0.0; ph * (pw + 1)];
        let mut integral = vec![0.0; (ph + 1) * (pw + 1)];
        for y in 0..ph {
            let src = image.row(reflect_index(y as isize - pad as isize, h));
            let mut acc = 0.0;
            let base = y * (pw + 1);
            for x in 0..pw {
                acc += src[reflect_index(x as isize - pad as isize, w)];
                rows[base + x + 1] = acc;
            }
            let (up, cur) = integral.split_at_mut((y + 1) * (pw + 1));
            let above = &up[y * (pw + 1)..];
            for x in 0..=pw {
                cur[x] = above[x] + rows[base + x];
            }
        }
        Self {
            w,
            h,
            pad,
            pw,
            rows,
            integral,
        }
    }

    #[inline]
    fn row_sum(&self, py: usize, px0: usize, px1: usize) -> f64 {
        let base = py * (self.pw + 1);
        self.rows[base + px1 + 1] - self.rows[base + px0]
    }

    #[inline]
    fn box_sum(&self, px0: usize, py0: usize, px1: usize, py1: usize) -> f64 {
        let s = self.pw + 1;
        self.integral[(py1 + 1) * s + px1 + 1] - self.integral[py0 * s + px1 + 1] - self.integral[(py1 + 1) * s + px0]
            + self.integral[py0 * s + px0]
    }

    fn correlate(&self, f: &ArmFilter) -> Image {
        let (w, h, pad) = (self.w, self.h, self.pad as isize);
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            let py = y as isize + pad;
            for x in 0..w {
                let px = x as isize + pad;
                let mut acc = 0.0;
                for r in &f.runs {
                    acc += self.row_sum((py + r.dy) as usize, (px + r.x0) as usize, (px + r.x1) as usize);
                }
                let b = self.box_sum(
                    (px - f.hx) as usize,
                    (py - f.hy) as usize,
                    (px + f.hx) as usize,
                    (py + f.hy) as usize,
                );
                out[y * w + x] = acc - f.mean * b;
            }
        }
        Image::from_vec(w, h, out).expect("shape preserved")
    }
}

/// Horizontal and vertical arm responses of `image`, each equal to
/// [`crate::imageproc::convolve2d`] with the corresponding arm kernel.
pub fn arm_responses(image: &Image, geometry: &FiducialGeometry) -> Result<(Image, Image)> {
    let fh = ArmFilter::new(geometry)?;
    let fv = ArmFilter::new(&geometry.with_rotation(geometry.rotation + std::f64::consts::FRAC_PI_2))?;
    let pad = [fh.hx, fh.hy, fv.hx, fv.hy].into_iter().max().unwrap_or(0) as usize;
    let summed = SummedImage::new(image, pad);
    Ok((summed.correlate(&fh), summed.correlate(&fv)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectParams {
    /// Candidate threshold in scaled-MAD units above the median of the
    /// arm-response sum.
    pub threshold_k: f64,
    /// Non-maximum suppression radius in module pitches.
    pub nms_radius: f64,
    /// Sampling disk radius for cell intensities, in module pitches.
    pub sample_radius: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            threshold_k: 8.0,
            nms_radius: 2.0,
            sample_radius: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiducialDetection {
    /// Decoded payload; `None` when the checksum failed.
    pub payload: Option<FiducialPayload>,
    #[serde(skip)]
    pub bits: BitGrid25,
    pub origin_px: [f64; 2],
    /// Cube of the summed arm responses at the origin.
    pub score: f64,
    pub checksum_ok: bool,
}

/// Detects codes at the geometry's rotation and scale with default parameters.
pub fn detect(image: &Image, geometry: &FiducialGeometry) -> Result<Vec<FiducialDetection>> {
    detect_with(image, geometry, &DetectParams::default())
}

/// Arm filtering, cubed-sum candidate extraction, arm verification,
/// binarization and checksum decoding. Candidates whose alignment arms are
/// not brighter than the pad cells are not codes and are dropped, as are
/// weaker candidates overlapping a checksum-valid code; the rest are
/// returned with their checksum status, strongest first.
pub fn detect_with(image: &Image, geometry: &FiducialGeometry, params: &DetectParams) -> Result<Vec<FiducialDetection>> {
    geometry.validate()?;
    let (w, h) = image.dims();
    let (hresp, vresp) = arm_responses(image, geometry)?;
    let half = 0.5 * geometry.arm_length;
    let sh = geometry.to_px(half, 0.0).map(|v| v.round() as isize);
    let sv = geometry.to_px(0.0, half).map(|v| v.round() as isize);

    // Linear sum of arm responses, shifted so that both peak at the origin.
    let mut sum = vec![f64::NAN; w * h];
    let mut valid = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (Some(a), Some(b)) = (
                hresp.get_checked(x + sh[0], y + sh[1]),
                vresp.get_checked(x + sv[0], y + sv[1]),
            ) else {
                continue;
            };
            let s = a + b;
            sum[y as usize * w + x as usize] = s;
            valid.push(s);
        }
    }
    if valid.is_empty() {
        return Ok(Vec::new());
    }
    let (med, sigma) = robust::median_sigma(&valid);
    let peak_abs = valid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sigma = sigma.max(1e-9 * peak_abs);
    let threshold = (med + params.threshold_k * sigma).max(0.0);

    // 3x3 local maxima above threshold, ties broken toward the lower index.
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            f64::NAN
        } else {
            sum[y as usize * w + x as usize]
        }
    };
    let mut peaks = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let s = at(x, y);
            if !(s > threshold) {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = at(x + dx, y + dy);
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if n > s || (earlier && n == s) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push((x, y, s));
            }
        }
    }
    peaks.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));
    let nms = params.nms_radius * geometry.module_pitch;
    let mut kept: Vec<(isize, isize, f64)> = Vec::new();
    for p in peaks {
        if kept
            .iter()
            .all(|k| (((k.0 - p.0).pow(2) + (k.1 - p.1).pow(2)) as f64).sqrt() > nms)
        {
            kept.push(p);
        }
    }

    let sampler = CellSampler::new(image, geometry, params.sample_radius * geometry.module_pitch);
    let mut out = Vec::new();
    for (x, y, s) in kept {
        let refine = |l: f64, c: f64, r: f64| -> f64 {
            let denom = l - 2.0 * c + r;
            if l.is_finite() && r.is_finite() && denom < 0.0 {
                (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        };
        let ox = x as f64 + refine(at(x - 1, y), s, at(x + 1, y));
        let oy = y as f64 + refine(at(x, y - 1), s, at(x, y + 1));
        let origin = [ox, oy];
        let Some(bits) = sampler.read(origin) else {
            continue;
        };
        let payload = decode_payload(&bits).ok();
        out.push(FiducialDetection {
            payload,
            bits,
            origin_px: origin,
            score: s * s * s,
            checksum_ok: payload.is_some(),
        });
    }

    // Codes cannot overlap: a weaker detection whose footprint intersects a
    // stronger checksum-valid one is a partial echo of its arms.
    let span = geometry.arm_length + 2.0 * geometry.large_dot_radius / geometry.module_pitch;
    let (ex, ey) = geometry.axes();
    let mut result: Vec<FiducialDetection> = Vec::with_capacity(out.len());
    for d in out {
        let echo = result.iter().any(|k| {
            let dd = [d.origin_px[0] - k.origin_px[0], d.origin_px[1] - k.origin_px[1]];
            let du = (dd[0] * ex[0] + dd[1] * ex[1]) / geometry.module_pitch;
            let dv = (dd[0] * ey[0] + dd[1] * ey[1]) / geometry.module_pitch;
            k.checksum_ok && du.abs() < span && dv.abs() < span
        });
        if !echo {
            result.push(d);
        }
    }
    Ok(result)
}

struct CellSampler<'a> {
    image: &'a Image,
    geometry: FiducialGeometry,
    radius: f64,
}

impl<'a> CellSampler<'a> {
    fn new(image: &'a Image, geometry: &FiducialGeometry, radius: f64) -> Self {
        Self {
            image,
            geometry: *geometry,
            radius: radius.max(0.5),
        }
    }

    /// Mean over pixels whose centers lie within the sampling radius of `p`.
    fn sample(&self, p: [f64; 2]) -> Option<f64> {
        let r = self.radius;
        let (x0, x1) = ((p[0] - r).ceil() as isize, (p[0] + r).floor() as isize);
        let (y0, y1) = ((p[1] - r).ceil() as isize, (p[1] + r).floor() as isize);
        let (mut acc, mut n) = (0.0, 0usize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (x as f64 - p[0]).powi(2) + (y as f64 - p[1]).powi(2);
                if d2 <= r * r {
                    acc += self.image.get_checked(x, y)?;
                    n += 1;
                }
            }
        }
        if n == 0 {
            let (x, y) = (p[0].round() as isize, p[1].round() as isize);
            return self.image.get_checked(x, y);
        }
        Some(acc / n as f64)
    }

    fn at(&self, origin: [f64; 2], u: f64, v: f64) -> Option<f64> {
        let d = self.geometry.to_px(u, v);
        self.sample([origin[0] + d[0], origin[1] + d[1]])
    }

    /// Verifies the alignment arms and binarizes the data grid.
    fn read(&self, origin: [f64; 2]) -> Option<BitGrid25> {
        let mut arms = Vec::with_capacity(9);
        let mut small = Vec::with_capacity(6);
        for (i, (t, large)) in self.geometry.arm_stations().into_iter().enumerate() {
            let hv = self.at(origin, t, 0.0)?;
            arms.push(hv);
            if !large {
                small.push(hv);
            }
            if i > 0 {
                let vv = self.at(origin, 0.0, t)?;
                arms.push(vv);
                if !large {
                    small.push(vv);
                }
            }
        }
        let mut cells = [0.0; 25];
        for r in 0..5 {
            for c in 0..5 {
                cells[r * 5 + c] = self.at(origin, c as f64 + 1.0, r as f64 + 1.0)?;
            }
        }
        // Pads (bits 1 and 6) are always dark; arm dots are always bright.
        let off = 0.5 * (cells[0] + cells[5]);
        let on = robust::median(&arms);
        let contrast = on - off;
        if !(contrast > 0.0) {
            return None;
        }
        let arm_floor = off + 0.5 * contrast;
        if arms.iter().any(|&a| a <= arm_floor) {
            return None;
        }
        let lo = cells.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = cells.iter().chain(&small).copied().fold(f64::NEG_INFINITY, f64::max);
        let mid = 0.5 * (lo + hi);
        let mut grid = BitGrid25::default();
        for (i, &v) in cells.iter().enumerate() {
            grid.set(i + 1, v > mid);
        }
        Some(grid)
    }
}

/// Grid assignment agreed on by the majority of checksum-valid detections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConsensus {
    pub version: u8,
    /// Pixel position where the origin of code (row 0, col 0) would lie.
    pub grid_origin_px: [f64; 2],
    pub rotation: f64,
    pub grid_pitch_px: f64,
    /// Indices into the input detections that agree with the consensus.
    pub members: Vec<usize>,
    /// Checksum-valid detections that contradict it (bit errors or false
    /// positives).
    pub flagged: Vec<usize>,
}

impl FieldConsensus {
    fn axes(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.rotation.sin_cos();
        ([c, s], [-s, c])
    }

    /// Expected pixel origin of code `(row, col)`.
    pub fn code_origin_px(&self, row: i64, col: i64) -> [f64; 2] {
        let (ex, ey) = self.axes();
        let p = self.grid_pitch_px;
        [
            self.grid_origin_px[0] + p * (col as f64 * ex[0] + row as f64 * ey[0]),
            self.grid_origin_px[1] + p * (col as f64 * ex[1] + row as f64 * ey[1]),
        ]
    }

    /// Fractional `(row, col)` grid coordinates of a pixel, measured from
    /// code origins.
    pub fn grid_coords(&self, px: [f64; 2]) -> [f64; 2] {
        let (ex, ey) = self.axes();
        let d = [px[0] - self.grid_origin_px[0], px[1] - self.grid_origin_px[1]];
        [
            (d[0] * ey[0] + d[1] * ey[1]) / self.grid_pitch_px,
            (d[0] * ex[0] + d[1] * ex[1]) / self.grid_pitch_px,
        ]
    }
}

/// Majority vote over the checksum-valid detections of one field of view.
///
/// Each detection implies a grid origin `origin - pitch (col ex + row ey)`.
/// Detections agree when their implied origins are within half a grid pitch
/// and their versions match; the largest agreeing group wins (ties: higher
/// total score, then lower index).
pub fn majority_vote(detections: &[FiducialDetection], grid_pitch: f64, rotation: f64) -> Result<FieldConsensus> {
    if !(grid_pitch > 0.0) {
        return Err(Error::Range {
            name: "grid_pitch",
            value: grid_pitch,
        });
    }
    let (s, c) = rotation.sin_cos();
    let (ex, ey) = ([c, s], [-s, c]);
    let votes: Vec<(usize, u8, [f64; 2], f64)> = detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.checksum_ok)
        .filter_map(|(i, d)| {
            let p = d.payload?;
            let (col, row) = (p.col as f64, p.row as f64);
            let g = [
                d.origin_px[0] - grid_pitch * (col * ex[0] + row * ey[0]),
                d.origin_px[1] - grid_pitch * (col * ex[1] + row * ey[1]),
            ];
            Some((i, p.version, g, d.score))
        })
        .collect();
    if votes.is_empty() {
        return Err(Error::NoConsensus("no checksum-valid detections".into()));
    }
    let agree = |a: &(usize, u8, [f64; 2], f64), b: &(usize, u8, [f64; 2], f64)| {
        a.1 == b.1 && (a.2[0] - b.2[0]).hypot(a.2[1] - b.2[1]) < 0.5 * grid_pitch
    };
    let mut best: Option<(usize, f64, usize)> = None;
    for (k, v) in votes.iter().enumerate() {
        let group: Vec<&(usize, u8, [f64; 2], f64)> = votes.iter().filter(|o| agree(v, o)).collect();
        let count = group.len();
        let score: f64 = group.iter().map(|o| o.3).sum();
        let better = match best {
            None => true,
            Some((bc, bs, _)) => count > bc || (count == bc && score > bs),
        };
        if better {
            best = Some((count, score, k));
        }
    }
    let (_, _, seed) = best.expect("at least one vote");
    let seed = &votes[seed];
    let mut members = Vec::new();
    let mut flagged = Vec::new();
    let mut origin = [0.0; 2];
    for v in &votes {
        if agree(seed, v) {
            members.push(v.0);
            origin[0] += v.2[0];
            origin[1] += v.2[1];
        } else {
            flagged.push(v.0);
        }
    }
    let n = members.len() as f64;
    Ok(FieldConsensus {
        version: seed.1,
        grid_origin_px: [origin[0] / n, origin[1] / n],
        rotation,
        grid_pitch_px: grid_pitch,
        members,
        flagged,
    })
}

/// Fabricated code layout with physical origins, for synthesis and mask tools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiducialLayout {
    /// Module pitch in micrometers.
    pub module_pitch_um: f64,
    /// Distance between neighbouring code origins, micrometers.
    pub code_pitch_um: f64,
    pub codes: Vec<LayoutEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub payload: FiducialPayload,
    pub origin_um: [f64; 2],
}

impl FiducialLayout {
    /// Regular `rows x cols` grid; code `(r, c)` sits at `offset + pitch (c, r)`.
    pub fn grid(version: u8, rows: u32, cols: u32, code_pitch_um: f64, module_pitch_um: f64, offset_um: [f64; 2]) -> Result<Self> {
        let mut codes = Vec::with_capacity((rows * cols) as usize);
        for r in 0..rows {
            for c in 0..cols {
                codes.push(LayoutEntry {
                    payload: FiducialPayload::new(version as u32, r, c)?,
                    origin_um: [
                        offset_um[0] + c as f64 * code_pitch_um,
                        offset_um[1] + r as f64 * code_pitch_um,
                    ],
                });
            }
        }
        Ok(Self {
            module_pitch_um,
            code_pitch_um,
            codes,
        })
    }
}

pub const DETECTION_CSV_HEADER: &str = "payload_version,payload_row,payload_col,origin_x_px,origin_y_px,score,checksum_ok";

/// Detection report, one row per detection. Payload columns are empty when
/// the checksum failed.
pub fn detection_report_csv(detections: &[FiducialDetection]) -> String {
    let mut s = String::from(DETECTION_CSV_HEADER);
    s.push('\n');
    for d in detections {
        let (v, r, c) = match d.payload {
            Some(p) => (p.version.to_string(), p.row.to_string(), p.col.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        s.push_str(&format!(
            "{v},{r},{c},{:.4},{:.4},{:.6e},{}\n",
            d.origin_px[0], d.origin_px[1], d.score, d.checksum_ok
        ));
    }
    s
}
