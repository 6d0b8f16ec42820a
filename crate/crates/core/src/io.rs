//! On-disk frame stacks (`manifest.json` plus one WFS1 raw file per frame)
//! and CSV readers for catalogs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::ple::{Frame, FrameStack, PeakFit, CATALOG_CSV_HEADER};

pub const WFS1_MAGIC: &[u8; 4] = b"WFS1";
pub const WFS1_HEADER_LEN: usize = 12;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Rounds to the nearest count and clamps to `0..=65535`; returns the
/// encoded bytes and how many pixels were clamped.
pub fn encode_wfs1(image: &Image) -> (Vec<u8>, usize) {
    let (w, h) = image.dims();
    let mut out = Vec::with_capacity(WFS1_HEADER_LEN + 2 * w * h);
    out.extend_from_slice(WFS1_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    let mut clamped = 0;
    for &v in image.data() {
        let r = v.round();
        let q = if r.is_nan() || r < 0.0 {
            clamped += 1;
            0
        } else if r > u16::MAX as f64 {
            clamped += 1;
            u16::MAX
        } else {
            r as u16
        };
        out.extend_from_slice(&q.to_le_bytes());
    }
    (out, clamped)
}

pub fn decode_wfs1(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < WFS1_HEADER_LEN {
        return Err(Error::Format(format!("frame is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..4] != WFS1_MAGIC {
        return Err(Error::Format("bad frame magic".into()));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(2))
        .and_then(|n| n.checked_add(WFS1_HEADER_LEN))
        .ok_or_else(|| Error::Format("frame dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{w}x{h} frame needs {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let data = bytes[WFS1_HEADER_LEN..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
        .collect();
    Image::from_vec(w, h, data)
}

pub fn write_frame(path: &Path, image: &Image) -> Result<usize> {
    let (bytes, clamped) = encode_wfs1(image);
    fs::write(path, bytes)?;
    Ok(clamped)
}

pub fn read_frame(path: &Path) -> Result<Image> {
    decode_wfs1(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub file: String,
    pub frequency_thz: f64,
    pub exposure_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub pixel_size_um: f64,
    pub frames: Vec<ManifestFrame>,
}

/// Writes `manifest.json` and `frame_NNNNN.wfs` files into `dir`, which is
/// created if needed. Returns the manifest and the clamped-pixel count.
pub fn write_stack(dir: &Path, stack: &FrameStack) -> Result<(Manifest, usize)> {
    fs::create_dir_all(dir)?;
    let (width, height) = stack.dims();
    let mut frames = Vec::with_capacity(stack.len());
    let mut clamped = 0;
    for (i, f) in stack.frames().iter().enumerate() {
        let file = format!("frame_{i:05}.wfs");
        clamped += write_frame(&dir.join(&file), &f.image)?;
        frames.push(ManifestFrame {
            file,
            frequency_thz: f.frequency_thz,
            exposure_s: f.exposure_s,
        });
    }
    let manifest = Manifest {
        width,
        height,
        pixel_size_um: stack.pixel_size_um(),
        frames,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("plain data serializes");
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    Ok((manifest, clamped))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))
}

pub fn read_stack(dir: &Path) -> Result<FrameStack> {
    let manifest = read_manifest(dir)?;
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for mf in &manifest.frames {
        if mf.file.contains("..") || Path::new(&mf.file).is_absolute() {
            return Err(Error::Format(format!("frame path '{}' escapes the stack directory", mf.file)));
        }
        let image = read_frame(&dir.join(&mf.file))?;
        if image.dims() != (manifest.width, manifest.height) {
            return Err(Error::Format(format!(
                "{} is {:?}, manifest says {}x{}",
                mf.file,
                image.dims(),
                manifest.width,
                manifest.height
            )));
        }
        frames.push(Frame {
            frequency_thz: mf.frequency_thz,
            exposure_s: mf.exposure_s,
            image,
        });
    }
    FrameStack::new(frames, manifest.pixel_size_um)
}

/// Peaks of a catalog CSV as written by [`crate::ple::PeakCatalog::to_csv`].
pub fn read_catalog_peaks(text: &str) -> Result<Vec<PeakFit>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Format(format!("catalog header: {e}")))?.clone();
    let expected: Vec<&str> = CATALOG_CSV_HEADER.split(',').collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format("catalog header does not match".into()));
    }
    let col = |name: &str| expected.iter().position(|h| *h == name).expect("known column");
    let (ic, iw, ie, ia, ib, ir) = (
        col("center_thz"),
        col("fwhm_mhz"),
        col("eta"),
        col("amplitude"),
        col("baseline"),
        col("residual"),
    );
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("catalog row {}: {e}", line + 1)))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Format(format!("catalog row {}: bad number in column {}", line + 1, expected[i])))
        };
        out.push(PeakFit {
            center_thz: num(ic)?,
            fwhm_mhz: num(iw)?,
            eta: num(ie)?,
            amplitude: num(ia)?,
            baseline: num(ib)?,
            residual_norm: num(ir)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let img = Image::from_vec(3, 2, vec![0.0, 1.0, 2.0, 300.0, 65535.0, 7.4]).unwrap();
        let (b, clamped) = encode_wfs1(&img);
        assert_eq!(clamped, 0);
        assert_eq!(&b[..12], b"WFS1\x03\x00\x00\x00\x02\x00\x00\x00");
        assert_eq!(b.len(), 12 + 12);
        assert_eq!(&b[12 + 6..12 + 8], &300u16.to_le_bytes());
        let back = decode_wfs1(&b).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0, 2.0, 300.0, 65535.0, 7.0]);
    }

    #[test]
    fn corrupt_frames() {
        let img = Image::filled(4, 4, 9.0);
        let (b, _) = encode_wfs1(&img);
        assert!(matches!(decode_wfs1(&b[..b.len() - 1]), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_wfs1(&bad), Err(Error::Format(_))));
        assert!(decode_wfs1(&b[..5]).is_err());
        let (_, clamped) = encode_wfs1(&Image::from_vec(2, 1, vec![-3.0, 1e6]).unwrap());
        assert_eq!(clamped, 2);
    }

    proptest! {
        #[test]
        fn integer_frames_roundtrip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let img = Image::from_fn(w, h, |x, y| ((seed >> ((x + 3 * y) % 48)) & 0xffff) as f64);
            let back = decode_wfs1(&encode_wfs1(&img).0).unwrap();
            prop_assert_eq!(back, img);
        }
    }

    #[test]
    fn stack_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let frames = (0..3)
            .map(|i| Frame {
                frequency_thz: 406.0 + i as f64 * 1e-5,
                exposure_s: 0.5,
                image: Image::from_fn(5, 4, |x, y| (x * 10 + y + i) as f64),
            })
            .collect();
        let stack = FrameStack::new(frames, 0.25).unwrap();
        let (manifest, _) = write_stack(dir.path(), &stack).unwrap();
        assert_eq!(manifest.frames[2].file, "frame_00002.wfs");
        assert_eq!(read_stack(dir.path()).unwrap(), stack);
        // Truncated frame file.
        let p = dir.path().join("frame_00001.wfs");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_stack(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn catalog_csv_roundtrip() {
        let csv = format!("{CATALOG_CSV_HEADER}\n3,1.0,2.0,406.0,406.01,406.005000000,150.2500,1.000000,1.0e3,2.0e1,3.0e0\n");
        let peaks = read_catalog_peaks(&csv).unwrap();
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks[0].fwhm_mhz, 150.25);
        assert!(read_catalog_peaks("a,b\n1,2\n").is_err());
    }
}
