//! "ADCC" dataset files: frames of raw samples with their labels.
//!
//! ```text
//! "ADCC" | version u32 = 1 | frame_count u32
//! per frame: C, S, N_Rx, h, w (u32) | C·S·N_Rx (re, im) f32 | seg u8[h·w] | det f32[h·w·3]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::bytes::{put_f32s, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::sim::{rasterize_labels, synthesize_frame, AdcFrame, Dims, Labels, Scene};

pub const MAGIC: &[u8; 4] = b"ADCC";
pub const VERSION: u32 = 1;
const HEADER_BYTES: u64 = 12;
const FRAME_HEADER_BYTES: u64 = 20;

/// A frame and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame: AdcFrame,
    pub labels: Labels,
}

impl Sample {
    pub fn from_scene(scene: &Scene, grid: (usize, usize)) -> Self {
        Self {
            frame: synthesize_frame(scene),
            labels: rasterize_labels(scene, grid),
        }
    }
}

/// Bytes one frame record occupies on disk.
pub fn frame_record_bytes(dims: Dims, grid: (usize, usize)) -> u64 {
    let cells = (grid.0 * grid.1) as u64;
    FRAME_HEADER_BYTES + dims.complex_len() as u64 * 8 + cells + cells * 12
}

/// Total file size for `n` frames of identical dims.
pub fn file_bytes(n: usize, dims: Dims, grid: (usize, usize)) -> u64 {
    HEADER_BYTES + n as u64 * frame_record_bytes(dims, grid)
}

fn write_sample(w: &mut impl Write, s: &Sample) -> Result<()> {
    let d = s.frame.dims;
    let l = &s.labels;
    let mut head = Vec::with_capacity(FRAME_HEADER_BYTES as usize);
    for (v, what) in [
        (d.chirps, "C"),
        (d.samples, "S"),
        (d.n_rx, "N_Rx"),
        (l.h, "h_out"),
        (l.w, "w_out"),
    ] {
        put_u32(&mut head, to_u32(v, what)?);
    }
    w.write_all(&head)?;
    let mut body = Vec::with_capacity(s.frame.raw().len() * 4);
    put_f32s(&mut body, s.frame.raw().iter().copied());
    body.extend_from_slice(&l.seg);
    put_f32s(&mut body, l.det.iter().copied());
    w.write_all(&body)?;
    Ok(())
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    put_u32(&mut head, VERSION);
    put_u32(&mut head, to_u32(samples.len(), "frame count")?);
    w.write_all(&head)?;
    for s in samples {
        write_sample(&mut w, s)?;
    }
    w.flush()?;
    Ok(())
}

/// Synthesises and writes scenes one at a time, so memory stays at one frame.
pub fn write_scenes(path: &Path, scenes: &[Scene], grid: (usize, usize)) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    put_u32(&mut head, VERSION);
    put_u32(&mut head, to_u32(scenes.len(), "frame count")?);
    w.write_all(&head)?;
    for scene in scenes {
        write_sample(&mut w, &Sample::from_scene(scene, grid))?;
    }
    w.flush()?;
    Ok(())
}

/// Streams frames from an ADCC file.
pub struct DatasetReader<R> {
    inner: R,
    pos: u64,
    len: u64,
    remaining: u32,
    /// Total frames declared in the header.
    pub frame_count: u32,
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        Self::new(BufReader::new(file), len)
    }
}

impl<R: Read> DatasetReader<R> {
    /// `len` is the total byte length of the source.
    pub fn new(mut inner: R, len: u64) -> Result<Self> {
        let head = read_exact(&mut inner, 0, len, HEADER_BYTES as usize, "file header")?;
        let mut r = Reader::new(&head);
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported dataset version {version}")));
        }
        let frame_count = r.u32("frame count")?;
        Ok(Self {
            inner,
            pos: HEADER_BYTES,
            len,
            remaining: frame_count,
            frame_count,
        })
    }

    fn read_frame(&mut self) -> Result<Sample> {
        let at = self.pos;
        let head = read_exact(
            &mut self.inner,
            at,
            self.len,
            FRAME_HEADER_BYTES as usize,
            "frame header",
        )?;
        let mut r = Reader::new(&head);
        let mut v = [0usize; 5];
        for (slot, what) in v.iter_mut().zip(["C", "S", "N_Rx", "h_out", "w_out"]) {
            *slot = r.u32(what)? as usize;
            if *slot == 0 {
                return Err(Error::format(at, format!("frame header has {what}=0")));
            }
        }
        let [c, s, n, h, w] = v;
        let overflow = || Error::format(at, format!("frame dims {c}×{s}×{n} with grid {h}×{w} overflow"));
        let reals = c
            .checked_mul(s)
            .and_then(|x| x.checked_mul(n))
            .and_then(|x| x.checked_mul(2))
            .ok_or_else(overflow)?;
        let cells = h.checked_mul(w).ok_or_else(overflow)?;
        let body_len = reals
            .checked_mul(4)
            .and_then(|x| x.checked_add(cells))
            .and_then(|x| x.checked_add(cells.checked_mul(12)?))
            .ok_or_else(overflow)?;
        self.pos += FRAME_HEADER_BYTES;
        let body = read_exact(&mut self.inner, self.pos, self.len, body_len, "frame body")?;
        let mut r = Reader::new(&body);
        let samples = r.f32s(reals, "samples")?;
        let seg = r.take(cells, "seg mask")?.to_vec();
        let det = r.f32s(cells * 3, "detection targets")?;
        let frame = AdcFrame::new(Dims::new(c, s, n), samples).map_err(|e| Error::format(self.pos, e.to_string()))?;
        self.pos += body_len as u64;
        Ok(Sample {
            frame,
            labels: Labels { h, w, seg, det },
        })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let out = self.read_frame();
        if out.is_err() {
            self.remaining = 0;
        }
        Some(out)
    }
}

fn read_exact(r: &mut impl Read, at: u64, len: u64, n: usize, what: &str) -> Result<Vec<u8>> {
    let available = len.saturating_sub(at);
    if (n as u64) > available {
        return Err(Error::format(
            at,
            format!("truncated {what}: expected {n} bytes, found {available}"),
        ));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Reads every frame into memory.
pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let reader = DatasetReader::open(path)?;
    let len = reader.len;
    let samples = reader.collect::<Result<Vec<_>>>()?;
    let used = HEADER_BYTES
        + samples
            .iter()
            .map(|s| frame_record_bytes(s.frame.dims, (s.labels.h, s.labels.w)))
            .sum::<u64>();
    if used != len {
        return Err(Error::format(
            used,
            format!("{} trailing bytes after the last frame", len - used),
        ));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Target;

    fn scenes(n: usize) -> Vec<Scene> {
        (0..n)
            .map(|i| {
                let t = Target {
                    range_norm: 0.1 * (i + 1) as f64,
                    azimuth: 5.0 * i as f64,
                    doppler_norm: 0.1,
                    amplitude: 1.0,
                };
                Scene::new(vec![t], 10.0, i as u64, Dims::new(2, 4, 2)).unwrap()
            })
            .collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.adcc");
        let sc = scenes(3);
        write_scenes(&path, &sc, (8, 8)).unwrap();
        let back = read_dataset(&path).unwrap();
        let want: Vec<Sample> = sc.iter().map(|s| Sample::from_scene(s, (8, 8))).collect();
        assert_eq!(back, want);
        assert_eq!(
            std::fs::metadata(&path).unwrap().len(),
            file_bytes(3, Dims::new(2, 4, 2), (8, 8))
        );
    }

    #[test]
    fn truncated_file_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.adcc");
        write_scenes(&path, &scenes(2), (8, 8)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = read_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("expected") && err.contains("found"), "{err}");
    }

    #[test]
    fn zero_chirps_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.adcc");
        write_scenes(&path, &scenes(1), (8, 8)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[12..16].copy_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match read_dataset(&path) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 12);
                assert!(msg.contains("C=0"));
            }
            other => panic!("{other:?}"),
        }
    }
}
