//! Frame bundles and their on-disk sequence format.
//!
//! A sequence directory holds `manifest.json` plus four binary files per
//! frame under `frames/`:
//!
//! | file              | layout (little-endian)                                              |
//! |-------------------|---------------------------------------------------------------------|
//! | `NNNNNN.depth`    | `b"VXDP"`, u32 width, u32 height, u32 version, then `w*h` u16 mm     |
//! | `NNNNNN.masks`    | `b"VXMK"`, u32 version, u32 count, u32 flags, then per mask: f32 score, u32 caption length (`u32::MAX` = none), caption bytes, u32 run count, runs as (u32 start, u32 length) |
//! | `NNNNNN.feat`     | `b"VXFT"`, u32 version, u32 count, u32 dim, then `count*dim` f32     |
//! | `NNNNNN.pose`     | 16 f64, row-major 4x4 world-from-camera                              |
//!
//! Mask runs index pixels in row-major order (`v * width + u`).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_DIR: &str = "frames";
pub const MANIFEST_VERSION: u32 = 1;

/// Default embedding dimension of real caption encoders.
pub const DEFAULT_EMBEDDING_DIM: usize = 384;

const DEPTH_MAGIC: &[u8; 4] = b"VXDP";
const MASKS_MAGIC: &[u8; 4] = b"VXMK";
const FEAT_MAGIC: &[u8; 4] = b"VXFT";
const FORMAT_VERSION: u32 = 1;
const NO_CAPTION: u32 = u32::MAX;
const FLAG_OVERLAP: u32 = 1;

/// Depth raster in millimeters; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthImage {
    width: u32,
    height: u32,
    data: Vec<u16>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, data: Vec<u16>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::Inconsistent(format!(
                "depth buffer holds {} values for a {width}x{height} raster",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    /// Builds a raster from metric depths, rounding to millimeters.
    /// Non-finite, non-positive or out-of-range values become invalid.
    pub fn from_meters(width: u32, height: u32, meters: &[f64]) -> Result<Self> {
        let data = meters.iter().map(|&m| meters_to_mm(m)).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    /// Depth in meters at a row-major pixel index, `None` when invalid.
    #[inline]
    pub fn meters_at(&self, index: usize) -> Option<f64> {
        match self.data[index] {
            0 => None,
            mm => Some(mm as f64 * 1e-3),
        }
    }
}

pub fn meters_to_mm(m: f64) -> u16 {
    if !m.is_finite() || m <= 0.0 {
        return 0;
    }
    let mm = (m * 1000.0).round();
    if mm < 1.0 || mm > u16::MAX as f64 {
        0
    } else {
        mm as u16
    }
}

/// Run-length encoded pixel set over row-major pixel indices.
///
/// Runs are kept canonical: sorted, non-empty, and neither overlapping nor
/// touching, so equal pixel sets always have equal encodings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct PixelMask {
    runs: Vec<(u32, u32)>,
}

impl PixelMask {
    pub fn from_pixels(pixels: impl IntoIterator<Item = u32>) -> Self {
        let mut px: Vec<u32> = pixels.into_iter().collect();
        px.sort_unstable();
        px.dedup();
        let mut runs: Vec<(u32, u32)> = Vec::new();
        for p in px {
            match runs.last_mut() {
                Some((start, len)) if *start + *len == p => *len += 1,
                _ => runs.push((p, 1)),
            }
        }
        Self { runs }
    }

    /// Accepts runs only in canonical form.
    pub fn from_runs(runs: Vec<(u32, u32)>) -> std::result::Result<Self, String> {
        let mut prev_end: Option<u64> = None;
        for &(start, len) in &runs {
            if len == 0 {
                return Err("zero-length run".into());
            }
            if let Some(end) = prev_end {
                if (start as u64) <= end {
                    return Err("runs not sorted and separated".into());
                }
            }
            prev_end = Some(start as u64 + len as u64);
        }
        Ok(Self { runs })
    }

    pub fn runs(&self) -> &[(u32, u32)] {
        &self.runs
    }

    pub fn len(&self) -> usize {
        self.runs.iter().map(|&(_, l)| l as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn pixels(&self) -> impl Iterator<Item = u32> + '_ {
        self.runs.iter().flat_map(|&(s, l)| s..s + l)
    }

    pub fn contains(&self, pixel: u32) -> bool {
        match self.runs.binary_search_by_key(&pixel, |&(s, _)| s) {
            Ok(_) => true,
            Err(0) => false,
            Err(pos) => {
                let (s, l) = self.runs[pos - 1];
                pixel < s + l
            }
        }
    }

    /// One past the largest pixel index, or 0 when empty.
    pub fn end(&self) -> u64 {
        self.runs
            .last()
            .map_or(0, |&(s, l)| s as u64 + l as u64)
    }

    pub fn union(&self, other: &PixelMask) -> PixelMask {
        PixelMask::from_pixels(self.pixels().chain(other.pixels()))
    }

    pub fn intersects(&self, other: &PixelMask) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.runs.len() && j < other.runs.len() {
            let (a0, al) = self.runs[i];
            let (b0, bl) = other.runs[j];
            let (a1, b1) = (a0 as u64 + al as u64, b0 as u64 + bl as u64);
            if (a0 as u64) < b1 && (b0 as u64) < a1 {
                return true;
            }
            if a1 <= b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        false
    }
}

/// One segmented mask with its caption embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskObservation {
    pub mask: PixelMask,
    pub feature: Vec<f32>,
    pub caption: Option<String>,
    pub detection_score: f32,
}

/// One frame's observation: depth, pose, intrinsics and masks with features.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub frame_id: u64,
    pub depth: DepthImage,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub masks: Vec<MaskObservation>,
    /// Masks may overlap; the last-listed mask owns a shared pixel.
    pub allow_overlap: bool,
}

impl FrameBundle {
    pub fn validate(&self, embedding_dim: Option<usize>) -> Result<()> {
        let fail = |message: String| Error::Validation {
            frame_id: self.frame_id,
            message,
        };
        self.intrinsics
            .validate()
            .map_err(|e| fail(e.to_string()))?;
        self.pose.validate().map_err(|e| fail(e.to_string()))?;
        if self.depth.width != self.intrinsics.width || self.depth.height != self.intrinsics.height {
            return Err(fail(format!(
                "depth is {}x{} but intrinsics are {}x{}",
                self.depth.width, self.depth.height, self.intrinsics.width, self.intrinsics.height
            )));
        }
        let pixels = self.intrinsics.pixel_count() as u64;
        let dim = embedding_dim.or_else(|| self.masks.first().map(|m| m.feature.len()));
        for (i, m) in self.masks.iter().enumerate() {
            if m.mask.is_empty() {
                return Err(fail(format!("mask {i} is empty")));
            }
            if m.mask.end() > pixels {
                return Err(fail(format!("mask {i} pixel out of raster bounds")));
            }
            if let Some(d) = dim {
                if m.feature.len() != d {
                    return Err(fail(format!(
                        "mask {i} feature dimension {} != {d}",
                        m.feature.len()
                    )));
                }
            }
            if m.feature.iter().any(|v| !v.is_finite()) {
                return Err(fail(format!("mask {i} feature is not finite")));
            }
            if m.feature.iter().all(|&v| v == 0.0) {
                return Err(fail(format!("mask {i} feature has zero norm")));
            }
            if !(0.0..=1.0).contains(&m.detection_score) {
                return Err(fail(format!(
                    "mask {i} detection score {} outside [0, 1]",
                    m.detection_score
                )));
            }
        }
        if !self.allow_overlap {
            for i in 0..self.masks.len() {
                for j in i + 1..self.masks.len() {
                    if self.masks[i].mask.intersects(&self.masks[j].mask) {
                        return Err(fail(format!(
                            "masks {i} and {j} overlap without the overlap flag"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub frame_id: u64,
    pub depth: String,
    pub masks: String,
    pub features: String,
    pub pose: String,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRefs {
    /// Scene description (objects, classes, trajectory).
    pub scene: String,
    /// Directory of per-frame instance label rasters.
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub version: u32,
    pub resolution: f64,
    pub embedding_dim: usize,
    pub frame_count: usize,
    pub frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthRefs>,
}

/// Streams frames into a sequence directory.
pub struct SequenceWriter {
    root: PathBuf,
    manifest: SequenceManifest,
}

impl SequenceWriter {
    pub fn create(root: impl AsRef<Path>, resolution: f64, embedding_dim: usize) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::Inconsistent(format!("bad resolution {resolution}")));
        }
        let frames = root.join(FRAMES_DIR);
        fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
        Ok(Self {
            root,
            manifest: SequenceManifest {
                version: MANIFEST_VERSION,
                resolution,
                embedding_dim,
                frame_count: 0,
                frames: Vec::new(),
                ground_truth: None,
            },
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_frame(&mut self, frame: &FrameBundle) -> Result<()> {
        if let Some(first) = self.manifest.frames.first() {
            let i = &first.intrinsics;
            if (i.width, i.height) != (frame.intrinsics.width, frame.intrinsics.height) {
                return Err(Error::Inconsistent(format!(
                    "frame {} raster size differs from the sequence",
                    frame.frame_id
                )));
            }
        }
        if let Some(last) = self.manifest.frames.last() {
            if frame.frame_id <= last.frame_id {
                return Err(Error::Inconsistent(format!(
                    "frame ids must increase ({} after {})",
                    frame.frame_id, last.frame_id
                )));
            }
        }
        frame.validate(Some(self.manifest.embedding_dim))?;

        let stem = format!("{:06}", frame.frame_id);
        let entry = FrameEntry {
            frame_id: frame.frame_id,
            depth: format!("{FRAMES_DIR}/{stem}.depth"),
            masks: format!("{FRAMES_DIR}/{stem}.masks"),
            features: format!("{FRAMES_DIR}/{stem}.feat"),
            pose: format!("{FRAMES_DIR}/{stem}.pose"),
            intrinsics: frame.intrinsics,
        };
        write_file(&self.root.join(&entry.depth), &encode_depth(&frame.depth))?;
        write_file(&self.root.join(&entry.masks), &encode_masks(frame))?;
        let feats: Vec<&[f32]> = frame.masks.iter().map(|m| m.feature.as_slice()).collect();
        write_file(
            &self.root.join(&entry.features),
            &encode_features(&feats, self.manifest.embedding_dim),
        )?;
        write_file(&self.root.join(&entry.pose), &encode_pose(&frame.pose))?;
        self.manifest.frames.push(entry);
        self.manifest.frame_count += 1;
        Ok(())
    }

    pub fn set_ground_truth(&mut self, refs: GroundTruthRefs) {
        self.manifest.ground_truth = Some(refs);
    }

    pub fn finish(self) -> Result<SequenceManifest> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Inconsistent(e.to_string()))?;
        write_file(&path, text.as_bytes())?;
        Ok(self.manifest)
    }
}

pub fn write_sequence(
    frames: &[FrameBundle],
    path: impl AsRef<Path>,
    resolution: f64,
    embedding_dim: usize,
) -> Result<SequenceManifest> {
    let mut w = SequenceWriter::create(path, resolution, embedding_dim)?;
    for f in frames {
        w.write_frame(f)?;
    }
    w.finish()
}

/// Reads a sequence one frame at a time.
#[derive(Debug, Clone)]
pub struct SequenceReader {
    root: PathBuf,
    manifest: SequenceManifest,
}

impl SequenceReader {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: SequenceManifest = serde_json::from_str(&text)
            .map_err(|e| Error::schema(&path, "manifest", e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::schema(
                &path,
                "version",
                format!("unsupported version {}", manifest.version),
            ));
        }
        if !(manifest.resolution.is_finite() && manifest.resolution > 0.0) {
            return Err(Error::schema(&path, "resolution", "must be positive"));
        }
        if manifest.frame_count != manifest.frames.len() {
            return Err(Error::schema(
                &path,
                "frame_count",
                format!(
                    "declares {} frames but lists {}",
                    manifest.frame_count,
                    manifest.frames.len()
                ),
            ));
        }
        for pair in manifest.frames.windows(2) {
            if pair[1].frame_id <= pair[0].frame_id {
                return Err(Error::schema(&path, "frames", "frame ids must increase"));
            }
        }
        for entry in &manifest.frames {
            for rel in [&entry.depth, &entry.masks, &entry.features, &entry.pose] {
                let p = root.join(rel);
                if !p.is_file() {
                    return Err(Error::schema(&path, "frames", format!("missing file {rel}")));
                }
            }
        }
        Ok(Self { root, manifest })
    }

    pub fn manifest(&self) -> &SequenceManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    pub fn read_frame(&self, index: usize) -> Result<FrameBundle> {
        let entry = &self.manifest.frames[index];
        let dim = self.manifest.embedding_dim;

        let depth_path = self.root.join(&entry.depth);
        let depth = decode_depth(&read_file(&depth_path)?, &depth_path)?;
        if (depth.width, depth.height) != (entry.intrinsics.width, entry.intrinsics.height) {
            return Err(Error::schema(
                &depth_path,
                "width/height",
                "raster size does not match intrinsics",
            ));
        }

        let masks_path = self.root.join(&entry.masks);
        let (shells, allow_overlap) = decode_masks(&read_file(&masks_path)?, &masks_path)?;

        let feat_path = self.root.join(&entry.features);
        let features = decode_features(&read_file(&feat_path)?, &feat_path, dim)?;
        if features.len() != shells.len() {
            return Err(Error::schema(
                &feat_path,
                "count",
                format!("{} features for {} masks", features.len(), shells.len()),
            ));
        }

        let pose_path = self.root.join(&entry.pose);
        let pose = decode_pose(&read_file(&pose_path)?, &pose_path)?;

        let masks = shells
            .into_iter()
            .zip(features)
            .map(|((mask, caption, detection_score), feature)| MaskObservation {
                mask,
                feature,
                caption,
                detection_score,
            })
            .collect();
        let frame = FrameBundle {
            frame_id: entry.frame_id,
            depth,
            pose,
            intrinsics: entry.intrinsics,
            masks,
            allow_overlap,
        };
        frame.validate(Some(dim))?;
        Ok(frame)
    }

    /// Frames in id order; each is loaded and validated on demand.
    pub fn frames(&self) -> impl Iterator<Item = Result<FrameBundle>> + '_ {
        (0..self.len()).map(move |i| self.read_frame(i))
    }
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<SequenceReader> {
    SequenceReader::open(path)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Little-endian cursor that reports truncation as a schema error.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::schema(self.path, field, "truncated"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4, "magic")? != magic {
            return Err(Error::schema(self.path, "magic", "bad magic bytes"));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    pub(crate) fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub(crate) fn i32(&mut self, field: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, field: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::schema(
                self.path,
                "length",
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn check_version(r: &mut ByteReader<'_>, path: &Path) -> Result<()> {
    let v = r.u32("version")?;
    if v != FORMAT_VERSION {
        return Err(Error::schema(path, "version", format!("unsupported version {v}")));
    }
    Ok(())
}

pub fn encode_depth(depth: &DepthImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + depth.data.len() * 2);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&depth.width.to_le_bytes());
    out.extend_from_slice(&depth.height.to_le_bytes());
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in &depth.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_depth(buf: &[u8], path: &Path) -> Result<DepthImage> {
    let mut r = ByteReader::new(buf, path);
    r.magic(DEPTH_MAGIC)?;
    let width = r.u32("width")?;
    let height = r.u32("height")?;
    check_version(&mut r, path)?;
    let n = width as usize * height as usize;
    let raw = r.take(n * 2, "depth raster")?;
    r.finish()?;
    let data = raw
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(DepthImage {
        width,
        height,
        data,
    })
}

fn encode_masks(frame: &FrameBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MASKS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(frame.masks.len() as u32).to_le_bytes());
    let flags = if frame.allow_overlap { FLAG_OVERLAP } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for m in &frame.masks {
        out.extend_from_slice(&m.detection_score.to_le_bytes());
        match &m.caption {
            Some(c) => {
                out.extend_from_slice(&(c.len() as u32).to_le_bytes());
                out.extend_from_slice(c.as_bytes());
            }
            None => out.extend_from_slice(&NO_CAPTION.to_le_bytes()),
        }
        out.extend_from_slice(&(m.mask.runs.len() as u32).to_le_bytes());
        for &(s, l) in &m.mask.runs {
            out.extend_from_slice(&s.to_le_bytes());
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

type MaskShell = (PixelMask, Option<String>, f32);

fn decode_masks(buf: &[u8], path: &Path) -> Result<(Vec<MaskShell>, bool)> {
    let mut r = ByteReader::new(buf, path);
    r.magic(MASKS_MAGIC)?;
    check_version(&mut r, path)?;
    let count = r.u32("count")?;
    let flags = r.u32("flags")?;
    if flags & !FLAG_OVERLAP != 0 {
        return Err(Error::schema(path, "flags", format!("unknown flags {flags:#x}")));
    }
    let mut masks = Vec::new();
    for i in 0..count {
        let score = r.f32(&format!("mask[{i}].score"))?;
        let cap_len = r.u32(&format!("mask[{i}].caption_len"))?;
        let caption = if cap_len == NO_CAPTION {
            None
        } else {
            let bytes = r.take(cap_len as usize, &format!("mask[{i}].caption"))?;
            Some(String::from_utf8(bytes.to_vec()).map_err(|_| {
                Error::schema(path, format!("mask[{i}].caption"), "invalid UTF-8")
            })?)
        };
        let n_runs = r.u32(&format!("mask[{i}].run_count"))?;
        let mut runs = Vec::with_capacity(n_runs.min(1 << 20) as usize);
        for _ in 0..n_runs {
            let s = r.u32(&format!("mask[{i}].runs"))?;
            let l = r.u32(&format!("mask[{i}].runs"))?;
            runs.push((s, l));
        }
        let mask = PixelMask::from_runs(runs)
            .map_err(|m| Error::schema(path, format!("mask[{i}].runs"), m))?;
        masks.push((mask, caption, score));
    }
    r.finish()?;
    Ok((masks, flags & FLAG_OVERLAP != 0))
}

pub fn encode_features(features: &[&[f32]], dim: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + features.len() * dim * 4);
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(features.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for f in features {
        for v in f.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes an embedding file; `expected_dim` is enforced when given.
pub fn decode_features(buf: &[u8], path: &Path, expected_dim: usize) -> Result<Vec<Vec<f32>>> {
    let (dim, feats) = decode_features_any(buf, path)?;
    if dim != expected_dim {
        return Err(Error::schema(
            path,
            "dim",
            format!("feature dimension {dim} != {expected_dim}"),
        ));
    }
    Ok(feats)
}

pub fn decode_features_any(buf: &[u8], path: &Path) -> Result<(usize, Vec<Vec<f32>>)> {
    let mut r = ByteReader::new(buf, path);
    r.magic(FEAT_MAGIC)?;
    check_version(&mut r, path)?;
    let count = r.u32("count")? as usize;
    let dim = r.u32("dim")? as usize;
    let raw = r.take(count * dim * 4, "features")?;
    r.finish()?;
    let flat: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let feats = if dim == 0 {
        vec![Vec::new(); count]
    } else {
        flat.chunks_exact(dim).map(<[f32]>::to_vec).collect()
    };
    Ok((dim, feats))
}

/// Writes an embedding file (the same layout as per-frame features).
pub fn write_embeddings(path: impl AsRef<Path>, embeddings: &[Vec<f32>], dim: usize) -> Result<()> {
    let path = path.as_ref();
    if let Some(bad) = embeddings.iter().find(|e| e.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    let refs: Vec<&[f32]> = embeddings.iter().map(Vec::as_slice).collect();
    write_file(path, &encode_features(&refs, dim))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<(usize, Vec<Vec<f32>>)> {
    let path = path.as_ref();
    decode_features_any(&read_file(path)?, path)
}

fn encode_pose(pose: &Pose) -> Vec<u8> {
    pose.to_matrix()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect()
}

fn decode_pose(buf: &[u8], path: &Path) -> Result<Pose> {
    let mut r = ByteReader::new(buf, path);
    let mut m = [0.0; 16];
    for (i, v) in m.iter_mut().enumerate() {
        *v = r.f64(&format!("pose[{i}]"))?;
    }
    r.finish()?;
    Pose::from_matrix(&m).map_err(|e| Error::schema(path, "pose", e.to_string()))
}
