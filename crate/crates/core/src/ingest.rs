//! Raw capture ingestion: images, audio, marker tracking.
//!
//! Real recordings arrive as grayscale frame dumps plus a contact-microphone
//! track. This module parses both, finds the bright membrane markers by blob
//! detection, and tracks each grid slot across frames so downstream feature
//! extraction sees the same marker streams the simulator emits.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::afferents::{AfferentError, MarkerFrame, GRID_COLS, MARKERS, PITCH_MM, PX_PER_MM};
use crate::spectral::SAMPLE_RATE;
use crate::Scalar;

/// Default blob intensity threshold.
pub const BLOB_THRESHOLD: u8 = 128;
/// Default minimum blob area, in pixels.
pub const BLOB_MIN_AREA: usize = 9;
/// Gating radius for grid association, in pixels: 0.6 marker pitches.
pub const GATE_RADIUS_PX: f64 = 0.6 * PITCH_MM * PX_PER_MM;
/// Frames averaged into the rest frame of a real recording.
pub const REST_FRAMES: usize = 30;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{what} at byte {offset}")]
    Parse { offset: usize, what: String },
    #[error("unsupported format: found {found}, expected {expected}")]
    Unsupported { found: String, expected: String },
    #[error("frame {frame}: lost track of {unmatched} of {MARKERS} markers")]
    TrackingLoss { frame: usize, unmatched: usize },
    #[error("found {got} blobs, expected within 5% of {MARKERS}")]
    BlobCount { got: usize },
    #[error(transparent)]
    Afferent(#[from] AfferentError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One 8-bit grayscale camera frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(width * height, data.len(), "frame data length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Bright connected components of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSet {
    /// Intensity-weighted centroids, subpixel, in (x, y) order.
    pub centroids: Vec<[f64; 2]>,
    /// Component sizes in pixels, aligned with `centroids`.
    pub areas: Vec<usize>,
}

impl BlobSet {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }
}

/// Result of matching one frame's blobs onto the marker grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedFrame<F> {
    pub frame: MarkerFrame<F>,
    /// Grid slots that found no blob and kept their previous position.
    pub carried: Vec<usize>,
}

fn parse_error(offset: usize, what: &str) -> IngestError {
    IngestError::Parse {
        offset,
        what: what.into(),
    }
}

/// Reads one whitespace-and-comment separated ASCII integer from a PGM header.
fn pgm_token(bytes: &[u8], pos: &mut usize) -> Result<usize, IngestError> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err(parse_error(*pos, "truncated header")),
        }
    }
    let start = *pos;
    let mut value = 0usize;
    while let Some(&b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        value = value * 10 + (b - b'0') as usize;
        *pos += 1;
    }
    if *pos == start {
        return Err(parse_error(start, "expected decimal integer"));
    }
    Ok(value)
}

/// Parses a binary (P5) PGM image with maxval up to 255.
pub fn read_pgm(bytes: &[u8]) -> Result<GrayFrame, IngestError> {
    if bytes.len() < 2 {
        return Err(parse_error(0, "truncated header"));
    }
    match &bytes[..2] {
        b"P5" => {}
        b"P2" => {
            return Err(IngestError::Unsupported {
                found: "ASCII PGM (P2)".into(),
                expected: "binary PGM (P5)".into(),
            })
        }
        _ => return Err(parse_error(0, "missing P5 magic")),
    }
    let mut pos = 2;
    let width = pgm_token(bytes, &mut pos)?;
    let height = pgm_token(bytes, &mut pos)?;
    let maxval = pgm_token(bytes, &mut pos)?;
    if width == 0 || height == 0 {
        return Err(parse_error(2, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(parse_error(pos, "maxval must be 1..=255"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(parse_error(pos, "expected whitespace after maxval")),
        None => return Err(parse_error(pos, "truncated header")),
    }
    let need = width * height;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(parse_error(
            bytes.len(),
            "truncated pixel payload",
        ));
    }
    Ok(GrayFrame::new(width, height, payload[..need].to_vec()))
}

/// Serializes a frame as binary PGM; `read_pgm` recovers it exactly.
pub fn write_pgm(frame: &GrayFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.data);
    out
}

/// Finds 8-connected components of pixels at or above `threshold` with at
/// least `min_area` pixels; centroids are intensity-weighted means.
pub fn detect_blobs(frame: &GrayFrame, threshold: u8, min_area: usize) -> BlobSet {
    let (w, h) = (frame.width, frame.height);
    let mut seen = vec![false; w * h];
    let mut centroids = Vec::new();
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || frame.data[start] < threshold {
            continue;
        }
        stack.push(start);
        seen[start] = true;
        let mut area = 0usize;
        let (mut wx, mut wy, mut wsum) = (0.0f64, 0.0f64, 0.0f64);
        while let Some(idx) = stack.pop() {
            area += 1;
            let (x, y) = (idx % w, idx / w);
            let weight = frame.data[idx] as f64;
            wx += weight * x as f64;
            wy += weight * y as f64;
            wsum += weight;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if !seen[nidx] && frame.data[nidx] >= threshold {
                        seen[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        if area >= min_area {
            centroids.push([wx / wsum, wy / wsum]);
            areas.push(area);
        }
    }
    BlobSet { centroids, areas }
}

/// Orders exactly 361 blob centroids into the 19x19 grid, row-major.
///
/// Rows are recovered by sorting on y and chunking; the grid must be close
/// enough to axis-aligned that rows do not interleave in y, which holds for
/// the flat-membrane camera geometry this pipeline ingests.
pub fn grid_from_blobs<F: Scalar>(blobs: &BlobSet) -> Result<MarkerFrame<F>, IngestError> {
    if blobs.len() != MARKERS {
        return Err(IngestError::BlobCount { got: blobs.len() });
    }
    let mut order: Vec<usize> = (0..MARKERS).collect();
    order.sort_by(|&a, &b| blobs.centroids[a][1].total_cmp(&blobs.centroids[b][1]));
    let mut pos = Vec::with_capacity(MARKERS);
    for row in order.chunks(GRID_COLS) {
        let mut row = row.to_vec();
        row.sort_by(|&a, &b| blobs.centroids[a][0].total_cmp(&blobs.centroids[b][0]));
        for i in row {
            let c = blobs.centroids[i];
            pos.push([F::of(c[0]), F::of(c[1])]);
        }
    }
    Ok(MarkerFrame::new(pos)?)
}

/// Matches blobs onto grid slots by nearest neighbor within the gating
/// radius; unmatched slots carry their previous position forward.
///
/// More than 5% unmatched slots is a tracking loss. The input blob count
/// must itself be within 5% of the marker count.
pub fn associate_grid<F: Scalar>(
    blobs: &BlobSet,
    previous: &MarkerFrame<F>,
    frame_index: usize,
) -> Result<TrackedFrame<F>, IngestError> {
    let tolerance = (MARKERS as f64 * 0.05).floor() as usize;
    if blobs.len().abs_diff(MARKERS) > tolerance {
        return Err(IngestError::BlobCount { got: blobs.len() });
    }
    let mut pos = Vec::with_capacity(MARKERS);
    let mut carried = Vec::new();
    for (slot, prev) in previous.pos.iter().enumerate() {
        let (px, py) = (prev[0].to_f64(), prev[1].to_f64());
        let mut best: Option<(f64, usize)> = None;
        for (bi, c) in blobs.centroids.iter().enumerate() {
            let d2 = (c[0] - px).powi(2) + (c[1] - py).powi(2);
            if d2 <= GATE_RADIUS_PX * GATE_RADIUS_PX && best.is_none_or(|(bd, _)| d2 < bd) {
                best = Some((d2, bi));
            }
        }
        match best {
            Some((_, bi)) => {
                let c = blobs.centroids[bi];
                pos.push([F::of(c[0]), F::of(c[1])]);
            }
            None => {
                pos.push(*prev);
                carried.push(slot);
            }
        }
    }
    if carried.len() > tolerance {
        return Err(IngestError::TrackingLoss {
            frame: frame_index,
            unmatched: carried.len(),
        });
    }
    Ok(TrackedFrame {
        frame: MarkerFrame::new(pos)?,
        carried,
    })
}

/// Tracks a whole recording: the grid is bootstrapped from the first frame's
/// blobs and then followed frame to frame.
pub fn track_stream<F: Scalar>(
    frames: &[GrayFrame],
    threshold: u8,
    min_area: usize,
) -> Result<Vec<MarkerFrame<F>>, IngestError> {
    let mut out: Vec<MarkerFrame<F>> = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        let blobs = detect_blobs(frame, threshold, min_area);
        let tracked = if let Some(prev) = out.last() {
            associate_grid(&blobs, prev, i)?.frame
        } else {
            grid_from_blobs(&blobs)?
        };
        out.push(tracked);
    }
    Ok(out)
}

/// Rest frame of a real recording: per-marker mean over the first no-contact
/// frames, damping camera jitter.
pub fn rest_from_frames<F: Scalar>(frames: &[MarkerFrame<F>]) -> Result<MarkerFrame<F>, IngestError> {
    if frames.is_empty() {
        return Err(IngestError::BlobCount { got: 0 });
    }
    let n = frames.len().min(REST_FRAMES);
    let mut pos = vec![[0.0f64; 2]; MARKERS];
    for frame in &frames[..n] {
        for (acc, p) in pos.iter_mut().zip(&frame.pos) {
            acc[0] += p[0].to_f64();
            acc[1] += p[1].to_f64();
        }
    }
    let inv = 1.0 / n as f64;
    let pos = pos
        .into_iter()
        .map(|p| [F::of(p[0] * inv), F::of(p[1] * inv)])
        .collect();
    Ok(MarkerFrame::new(pos)?)
}

/// Parses a RIFF/WAVE file holding 16-bit PCM mono at 44100 Hz; samples are
/// scaled to [-1, 1] by 1/32768.
pub fn read_wav(bytes: &[u8]) -> Result<Vec<f32>, IngestError> {
    let u16_at = |pos: usize| -> Result<u16, IngestError> {
        let b = bytes
            .get(pos..pos + 2)
            .ok_or_else(|| parse_error(pos, "truncated chunk"))?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    };
    let u32_at = |pos: usize| -> Result<u32, IngestError> {
        let b = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| parse_error(pos, "truncated chunk"))?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(parse_error(0, "missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(pos + 4)? as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(parse_error(body, "truncated chunk"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(parse_error(body, "fmt chunk too short"));
                }
                format = Some((
                    u16_at(body)?,
                    u16_at(body + 2)?,
                    u32_at(body + 4)?,
                    u16_at(body + 14)?,
                ));
            }
            b"data" => data = Some(&bytes[body..body + size]),
            _ => {}
        }
        // Chunks are word-aligned; odd sizes are padded with one byte.
        pos = body + size + (size & 1);
    }
    let (codec, channels, rate, bits) =
        format.ok_or_else(|| parse_error(bytes.len(), "missing fmt chunk"))?;
    let expected = "PCM, 1 channel, 44100 Hz, 16-bit";
    if codec != 1 || channels != 1 || rate != SAMPLE_RATE as u32 || bits != 16 {
        return Err(IngestError::Unsupported {
            found: format!("codec {codec}, {channels} channel(s), {rate} Hz, {bits}-bit"),
            expected: expected.into(),
        });
    }
    let data = data.ok_or_else(|| parse_error(bytes.len(), "missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(parse_error(bytes.len(), "odd PCM16 payload length"));
    }
    Ok(data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
        .collect())
}

/// Serializes samples as 16-bit PCM mono WAV at 44100 Hz, clamping to [-1, 1]
/// and rounding to the nearest quantization level.
pub fn write_wav(samples: &[f32]) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE as u32).to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE as u32 * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Renders marker positions as bright anti-aliased disks on a dark frame,
/// standing in for camera captures when exercising the ingestion path.
pub fn render_markers<F: Scalar>(
    frame: &MarkerFrame<F>,
    width: usize,
    height: usize,
    radius_px: f64,
) -> GrayFrame {
    let mut data = vec![0u8; width * height];
    for p in &frame.pos {
        let (cx, cy) = (p[0].to_f64(), p[1].to_f64());
        let x0 = ((cx - radius_px - 1.0).floor().max(0.0)) as usize;
        let y0 = ((cy - radius_px - 1.0).floor().max(0.0)) as usize;
        let x1 = ((cx + radius_px + 1.0).ceil().min(width as f64 - 1.0)) as usize;
        let y1 = ((cy + radius_px + 1.0).ceil().min(height as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                // Pixel coverage approximated by a linear edge ramp.
                let coverage = (radius_px + 0.5 - d).clamp(0.0, 1.0);
                let v = (coverage * 255.0).round() as u8;
                let idx = y * width + x;
                data[idx] = data[idx].max(v);
            }
        }
    }
    GrayFrame::new(width, height, data)
}

/// Reads one recording directory: `frame_<idx>.pgm` in index order plus
/// `audio.wav`, returning tracked marker frames and audio samples.
pub fn read_condition_dir<F: Scalar>(
    dir: &Path,
    threshold: u8,
    min_area: usize,
) -> Result<(Vec<MarkerFrame<F>>, Vec<f32>), IngestError> {
    let mut frames = Vec::new();
    for idx in 0.. {
        let path = dir.join(format!("frame_{idx}.pgm"));
        if !path.exists() {
            break;
        }
        let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
        frames.push(read_pgm(&bytes)?);
    }
    let tracked = track_stream(&frames, threshold, min_area)?;
    let audio_path = dir.join("audio.wav");
    let bytes = std::fs::read(&audio_path).map_err(|e| io_err(&audio_path, e))?;
    let audio = read_wav(&bytes)?;
    Ok((tracked, audio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::afferents::GRID_ROWS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rest_grid(origin: [f64; 2]) -> MarkerFrame<f64> {
        let pitch = PITCH_MM * PX_PER_MM;
        let mut pos = Vec::with_capacity(MARKERS);
        for r in 0..GRID_ROWS {
            for c in 0..GRID_COLS {
                pos.push([origin[0] + c as f64 * pitch, origin[1] + r as f64 * pitch]);
            }
        }
        MarkerFrame::new(pos).unwrap()
    }

    #[test]
    fn pgm_round_trips_exactly() {
        let frame = GrayFrame::new(2, 2, vec![0, 64, 128, 255]);
        let bytes = write_pgm(&frame);
        assert_eq!(read_pgm(&bytes).unwrap(), frame);
        assert_eq!(write_pgm(&read_pgm(&bytes).unwrap()), bytes);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let bytes = b"P5 # camera dump\n# second line\n 3\t2 # wide\n255\n".to_vec();
        let mut bytes = bytes;
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let frame = read_pgm(&bytes).unwrap();
        assert_eq!((frame.width, frame.height), (3, 2));
        assert_eq!(frame.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn ascii_pgm_is_rejected() {
        let err = read_pgm(b"P2\n2 2\n255\n0 1 2 3\n").unwrap_err();
        assert!(matches!(err, IngestError::Unsupported { .. }));
        assert!(err.to_string().contains("P2"));
    }

    #[test]
    fn truncated_pgm_reports_offset_not_partial_frame() {
        let mut bytes = write_pgm(&GrayFrame::new(4, 4, vec![9; 16]));
        bytes.truncate(bytes.len() - 3);
        match read_pgm(&bytes).unwrap_err() {
            IngestError::Parse { offset, what } => {
                assert_eq!(offset, bytes.len());
                assert!(what.contains("truncated"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_bad_maxval_are_parse_errors() {
        assert!(matches!(
            read_pgm(b"Q5\n1 1\n255\n\0").unwrap_err(),
            IngestError::Parse { offset: 0, .. }
        ));
        assert!(matches!(
            read_pgm(b"P5\n1 1\n999\n\0").unwrap_err(),
            IngestError::Parse { .. }
        ));
    }

    #[test]
    fn four_white_squares_give_four_centered_blobs() {
        let mut data = vec![0u8; 64 * 64];
        let squares = [(10usize, 10usize), (40, 12), (12, 40), (44, 44)];
        for &(sx, sy) in &squares {
            for y in sy..sy + 5 {
                for x in sx..sx + 5 {
                    data[y * 64 + x] = 255;
                }
            }
        }
        let blobs = detect_blobs(&GrayFrame::new(64, 64, data), 128, 9);
        assert_eq!(blobs.len(), 4);
        for &(sx, sy) in &squares {
            let center = [sx as f64 + 2.0, sy as f64 + 2.0];
            let hit = blobs
                .centroids
                .iter()
                .any(|c| (c[0] - center[0]).abs() < 0.01 && (c[1] - center[1]).abs() < 0.01);
            assert!(hit, "no centroid at {center:?}");
        }
        assert!(blobs.areas.iter().all(|&a| a == 25));
    }

    #[test]
    fn black_frame_has_no_blobs() {
        let blobs = detect_blobs(&GrayFrame::new(32, 32, vec![0; 1024]), 128, 9);
        assert!(blobs.is_empty());
    }

    /// Independent connected-components oracle: iterative label propagation
    /// until fixpoint, sharing no code with the detector's flood fill.
    fn component_count_oracle(frame: &GrayFrame, threshold: u8, min_area: usize) -> usize {
        let (w, h) = (frame.width, frame.height);
        let mut label: Vec<usize> = (0..w * h).collect();
        let mut changed = true;
        while changed {
            changed = false;
            for y in 0..h {
                for x in 0..w {
                    let idx = y * w + x;
                    if frame.data[idx] < threshold {
                        continue;
                    }
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                                continue;
                            }
                            let nidx = ny as usize * w + nx as usize;
                            if frame.data[nidx] >= threshold && label[nidx] < label[idx] {
                                label[idx] = label[nidx];
                                changed = true;
                            }
                        }
                    }
                }
            }
        }
        let mut sizes = std::collections::HashMap::new();
        for idx in 0..w * h {
            if frame.data[idx] >= threshold {
                *sizes.entry(label[idx]).or_insert(0usize) += 1;
            }
        }
        sizes.values().filter(|&&s| s >= min_area).count()
    }

    #[test]
    fn one_pixel_bridge_merges_two_blobs() {
        let mut data = vec![0u8; 32 * 32];
        for y in 8..13 {
            for x in 4..9 {
                data[y * 32 + x] = 200;
            }
            for x in 12..17 {
                data[y * 32 + x] = 200;
            }
        }
        data[10 * 32 + 9] = 200;
        data[10 * 32 + 10] = 200;
        data[10 * 32 + 11] = 200;
        let frame = GrayFrame::new(32, 32, data);
        let blobs = detect_blobs(&frame, 128, 9);
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs.len(), component_count_oracle(&frame, 128, 9));
    }

    #[test]
    fn component_counts_match_oracle_on_random_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let data: Vec<u8> = (0..24 * 24).map(|_| rng.random::<u8>()).collect();
            let frame = GrayFrame::new(24, 24, data);
            assert_eq!(
                detect_blobs(&frame, 128, 3).len(),
                component_count_oracle(&frame, 128, 3)
            );
        }
    }

    #[test]
    fn detection_ignores_sub_threshold_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let threshold = 128u8;
        for _ in 0..50 {
            let mut base = vec![0u8; 48 * 48];
            for _ in 0..6 {
                let (sx, sy) = (rng.random_range(2..40usize), rng.random_range(2..40usize));
                for y in sy..sy + 4 {
                    for x in sx..sx + 4 {
                        base[y * 48 + x] = 255;
                    }
                }
            }
            let clean = detect_blobs(&GrayFrame::new(48, 48, base.clone()), threshold, 4);
            let noisy: Vec<u8> = base
                .iter()
                .map(|&p| {
                    if p == 0 {
                        rng.random_range(0..threshold - 1)
                    } else {
                        p
                    }
                })
                .collect();
            let noisy = detect_blobs(&GrayFrame::new(48, 48, noisy), threshold, 4);
            assert_eq!(clean, noisy);
        }
    }

    #[test]
    fn blobs_at_previous_positions_associate_identically() {
        let rest = rest_grid([30.0, 30.0]);
        let blobs = BlobSet {
            centroids: rest.pos.clone(),
            areas: vec![25; MARKERS],
        };
        let tracked = associate_grid::<f64>(&blobs, &rest, 1).unwrap();
        assert_eq!(tracked.frame, rest);
        assert!(tracked.carried.is_empty());
    }

    #[test]
    fn rigid_shift_is_tracked_exactly() {
        let rest = rest_grid([30.0, 30.0]);
        let shifted: Vec<[f64; 2]> = rest.pos.iter().map(|p| [p[0] + 1.0, p[1] + 1.0]).collect();
        let blobs = BlobSet {
            centroids: shifted.clone(),
            areas: vec![25; MARKERS],
        };
        let tracked = associate_grid::<f64>(&blobs, &rest, 1).unwrap();
        assert!(tracked.carried.is_empty());
        assert_eq!(tracked.frame.pos, shifted);
    }

    #[test]
    fn missing_blob_carries_slot_forward_and_flags_it() {
        let rest = rest_grid([30.0, 30.0]);
        let mut centroids = rest.pos.clone();
        centroids.remove(77);
        let blobs = BlobSet {
            areas: vec![25; centroids.len()],
            centroids,
        };
        let tracked = associate_grid::<f64>(&blobs, &rest, 3).unwrap();
        assert_eq!(tracked.carried, vec![77]);
        assert_eq!(tracked.frame.pos[77], rest.pos[77]);
        assert_eq!(tracked.frame.pos[78], rest.pos[78]);
    }

    #[test]
    fn translation_sequence_integrates_to_total_shift() {
        let rest = rest_grid([40.0, 40.0]);
        let mut prev = rest.clone();
        let step = [2.5f64, -1.5];
        for i in 1..=20usize {
            let moved: Vec<[f64; 2]> = rest
                .pos
                .iter()
                .map(|p| [p[0] + step[0] * i as f64, p[1] + step[1] * i as f64])
                .collect();
            let blobs = BlobSet {
                centroids: moved,
                areas: vec![25; MARKERS],
            };
            prev = associate_grid::<f64>(&blobs, &prev, i).unwrap().frame;
        }
        for (p, r) in prev.pos.iter().zip(&rest.pos) {
            assert!((p[0] - (r[0] + 50.0)).abs() < 0.1 * 20.0);
            assert!((p[1] - (r[1] - 30.0)).abs() < 0.1 * 20.0);
        }
    }

    #[test]
    fn heavy_marker_loss_is_a_tracking_error() {
        let rest = rest_grid([30.0, 30.0]);
        // 19 unmatched of 361 is 5.3%, just over the 5% budget; the blob
        // count itself stays valid because the lost markers smear far away.
        let mut centroids = rest.pos.clone();
        for c in centroids.iter_mut().take(19) {
            c[0] += 10_000.0;
        }
        let blobs = BlobSet {
            areas: vec![25; centroids.len()],
            centroids,
        };
        match associate_grid::<f64>(&blobs, &rest, 12).unwrap_err() {
            IngestError::TrackingLoss { frame, unmatched } => {
                assert_eq!(frame, 12);
                assert_eq!(unmatched, 19);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn wildly_wrong_blob_count_is_rejected() {
        let rest = rest_grid([30.0, 30.0]);
        let blobs = BlobSet {
            centroids: rest.pos[..100].to_vec(),
            areas: vec![25; 100],
        };
        assert!(matches!(
            associate_grid::<f64>(&blobs, &rest, 0).unwrap_err(),
            IngestError::BlobCount { got: 100 }
        ));
    }

    #[test]
    fn grid_from_blobs_recovers_row_major_order() {
        let rest = rest_grid([25.0, 25.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut shuffled: Vec<[f64; 2]> = rest
            .pos
            .iter()
            .map(|p| [p[0] + rng.random::<f64>() - 0.5, p[1] + rng.random::<f64>() - 0.5])
            .collect();
        let jittered = shuffled.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng);
        let blobs = BlobSet {
            centroids: shuffled,
            areas: vec![25; MARKERS],
        };
        let grid = grid_from_blobs::<f64>(&blobs).unwrap();
        assert_eq!(grid.pos, jittered);
    }

    #[test]
    fn rendered_grid_is_recovered_within_a_tenth_pixel() {
        let rest = rest_grid([40.0, 40.0]);
        let frame = render_markers(&rest, 560, 560, 4.0);
        let blobs = detect_blobs(&frame, BLOB_THRESHOLD, BLOB_MIN_AREA);
        assert_eq!(blobs.len(), MARKERS);
        let grid = grid_from_blobs::<f64>(&blobs).unwrap();
        for (g, r) in grid.pos.iter().zip(&rest.pos) {
            assert!((g[0] - r[0]).abs() < 0.1, "x {} vs {}", g[0], r[0]);
            assert!((g[1] - r[1]).abs() < 0.1, "y {} vs {}", g[1], r[1]);
        }
    }

    #[test]
    fn rest_frame_averages_early_jitter() {
        let rest = rest_grid([30.0, 30.0]);
        let mut frames = Vec::new();
        for i in 0..40usize {
            let off = if i % 2 == 0 { 0.2 } else { -0.2 };
            let pos: Vec<[f64; 2]> = rest.pos.iter().map(|p| [p[0] + off, p[1]]).collect();
            frames.push(MarkerFrame::new(pos).unwrap());
        }
        let mean = rest_from_frames(&frames).unwrap();
        for (m, r) in mean.pos.iter().zip(&rest.pos) {
            assert!((m[0] - r[0]).abs() < 1e-9);
            assert!((m[1] - r[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn wav_zeros_round_trip() {
        let samples = vec![0.0f32; SAMPLE_RATE];
        let bytes = write_wav(&samples);
        let back = read_wav(&bytes).unwrap();
        assert_eq!(back.len(), SAMPLE_RATE);
        assert!(back.iter().all(|&s| s == 0.0));
        assert_eq!(write_wav(&back), bytes);
    }

    #[test]
    fn full_scale_square_wave_reads_back_near_unity() {
        let mut bytes = write_wav(&[]);
        let data: Vec<u8> = (0..8)
            .flat_map(|i| {
                let v: i16 = if i % 2 == 0 { 32767 } else { -32767 };
                v.to_le_bytes()
            })
            .collect();
        let dlen = bytes.len();
        bytes[dlen - 4..].copy_from_slice(&(data.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&data);
        bytes[4..8].copy_from_slice(&(36 + data.len() as u32).to_le_bytes());
        let samples = read_wav(&bytes).unwrap();
        for (i, &s) in samples.iter().enumerate() {
            let expect = if i % 2 == 0 { 0.999_97 } else { -0.999_97 };
            assert!((s - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn representable_samples_round_trip_exactly() {
        let samples: Vec<f32> = (-8..8).map(|q| q as f32 * 4096.0 / 32768.0).collect();
        assert_eq!(read_wav(&write_wav(&samples)).unwrap(), samples);
    }

    #[test]
    fn stereo_wav_names_the_channel_count() {
        let mut bytes = write_wav(&[0.0, 0.0]);
        bytes[22..24].copy_from_slice(&2u16.to_le_bytes());
        let err = read_wav(&bytes).unwrap_err();
        assert!(matches!(err, IngestError::Unsupported { .. }));
        assert!(err.to_string().contains("2 channel(s)"));
    }

    #[test]
    fn wrong_rate_and_depth_are_rejected() {
        let mut bytes = write_wav(&[0.0]);
        bytes[24..28].copy_from_slice(&48000u32.to_le_bytes());
        assert!(matches!(
            read_wav(&bytes).unwrap_err(),
            IngestError::Unsupported { .. }
        ));
        let mut bytes = write_wav(&[0.0]);
        bytes[34..36].copy_from_slice(&8u16.to_le_bytes());
        assert!(matches!(
            read_wav(&bytes).unwrap_err(),
            IngestError::Unsupported { .. }
        ));
    }

    #[test]
    fn truncated_wav_is_a_parse_error() {
        let mut bytes = write_wav(&vec![0.5f32; 100]);
        bytes.truncate(bytes.len() - 7);
        assert!(matches!(
            read_wav(&bytes).unwrap_err(),
            IngestError::Parse { .. }
        ));
    }
}
