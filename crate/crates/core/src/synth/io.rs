//! File formats: ROI-trace CSV streams and the STM1 binary container.
//!
//! ROI CSV layout:
//!
//! ```text
//! frame_rate_hz,30
//! frame,r0_r,r0_g,r0_b,r1_r,...
//! 0,0.61,0.42,...
//! ```
//!
//! The first row declares the (constant) frame rate, the second names the
//! columns, and every following row holds a frame index and `W x 3`
//! region-channel means.
//!
//! STM1 layout (little endian): magic `STM1`, `T`, `W`, `C` as `u32`,
//! frame rate as `f64`, then `T * W * C` `f32` values in row-major
//! `[t][w][c]` order.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::stmap::{RoiTraces, Stmap, CHANNELS};
use super::{SynthError, MAX_OFFSET};

/// Default window stride is `T / DEFAULT_STRIDE_DIVISOR`.
pub const DEFAULT_STRIDE_DIVISOR: usize = 2;

const MAGIC: &[u8; 4] = b"STM1";
const HEADER_LEN: usize = 4 + 3 * 4 + 8;

pub fn write_roi_csv(path: &Path, traces: &RoiTraces) -> Result<(), SynthError> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    w.write_record(["frame_rate_hz".to_string(), traces.frame_rate_hz.to_string()])?;
    let mut header = vec!["frame".to_string()];
    for r in 0..traces.regions {
        for c in ["r", "g", "b"] {
            header.push(format!("r{r}_{c}"));
        }
    }
    w.write_record(&header)?;
    let row_len = traces.regions * CHANNELS;
    for t in 0..traces.frames {
        let mut rec = Vec::with_capacity(row_len + 1);
        rec.push((traces.t0 + t).to_string());
        rec.extend(
            traces.data[t * row_len..(t + 1) * row_len]
                .iter()
                .map(|v| v.to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a whole ROI-trace CSV stream.
pub fn read_roi_csv(path: &Path) -> Result<RoiTraces, SynthError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut records = rdr.records();
    let bad = |row: usize, message: String| SynthError::BadRow { row, message };

    let rate_row = match records.next() {
        None => return Err(SynthError::NoData),
        Some(r) => r?,
    };
    if rate_row.len() != 2 || &rate_row[0] != "frame_rate_hz" {
        return Err(bad(1, "expected `frame_rate_hz,<value>`".into()));
    }
    let frame_rate_hz: f64 = rate_row[1]
        .trim()
        .parse()
        .map_err(|_| bad(1, format!("unparsable frame rate {:?}", &rate_row[1])))?;
    if !(frame_rate_hz > 0.0) {
        return Err(bad(1, format!("frame rate must be positive, got {frame_rate_hz}")));
    }
    let header = match records.next() {
        None => return Err(SynthError::NoData),
        Some(r) => r?,
    };
    if header.is_empty() || (header.len() - 1) % CHANNELS != 0 || header.len() < 1 + CHANNELS {
        return Err(bad(
            2,
            format!("expected frame column plus a multiple of 3 value columns, got {}", header.len()),
        ));
    }
    let regions = (header.len() - 1) / CHANNELS;
    let mut data = Vec::new();
    let mut t0 = None;
    let mut prev: Option<u64> = None;
    let mut frames = 0;
    for (i, rec) in records.enumerate() {
        let row = i + 3;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(bad(
                row,
                format!("ragged row: {} fields, expected {}", rec.len(), header.len()),
            ));
        }
        let frame: u64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| bad(row, format!("unparsable frame index {:?}", &rec[0])))?;
        if let Some(p) = prev {
            if frame != p + 1 {
                return Err(bad(
                    row,
                    format!("frame index {frame} does not follow {p}"),
                ));
            }
        }
        prev = Some(frame);
        t0.get_or_insert(frame as usize);
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| bad(row, format!("unparsable value {field:?}")))?;
            data.push(v);
        }
        frames += 1;
    }
    if frames == 0 {
        return Err(SynthError::NoData);
    }
    RoiTraces::new(frames, regions, frame_rate_hz, t0.unwrap_or(0), data)
}

/// Sliding `window + MAX_OFFSET` frame windows over a ROI CSV stream,
/// each resized to `width` columns and normalized. `stride` defaults to
/// `window / 2`.
pub fn load_roi_csv(
    path: &Path,
    window: usize,
    width: usize,
    stride: Option<usize>,
) -> Result<Vec<Stmap>, SynthError> {
    let traces = read_roi_csv(path)?;
    let span = window + MAX_OFFSET;
    if span > traces.frames {
        return Err(SynthError::WindowTooLong {
            window: span,
            available: traces.frames,
        });
    }
    let stride = stride.unwrap_or(window / DEFAULT_STRIDE_DIVISOR).max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start + span <= traces.frames {
        out.push(traces.window(start, span)?.to_stmap(width));
        start += stride;
    }
    Ok(out)
}

pub fn write_stm1(path: &Path, map: &Stmap) -> Result<(), SynthError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for d in [map.frames, map.width, CHANNELS] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&map.frame_rate_hz.to_le_bytes())?;
    for v in &map.data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an STM1 file. The stream offset is not stored, so `t0` is 0.
pub fn read_stm1(path: &Path) -> Result<Stmap, SynthError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_stm1(&bytes)
}

pub(crate) fn parse_stm1(bytes: &[u8]) -> Result<Stmap, SynthError> {
    if bytes.len() < HEADER_LEN {
        return Err(SynthError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(SynthError::BadMagic { found: magic });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (t, w, c) = (u32_at(4), u32_at(8), u32_at(12));
    if c != CHANNELS {
        return Err(SynthError::Shape {
            expected: CHANNELS,
            actual: c,
        });
    }
    let frame_rate_hz = f64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let n = t * w * c;
    let expected = HEADER_LEN + 4 * n;
    if bytes.len() != expected {
        return Err(SynthError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Stmap::new(t, w, frame_rate_hz, 0, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_instance, gen_traces, ScenarioConfig, MODEL_WIDTH};

    fn scenario() -> ScenarioConfig {
        ScenarioConfig {
            duration_frames: 700,
            seed: 11,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn csv_round_trip_reproduces_instance_window() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roi.csv");
        let cfg = scenario();
        let traces = gen_traces(&cfg, 0, cfg.duration_frames).unwrap();
        write_roi_csv(&path, &traces).unwrap();
        let windows = load_roi_csv(&path, 256, MODEL_WIDTH, Some(64)).unwrap();
        assert_eq!(windows.len(), (700 - 286) / 64 + 1);
        for (i, w) in windows.iter().enumerate() {
            let inst = gen_instance(&cfg, i * 64, 256).unwrap();
            assert_eq!(w, &inst.window, "window {i}");
        }
    }

    #[test]
    fn empty_file_is_no_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(read_roi_csv(&path), Err(SynthError::NoData)));
        std::fs::write(&path, "frame_rate_hz,30\nframe,r0_r,r0_g,r0_b\n").unwrap();
        assert!(matches!(read_roi_csv(&path), Err(SynthError::NoData)));
    }

    #[test]
    fn short_stream_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.csv");
        let cfg = scenario();
        write_roi_csv(&path, &gen_traces(&cfg, 0, 100).unwrap()).unwrap();
        assert!(matches!(
            load_roi_csv(&path, 256, MODEL_WIDTH, None),
            Err(SynthError::WindowTooLong { .. })
        ));
    }

    #[test]
    fn ragged_and_nonmonotone_rows_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "frame_rate_hz,30\nframe,a,b,c\n0,1,2,3\n1,1,2\n").unwrap();
        match read_roi_csv(&path) {
            Err(SynthError::BadRow { row, .. }) => assert_eq!(row, 4),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "frame_rate_hz,30\nframe,a,b,c\n0,1,2,3\n2,1,2,3\n").unwrap();
        match read_roi_csv(&path) {
            Err(SynthError::BadRow { row, message }) => {
                assert_eq!(row, 4);
                assert!(message.contains("does not follow"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stm1_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.stm1");
        let inst = gen_instance(&scenario(), 0, 256).unwrap();
        write_stm1(&path, &inst.window).unwrap();
        let back = read_stm1(&path).unwrap();
        assert_eq!((back.frames, back.width), (inst.window.frames, inst.window.width));
        for (a, b) in back.data.iter().zip(&inst.window.data) {
            assert_eq!(*a, *b as f32 as f64);
        }

        let mut bytes = std::fs::read(&path).unwrap();
        let full = bytes.len();
        bytes.truncate(full - 10);
        match parse_stm1(&bytes) {
            Err(SynthError::Truncated { expected, actual }) => {
                assert_eq!((expected, actual), (full, full - 10));
            }
            other => panic!("{other:?}"),
        }
        bytes[0] = b'X';
        assert!(matches!(parse_stm1(&bytes), Err(SynthError::BadMagic { .. })));
    }
}
