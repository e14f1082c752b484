//! Feature files and time-window extraction.
//!
//! File layout: `"AVCF"`, u32 rank (= 2), u32 T, u32 D, then `T·D` f32
//! values row-major, all little-endian.

use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::compute::Tensor;
use crate::error::{contract_err, Error, Result};

const MAGIC: &[u8; 4] = b"AVCF";

pub fn encode_features(t: &Tensor<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&2u32.to_le_bytes());
    buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |what: &str| {
        Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, what.to_string()),
        )
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a feature file"));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
    if word(4) != 2 {
        return Err(bad("feature file rank must be 2"));
    }
    let (t, d) = (word(8), word(12));
    if bytes.len() != 16 + 4 * t * d {
        return Err(bad("feature file length does not match its header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(vec![t, d], data)
}

pub fn write_features(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_features(t)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

/// Smallest frame index whose start time `k·period` is at least `t`.
fn first_frame_at_or_after(t: f64, period: f64) -> usize {
    if t <= 0.0 {
        return 0;
    }
    let mut k = (t / period).ceil() as usize;
    while k > 0 && (k - 1) as f64 * period >= t {
        k -= 1;
    }
    while (k as f64) * period < t {
        k += 1;
    }
    k
}

/// Indices of frames whose start time lies in `[from, until)`, clipped to
/// the `n` frames available.
pub fn frame_range(from: f64, until: f64, period: f64, n: usize) -> Range<usize> {
    let lo = first_frame_at_or_after(from, period).min(n);
    let hi = first_frame_at_or_after(until, period).min(n);
    lo..hi.max(lo)
}

/// Audio and visual features of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStream {
    pub audio: Tensor<f32>,
    pub visual: Tensor<f32>,
    pub audio_period: f64,
    pub visual_period: f64,
}

/// Frame periods shared by every clip of a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FramePeriods {
    pub audio: f64,
    pub visual: f64,
}

impl Default for FramePeriods {
    fn default() -> Self {
        FramePeriods {
            audio: 0.96,
            visual: 2.56,
        }
    }
}

/// Window end for truncation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Until {
    Full,
    At(f64),
}

/// Full-clip features of one event held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatures {
    pub audio: Tensor<f32>,
    pub visual: Tensor<f32>,
}

impl ClipFeatures {
    /// Frames starting in `[t_start, until)`; `until` defaults to `t_end`.
    /// The window must be at least one visual frame long.
    pub fn window(&self, t_start: f64, t_end: f64, until: Until, periods: FramePeriods) -> Result<FeatureStream> {
        let until = match until {
            Until::Full => t_end,
            Until::At(u) => u,
        };
        if until < t_start || until > t_end + 1e-9 {
            return Err(contract_err!("window end {until} outside event [{t_start}, {t_end}]"));
        }
        if until - t_start < periods.visual - 1e-9 {
            return Err(contract_err!(
                "window of {:.3}s is shorter than one visual frame",
                until - t_start
            ));
        }
        let ar = frame_range(t_start, until, periods.audio, self.audio.rows());
        let vr = frame_range(t_start, until, periods.visual, self.visual.rows());
        if ar.is_empty() || vr.is_empty() {
            return Err(contract_err!("window [{t_start}, {until}) holds no frames of one modality"));
        }
        Ok(FeatureStream {
            audio: self.audio.slice_rows(ar.start, ar.end),
            visual: self.visual.slice_rows(vr.start, vr.end),
            audio_period: periods.audio,
            visual_period: periods.visual,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn file_round_trip_is_bit_exact() {
        let t = Tensor::new(vec![3, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 7e-30, 3.25, -9.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.avcf");
        write_features(&p, &t).unwrap();
        let back = read_features(&p).unwrap();
        assert_eq!(
            back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.dims(), &[3, 2]);
    }

    #[test]
    fn malformed_files_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.avcf");
        fs::write(&p, b"AVCF\x02\0\0\0\x01\0\0\0\x02\0\0\0").unwrap();
        assert!(matches!(read_features(&p), Err(Error::Io { .. })));
        assert!(matches!(read_features(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    fn enumerate(from: f64, until: f64, period: f64, n: usize) -> Vec<usize> {
        (0..n)
            .filter(|&k| {
                let s = k as f64 * period;
                s >= from && s < until
            })
            .collect()
    }

    #[test]
    fn one_visual_frame_window() {
        let clip = ClipFeatures {
            audio: Tensor::zeros(&[60, 2]),
            visual: Tensor::zeros(&[25, 3]),
        };
        let p = FramePeriods::default();
        for &ts in &[0.0, 1.3, 2.56, 7.7, 10.0] {
            let w = clip.window(ts, 40.0, Until::At(ts + p.visual), p).unwrap();
            assert_eq!(w.visual.rows(), 1);
            assert_eq!(w.audio.rows(), enumerate(ts, ts + p.visual, p.audio, 60).len());
        }
        assert!(matches!(
            clip.window(3.0, 40.0, Until::At(4.0), p),
            Err(crate::Error::Contract(_))
        ));
        assert_eq!(
            clip.window(3.0, 30.0, Until::Full, p).unwrap(),
            clip.window(3.0, 30.0, Until::At(30.0), p).unwrap()
        );
    }

    proptest! {
        #[test]
        fn frame_range_matches_enumeration(
            from in 0.0f64..30.0, len in 0.0f64..30.0, period in 0.1f64..3.0, n in 0usize..80
        ) {
            let r = frame_range(from, from + len, period, n);
            prop_assert_eq!(r.collect::<Vec<_>>(), enumerate(from, from + len, period, n));
        }

        #[test]
        fn truncation_is_prefix_monotone(ts in 0.0f64..5.0, u1 in 0.0f64..1.0, u2 in 0.0f64..1.0) {
            let p = FramePeriods::default();
            let clip = ClipFeatures {
                audio: Tensor::new(vec![50, 1], (0..50).map(|i| i as f32).collect()).unwrap(),
                visual: Tensor::new(vec![20, 1], (0..20).map(|i| i as f32).collect()).unwrap(),
            };
            let te = ts + 30.0;
            let span = te - ts - p.visual;
            let (a, b) = (u1.min(u2), u1.max(u2));
            let w1 = clip.window(ts, te, Until::At(ts + p.visual + a * span), p).unwrap();
            let w2 = clip.window(ts, te, Until::At(ts + p.visual + b * span), p).unwrap();
            prop_assert!(w1.audio.rows() <= w2.audio.rows());
            prop_assert_eq!(w1.audio.data(), &w2.audio.data()[..w1.audio.numel()]);
            prop_assert_eq!(w1.visual.data(), &w2.visual.data()[..w1.visual.numel()]);
        }
    }
}
