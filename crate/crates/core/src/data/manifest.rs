//! Tab-separated event manifests.
//!
//! One event per line: `event_id  audio_path  visual_path  t_start  t_end
//! caption`. Lines starting with `#` and blank lines are skipped. Relative
//! feature paths resolve against the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{data_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub id: String,
    pub audio_path: PathBuf,
    pub visual_path: PathBuf,
    pub t_start: f64,
    pub t_end: f64,
    pub caption_text: String,
    /// Ground-truth caption ids, filled once a vocabulary exists.
    pub caption: Vec<usize>,
    /// Teacher caption on the full window, filled after teacher training.
    pub teacher_caption: Option<Vec<usize>>,
}

impl EventRecord {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<EventRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(data_err!("manifest line {lineno}: expected 6 tab-separated fields, got {}", f.len()));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| data_err!("manifest line {lineno}: bad {what} {s:?}"))
        };
        let (t_start, t_end) = (num(f[3], "t_start")?, num(f[4], "t_end")?);
        if t_start < 0.0 || t_start >= t_end {
            return Err(data_err!(
                "manifest line {lineno}: need 0 <= t_start < t_end, got {t_start} and {t_end}"
            ));
        }
        if f[5].trim().is_empty() {
            return Err(data_err!("manifest line {lineno}: empty caption"));
        }
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        out.push(EventRecord {
            id: f[0].to_string(),
            audio_path: resolve(f[1]),
            visual_path: resolve(f[2]),
            t_start,
            t_end,
            caption_text: f[5].to_string(),
            caption: Vec::new(),
            teacher_caption: None,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<EventRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)
}

/// Serializes records with feature paths made relative to `base` when possible.
pub fn format_manifest(records: &[EventRecord], base: &Path) -> String {
    let mut s = String::from("# event_id\taudio_path\tvisual_path\tt_start_sec\tt_end_sec\tcaption_text\n");
    for r in records {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.id,
            rel(&r.audio_path),
            rel(&r.visual_path),
            r.t_start,
            r.t_end,
            r.caption_text
        );
    }
    s
}
