//! Vocabulary, feature files, manifests, batching and synthetic data.

mod batch;
mod features;
mod manifest;
mod synthetic;
mod vocab;

pub use batch::{make_batch, Batch};
pub use features::{
    decode_features, encode_features, frame_range, read_features, write_features, ClipFeatures, FeatureStream,
    FramePeriods, Until,
};
pub use manifest::{format_manifest, parse_manifest, read_manifest, EventRecord};
pub use synthetic::{
    caption_for, generate_synthetic, read_cues, CueInfo, CueModality, GeneratedPaths, Generator, SyntheticSpec,
    CUES_FILE, FEATURE_DIR, TRAIN_MANIFEST, VALID_MANIFEST,
};
pub use vocab::{normalize_words, Vocab};

use crate::error::{data_err, Result};

/// One event with its full clip features in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct EventData {
    pub record: EventRecord,
    pub clip: ClipFeatures,
}

impl EventData {
    pub fn window(&self, until: Until, periods: FramePeriods) -> Result<FeatureStream> {
        self.clip.window(self.record.t_start, self.record.t_end, until, periods)
    }
}

/// Reads the event's feature files and truncates them to `[T_s, until)`.
pub fn load_event(record: &EventRecord, until: Until, periods: FramePeriods) -> Result<FeatureStream> {
    let clip = ClipFeatures {
        audio: read_features(&record.audio_path)?,
        visual: read_features(&record.visual_path)?,
    };
    clip.window(record.t_start, record.t_end, until, periods)
}

/// Vocabulary over every caption of `records`.
pub fn build_vocab(records: &[EventRecord]) -> Result<Vocab> {
    Vocab::from_captions(records.iter().map(|r| r.caption_text.as_str()))
}

/// Tokenizes each caption with `vocab`. Captions that normalize to nothing
/// are a data error.
pub fn attach_captions(records: &mut [EventRecord], vocab: &Vocab) -> Result<()> {
    for r in records {
        r.caption = vocab.tokenize(&r.caption_text);
        if r.caption.is_empty() {
            return Err(data_err!("event {}: caption has no words", r.id));
        }
    }
    Ok(())
}

/// Loads full clips for `records`, checking that feature widths agree.
pub fn load_events(records: Vec<EventRecord>) -> Result<Vec<EventData>> {
    let mut out: Vec<EventData> = Vec::with_capacity(records.len());
    for record in records {
        let clip = ClipFeatures {
            audio: read_features(&record.audio_path)?,
            visual: read_features(&record.visual_path)?,
        };
        if let Some(first) = out.first() {
            if clip.audio.cols() != first.clip.audio.cols() || clip.visual.cols() != first.clip.visual.cols() {
                return Err(data_err!(
                    "event {}: feature widths {}x{} differ from {}x{}",
                    record.id,
                    clip.audio.cols(),
                    clip.visual.cols(),
                    first.clip.audio.cols(),
                    first.clip.visual.cols()
                ));
            }
        }
        out.push(EventData { record, clip });
    }
    Ok(out)
}

/// Reads a manifest, tokenizes its captions and loads its features.
pub fn load_split(path: &std::path::Path, vocab: &Vocab) -> Result<Vec<EventData>> {
    let mut records = read_manifest(path)?;
    if records.is_empty() {
        return Err(data_err!("manifest {} has no events", path.display()));
    }
    attach_captions(&mut records, vocab)?;
    load_events(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::Tensor;

    #[test]
    fn load_event_reads_and_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.avcf");
        let v = dir.path().join("v.avcf");
        write_features(&a, &Tensor::new(vec![30, 2], (0..60).map(|x| x as f32).collect()).unwrap()).unwrap();
        write_features(&v, &Tensor::new(vec![12, 3], (0..36).map(|x| x as f32).collect()).unwrap()).unwrap();
        let text = "e\ta.avcf\tv.avcf\t1\t25\tA dog.\n";
        let mut recs = parse_manifest(text, dir.path()).unwrap();
        let vocab = build_vocab(&recs).unwrap();
        attach_captions(&mut recs, &vocab).unwrap();
        assert_eq!(recs[0].caption, vec![4, 5]);
        let p = FramePeriods::default();
        let w = load_event(&recs[0], Until::At(1.0 + p.visual), p).unwrap();
        assert_eq!(w.visual.rows(), 1);
        assert_eq!(w.visual.row(0), &[3.0, 4.0, 5.0]);
        assert_eq!(w.audio.row(0), &[4.0, 5.0]);
        let full = load_event(&recs[0], Until::Full, p).unwrap();
        assert_eq!(full, load_split(&{
            let m = dir.path().join("m.tsv");
            std::fs::write(&m, text).unwrap();
            m
        }, &vocab).unwrap()[0].window(Until::Full, p).unwrap());
    }

    #[test]
    fn missing_features_are_io_errors() {
        let recs = parse_manifest("e\tnope.avcf\tv\t0\t5\tx", std::path::Path::new("/nonexistent")).unwrap();
        assert!(matches!(
            load_event(&recs[0], Until::Full, FramePeriods::default()),
            Err(crate::Error::Io { .. })
        ));
    }

    #[test]
    fn empty_caption_after_normalization_is_rejected() {
        let mut recs = parse_manifest("e\ta\tv\t0\t5\t!!", std::path::Path::new(".")).unwrap();
        assert!(attach_captions(&mut recs, &Vocab::default()).is_err());
    }
}
