//! Online inference: grow a feature prefix frame by frame, evaluate the end
//! detector after every visual frame, and emit at the first crossing of `F`.

use std::fmt::Write as _;

use crate::compute::Tensor;
use crate::data::{frame_range, EventData, FramePeriods};
use crate::error::{config_err, contract_err, Result};
use crate::model::{Encodings, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionState {
    Collecting,
    Fired,
    Exhausted,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub t: f64,
    pub probability: f64,
    pub fired: bool,
}

/// Outcome of one finalized session.
#[derive(Clone, Debug, PartialEq)]
pub struct Emission {
    pub caption: Vec<usize>,
    pub t_emit: f64,
    pub latency_ratio: f64,
    pub fired: bool,
}

pub fn latency_ratio(t_start: f64, t_end: f64, t_emit: f64) -> Result<f64> {
    if !(t_start < t_emit && t_emit <= t_end) {
        return Err(contract_err!("emission time {t_emit} outside ({t_start}, {t_end}]"));
    }
    Ok(((t_emit - t_start) / (t_end - t_start)).min(1.0))
}

pub struct StreamSession<'m> {
    model: &'m Model<f32>,
    t_start: f64,
    threshold: f64,
    audio: Vec<f32>,
    visual: Vec<f32>,
    t_now: f64,
    trace: Vec<TracePoint>,
    state: SessionState,
    t_fired: Option<f64>,
}

impl<'m> StreamSession<'m> {
    pub fn open(model: &'m Model<f32>, t_start: f64, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(config_err!("threshold F={threshold} must lie in (0, 1)"));
        }
        Ok(StreamSession {
            model,
            t_start,
            threshold,
            audio: Vec::new(),
            visual: Vec::new(),
            t_now: t_start,
            trace: Vec::new(),
            state: SessionState::Collecting,
            t_fired: None,
        })
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn trace(&self) -> &[TracePoint] {
        &self.trace
    }

    fn prefix(&self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let c = &self.model.config;
        Ok((
            Tensor::new(vec![self.audio.len() / c.d_audio, c.d_audio], self.audio.clone())?,
            Tensor::new(vec![self.visual.len() / c.d_visual, c.d_visual], self.visual.clone())?,
        ))
    }

    /// Appends frames that arrived up to wall time `t_now`, re-encodes the
    /// whole prefix and records the detector probability.
    pub fn push_frames(&mut self, audio: &Tensor<f32>, visual: &Tensor<f32>, t_now: f64) -> Result<f64> {
        if self.state != SessionState::Collecting {
            return Err(contract_err!("push after the session reached {:?}", self.state));
        }
        if t_now < self.t_now {
            return Err(contract_err!("frames out of order: {t_now} after {}", self.t_now));
        }
        let c = &self.model.config;
        for (t, d, what) in [(audio, c.d_audio, "audio"), (visual, c.d_visual, "visual")] {
            if t.numel() > 0 && (t.rank() != 2 || t.cols() != d) {
                return Err(crate::error::shape_err!("{what} frames {:?}, want width {d}", t.dims()));
            }
        }
        self.audio.extend_from_slice(audio.data());
        self.visual.extend_from_slice(visual.data());
        self.t_now = t_now;
        if self.audio.is_empty() || self.visual.is_empty() {
            return Err(contract_err!("detector needs at least one frame of each modality"));
        }
        let (a, v) = self.prefix()?;
        let enc = self.model.encode(&a, &v)?;
        let p = self.model.detect_end(&enc)?;
        let fired = p > self.threshold;
        self.trace.push(TracePoint { t: t_now, probability: p, fired });
        if fired {
            self.state = SessionState::Fired;
            self.t_fired = Some(t_now);
        }
        Ok(p)
    }

    /// Marks the stream as ended without a crossing.
    pub fn exhaust(&mut self) -> Result<()> {
        if self.state != SessionState::Collecting {
            return Err(contract_err!("exhaust after the session reached {:?}", self.state));
        }
        self.state = SessionState::Exhausted;
        Ok(())
    }

    /// Decodes the accumulated prefix. An exhausted session emits at `t_end`
    /// with latency ratio 1.
    pub fn finalize(&self, t_end: f64, beam: usize) -> Result<Emission> {
        let (t_emit, fired) = match (self.state, self.t_fired) {
            (SessionState::Fired, Some(t)) => (t, true),
            (SessionState::Exhausted, _) => (t_end, false),
            _ => return Err(contract_err!("finalize while still collecting")),
        };
        let (a, v) = self.prefix()?;
        let enc: Encodings<f32> = self.model.encode(&a, &v)?;
        Ok(Emission {
            caption: self.model.decode(&enc, beam)?,
            t_emit,
            latency_ratio: if fired { latency_ratio(self.t_start, t_end, t_emit)? } else { 1.0 },
            fired,
        })
    }
}

/// Replays an event's frames through a session, one detector evaluation per
/// visual frame whose start lies in `[T_s, T_e)`.
pub fn stream_event(
    model: &Model<f32>,
    event: &EventData,
    periods: FramePeriods,
    threshold: f64,
    beam: usize,
) -> Result<(Emission, Vec<TracePoint>)> {
    let (ts, te) = (event.record.t_start, event.record.t_end);
    let clip = &event.clip;
    let vr = frame_range(ts, te, periods.visual, clip.visual.rows());
    if vr.is_empty() {
        return Err(contract_err!("event {} has no visual frame inside its window", event.record.id));
    }
    let mut s = StreamSession::open(model, ts, threshold)?;
    let mut audio_next = frame_range(ts, te, periods.audio, clip.audio.rows()).start;
    for k in vr {
        let until = ((k + 1) as f64 * periods.visual).min(te);
        let ar = frame_range(ts, until, periods.audio, clip.audio.rows());
        let a_new = clip.audio.slice_rows(audio_next.min(ar.end), ar.end);
        audio_next = ar.end.max(audio_next);
        s.push_frames(&a_new, &clip.visual.slice_rows(k, k + 1), until)?;
        if s.state() == SessionState::Fired {
            break;
        }
    }
    if s.state() == SessionState::Collecting {
        s.exhaust()?;
    }
    let e = s.finalize(te, beam)?;
    Ok((e, s.trace))
}

pub fn format_trace(trace: &[TracePoint]) -> String {
    let mut s = String::from("t_sec,probability,fired\n");
    for p in trace {
        let _ = writeln!(s, "{},{},{}", p.t, p.probability, u8::from(p.fired));
    }
    s
}

/// First-crossing time over a fixed trace, or `None` when `F` is never exceeded.
pub fn first_crossing(trace: &[(f64, f64)], threshold: f64) -> Option<f64> {
    trace.iter().find(|(_, p)| *p > threshold).map(|(t, _)| *t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClipFeatures, EventRecord, Until};
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn model() -> Model<f32> {
        let c = ModelConfig {
            n_enc: 1,
            n_dec: 1,
            vocab_size: 9,
            det_channels: 8,
            max_decode_len: 6,
            ..ModelConfig::default()
        };
        Model::init(c, 11).unwrap()
    }

    fn event(seed: f32, t_start: f64, t_end: f64) -> EventData {
        let f = |t: usize, d: usize| {
            Tensor::new(vec![t, d], (0..t * d).map(|i| ((i as f32 * 0.61 + seed) * 1.3).sin()).collect()).unwrap()
        };
        EventData {
            record: EventRecord {
                id: "e".into(),
                audio_path: "a".into(),
                visual_path: "v".into(),
                t_start,
                t_end,
                caption_text: "x".into(),
                caption: vec![4],
                teacher_caption: None,
            },
            clip: ClipFeatures {
                audio: f(((t_end + 1.0) / 0.96).ceil() as usize, 16),
                visual: f(((t_end + 1.0) / 2.56).ceil() as usize, 32),
            },
        }
    }

    #[test]
    fn latency_cases() {
        assert_eq!(latency_ratio(2.0, 12.0, 12.0).unwrap(), 1.0);
        assert_eq!(latency_ratio(2.0, 12.0, 7.0).unwrap(), 0.5);
        assert!((latency_ratio(0.0, 37.7, 10.6).unwrap() - 0.28).abs() < 0.005);
        assert!(latency_ratio(2.0, 12.0, 2.0).is_err());
        assert!(latency_ratio(2.0, 12.0, 12.5).is_err());
    }

    #[test]
    fn first_crossing_rule() {
        let tr = [(1.0, 0.1), (2.0, 0.3), (3.0, 0.7)];
        assert_eq!(first_crossing(&tr, 0.5), Some(3.0));
        assert_eq!(first_crossing(&tr, 0.7), None);
    }

    #[test]
    fn session_state_machine() {
        let m = model();
        assert!(matches!(StreamSession::open(&m, 0.0, 1.0), Err(crate::Error::Config(_))));
        assert!(matches!(StreamSession::open(&m, 0.0, 0.0), Err(crate::Error::Config(_))));
        let fresh = StreamSession::open(&m, 0.0, 0.5).unwrap();
        assert!(fresh.trace().is_empty());
        assert!(fresh.finalize(10.0, 1).is_err());
        let a = Tensor::filled(&[2, 16], 0.3f32);
        let v = Tensor::filled(&[1, 32], -0.2f32);
        let mut low = StreamSession::open(&m, 0.0, 1e-9).unwrap();
        low.push_frames(&a, &v, 2.56).unwrap();
        assert_eq!(low.state(), SessionState::Fired);
        assert!(low.push_frames(&a, &v, 5.12).is_err());
        assert!(low.exhaust().is_err());
        let e = low.finalize(10.0, 1).unwrap();
        assert!(e.fired && e.t_emit == 2.56);
        let mut high = StreamSession::open(&m, 0.0, 1.0 - 1e-12).unwrap();
        high.push_frames(&a, &v, 2.56).unwrap();
        assert_eq!(high.trace().len(), 1);
        high.exhaust().unwrap();
        let e = high.finalize(10.0, 1).unwrap();
        assert!(!e.fired && e.latency_ratio == 1.0 && e.t_emit == 10.0);
    }

    #[test]
    fn sessions_are_independent() {
        let m = model();
        let ev = event(0.3, 1.0, 20.0);
        let (e1, t1) = stream_event(&m, &ev, FramePeriods::default(), 0.5, 1).unwrap();
        let mut other = StreamSession::open(&m, 0.0, 0.5).unwrap();
        other.push_frames(&Tensor::filled(&[3, 16], 9.0), &Tensor::filled(&[1, 32], 9.0), 2.56).unwrap();
        let (e2, t2) = stream_event(&m, &ev, FramePeriods::default(), 0.5, 1).unwrap();
        assert_eq!((e1, t1), (e2, t2));
    }

    #[test]
    fn streamed_caption_matches_offline_truncation() {
        let m = model();
        let p = FramePeriods::default();
        for (i, &f) in [0.2, 0.4, 0.5, 0.6, 0.8].iter().enumerate() {
            let ev = event(i as f32, 1.3 + i as f64, 24.0 + i as f64);
            let (e, trace) = stream_event(&m, &ev, p, f, 1).unwrap();
            let until = if e.fired { Until::At(e.t_emit) } else { Until::Full };
            let w = ev.window(until, p).unwrap();
            let offline = m.greedy_decode(&m.encode(&w.audio, &w.visual).unwrap()).unwrap();
            assert_eq!(e.caption, offline);
            // Every trace point equals a from-scratch evaluation of its window.
            for tp in &trace {
                let w = ev.window(Until::At(tp.t), p).unwrap();
                let q = m.detect_end(&m.encode(&w.audio, &w.visual).unwrap()).unwrap();
                assert!((q - tp.probability).abs() < 1e-6);
            }
            let n_visual = frame_range(ev.record.t_start, ev.record.t_end, p.visual, 100).len();
            assert!(trace.len() <= n_visual);
            assert!(e.fired || trace.len() == n_visual);
        }
    }

    proptest! {
        #[test]
        fn lower_thresholds_never_fire_later(
            probs in proptest::collection::vec(0.0f64..1.0, 1..20), f1 in 0.01f64..0.99, f2 in 0.01f64..0.99
        ) {
            let tr: Vec<(f64, f64)> = probs.iter().enumerate().map(|(i, &p)| (i as f64, p)).collect();
            let (lo, hi) = (f1.min(f2), f1.max(f2));
            let t = |f| first_crossing(&tr, f).unwrap_or(f64::INFINITY);
            prop_assert!(t(lo) <= t(hi));
        }
    }
}
