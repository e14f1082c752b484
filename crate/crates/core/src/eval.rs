//! BLEU, corpus evaluation over streaming sessions, threshold sweeps with
//! the fixed-ratio truncation baseline, and learning-curve trends.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{EventData, FramePeriods, Until};
use crate::error::{config_err, data_err, Error, Result};
use crate::model::Model;
use crate::streaming::stream_event;
use crate::training::word_accuracy;

/// Clipped n-gram statistics of one or more candidate/reference pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub cand_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl BleuStats {
    pub fn new(max_n: usize) -> Self {
        BleuStats {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            cand_len: 0,
            ref_len: 0,
        }
    }

    pub fn of(candidate: &[usize], reference: &[usize], max_n: usize) -> Self {
        let mut s = BleuStats::new(max_n);
        s.cand_len = candidate.len();
        s.ref_len = reference.len();
        for n in 1..=max_n {
            let rc = ngram_counts(reference, n);
            let cc = ngram_counts(candidate, n);
            s.totals[n - 1] = candidate.len().saturating_sub(n - 1);
            s.matches[n - 1] = cc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn add(&mut self, o: &BleuStats) {
        for i in 0..self.matches.len() {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    /// Geometric mean of orders `1..=n` times the brevity penalty. No
    /// unigram match gives 0; any other order without matches has its
    /// precision floored at `1/(2·count)`, with a count of at least 1.
    pub fn score(&self, n: usize) -> f64 {
        if self.cand_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for i in 0..n {
            let p = if self.matches[i] == 0 {
                1.0 / (2.0 * self.totals[i].max(1) as f64)
            } else {
                self.matches[i] as f64 / self.totals[i] as f64
            };
            log_sum += p.ln();
        }
        let bp = if self.cand_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        } else {
            1.0
        };
        bp * (log_sum / n as f64).exp()
    }
}

/// Sentence-level BLEU-n against a single reference. An empty candidate scores 0.
pub fn bleu_n(candidate: &[usize], reference: &[usize], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    BleuStats::of(candidate, reference, n).score(n)
}

/// Corpus BLEU-n from summed statistics.
pub fn corpus_bleu(pairs: &[(Vec<usize>, Vec<usize>)], n: usize) -> f64 {
    let mut s = BleuStats::new(n);
    for (c, r) in pairs {
        s.add(&BleuStats::of(c, r, n));
    }
    s.score(n)
}

/// Streaming result for one event.
#[derive(Clone, Debug, PartialEq)]
pub struct EventResult {
    pub id: String,
    pub caption: Vec<usize>,
    pub t_emit: f64,
    pub latency_ratio: f64,
    pub fired: bool,
    pub word_acc: f64,
}

/// One line of a trade-off report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub f: f64,
    pub latency_ratio: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub word_acc: f64,
    pub fired_frac: f64,
}

/// Report row plus per-event details and failures.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEval {
    pub row: ReportRow,
    pub events: Vec<EventResult>,
    pub failures: Vec<(String, String)>,
}

/// Teacher-forced word accuracy of `model` on a window, against the
/// event's reference plus `<eos>`.
pub fn window_word_accuracy(model: &Model<f32>, ev: &EventData, until: Until, periods: FramePeriods) -> Result<f64> {
    let w = ev.window(until, periods)?;
    let enc = model.encode(&w.audio, &w.visual)?;
    let tf = model.teacher_forced_predictions(&ev.record.caption, &enc)?;
    let (_, target) = model.forcing_pair(&ev.record.caption)?;
    word_accuracy(&tf.argmax, &target)
}

fn aggregate(f: f64, events: &[EventData], results: Vec<Result<EventResult>>) -> Result<CorpusEval> {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (ev, r) in events.iter().zip(results) {
        match r {
            Ok(r) => ok.push(r),
            Err(e) => failures.push((ev.record.id.clone(), e.to_string())),
        }
    }
    if ok.is_empty() {
        return Err(data_err!(
            "every event failed; first: {}",
            failures.first().map_or("none", |f| f.1.as_str())
        ));
    }
    let by_id: HashMap<&str, &EventData> = events.iter().map(|e| (e.record.id.as_str(), e)).collect();
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = ok
        .iter()
        .map(|r| (r.caption.clone(), by_id[r.id.as_str()].record.caption.clone()))
        .collect();
    let n = ok.len() as f64;
    let row = ReportRow {
        f,
        latency_ratio: ok.iter().map(|r| r.latency_ratio).sum::<f64>() / n,
        bleu3: corpus_bleu(&pairs, 3),
        bleu4: corpus_bleu(&pairs, 4),
        word_acc: ok.iter().map(|r| r.word_acc).sum::<f64>() / n,
        fired_frac: ok.iter().filter(|r| r.fired).count() as f64 / n,
    };
    Ok(CorpusEval { row, events: ok, failures })
}

/// Streams every event at threshold `f`. Per-event failures are collected
/// rather than aborting the run.
pub fn corpus_eval(
    model: &Model<f32>,
    events: &[EventData],
    periods: FramePeriods,
    f: f64,
    beam: usize,
) -> Result<CorpusEval> {
    if events.is_empty() {
        return Err(data_err!("cannot evaluate an empty split"));
    }
    if !(f > 0.0 && f < 1.0) {
        return Err(config_err!("threshold F={f} must lie in (0, 1)"));
    }
    let results: Vec<Result<EventResult>> = events
        .par_iter()
        .map(|ev| {
            let (e, _) = stream_event(model, ev, periods, f, beam)?;
            let until = if e.fired { Until::At(e.t_emit) } else { Until::Full };
            Ok(EventResult {
                id: ev.record.id.clone(),
                word_acc: window_word_accuracy(model, ev, until, periods)?,
                caption: e.caption,
                t_emit: e.t_emit,
                latency_ratio: e.latency_ratio,
                fired: e.fired,
            })
        })
        .collect();
    aggregate(f, events, results)
}

/// Decodes every event truncated at `T_s + ratio·(T_e − T_s)`, raised to
/// one visual frame where needed. The row's `f` field holds `ratio`.
pub fn naive_eval(
    model: &Model<f32>,
    events: &[EventData],
    periods: FramePeriods,
    ratio: f64,
    beam: usize,
) -> Result<CorpusEval> {
    if events.is_empty() {
        return Err(data_err!("cannot evaluate an empty split"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(config_err!("truncation ratio {ratio} must lie in (0, 1]"));
    }
    let results: Vec<Result<EventResult>> = events
        .par_iter()
        .map(|ev| {
            let (ts, te) = (ev.record.t_start, ev.record.t_end);
            let until = (ts + ratio * (te - ts)).max(ts + periods.visual).min(te);
            let until = if ratio >= 1.0 { Until::Full } else { Until::At(until) };
            let w = ev.window(until, periods)?;
            let enc = model.encode(&w.audio, &w.visual)?;
            let t_emit = match until {
                Until::Full => te,
                Until::At(u) => u,
            };
            Ok(EventResult {
                id: ev.record.id.clone(),
                caption: model.decode(&enc, beam)?,
                t_emit,
                latency_ratio: ((t_emit - ts) / (te - ts)).min(1.0),
                fired: false,
                word_acc: window_word_accuracy(model, ev, until, periods)?,
            })
        })
        .collect();
    let mut out = aggregate(ratio, events, results)?;
    out.row.fired_frac = 0.0;
    Ok(out)
}

/// Rows sorted by `F`, plus naive rows at each proposed row's mean latency
/// and at ratio 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffReport {
    pub rows: Vec<ReportRow>,
    pub naive: Vec<ReportRow>,
    pub failures: Vec<(String, String)>,
}

pub fn threshold_sweep(
    model: &Model<f32>,
    naive_model: &Model<f32>,
    events: &[EventData],
    periods: FramePeriods,
    thresholds: &[f64],
    beam: usize,
) -> Result<TradeoffReport> {
    let mut fs = thresholds.to_vec();
    fs.sort_by(f64::total_cmp);
    if fs.is_empty() || fs.windows(2).any(|w| w[0] == w[1]) {
        return Err(config_err!("sweep thresholds must be nonempty and distinct"));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &f in &fs {
        let ce = corpus_eval(model, events, periods, f, beam)?;
        failures.extend(ce.failures);
        rows.push(ce.row);
    }
    let mut naive = Vec::new();
    for r in &rows {
        naive.push(naive_eval(naive_model, events, periods, r.latency_ratio, beam)?.row);
    }
    naive.push(naive_eval(naive_model, events, periods, 1.0, beam)?.row);
    Ok(TradeoffReport { rows, naive, failures })
}

pub const REPORT_HEADER: &str = "F,latency_ratio,bleu3,bleu4,word_acc,fired_frac";

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.f, r.latency_ratio, r.bleu3, r.bleu4, r.word_acc, r.fired_frac);
    }
    s
}

fn parse_csv(text: &str, header: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(data_err!("line 1: expected header {header:?}")),
    }
    let width = header.split(',').count();
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Option<Vec<f64>> = line.split(',').map(|f| f.trim().parse::<f64>().ok()).collect();
        match vals {
            Some(v) if v.len() == width => out.push(v),
            _ => return Err(data_err!("line {}: malformed row {line:?}", i + 1)),
        }
    }
    Ok(out)
}

pub fn parse_report(text: &str) -> Result<Vec<ReportRow>> {
    Ok(parse_csv(text, REPORT_HEADER)?
        .into_iter()
        .map(|v| ReportRow {
            f: v[0],
            latency_ratio: v[1],
            bleu3: v[2],
            bleu4: v[3],
            word_acc: v[4],
            fired_frac: v[5],
        })
        .collect())
}

pub const HISTORY_HEADER: &str = "epoch,latency_ratio,bleu3,bleu4,word_acc,loss_ce,loss_kl,loss_d";

/// Per-epoch validation metrics and training losses.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub latency_ratio: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub word_acc: f64,
    pub loss_ce: f64,
    pub loss_kl: f64,
    pub loss_d: f64,
}

pub fn format_history(rows: &[HistoryRow]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.latency_ratio, r.bleu3, r.bleu4, r.word_acc, r.loss_ce, r.loss_kl, r.loss_d
        );
    }
    s
}

pub fn parse_history(text: &str) -> Result<Vec<HistoryRow>> {
    parse_csv(text, HISTORY_HEADER)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            if v[0] < 0.0 || v[0].fract() != 0.0 {
                return Err(data_err!("line {}: epoch {} is not a whole number", i + 2, v[0]));
            }
            Ok(HistoryRow {
                epoch: v[0] as usize,
                latency_ratio: v[1],
                bleu3: v[2],
                bleu4: v[3],
                word_acc: v[4],
                loss_ce: v[5],
                loss_kl: v[6],
                loss_d: v[7],
            })
        })
        .collect()
}

/// Least-squares slope of `y` against `x`; 0 for fewer than two points.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let sxy: f64 = (0..n).map(|i| (x[i] - mx) * (y[i] - my)).sum();
    let sxx: f64 = (0..n).map(|i| (x[i] - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Aligned per-epoch series from a history file.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningCurve {
    pub epochs: Vec<f64>,
    pub latency_ratio: Vec<f64>,
    pub bleu3: Vec<f64>,
    pub bleu4: Vec<f64>,
    pub word_acc: Vec<f64>,
    pub latency_slope: f64,
}

impl LearningCurve {
    pub fn from_rows(rows: &[HistoryRow]) -> Self {
        let col = |f: fn(&HistoryRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let epochs = col(|r| r.epoch as f64);
        let latency_ratio = col(|r| r.latency_ratio);
        LearningCurve {
            latency_slope: ls_slope(&epochs, &latency_ratio),
            epochs,
            latency_ratio,
            bleu3: col(|r| r.bleu3),
            bleu4: col(|r| r.bleu4),
            word_acc: col(|r| r.word_acc),
        }
    }

    /// `epoch,latency_ratio,bleu3,bleu4,word_acc` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,latency_ratio,bleu3,bleu4,word_acc\n");
        for i in 0..self.epochs.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                self.epochs[i], self.latency_ratio[i], self.bleu3[i], self.bleu4[i], self.word_acc[i]
            );
        }
        s
    }
}

pub fn learning_curve(path: &Path) -> Result<LearningCurve> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_history(&text).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        e => e,
    })?;
    Ok(LearningCurve::from_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bleu_identity_and_disjoint() {
        let r = [4, 5, 6, 7];
        assert_eq!(bleu_n(&r, &r, 4), 1.0);
        assert_eq!(bleu_n(&[8, 9, 10, 11], &r, 4), 0.0);
        assert_eq!(bleu_n(&[], &r, 4), 0.0);
    }

    #[test]
    fn bleu_hand_counts() {
        // Unigrams: a b c d vs a b x d → 3/4. Bigrams: ab bc cd vs ab bx xd → 1/3.
        let (a, b, c, d, x) = (4, 5, 6, 7, 8);
        let want = (0.75f64 * (1.0 / 3.0)).sqrt();
        assert!((bleu_n(&[a, b, c, d], &[a, b, x, d], 2) - want).abs() < 1e-15);
        // Short candidate: c = 2, r = 4, bigram 1/1, brevity exp(1 − 2).
        assert!((bleu_n(&[a, b], &[a, b, c, d], 2) - (-1.0f64).exp()).abs() < 1e-15);
        // Zero trigram matches floored at 1/(2·2).
        let s = bleu_n(&[a, b, x, d], &[a, b, c, d], 3);
        assert!((s - (0.75 * (1.0 / 3.0) * 0.25f64).powf(1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn corpus_bleu_sums_statistics() {
        let pairs = vec![(vec![4, 5, 6], vec![4, 5, 6]), (vec![4, 9], vec![4, 5])];
        // Unigrams 4/5, bigrams 2/3, lengths 5 vs 5.
        let want = (0.8f64 * (2.0 / 3.0)).sqrt();
        assert!((corpus_bleu(&pairs, 2) - want).abs() < 1e-15);
        let same: Vec<_> = (0..5).map(|i| (vec![4 + i, 5, 6, 7], vec![4 + i, 5, 6, 7])).collect();
        assert_eq!(corpus_bleu(&same, 4), 1.0);
    }

    proptest! {
        #[test]
        fn bleu_invariant_under_relabeling(
            c in proptest::collection::vec(0usize..6, 0..8),
            r in proptest::collection::vec(0usize..6, 1..8),
            shift in 1usize..6,
        ) {
            let perm = |t: &[usize]| t.iter().map(|&x| (x + shift) % 6 + 10).collect::<Vec<_>>();
            for n in 1..=4 {
                prop_assert_eq!(bleu_n(&c, &r, n), bleu_n(&perm(&c), &perm(&r), n));
                let s = bleu_n(&c, &r, n);
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }
    }

    #[test]
    fn slope_oracle() {
        assert_eq!(ls_slope(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]), 0.0);
        assert!(ls_slope(&[1.0, 2.0, 3.0, 4.0], &[0.9, 0.7, 0.6, 0.2]) < 0.0);
        // Closed form: slope = (nΣxy − ΣxΣy)/(nΣx² − (Σx)²).
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [0.93, 0.81, 0.77, 0.52, 0.49];
        let n = 5.0;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let want = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!((ls_slope(&x, &y) - want).abs() < 1e-9);
    }

    #[test]
    fn history_round_trip_and_errors() {
        let rows = vec![
            HistoryRow { epoch: 1, latency_ratio: 1.0, bleu3: 0.2, bleu4: 0.1, word_acc: 0.3, loss_ce: 2.0, loss_kl: 1.5, loss_d: 0.7 },
            HistoryRow { epoch: 2, latency_ratio: 0.6, bleu3: 0.5, bleu4: 0.4, word_acc: 0.6, loss_ce: 1.0, loss_kl: 0.9, loss_d: 0.4 },
        ];
        let text = format_history(&rows);
        assert_eq!(parse_history(&text).unwrap(), rows);
        let curve = LearningCurve::from_rows(&rows);
        assert!((curve.latency_slope + 0.4).abs() < 1e-12);
        let bad = format!("{HISTORY_HEADER}\n1,2,3\n");
        assert!(matches!(parse_history(&bad), Err(Error::Data(m)) if m.contains("line 2")));
        assert!(parse_history("epoch,x\n").is_err());
        let rep = vec![ReportRow { f: 0.5, latency_ratio: 0.4, bleu3: 0.9, bleu4: 0.8, word_acc: 0.95, fired_frac: 1.0 }];
        assert_eq!(parse_report(&format_report(&rep)).unwrap(), rep);
    }
}
