//! Synthetic audio-visual events with controllable cue times.
//!
//! Every frame carries Gaussian noise. From the cue time to the end of the
//! clip, the cued modality (or both) also carries one sign-code pattern per
//! caption factor: the event class and three attribute slots, each written
//! into its own block of feature dimensions. Captions name those four
//! factors, so a caption is only recoverable once the cue has been seen.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::features::{encode_features, ClipFeatures, FramePeriods};
use super::manifest::{format_manifest, EventRecord};
use crate::compute::Tensor;
use crate::error::{config_err, Error, Result};

const CLASS_WORDS: [&str; 12] = [
    "dog", "car", "bell", "drum", "bird", "rain", "train", "crowd", "engine", "piano", "wind", "door",
];
const SLOT_WORDS: [[&str; 8]; 3] = [
    ["loud", "soft", "quick", "slow", "sharp", "deep", "steady", "sudden"],
    ["near", "far", "left", "right", "above", "below", "inside", "outside"],
    ["today", "tonight", "again", "briefly", "often", "early", "late", "twice"],
];
const FACTORS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CueModality {
    Audio,
    Visual,
    Both,
}

impl CueModality {
    pub fn name(self) -> &'static str {
        match self {
            CueModality::Audio => "audio",
            CueModality::Visual => "visual",
            CueModality::Both => "both",
        }
    }

    fn in_audio(self) -> bool {
        self != CueModality::Visual
    }

    fn in_visual(self) -> bool {
        self != CueModality::Audio
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_classes: usize,
    pub slot_arity: usize,
    /// Event duration range in seconds.
    pub clip_min: f64,
    pub clip_max: f64,
    /// Cue time as a fraction of the event duration.
    pub cue_min: f64,
    pub cue_max: f64,
    /// Relative weights of audio-only, visual-only and both-modality cues.
    pub cue_mix: [f64; 3],
    pub noise: f64,
    pub seed: u64,
    pub d_audio: usize,
    pub d_visual: usize,
    pub periods: FramePeriods,
    /// Unlabeled context before the event start and after its end, seconds.
    pub lead_max: f64,
    pub tail_max: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_train: 500,
            n_valid: 100,
            n_classes: 8,
            slot_arity: 6,
            clip_min: 20.0,
            clip_max: 40.0,
            cue_min: 0.2,
            cue_max: 0.4,
            cue_mix: [0.25, 0.25, 0.5],
            noise: 0.1,
            seed: 0,
            d_audio: 16,
            d_visual: 32,
            periods: FramePeriods::default(),
            lead_max: 4.0,
            tail_max: 2.0,
        }
    }
}

impl SyntheticSpec {
    /// Words in the caption vocabulary, reserved tokens excluded.
    pub fn word_count(&self) -> usize {
        self.n_classes + 3 * self.slot_arity
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(config_err!("synthetic spec needs at least one training event"));
        }
        if !(2..=CLASS_WORDS.len()).contains(&self.n_classes) {
            return Err(config_err!("n_classes must be in 2..={}", CLASS_WORDS.len()));
        }
        if !(2..=SLOT_WORDS[0].len()).contains(&self.slot_arity) {
            return Err(config_err!("slot_arity must be in 2..={}", SLOT_WORDS[0].len()));
        }
        if !(self.cue_min > 0.0 && self.cue_min <= self.cue_max && self.cue_max < 1.0) {
            return Err(config_err!(
                "cue fractions must satisfy 0 < min <= max < 1, got {} and {}",
                self.cue_min,
                self.cue_max
            ));
        }
        if !(self.periods.audio > 0.0 && self.periods.visual > 0.0) {
            return Err(config_err!("frame periods must be positive"));
        }
        if !(self.clip_min >= 2.0 * self.periods.visual && self.clip_min <= self.clip_max) {
            return Err(config_err!(
                "clip range [{}, {}] must be ordered and span at least two visual frames",
                self.clip_min,
                self.clip_max
            ));
        }
        if self.cue_mix.iter().any(|&w| w < 0.0 || !w.is_finite()) || self.cue_mix.iter().sum::<f64>() <= 0.0 {
            return Err(config_err!("cue modality weights must be nonnegative with a positive sum"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(config_err!("noise must be a nonnegative number"));
        }
        if self.lead_max < 0.0 || self.tail_max < 0.0 {
            return Err(config_err!("lead and tail lengths must be nonnegative"));
        }
        let need = self.n_classes.max(self.slot_arity);
        for (name, d) in [("d_audio", self.d_audio), ("d_visual", self.d_visual)] {
            let block = d / FACTORS;
            if block == 0 || 2 * hadamard_order(block) < need {
                return Err(config_err!("{name}={d} is too narrow for {need} distinct patterns"));
            }
        }
        Ok(())
    }
}

/// Ground truth of one generated event.
#[derive(Clone, Debug, PartialEq)]
pub struct CueInfo {
    pub id: String,
    pub class: usize,
    pub slots: [usize; 3],
    pub t_cue: f64,
    pub cue_fraction: f64,
    pub modality: CueModality,
}

/// Per-factor ±1 codes for one modality: `codes[factor][value]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternTable {
    pub block: usize,
    pub codes: Vec<Vec<Vec<f32>>>,
}

/// Largest power of two not above `block`.
fn hadamard_order(block: usize) -> usize {
    1 << (usize::BITS - 1 - block.leading_zeros())
}

/// `k` codes from the rows of a Sylvester Hadamard matrix and their
/// negations, tiled to `block` columns, with random column signs and a
/// random assignment of rows to values. Distinct codes differ in at least
/// half of the first `h` columns.
fn draw_codes(rng: &mut ChaCha8Rng, k: usize, block: usize) -> Vec<Vec<f32>> {
    let h = hadamard_order(block);
    let mut rows: Vec<usize> = (0..2 * h).collect();
    rows.truncate(k);
    rows.shuffle(rng);
    let flips: Vec<f32> = (0..h).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    rows.iter()
        .map(|&r| {
            let sign = if r < h { 1.0 } else { -1.0 };
            (0..block)
                .map(|j| {
                    let c = j % h;
                    let e = if ((r % h) & c).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                    sign * e * flips[c]
                })
                .collect()
        })
        .collect()
}

impl PatternTable {
    fn new(rng: &mut ChaCha8Rng, d: usize, spec: &SyntheticSpec) -> Self {
        let block = d / FACTORS;
        let mut codes = vec![draw_codes(rng, spec.n_classes, block)];
        for _ in 0..3 {
            codes.push(draw_codes(rng, spec.slot_arity, block));
        }
        PatternTable { block, codes }
    }

    /// Full-width pattern vector for one event.
    pub fn vector(&self, d: usize, class: usize, slots: [usize; 3]) -> Vec<f32> {
        let mut v = vec![0.0; d];
        let values = [class, slots[0], slots[1], slots[2]];
        for (f, &val) in values.iter().enumerate() {
            v[f * self.block..(f + 1) * self.block].copy_from_slice(&self.codes[f][val]);
        }
        v
    }
}

/// Seeded generator shared by both splits so they use the same patterns.
pub struct Generator {
    pub spec: SyntheticSpec,
    pub audio_patterns: PatternTable,
    pub visual_patterns: PatternTable,
}

pub fn caption_for(class: usize, slots: [usize; 3]) -> String {
    format!(
        "{} {} {} {}",
        CLASS_WORDS[class], SLOT_WORDS[0][slots[0]], SLOT_WORDS[1][slots[1]], SLOT_WORDS[2][slots[2]]
    )
}

fn millis(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

impl Generator {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(0);
        let audio_patterns = PatternTable::new(&mut rng, spec.d_audio, &spec);
        let visual_patterns = PatternTable::new(&mut rng, spec.d_visual, &spec);
        Ok(Generator {
            spec,
            audio_patterns,
            visual_patterns,
        })
    }

    /// Event `index` of a split; split 0 is training, 1 validation.
    pub fn event(&self, split: u64, index: usize) -> (CueInfo, ClipFeatures, f64, f64) {
        let s = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_stream(((1 + split) << 32) | index as u64);
        let class = rng.random_range(0..s.n_classes);
        let slots = [
            rng.random_range(0..s.slot_arity),
            rng.random_range(0..s.slot_arity),
            rng.random_range(0..s.slot_arity),
        ];
        let t_start = millis(rng.random_range(0.0..=s.lead_max));
        let dur = millis(rng.random_range(s.clip_min..=s.clip_max));
        let t_end = millis(t_start + dur);
        let tail = rng.random_range(0.0..=s.tail_max);
        let frac = rng.random_range(s.cue_min..=s.cue_max);
        let t_cue = millis(t_start + frac * (t_end - t_start));
        let total: f64 = s.cue_mix.iter().sum();
        let u = rng.random_range(0.0..total);
        let modality = if u < s.cue_mix[0] {
            CueModality::Audio
        } else if u < s.cue_mix[0] + s.cue_mix[1] {
            CueModality::Visual
        } else {
            CueModality::Both
        };
        let clip_len = t_end + tail;
        let noise = Normal::new(0.0, s.noise).expect("validated noise");
        let mut stream = |d: usize, period: f64, table: &PatternTable, on: bool| {
            let t = (clip_len / period).ceil() as usize;
            let pattern = table.vector(d, class, slots);
            let mut data = Vec::with_capacity(t * d);
            for k in 0..t {
                let cued = on && (k as f64) * period >= t_cue;
                for &pv in &pattern {
                    let n = noise.sample(&mut rng) as f32;
                    data.push(if cued { n + pv } else { n });
                }
            }
            Tensor::new(vec![t, d], data).expect("dims match")
        };
        let audio = stream(s.d_audio, s.periods.audio, &self.audio_patterns, modality.in_audio());
        let visual = stream(s.d_visual, s.periods.visual, &self.visual_patterns, modality.in_visual());
        let info = CueInfo {
            id: format!("{}-{:04}", if split == 0 { "train" } else { "valid" }, index),
            class,
            slots,
            t_cue,
            cue_fraction: (t_cue - t_start) / (t_end - t_start),
            modality,
        };
        (info, ClipFeatures { audio, visual }, t_start, t_end)
    }

    /// Writes feature files under `write_dir`; records point into `final_dir`.
    fn split(
        &self,
        split: u64,
        n: usize,
        write_dir: &Path,
        final_dir: &Path,
    ) -> Result<(Vec<EventRecord>, Vec<CueInfo>)> {
        let mut records = Vec::with_capacity(n);
        let mut cues = Vec::with_capacity(n);
        for i in 0..n {
            let (info, clip, t_start, t_end) = self.event(split, i);
            let audio_name = format!("{FEATURE_DIR}/{}.audio.avcf", info.id);
            let visual_name = format!("{FEATURE_DIR}/{}.visual.avcf", info.id);
            for (name, t) in [(&audio_name, &clip.audio), (&visual_name, &clip.visual)] {
                let p = write_dir.join(name);
                fs::write(&p, encode_features(t)).map_err(|e| Error::io(&p, e))?;
            }
            let (audio_path, visual_path) = (final_dir.join(&audio_name), final_dir.join(&visual_name));
            records.push(EventRecord {
                id: info.id.clone(),
                audio_path,
                visual_path,
                t_start,
                t_end,
                caption_text: caption_for(info.class, info.slots),
                caption: Vec::new(),
                teacher_caption: None,
            });
            cues.push(info);
        }
        Ok((records, cues))
    }
}

/// Paths written by [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedPaths {
    pub train_manifest: PathBuf,
    pub valid_manifest: PathBuf,
    pub cues: PathBuf,
}

pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const VALID_MANIFEST: &str = "valid.tsv";
pub const CUES_FILE: &str = "cues.tsv";
pub const FEATURE_DIR: &str = "features";

fn format_cues(cues: &[CueInfo]) -> String {
    let mut s = String::from("# event_id\tclass\tt_cue\tcue_fraction\tmodality\n");
    for c in cues {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", c.id, c.class, c.t_cue, c.cue_fraction, c.modality.name());
    }
    s
}

/// Parses a cue file back into `(event_id, t_cue, cue_fraction, modality)`.
pub fn read_cues(path: &Path) -> Result<Vec<(String, f64, f64, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let parse = |s: &str| s.parse::<f64>().ok();
        match (f.len(), f.get(2).and_then(|s| parse(s)), f.get(3).and_then(|s| parse(s))) {
            (5, Some(t), Some(fr)) => out.push((f[0].to_string(), t, fr, f[4].to_string())),
            _ => return Err(Error::Data(format!("cue file line {}: malformed", i + 1))),
        }
    }
    Ok(out)
}

/// Writes `train.tsv`, `valid.tsv`, `cues.tsv` and `features/` under
/// `out_dir`. Output is staged in a sibling directory and moved into place
/// only once complete.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<GeneratedPaths> {
    let gen = Generator::new(spec.clone())?;
    let parent = out_dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = out_dir
        .file_name()
        .ok_or_else(|| config_err!("output path {} has no final component", out_dir.display()))?;
    let stage = parent.join(format!(".{}.partial", name.to_string_lossy()));
    let _ = fs::remove_dir_all(&stage);
    let result = (|| -> Result<()> {
        let feat = stage.join(FEATURE_DIR);
        fs::create_dir_all(&feat).map_err(|e| Error::io(&feat, e))?;
        let (train, mut cues) = gen.split(0, spec.n_train, &stage, out_dir)?;
        let (valid, vcues) = gen.split(1, spec.n_valid, &stage, out_dir)?;
        cues.extend(vcues);
        for (file, text) in [
            (TRAIN_MANIFEST, format_manifest(&train, out_dir)),
            (VALID_MANIFEST, format_manifest(&valid, out_dir)),
            (CUES_FILE, format_cues(&cues)),
        ] {
            let p = stage.join(file);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        move_into(&stage, out_dir)
    })();
    let _ = fs::remove_dir_all(&stage);
    result?;
    Ok(GeneratedPaths {
        train_manifest: out_dir.join(TRAIN_MANIFEST),
        valid_manifest: out_dir.join(VALID_MANIFEST),
        cues: out_dir.join(CUES_FILE),
    })
}

/// Moves every file under `from` to the same relative place under `to`,
/// replacing existing files.
fn move_into(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    for entry in fs::read_dir(from).map_err(|e| Error::io(from, e))? {
        let entry = entry.map_err(|e| Error::io(from, e))?;
        let (src, dst) = (entry.path(), to.join(entry.file_name()));
        if src.is_dir() {
            move_into(&src, &dst)?;
        } else {
            fs::rename(&src, &dst).map_err(|e| Error::io(&dst, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_train: 6,
            n_valid: 2,
            seed,
            ..SyntheticSpec::default()
        }
    }

    fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["", FEATURE_DIR] {
            let mut names: Vec<_> = fs::read_dir(dir.join(sub))
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.is_file())
                .collect();
            names.sort();
            for p in names {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
        out
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
        generate_synthetic(&small_spec(5), &a).unwrap();
        generate_synthetic(&small_spec(5), &b).unwrap();
        generate_synthetic(&small_spec(6), &c).unwrap();
        // Manifests hold absolute paths into their own directory, so compare
        // feature files and cue tables only.
        let strip = |t: Vec<(String, Vec<u8>)>| t.into_iter().filter(|(n, _)| !n.ends_with("train.tsv") && !n.ends_with("valid.tsv")).collect::<Vec<_>>();
        let (ta, tb) = (strip(tree(&a)), strip(tree(&b)));
        assert_eq!(ta.len(), 1 + 2 * 8);
        assert_eq!(ta, tb);
        assert_ne!(ta, strip(tree(&c)));
        let ma = fs::read_to_string(a.join(TRAIN_MANIFEST)).unwrap();
        let mb = fs::read_to_string(b.join(TRAIN_MANIFEST)).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn generated_manifest_loads_and_matches_cues() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("d");
        let paths = generate_synthetic(&small_spec(1), &out).unwrap();
        let recs = super::super::manifest::read_manifest(&paths.train_manifest).unwrap();
        let cues = read_cues(&paths.cues).unwrap();
        assert_eq!(recs.len(), 6);
        assert_eq!(cues.len(), 8);
        for (r, c) in recs.iter().zip(&cues) {
            assert_eq!(r.id, c.0);
            assert!(r.t_start <= c.1 && c.1 < r.t_end);
            assert!((0.19..=0.41).contains(&c.2));
            assert_eq!(r.caption_text.split(' ').count(), 4);
            assert!(r.audio_path.exists() && r.visual_path.exists());
        }
        assert!(!tmp.path().join(".d.partial").exists());
    }

    #[test]
    fn codes_are_well_separated() {
        let gen = Generator::new(SyntheticSpec::default()).unwrap();
        for (table, h) in [(&gen.audio_patterns, 4), (&gen.visual_patterns, 8)] {
            for codes in &table.codes {
                for (i, a) in codes.iter().enumerate() {
                    for b in &codes[i + 1..] {
                        let d = a.iter().zip(b).filter(|(x, y)| x != y).count();
                        assert!(d >= h / 2, "distance {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            SyntheticSpec { cue_min: 0.0, ..SyntheticSpec::default() },
            SyntheticSpec { cue_max: 1.0, ..SyntheticSpec::default() },
            SyntheticSpec { n_classes: 40, ..SyntheticSpec::default() },
            SyntheticSpec { cue_mix: [0.0; 3], ..SyntheticSpec::default() },
            SyntheticSpec { d_audio: 6, ..SyntheticSpec::default() },
            SyntheticSpec { clip_min: 1.0, ..SyntheticSpec::default() },
        ];
        for s in bad {
            assert!(matches!(s.validate(), Err(Error::Config(_))), "{s:?}");
        }
        assert_eq!(SyntheticSpec::default().word_count(), 26);
    }

    #[test]
    fn unwritable_output_is_an_io_error() {
        let tmp = tempfile::tempdir().unwrap();
        let file = tmp.path().join("f");
        fs::write(&file, b"x").unwrap();
        let e = generate_synthetic(&small_spec(0), &file.join("sub")).unwrap_err();
        assert!(matches!(e, Error::Io { .. }));
    }

    /// Nearest-centroid classification of the event class from single
    /// frames. Centroids are estimated from labeled frames of even-numbered
    /// events and scored on frames of odd-numbered ones.
    fn centroid_accuracy(post_cue: bool) -> f64 {
        let spec = SyntheticSpec::default();
        let gen = Generator::new(spec.clone()).unwrap();
        let mut fit: Vec<(usize, Vec<f32>)> = Vec::new();
        let mut score: Vec<(usize, Vec<f32>)> = Vec::new();
        for i in 0..spec.n_train {
            let (info, clip, t_start, _) = gen.event(0, i);
            if !info.modality.in_visual() {
                continue;
            }
            let p = spec.periods.visual;
            for k in 0..clip.visual.rows() {
                let s = k as f64 * p;
                let keep = if post_cue { s >= info.t_cue } else { s >= t_start && s < info.t_cue };
                if keep {
                    let set = if i % 2 == 0 { &mut fit } else { &mut score };
                    set.push((info.class, clip.visual.row(k).to_vec()));
                }
            }
        }
        let d = spec.d_visual;
        let mut sums = vec![vec![0.0f64; d]; spec.n_classes];
        let mut counts = vec![0usize; spec.n_classes];
        for (c, f) in &fit {
            counts[*c] += 1;
            for (s, &x) in sums[*c].iter_mut().zip(f) {
                *s += x as f64;
            }
        }
        let centroids: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| s.iter().map(|x| x / n.max(1) as f64).collect())
            .collect();
        let correct = score
            .iter()
            .filter(|(c, f)| {
                let dist = |m: &Vec<f64>| f.iter().zip(m).map(|(&x, y)| (x as f64 - y).powi(2)).sum::<f64>();
                let best = (0..spec.n_classes)
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                best == *c
            })
            .count();
        correct as f64 / score.len() as f64
    }

    #[test]
    fn centroid_oracle_recovers_class_after_cue() {
        let acc = centroid_accuracy(true);
        assert!(acc > 0.99, "post-cue accuracy {acc}");
    }

    #[test]
    fn centroid_oracle_is_at_chance_before_cue() {
        let acc = centroid_accuracy(false);
        assert!(acc < 0.25, "pre-cue accuracy {acc}");
    }

    #[test]
    fn pre_cue_frames_carry_no_pattern() {
        let spec = SyntheticSpec::default();
        let gen = Generator::new(spec.clone()).unwrap();
        for i in 0..20 {
            let (info, clip, _, _) = gen.event(0, i);
            for (t, p) in [(&clip.audio, spec.periods.audio), (&clip.visual, spec.periods.visual)] {
                for k in 0..t.rows() {
                    if (k as f64) * p < info.t_cue {
                        assert!(t.row(k).iter().all(|x| x.abs() < 0.8), "{} frame {k}", info.id);
                    }
                }
            }
        }
    }

    #[test]
    fn clip_covers_event() {
        let spec = SyntheticSpec::default();
        let gen = Generator::new(spec.clone()).unwrap();
        for i in 0..20 {
            let (_, clip, _, t_end) = gen.event(1, i);
            assert!(clip.visual.rows() as f64 * spec.periods.visual >= t_end);
            assert!(clip.audio.rows() as f64 * spec.periods.audio >= t_end);
        }
    }
}
