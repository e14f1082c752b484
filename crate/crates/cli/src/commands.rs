use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use avcap::data::{
    build_vocab, generate_synthetic, load_split, read_manifest, EventData, Vocab, TRAIN_MANIFEST, VALID_MANIFEST,
};
use avcap::eval::{corpus_eval, format_history, format_report, threshold_sweep, HistoryRow, LearningCurve};
use avcap::model::{load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig};
use avcap::streaming::{format_trace, stream_event};
use avcap::training::{self, full_window_captions, TrainOutcome};
use avcap::{Error, Result};

use crate::config::{RunConfig, Split};
use crate::Flags;

const RESOLVED: &str = "resolved.cfg";

fn usage(msg: &str) -> Error {
    Error::Config(msg.to_string())
}

/// Config file, then `--set` overrides, then dedicated flags.
fn resolve(f: &Flags) -> Result<RunConfig> {
    let mut c = match &f.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &f.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(&format!("--set expects KEY=VALUE, got {kv:?}")))?;
        c.set(k.trim(), v)?;
    }
    if let Some(s) = f.seed {
        c.seed = s;
    }
    if let Some(t) = f.threshold {
        c.threshold = t;
    }
    if let Some(b) = f.beam {
        c.beam = b;
    }
    if let Some(d) = &f.data {
        c.dataset = d.clone();
    }
    if c.beam == 0 {
        return Err(usage("beam width must be at least 1"));
    }
    Ok(c)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn out_dir(f: &Flags) -> Result<PathBuf> {
    let out = f.out.clone().ok_or_else(|| usage("--out is required"))?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| usage(&format!("{flag} is required")))
}

pub fn gen_data(f: &Flags) -> Result<()> {
    let c = resolve(f)?;
    let out = f.out.clone().unwrap_or_else(|| c.dataset.clone());
    let spec = c.synthetic_spec();
    spec.validate()?;
    let paths = generate_synthetic(&spec, &out)?;
    write(&out.join(RESOLVED), c.to_text())?;
    println!(
        "wrote {} training and {} validation events to {}",
        spec.n_train,
        spec.n_valid,
        out.display()
    );
    println!("manifests {} {}", paths.train_manifest.display(), paths.valid_manifest.display());
    Ok(())
}

struct Dataset {
    vocab: Vocab,
    train: Vec<EventData>,
    valid: Vec<EventData>,
}

fn load_dataset(c: &RunConfig, vocab: Option<Vocab>) -> Result<Dataset> {
    let train_path = c.dataset.join(TRAIN_MANIFEST);
    let vocab = match vocab {
        Some(v) => v,
        None => build_vocab(&read_manifest(&train_path)?)?,
    };
    let train = load_split(&train_path, &vocab)?;
    let valid = load_split(&c.dataset.join(VALID_MANIFEST), &vocab)?;
    Ok(Dataset { vocab, train, valid })
}

fn meta(c: &RunConfig, vocab: &Vocab, role: &str, epoch: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("role".to_string(), role.to_string()),
        ("vocab".to_string(), vocab.to_line()),
        ("epoch".to_string(), epoch.to_string()),
        ("seed".to_string(), c.seed.to_string()),
        ("p_audio".to_string(), c.periods().audio.to_string()),
        ("p_visual".to_string(), c.periods().visual.to_string()),
    ])
}

fn load_model(path: &Path) -> Result<(Model<f32>, Vocab)> {
    let Checkpoint { model, meta } = load_checkpoint(path)?;
    let vocab = Vocab::from_line(meta.get("vocab").map_or("", String::as_str));
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Data(format!(
            "{}: stored vocabulary has {} tokens but the model expects {}",
            path.display(),
            vocab.len(),
            model.config.vocab_size
        )));
    }
    Ok((model, vocab))
}

fn epoch_flag(f: &Flags, default: usize) -> Result<usize> {
    let e = f.epochs.unwrap_or(default);
    if e == 0 {
        return Err(usage("epochs must be at least 1"));
    }
    Ok(e)
}

/// Shared bookkeeping of both training commands: periodic checkpoints,
/// history, best and final checkpoints, and the MANIFEST index.
fn run_training(
    c: &RunConfig,
    out: &Path,
    vocab: &Vocab,
    role: &str,
    train: impl FnOnce(&mut dyn FnMut(usize, &Model<f32>, &HistoryRow) -> Result<()>) -> Result<TrainOutcome>,
) -> Result<TrainOutcome> {
    let every = c.train.checkpoint_every;
    let mut rows: Vec<HistoryRow> = Vec::new();
    let mut saved: Vec<String> = Vec::new();
    let history = out.join("history.csv");
    let mut on_epoch = |epoch: usize, m: &Model<f32>, row: &HistoryRow| -> Result<()> {
        eprintln!(
            "{role} epoch {epoch}: latency {:.3} bleu4 {:.3} word_acc {:.3} ce {:.4} kl {:.4} d {:.4}",
            row.latency_ratio, row.bleu4, row.word_acc, row.loss_ce, row.loss_kl, row.loss_d
        );
        rows.push(row.clone());
        write(&history, format_history(&rows))?;
        if every > 0 && epoch % every == 0 {
            let name = format!("epoch_{epoch:03}.ckpt");
            save_checkpoint(&out.join(&name), m, &meta(c, vocab, role, epoch))?;
            saved.push(name);
        }
        Ok(())
    };
    let outcome = train(&mut on_epoch)?;
    let last = outcome.history.last().map_or(0, |r| r.epoch);
    save_checkpoint(&out.join("best.ckpt"), &outcome.best, &meta(c, vocab, role, outcome.best_epoch))?;
    save_checkpoint(&out.join("final.ckpt"), &outcome.model, &meta(c, vocab, role, last))?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "best\tbest.ckpt\tepoch={}", outcome.best_epoch);
    let _ = writeln!(manifest, "final\tfinal.ckpt\tepoch={last}");
    for s in &saved {
        let _ = writeln!(manifest, "checkpoint\t{s}");
    }
    let _ = writeln!(manifest, "history\thistory.csv");
    write(&out.join("MANIFEST"), manifest)?;
    write(&out.join(RESOLVED), c.to_text())?;
    Ok(outcome)
}

pub fn train_teacher(f: &Flags) -> Result<()> {
    let c = resolve(f)?;
    let epochs = epoch_flag(f, c.teacher_epochs)?;
    let tc = c.train_config(epochs);
    tc.validate()?;
    let out = out_dir(f)?;
    let ds = load_dataset(&c, None)?;
    let mc = ModelConfig {
        vocab_size: ds.vocab.len(),
        ..c.model.clone()
    };
    let periods = c.periods();
    let outcome = run_training(&c, &out, &ds.vocab, "teacher", |cb| {
        training::train_teacher(&ds.train, &ds.valid, mc, &tc, periods, cb)
    })?;
    let mut caps = String::from("# event_id\tteacher_caption\n");
    for events in [&ds.train, &ds.valid] {
        let decoded = full_window_captions(&outcome.model, events, periods, 1)?;
        for (ev, cap) in events.iter().zip(decoded) {
            let _ = writeln!(caps, "{}\t{}", ev.record.id, ds.vocab.detokenize(&cap));
        }
    }
    write(&out.join("teacher_captions.tsv"), caps)?;
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "teacher: {epochs} epochs, validation bleu3 {:.4} bleu4 {:.4} word_acc {:.4}, best epoch {}",
        last.bleu3, last.bleu4, last.word_acc, outcome.best_epoch
    );
    Ok(())
}

pub fn train_student(f: &Flags) -> Result<()> {
    let teacher_path = required(&f.teacher, "--teacher")?.clone();
    let c = resolve(f)?;
    let epochs = epoch_flag(f, c.student_epochs)?;
    let tc = c.train_config(epochs);
    tc.validate()?;
    let out = out_dir(f)?;
    let (teacher, vocab) = load_model(&teacher_path)?;
    let mut ds = load_dataset(&c, Some(vocab))?;
    let periods = c.periods();
    let caps = full_window_captions(&teacher, &ds.train, periods, 1)?;
    for (ev, cap) in ds.train.iter_mut().zip(caps) {
        ev.record.teacher_caption = Some(cap);
    }
    let outcome = run_training(&c, &out, &ds.vocab, "student", |cb| {
        training::train_student(&ds.train, &ds.valid, &teacher, &tc, periods, cb)
    })?;
    let curve = LearningCurve::from_rows(&outcome.history);
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "student: {epochs} epochs, validation latency {:.4} bleu3 {:.4} bleu4 {:.4} word_acc {:.4}, latency slope {:.6}",
        last.latency_ratio, last.bleu3, last.bleu4, last.word_acc, curve.latency_slope
    );
    Ok(())
}

fn split_events(c: &RunConfig, ds: Dataset) -> (Vocab, Vec<EventData>) {
    match c.split {
        Split::Train => (ds.vocab, ds.train),
        Split::Valid => (ds.vocab, ds.valid),
    }
}

pub fn infer(f: &Flags) -> Result<()> {
    let ckpt = required(&f.checkpoint, "--checkpoint")?;
    let id = f.event.clone().ok_or_else(|| usage("--event is required"))?;
    let c = resolve(f)?;
    let (model, vocab) = load_model(ckpt)?;
    let ds = load_dataset(&c, Some(vocab))?;
    let vocab = ds.vocab.clone();
    let ev = ds
        .valid
        .into_iter()
        .chain(ds.train)
        .find(|e| e.record.id == id)
        .ok_or_else(|| Error::Data(format!("no event {id:?} in {}", c.dataset.display())))?;
    let (e, trace) = stream_event(&model, &ev, c.periods(), c.threshold, c.beam)?;
    println!("event {id}");
    println!("caption {}", vocab.detokenize(&e.caption));
    println!("t_emit {}", e.t_emit);
    println!("latency_ratio {}", e.latency_ratio);
    println!("fired {}", e.fired);
    match &f.out {
        Some(_) => {
            let out = out_dir(f)?;
            write(&out.join("trace.csv"), format_trace(&trace))?;
            write(&out.join(RESOLVED), c.to_text())?;
        }
        None => print!("\n{}", format_trace(&trace)),
    }
    Ok(())
}

fn report_failures(out: &Path, failures: &[(String, String)]) -> Result<()> {
    if failures.is_empty() {
        return Ok(());
    }
    let mut s = String::new();
    for (id, msg) in failures {
        let _ = writeln!(s, "{id}\t{msg}");
        eprintln!("event {id} failed: {msg}");
    }
    write(&out.join("failures.tsv"), s)
}

pub fn eval(f: &Flags) -> Result<()> {
    let ckpt = required(&f.checkpoint, "--checkpoint")?;
    let c = resolve(f)?;
    let out = out_dir(f)?;
    let (model, vocab) = load_model(ckpt)?;
    let (vocab, events) = split_events(&c, load_dataset(&c, Some(vocab))?);
    let ce = corpus_eval(&model, &events, c.periods(), c.threshold, c.beam)?;
    write(&out.join("report.csv"), format_report(std::slice::from_ref(&ce.row)))?;
    let mut s = String::from("event_id,caption,t_emit,latency_ratio,fired,word_acc\n");
    for r in &ce.events {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.id,
            vocab.detokenize(&r.caption),
            r.t_emit,
            r.latency_ratio,
            u8::from(r.fired),
            r.word_acc
        );
    }
    write(&out.join("events.csv"), s)?;
    report_failures(&out, &ce.failures)?;
    write(&out.join(RESOLVED), c.to_text())?;
    print!("{}", format_report(std::slice::from_ref(&ce.row)));
    Ok(())
}

pub fn sweep(f: &Flags) -> Result<()> {
    let ckpt = required(&f.checkpoint, "--checkpoint")?;
    let c = resolve(f)?;
    let out = out_dir(f)?;
    let (model, vocab) = load_model(ckpt)?;
    let naive = match &f.teacher {
        Some(p) => {
            let (m, v) = load_model(p)?;
            if v != vocab {
                return Err(Error::Data("teacher and checkpoint vocabularies differ".into()));
            }
            m
        }
        None => model.clone(),
    };
    let (_, events) = split_events(&c, load_dataset(&c, Some(vocab))?);
    let rep = threshold_sweep(&model, &naive, &events, c.periods(), &c.thresholds, c.beam)?;
    write(&out.join("report.csv"), format_report(&rep.rows))?;
    write(&out.join("naive.csv"), format_report(&rep.naive))?;
    report_failures(&out, &rep.failures)?;
    write(&out.join(RESOLVED), c.to_text())?;
    print!("{}", format_report(&rep.rows));
    println!("naive");
    print!("{}", format_report(&rep.naive));
    Ok(())
}
