//! Caption, distillation and detection losses, plus the timing labels.

use rand::Rng;

use crate::compute::{bce_value, Graph, Real, Var};
use crate::error::{contract_err, Result};

/// Smoothed target distribution: `1−ε` on `target`, `ε/(V−1)` elsewhere.
pub fn smoothed_target(target: usize, vocab: usize, eps: f64) -> Vec<f64> {
    let off = if vocab > 1 { eps / (vocab - 1) as f64 } else { 0.0 };
    let mut q = vec![off; vocab];
    q[target] = 1.0 - eps;
    q
}

/// Mean over positions of the label-smoothed negative log-likelihood.
pub fn caption_ce_loss(dists: &[Vec<f64>], targets: &[usize], eps: f64) -> Result<f64> {
    if dists.len() != targets.len() {
        return Err(contract_err!("{} distributions for {} targets", dists.len(), targets.len()));
    }
    if dists.is_empty() {
        return Err(contract_err!("caption loss over zero positions"));
    }
    let mut total = 0.0;
    for (p, &t) in dists.iter().zip(targets) {
        if t >= p.len() {
            return Err(contract_err!("target {t} outside vocabulary of {}", p.len()));
        }
        let q = smoothed_target(t, p.len(), eps);
        total -= q.iter().zip(p).filter(|(&qi, _)| qi > 0.0).map(|(qi, pi)| qi * pi.ln()).sum::<f64>();
    }
    Ok(total / dists.len() as f64)
}

/// Cross-entropy of student against teacher distributions, averaged over positions.
pub fn distill_kl_loss(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(contract_err!("{} teacher positions vs {} student positions", teacher.len(), student.len()));
    }
    if teacher.is_empty() {
        return Err(contract_err!("distillation loss over zero positions"));
    }
    let mut total = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        if t.len() != s.len() {
            return Err(contract_err!("distribution widths {} vs {}", t.len(), s.len()));
        }
        total -= t.iter().zip(s).filter(|(&ti, _)| ti > 0.0).map(|(ti, si)| ti * si.ln()).sum::<f64>();
    }
    Ok(total / teacher.len() as f64)
}

/// Fraction of positions where `predicted` agrees with `target`.
pub fn word_accuracy(predicted: &[usize], target: &[usize]) -> Result<f64> {
    if predicted.len() != target.len() || target.is_empty() {
        return Err(contract_err!("word accuracy over {} vs {} positions", predicted.len(), target.len()));
    }
    let hits = predicted.iter().zip(target).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / target.len() as f64)
}

/// `1` when either similarity reaches `s`.
pub fn detection_label(sim_gt: f64, sim_teacher: f64, s: f64) -> u8 {
    u8::from(sim_gt.max(sim_teacher) >= s)
}

pub fn detection_loss(prob: f64, d: u8) -> f64 {
    bce_value(prob, d as f64)
}

/// Draws `T_o` uniformly from `[T_s + p_v, T_e]`. `None` when the event is
/// shorter than one visual frame.
pub fn sample_emission_time<R: Rng>(t_start: f64, t_end: f64, visual_period: f64, rng: &mut R) -> Option<f64> {
    let lo = t_start + visual_period;
    if lo > t_end {
        return None;
    }
    if lo == t_end {
        return Some(t_end);
    }
    Some(rng.random_range(lo..=t_end))
}

/// Weighted caption objective on a log-softmax node `ls` of shape
/// `[L × V]`: `α·CE(smoothed targets) + β·CE(teacher distributions)`,
/// both averaged over the `L` positions. Teacher rows may be omitted when
/// `β = 0`.
pub fn caption_objective<T: Real>(
    g: &mut Graph<T>,
    ls: Var,
    targets: &[usize],
    teacher: Option<&[Vec<f64>]>,
    eps: f64,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let dims = g.value(ls).dims().to_vec();
    let (l, v) = (dims[0], dims[1]);
    if targets.len() != l {
        return Err(contract_err!("{l} decoder positions for {} targets", targets.len()));
    }
    if let Some(t) = teacher {
        if t.len() != l || t.iter().any(|row| row.len() != v) {
            return Err(contract_err!("teacher distributions do not match {l}x{v} logits"));
        }
    }
    let mut c = Vec::with_capacity(l * v);
    for (i, &t) in targets.iter().enumerate() {
        let q = smoothed_target(t, v, eps);
        for (j, qj) in q.iter().enumerate() {
            let p = teacher.map_or(0.0, |tt| tt[i][j]);
            c.push(T::lit(-(alpha * qj + beta * p) / l as f64));
        }
    }
    g.dot_const(ls, c)
}

/// `α·ce + β·kl + γ·d`.
pub fn combined_loss(alpha: f64, beta: f64, gamma: f64, ce: f64, kl: f64, d: f64) -> f64 {
    alpha * ce + beta * kl + gamma * d
}
