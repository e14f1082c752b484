use super::features::FeatureStream;
use crate::compute::{Real, Tensor};
use crate::error::{contract_err, Result};
use crate::model::PAD;

/// Events padded to common lengths. Entry `i` of each field belongs to
/// event `i`; masks are `true` at real positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub audio: Vec<Tensor<T>>,
    pub visual: Vec<Tensor<T>>,
    pub audio_valid: Vec<Vec<bool>>,
    pub visual_valid: Vec<Vec<bool>>,
    pub captions: Vec<Vec<usize>>,
    pub caption_valid: Vec<Vec<bool>>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }
}

fn pad_rows<T: Real>(t: &Tensor<f32>, rows: usize) -> (Tensor<T>, Vec<bool>) {
    let cols = t.cols();
    let mut data = t.cast::<T>().into_data();
    data.resize(rows * cols, T::zero());
    let mask = (0..rows).map(|r| r < t.rows()).collect();
    (Tensor::new(vec![rows, cols], data).expect("padded dims"), mask)
}

/// Pads windows and captions to the component-wise maxima of the batch.
pub fn make_batch<T: Real>(streams: &[FeatureStream], captions: &[Vec<usize>]) -> Result<Batch<T>> {
    if streams.is_empty() {
        return Err(contract_err!("cannot batch zero events"));
    }
    if streams.len() != captions.len() {
        return Err(contract_err!("{} windows but {} captions", streams.len(), captions.len()));
    }
    let ta = streams.iter().map(|s| s.audio.rows()).max().unwrap_or(0);
    let tv = streams.iter().map(|s| s.visual.rows()).max().unwrap_or(0);
    let tc = captions.iter().map(Vec::len).max().unwrap_or(0);
    let mut b = Batch {
        audio: Vec::new(),
        visual: Vec::new(),
        audio_valid: Vec::new(),
        visual_valid: Vec::new(),
        captions: Vec::new(),
        caption_valid: Vec::new(),
    };
    for (s, c) in streams.iter().zip(captions) {
        let (a, am) = pad_rows(&s.audio, ta);
        let (v, vm) = pad_rows(&s.visual, tv);
        b.audio.push(a);
        b.audio_valid.push(am);
        b.visual.push(v);
        b.visual_valid.push(vm);
        let mut cap = c.clone();
        cap.resize(tc, PAD);
        b.captions.push(cap);
        b.caption_valid.push((0..tc).map(|i| i < c.len()).collect());
    }
    Ok(b)
}
