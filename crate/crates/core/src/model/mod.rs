//! Bi-modal Transformer captioner with a convolutional end detector.

mod checkpoint;
mod config;
mod network;
mod search;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::ModelConfig;
pub use network::{positional_encoding, EncVars};
pub use search::{beam_search, greedy_search, Hypothesis};

use crate::compute::{
    glorot, init_ffn, init_layer_norm, init_linear, init_mha, softmax_in_place, Graph, ParamStore,
    Real, Tensor,
};
use crate::error::{contract_err, shape_err, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

/// Prefix shared by every end-detector parameter name.
pub const DETECTOR_PREFIX: &str = "det.";

/// Initial output bias of the end detector, a prior probability near 0.12
/// that a prefix already suffices.
pub const DETECTOR_PRIOR_LOGIT: f64 = -2.0;

/// Encoder outputs detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Encodings<T> {
    pub audio: Tensor<T>,
    pub visual: Tensor<T>,
    pub audio_valid: Vec<bool>,
    pub visual_valid: Vec<bool>,
}

/// Per-position argmax and next-token distribution from one
/// teacher-forced decoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherForced {
    pub argmax: Vec<usize>,
    pub dists: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Randomly initialized model; `seed` fully determines the weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Self::init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let (da, dv, de) = (c.d_audio, c.d_visual, c.d_embed);
        let mut p = ParamStore::new();
        for n in 0..c.n_enc {
            let pre = format!("enc.{n}");
            init_layer_norm(&mut p, &format!("{pre}.ln_a1"), da)?;
            init_mha(&mut p, &mut rng, &format!("{pre}.a_self"), da, da)?;
            init_layer_norm(&mut p, &format!("{pre}.ln_v1"), dv)?;
            init_mha(&mut p, &mut rng, &format!("{pre}.v_self"), dv, dv)?;
            init_layer_norm(&mut p, &format!("{pre}.ln_a2"), da)?;
            init_layer_norm(&mut p, &format!("{pre}.ln_v2"), dv)?;
            init_mha(&mut p, &mut rng, &format!("{pre}.a_cross"), da, dv)?;
            init_mha(&mut p, &mut rng, &format!("{pre}.v_cross"), dv, da)?;
            init_layer_norm(&mut p, &format!("{pre}.ln_a3"), da)?;
            init_ffn(&mut p, &mut rng, &format!("{pre}.ffn_a"), da, c.ffn_audio)?;
            init_layer_norm(&mut p, &format!("{pre}.ln_v3"), dv)?;
            init_ffn(&mut p, &mut rng, &format!("{pre}.ffn_v"), dv, c.ffn_visual)?;
        }
        init_layer_norm(&mut p, "enc.ln_a", da)?;
        init_layer_norm(&mut p, "enc.ln_v", dv)?;

        for (name, t) in Self::init_detector(c, seed)?.iter() {
            p.insert(name, t.clone())?;
        }

        p.insert("dec.embed", glorot(&mut rng, c.vocab_size, de, &[c.vocab_size, de]))?;
        for m in 0..c.n_dec {
            let pre = format!("dec.{m}");
            init_layer_norm(&mut p, &format!("{pre}.ln1"), de)?;
            init_mha(&mut p, &mut rng, &format!("{pre}.self"), de, de)?;
            init_layer_norm(&mut p, &format!("{pre}.ln2"), de)?;
            init_mha(&mut p, &mut rng, &format!("{pre}.src_a"), de, da)?;
            init_mha(&mut p, &mut rng, &format!("{pre}.src_v"), de, dv)?;
            init_linear(&mut p, &mut rng, &format!("{pre}.fuse.w"), &format!("{pre}.fuse.b"), 2 * de, de)?;
            init_layer_norm(&mut p, &format!("{pre}.ln3"), de)?;
            init_ffn(&mut p, &mut rng, &format!("{pre}.ffn"), de, c.ffn_embed)?;
        }
        init_layer_norm(&mut p, "dec.ln", de)?;
        init_linear(&mut p, &mut rng, "dec.out.w", "dec.out.b", de, c.vocab_size)?;
        Ok(p)
    }

    /// Fresh end-detector parameters, drawn from their own seeded stream.
    pub fn init_detector(c: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00de_7ec7);
        let mut p = ParamStore::new();
        let (k, ch) = (c.det_kernel, c.det_channels);
        for (m, d) in [("a", c.d_audio), ("v", c.d_visual)] {
            p.insert(format!("det.conv_{m}1.w"), glorot(&mut rng, k * d, k * ch, &[k, d, ch]))?;
            p.insert(format!("det.conv_{m}1.b"), Tensor::zeros(&[ch]))?;
            p.insert(format!("det.conv_{m}2.w"), glorot(&mut rng, k * ch, k * ch, &[k, ch, ch]))?;
            p.insert(format!("det.conv_{m}2.b"), Tensor::zeros(&[ch]))?;
        }
        init_linear(&mut p, &mut rng, "det.ffn.w1", "det.ffn.b1", 2 * ch, c.det_hidden)?;
        init_linear(&mut p, &mut rng, "det.ffn.w2", "det.ffn.b2", c.det_hidden, 1)?;
        if let Some(b) = p.get_mut("det.ffn.b2") {
            b.data_mut()[0] = T::lit(DETECTOR_PRIOR_LOGIT);
        }
        Ok(p)
    }

    /// Wraps an existing parameter set after checking every expected name
    /// and shape is present and nothing else is.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = Self::init_params(&config, 0)?;
        if expected.len() != params.len() {
            return Err(shape_err!(
                "model expects {} parameters, got {}",
                expected.len(),
                params.len()
            ));
        }
        for (name, want) in expected.iter() {
            let t = params
                .get(name)
                .ok_or_else(|| shape_err!("missing parameter {name}"))?;
            if t.dims() != want.dims() {
                return Err(shape_err!(
                    "parameter {name} has dims {:?}, want {:?}",
                    t.dims(),
                    want.dims()
                ));
            }
        }
        Ok(Model { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn encode(&self, audio: &Tensor<T>, visual: &Tensor<T>) -> Result<Encodings<T>> {
        self.encode_masked(audio, visual, None, None)
    }

    pub fn encode_masked(
        &self,
        audio: &Tensor<T>,
        visual: &Tensor<T>,
        audio_valid: Option<&[bool]>,
        visual_valid: Option<&[bool]>,
    ) -> Result<Encodings<T>> {
        let mut g = Graph::frozen();
        let e = self.encode_in(&mut g, audio, visual, audio_valid, visual_valid)?;
        Ok(Encodings {
            audio: g.value(e.audio).clone(),
            visual: g.value(e.visual).clone(),
            audio_valid: e.audio_valid,
            visual_valid: e.visual_valid,
        })
    }

    pub fn detect_end(&self, enc: &Encodings<T>) -> Result<f64> {
        let mut g = Graph::frozen();
        let e = self.enc_constants(&mut g, enc);
        let p = self.detect_in(&mut g, &e)?;
        Ok(g.value(p).data()[0].as_f64())
    }

    /// Next-token distribution after `prefix`, which must start with `<sos>`.
    pub fn decode_step(&self, prefix: &[usize], enc: &Encodings<T>) -> Result<Vec<f64>> {
        if prefix.first() != Some(&SOS) {
            return Err(contract_err!("decoder prefix must start with <sos>"));
        }
        if prefix.len() > self.config.max_decode_len {
            return Err(contract_err!(
                "prefix of {} tokens exceeds max_decode_len {}",
                prefix.len(),
                self.config.max_decode_len
            ));
        }
        let mut g = Graph::frozen();
        let e = self.enc_constants(&mut g, enc);
        let logits = self.decoder_logits_in(&mut g, &e, prefix)?;
        let lv = g.value(logits);
        let mut row: Vec<f64> = lv.row(lv.rows() - 1).iter().map(|x| x.as_f64()).collect();
        softmax_in_place(&mut row);
        Ok(row)
    }

    pub fn greedy_hypothesis(&self, enc: &Encodings<T>) -> Result<Hypothesis> {
        greedy_search(|p| self.decode_step(p, enc), self.config.max_decode_len)
    }

    pub fn greedy_decode(&self, enc: &Encodings<T>) -> Result<Vec<usize>> {
        Ok(self.greedy_hypothesis(enc)?.tokens)
    }

    pub fn beam_hypothesis(&self, enc: &Encodings<T>, width: usize) -> Result<Hypothesis> {
        beam_search(|p| self.decode_step(p, enc), width, self.config.max_decode_len)
    }

    pub fn beam_decode(&self, enc: &Encodings<T>, width: usize) -> Result<Vec<usize>> {
        Ok(self.beam_hypothesis(enc, width)?.tokens)
    }

    /// Greedy for width 1, beam search otherwise.
    pub fn decode(&self, enc: &Encodings<T>, width: usize) -> Result<Vec<usize>> {
        if width == 1 {
            self.greedy_decode(enc)
        } else {
            self.beam_decode(enc, width)
        }
    }

    /// One decoder pass over `[<sos>, reference…]`; yields `len + 1`
    /// positions, the last predicting `<eos>`.
    pub fn teacher_forced_predictions(&self, reference: &[usize], enc: &Encodings<T>) -> Result<TeacherForced> {
        let (input, _) = self.forcing_pair(reference)?;
        let mut g = Graph::frozen();
        let e = self.enc_constants(&mut g, enc);
        let logits = self.decoder_logits_in(&mut g, &e, &input)?;
        Ok(tf_from_logits(g.value(logits)))
    }
}

/// Row-wise softmax and argmax of a logits matrix.
pub fn tf_from_logits<T: Real>(logits: &Tensor<T>) -> TeacherForced {
    let mut argmax = Vec::with_capacity(logits.rows());
    let mut dists = Vec::with_capacity(logits.rows());
    for r in 0..logits.rows() {
        let mut row: Vec<f64> = logits.row(r).iter().map(|x| x.as_f64()).collect();
        softmax_in_place(&mut row);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        argmax.push(best);
        dists.push(row);
    }
    TeacherForced { argmax, dists }
}

/// Whether a parameter belongs to the end detector.
pub fn is_detector_param(name: &str) -> bool {
    name.starts_with(DETECTOR_PREFIX)
}
