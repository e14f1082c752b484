//! Graph builders for the encoder, end detector and decoder.

use super::{Model, EOS};
use crate::compute::{
    apply_layer_norm, ffn_block, linear, mean_pool, mha, AttnMask, FfnVars, Graph, MhaVars, Real,
    Tensor, Var,
};
use crate::error::{contract_err, shape_err, Result};

/// Encoder outputs living on a graph, with per-frame validity.
#[derive(Clone, Debug)]
pub struct EncVars {
    pub audio: Var,
    pub visual: Var,
    pub audio_valid: Vec<bool>,
    pub visual_valid: Vec<bool>,
}

/// Fixed sinusoidal position table `[t × d]`.
pub fn positional_encoding<T: Real>(t: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(t * d);
    for pos in 0..t {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            data.push(T::lit(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(vec![t, d], data).expect("dims match")
}

fn mask_values<T: Real>(valid: &[bool]) -> Vec<T> {
    valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect()
}

impl<T: Real> Model<T> {
    fn with_position(&self, g: &mut Graph<T>, x: &Tensor<T>, width: usize, what: &str) -> Result<Var> {
        if x.rank() != 2 || x.cols() != width {
            return Err(shape_err!("{what} features {:?}, want width {width}", x.dims()));
        }
        let v = g.constant(x.clone());
        let pe = g.constant(positional_encoding(x.rows(), width));
        g.add(v, pe)
    }

    /// Residual sublayer output `x + dropout(y)`.
    fn residual(&self, g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
        let y = g.dropout(y)?;
        g.add(x, y)
    }

    pub fn encode_in(
        &self,
        g: &mut Graph<T>,
        audio: &Tensor<T>,
        visual: &Tensor<T>,
        audio_valid: Option<&[bool]>,
        visual_valid: Option<&[bool]>,
    ) -> Result<EncVars> {
        let c = &self.config;
        if audio.rows() == 0 || visual.rows() == 0 || audio.rank() != 2 || visual.rank() != 2 {
            return Err(contract_err!(
                "encode needs both modalities, got audio {:?} visual {:?}",
                audio.dims(),
                visual.dims()
            ));
        }
        let (ta, tv) = (audio.rows(), visual.rows());
        let av = audio_valid.map_or_else(|| vec![true; ta], <[bool]>::to_vec);
        let vv = visual_valid.map_or_else(|| vec![true; tv], <[bool]>::to_vec);
        if av.len() != ta || vv.len() != tv {
            return Err(shape_err!("frame masks do not match feature lengths"));
        }
        if !av.iter().any(|&b| b) || !vv.iter().any(|&b| b) {
            return Err(contract_err!("encode needs at least one valid frame per modality"));
        }
        let a_self = AttnMask::key_padding(ta, &av);
        let v_self = AttnMask::key_padding(tv, &vv);
        let a_cross = AttnMask::key_padding(ta, &vv);
        let v_cross = AttnMask::key_padding(tv, &av);

        let p = &self.params;
        let mut a = self.with_position(g, audio, c.d_audio, "audio")?;
        let mut v = self.with_position(g, visual, c.d_visual, "visual")?;
        for n in 0..c.n_enc {
            let pre = format!("enc.{n}");

            let x = apply_layer_norm(g, p, &format!("{pre}.ln_a1"), a)?;
            let w = MhaVars::bind(g, p, &format!("{pre}.a_self"))?;
            let y = mha(g, &w, x, x, x, c.heads, Some(&a_self))?;
            a = self.residual(g, a, y)?;

            let x = apply_layer_norm(g, p, &format!("{pre}.ln_v1"), v)?;
            let w = MhaVars::bind(g, p, &format!("{pre}.v_self"))?;
            let y = mha(g, &w, x, x, x, c.heads, Some(&v_self))?;
            v = self.residual(g, v, y)?;

            let an = apply_layer_norm(g, p, &format!("{pre}.ln_a2"), a)?;
            let vn = apply_layer_norm(g, p, &format!("{pre}.ln_v2"), v)?;
            let w = MhaVars::bind(g, p, &format!("{pre}.a_cross"))?;
            let ya = mha(g, &w, an, vn, vn, c.heads, Some(&a_cross))?;
            let w = MhaVars::bind(g, p, &format!("{pre}.v_cross"))?;
            let yv = mha(g, &w, vn, an, an, c.heads, Some(&v_cross))?;
            a = self.residual(g, a, ya)?;
            v = self.residual(g, v, yv)?;

            let x = apply_layer_norm(g, p, &format!("{pre}.ln_a3"), a)?;
            let w = FfnVars::bind(g, p, &format!("{pre}.ffn_a"))?;
            let y = ffn_block(g, &w, x)?;
            a = self.residual(g, a, y)?;

            let x = apply_layer_norm(g, p, &format!("{pre}.ln_v3"), v)?;
            let w = FfnVars::bind(g, p, &format!("{pre}.ffn_v"))?;
            let y = ffn_block(g, &w, x)?;
            v = self.residual(g, v, y)?;
        }
        let audio = apply_layer_norm(g, p, "enc.ln_a", a)?;
        let visual = apply_layer_norm(g, p, "enc.ln_v", v)?;
        Ok(EncVars {
            audio,
            visual,
            audio_valid: av,
            visual_valid: vv,
        })
    }

    /// Places precomputed encodings on a graph as constants.
    pub fn enc_constants(&self, g: &mut Graph<T>, enc: &super::Encodings<T>) -> EncVars {
        EncVars {
            audio: g.constant(enc.audio.clone()),
            visual: g.constant(enc.visual.clone()),
            audio_valid: enc.audio_valid.clone(),
            visual_valid: enc.visual_valid.clone(),
        }
    }

    fn conv_stack(&self, g: &mut Graph<T>, x: Var, valid: &[bool], m: &str) -> Result<Var> {
        let p = &self.params;
        let keep = mask_values::<T>(valid);
        let mut h = g.scale_rows(x, keep.clone())?;
        for layer in 1..=2 {
            let w = g.param(p, &format!("det.conv_{m}{layer}.w"))?;
            let b = g.param(p, &format!("det.conv_{m}{layer}.b"))?;
            let y = g.conv1d(h, w, true)?;
            let y = g.add_bias(y, b)?;
            h = if layer == 1 { g.relu(y) } else { y };
            h = g.scale_rows(h, keep.clone())?;
        }
        mean_pool(g, h, Some(valid))
    }

    /// End-detector probability as a one-element tensor.
    pub fn detect_in(&self, g: &mut Graph<T>, enc: &EncVars) -> Result<Var> {
        let pa = self.conv_stack(g, enc.audio, &enc.audio_valid, "a")?;
        let pv = self.conv_stack(g, enc.visual, &enc.visual_valid, "v")?;
        let h = g.concat_cols(&[pa, pv])?;
        let h = g.reshape(h, &[1, 2 * self.config.det_channels])?;
        let w = FfnVars::bind(g, &self.params, "det.ffn")?;
        let hid = linear(g, h, w.w1, w.b1)?;
        let hid = g.relu(hid);
        let logit = linear(g, hid, w.w2, w.b2)?;
        let logit = g.reshape(logit, &[1])?;
        Ok(g.sigmoid(logit))
    }

    /// Decoder logits `[L × vocab]` for input tokens `[L]`, causally masked.
    pub fn decoder_logits_in(&self, g: &mut Graph<T>, enc: &EncVars, tokens: &[usize]) -> Result<Var> {
        let c = &self.config;
        let p = &self.params;
        let l = tokens.len();
        if l == 0 {
            return Err(contract_err!("decoder needs at least the start token"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(contract_err!("token id {bad} outside vocabulary of {}", c.vocab_size));
        }
        let table = g.param(p, "dec.embed")?;
        let e = g.embedding(table, tokens)?;
        let pe = g.constant(positional_encoding(l, c.d_embed));
        let mut y = g.add(e, pe)?;
        let causal = AttnMask::causal(l);
        let src_a = AttnMask::key_padding(l, &enc.audio_valid);
        let src_v = AttnMask::key_padding(l, &enc.visual_valid);
        for m in 0..c.n_dec {
            let pre = format!("dec.{m}");
            let x = apply_layer_norm(g, p, &format!("{pre}.ln1"), y)?;
            let w = MhaVars::bind(g, p, &format!("{pre}.self"))?;
            let s = mha(g, &w, x, x, x, c.heads, Some(&causal))?;
            y = self.residual(g, y, s)?;

            let x = apply_layer_norm(g, p, &format!("{pre}.ln2"), y)?;
            let w = MhaVars::bind(g, p, &format!("{pre}.src_a"))?;
            let ya = mha(g, &w, x, enc.audio, enc.audio, c.heads, Some(&src_a))?;
            let w = MhaVars::bind(g, p, &format!("{pre}.src_v"))?;
            let yv = mha(g, &w, x, enc.visual, enc.visual, c.heads, Some(&src_v))?;
            let cat = g.concat_cols(&[ya, yv])?;
            let fw = g.param(p, &format!("{pre}.fuse.w"))?;
            let fb = g.param(p, &format!("{pre}.fuse.b"))?;
            let fused = linear(g, cat, fw, fb)?;
            y = self.residual(g, y, fused)?;

            let x = apply_layer_norm(g, p, &format!("{pre}.ln3"), y)?;
            let w = FfnVars::bind(g, p, &format!("{pre}.ffn"))?;
            let f = ffn_block(g, &w, x)?;
            y = self.residual(g, y, f)?;
        }
        let y = apply_layer_norm(g, p, "dec.ln", y)?;
        let ow = g.param(p, "dec.out.w")?;
        let ob = g.param(p, "dec.out.b")?;
        linear(g, y, ow, ob)
    }

    /// Teacher-forcing input and targets for a reference caption:
    /// `[<sos>, y…]` and `[y…, <eos>]`.
    pub fn forcing_pair(&self, reference: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        if reference.is_empty() {
            return Err(contract_err!("teacher forcing needs a nonempty reference"));
        }
        if reference.len() > self.config.max_decode_len {
            return Err(contract_err!(
                "reference of {} tokens exceeds max_decode_len {}",
                reference.len(),
                self.config.max_decode_len
            ));
        }
        let mut input = Vec::with_capacity(reference.len() + 1);
        input.push(super::SOS);
        input.extend_from_slice(reference);
        let mut target = reference.to_vec();
        target.push(EOS);
        Ok((input, target))
    }
}
