//! Layer primitives built from graph operations, plus their parameter
//! initializers.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::graph::{AttnMask, Graph, Var};
use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{config_err, contract_err, shape_err, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = xW + b` row-wise.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

pub fn softmax<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.softmax(x)
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
    g.layer_norm(x, gain, bias, eps)
}

pub fn conv1d<T: Real>(g: &mut Graph<T>, x: Var, kernels: Var, same_padding: bool) -> Result<Var> {
    g.conv1d(x, kernels, same_padding)
}

/// Mean over the time axis, restricted to rows flagged valid when a mask is
/// given. Returns a rank-1 tensor.
pub fn mean_pool<T: Real>(g: &mut Graph<T>, x: Var, valid: Option<&[bool]>) -> Result<Var> {
    let rows = g.value(x).rows();
    let n_valid = match valid {
        Some(m) => {
            if m.len() != rows {
                return Err(shape_err!("pool mask {} vs {} rows", m.len(), rows));
            }
            m.iter().filter(|&&b| b).count()
        }
        None => rows,
    };
    if n_valid == 0 {
        return Err(contract_err!("mean_pool over zero frames"));
    }
    let w = T::lit(1.0 / n_valid as f64);
    let weights = (0..rows)
        .map(|r| if valid.is_none_or(|m| m[r]) { w } else { T::zero() })
        .collect();
    g.weighted_row_sum(x, weights)
}

/// Projection weights of one multi-head attention layer. Queries of width
/// `d_q` attend over keys/values of width `d_kv`; the attention width and the
/// output width equal `d_q`.
#[derive(Clone, Copy, Debug)]
pub struct MhaVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl MhaVars {
    pub fn bind<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let mut p = |s: &str| g.param(store, &format!("{prefix}.{s}"));
        Ok(MhaVars {
            wq: p("wq")?,
            bq: p("bq")?,
            wk: p("wk")?,
            bk: p("bk")?,
            wv: p("wv")?,
            bv: p("bv")?,
            wo: p("wo")?,
            bo: p("bo")?,
        })
    }
}

/// Multi-head attention: project, attend per head with scale `1/√(D/heads)`,
/// concatenate heads, project back.
pub fn mha<T: Real>(
    g: &mut Graph<T>,
    w: &MhaVars,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
    mask: Option<&AttnMask>,
) -> Result<Var> {
    let d = g.value(w.wq).cols();
    if heads == 0 || d % heads != 0 {
        return Err(config_err!("attention width {d} not divisible by {heads} heads"));
    }
    let q = linear(g, query, w.wq, w.bq)?;
    let k = linear(g, key, w.wk, w.bk)?;
    let v = linear(g, value, w.wv, w.bv)?;
    let o = g.attention(q, k, v, heads, mask)?;
    linear(g, o, w.wo, w.bo)
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnVars {
    pub fn bind<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let mut p = |s: &str| g.param(store, &format!("{prefix}.{s}"));
        Ok(FfnVars {
            w1: p("w1")?,
            b1: p("b1")?,
            w2: p("w2")?,
            b2: p("b2")?,
        })
    }
}

/// Position-wise two-layer network with ReLU between.
pub fn ffn_block<T: Real>(g: &mut Graph<T>, w: &FfnVars, x: Var) -> Result<Var> {
    let (din, hidden) = (g.value(w.w1).dims()[0], g.value(w.w1).dims()[1]);
    if hidden == 0 {
        return Err(config_err!("ffn hidden width must be at least 1"));
    }
    if g.value(x).cols() != din || g.value(w.w2).dims() != [hidden, din] {
        return Err(shape_err!("ffn weights do not match input width {}", g.value(x).cols()));
    }
    let h = linear(g, x, w.w1, w.b1)?;
    let h = g.relu(h);
    linear(g, h, w.w2, w.b2)
}

// ------------------------------------------------------------ initializers

/// Glorot-uniform matrix.
pub fn glorot<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, dims: &[usize]) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(dims.to_vec(), data).expect("dims match")
}

pub fn init_linear<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    w_name: &str,
    b_name: &str,
    din: usize,
    dout: usize,
) -> Result<()> {
    store.insert(w_name, glorot(rng, din, dout, &[din, dout]))?;
    store.insert(b_name, Tensor::zeros(&[dout]))
}

pub fn init_mha<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    d_q: usize,
    d_kv: usize,
) -> Result<()> {
    let p = |s: &str| format!("{prefix}.{s}");
    init_linear(store, rng, &p("wq"), &p("bq"), d_q, d_q)?;
    init_linear(store, rng, &p("wk"), &p("bk"), d_kv, d_q)?;
    init_linear(store, rng, &p("wv"), &p("bv"), d_kv, d_q)?;
    init_linear(store, rng, &p("wo"), &p("bo"), d_q, d_q)
}

pub fn init_ffn<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    d: usize,
    hidden: usize,
) -> Result<()> {
    let p = |s: &str| format!("{prefix}.{s}");
    init_linear(store, rng, &p("w1"), &p("b1"), d, hidden)?;
    init_linear(store, rng, &p("w2"), &p("b2"), hidden, d)
}

pub fn init_layer_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Tensor::filled(&[d], T::one()))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))
}

/// Binds and applies a named layer norm.
pub fn apply_layer_norm<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_identity_and_arithmetic() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::identity(2));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = linear(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let x = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let y = linear(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (xt, wt, bt) = (
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[5]),
        );
        let mut g = Graph::<f64>::inference();
        let (x, w, b) = (g.constant(xt.clone()), g.constant(wt.clone()), g.constant(bt.clone()));
        let y = linear(&mut g, x, w, b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut s = bt.data()[j];
                for k in 0..4 {
                    s += xt.at(i, k) * wt.at(k, j);
                }
                assert!((g.value(y).at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_rejects_mismatch() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[4, 2]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(linear(&mut g, x, w, b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_f64(&[2, 2], &[0.0, 0.0, 0.0, 3f64.ln()]).unwrap());
        let y = softmax(&mut g, x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12);
        assert!((v[2] - 0.25).abs() < 1e-12 && (v[3] - 0.75).abs() < 1e-12);

        let raw = [0.3, -1.2, 2.5, 0.0];
        let a = g.constant(Tensor::from_f64(&[4], &raw).unwrap());
        let shifted: Vec<f64> = raw.iter().map(|x| x + 123.0).collect();
        let b = g.constant(Tensor::from_f64(&[4], &shifted).unwrap());
        let (sa, sb) = (softmax(&mut g, a).unwrap(), softmax(&mut g, b).unwrap());
        assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-9);
        assert!((g.value(sa).data().iter().sum::<f64>() - 1.0).abs() < 1e-6);

        let e = g.constant(Tensor::zeros(&[2, 0]));
        assert!(softmax(&mut g, e).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::inference();
        let gain = g.constant(Tensor::filled(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let c = g.constant(Tensor::filled(&[1, 4], 2.5));
        let y = layer_norm(&mut g, c, gain, bias, LAYER_NORM_EPS).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));

        let gain2 = g.constant(Tensor::filled(&[2], 1.0));
        let bias2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::from_f64(&[1, 2], &[1.0, -1.0]).unwrap());
        let y = layer_norm(&mut g, x, gain2, bias2, 1e-12).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-9);
        assert!((g.value(y).data()[1] + 1.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = g.constant(rand_tensor(&mut rng, &[1, 4]).map(|v| v * 7.0 + 3.0));
        let y = layer_norm(&mut g, r, gain, bias, LAYER_NORM_EPS).unwrap();
        let v = g.value(y).data();
        let mean = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-7);
        assert!((var - 1.0).abs() < 1e-4);

        let z = g.constant(Tensor::zeros(&[1, 0]));
        let gz = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(
            layer_norm(&mut g, z, gz, gz, LAYER_NORM_EPS),
            Err(crate::Error::Shape(_))
        ));
    }

    fn identity_mha(g: &mut Graph<f64>, d: usize) -> MhaVars {
        let mut c = |t: Tensor<f64>| g.constant(t);
        MhaVars {
            wq: c(Tensor::identity(d)),
            bq: c(Tensor::zeros(&[d])),
            wk: c(Tensor::identity(d)),
            bk: c(Tensor::zeros(&[d])),
            wv: c(Tensor::identity(d)),
            bv: c(Tensor::zeros(&[d])),
            wo: c(Tensor::identity(d)),
            bo: c(Tensor::zeros(&[d])),
        }
    }

    #[test]
    fn mha_single_key_gets_full_weight() {
        let mut g = Graph::<f64>::inference();
        let w = identity_mha(&mut g, 4);
        let q = g.constant(Tensor::from_f64(&[3, 4], &[0.1; 12]).unwrap());
        let kv = g.constant(Tensor::from_f64(&[1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = mha(&mut g, &w, q, kv, kv, 2, None).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(y).row(r), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn mha_identical_keys_give_uniform_weights() {
        let mut g = Graph::<f64>::inference();
        let w = identity_mha(&mut g, 2);
        let q = g.constant(Tensor::from_f64(&[1, 2], &[0.7, -0.2]).unwrap());
        let k = g.constant(Tensor::from_f64(&[3, 2], &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap());
        let v = g.constant(Tensor::from_f64(&[3, 2], &[1.0, 0.0, 2.0, 0.0, 6.0, 3.0]).unwrap());
        let qq = g.matmul(q, w.wq).unwrap();
        let kk = g.matmul(k, w.wk).unwrap();
        let vv = g.matmul(v, w.wv).unwrap();
        let att = g.attention(qq, kk, vv, 1, None).unwrap();
        for p in g.attention_weights(att).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((g.value(att).data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn mha_two_position_hand_case() {
        // One head, D=2, identity projections: scores q·k/√2.
        let mut g = Graph::<f64>::inference();
        let w = identity_mha(&mut g, 2);
        let q = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let k = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = g.constant(Tensor::from_f64(&[2, 2], &[2.0, 0.0, 0.0, 4.0]).unwrap());
        let y = mha(&mut g, &w, q, k, v, 1, None).unwrap();
        let s0 = 1.0 / 2f64.sqrt();
        let s1 = 0.0f64;
        let z = s0.exp() + s1.exp();
        let (p0, p1) = (s0.exp() / z, s1.exp() / z);
        let expected = [2.0 * p0, 4.0 * p1];
        for (a, b) in g.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mha_all_true_mask_matches_unmasked_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        init_mha(&mut store, &mut rng, "m", 4, 6).unwrap();
        let mut g = Graph::<f64>::inference();
        let w = MhaVars::bind(&mut g, &store, "m").unwrap();
        let q = g.constant(rand_tensor(&mut rng, &[3, 4]));
        let kv = g.constant(rand_tensor(&mut rng, &[5, 6]));
        let a = mha(&mut g, &w, q, kv, kv, 2, None).unwrap();
        let mask = AttnMask::all(3, 5);
        let b = mha(&mut g, &w, q, kv, kv, 2, Some(&mask)).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn mha_masking_errors() {
        let mut g = Graph::<f64>::inference();
        let w = identity_mha(&mut g, 3);
        let x = g.constant(Tensor::filled(&[2, 3], 0.5));
        assert!(matches!(mha(&mut g, &w, x, x, x, 2, None), Err(crate::Error::Config(_))));
        let mask = AttnMask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert!(matches!(
            mha(&mut g, &w, x, x, x, 1, Some(&mask)),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn masked_positions_get_zero_weight_and_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f64>::inference();
        let q = g.constant(rand_tensor(&mut rng, &[4, 4]));
        let k = g.constant(rand_tensor(&mut rng, &[4, 4]));
        let mask = AttnMask::causal(4);
        let att = g.attention(q, k, k, 2, Some(&mask)).unwrap();
        let p = g.attention_weights(att).unwrap();
        for h in 0..2 {
            for i in 0..4 {
                let row = &p[(h * 4 + i) * 4..(h * 4 + i + 1) * 4];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for (j, &w) in row.iter().enumerate() {
                    if j > i {
                        assert_eq!(w, 0.0);
                    }
                }
            }
        }
    }

    fn ffn_consts(g: &mut Graph<f64>, w1: Tensor<f64>, b1: Tensor<f64>, w2: Tensor<f64>, b2: Tensor<f64>) -> FfnVars {
        FfnVars {
            w1: g.constant(w1),
            b1: g.constant(b1),
            w2: g.constant(w2),
            b2: g.constant(b2),
        }
    }

    #[test]
    fn ffn_examples() {
        let mut g = Graph::<f64>::inference();
        let w = ffn_consts(
            &mut g,
            Tensor::zeros(&[3, 5]),
            Tensor::zeros(&[5]),
            Tensor::zeros(&[5, 3]),
            Tensor::zeros(&[3]),
        );
        let x = g.constant(Tensor::filled(&[2, 3], 1.5));
        let y = ffn_block(&mut g, &w, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        // pre-activations [-1.5, 3] -> relu [0, 3] -> 3*0.5 + 0.1
        let w = ffn_consts(
            &mut g,
            Tensor::from_f64(&[1, 2], &[-2.0, 3.0]).unwrap(),
            Tensor::from_f64(&[2], &[0.5, 0.0]).unwrap(),
            Tensor::from_f64(&[2, 1], &[5.0, 0.5]).unwrap(),
            Tensor::from_f64(&[1], &[0.1]).unwrap(),
        );
        let x = g.constant(Tensor::from_f64(&[1, 1], &[1.0]).unwrap());
        let y = ffn_block(&mut g, &w, x).unwrap();
        assert!((g.value(y).data()[0] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn ffn_is_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        init_ffn(&mut store, &mut rng, "f", 3, 6).unwrap();
        let xt = rand_tensor(&mut rng, &[4, 3]);
        let perm = [2, 0, 3, 1];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&r| xt.row(r).to_vec()).collect();
        let xp = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::<f64>::inference();
        let w = FfnVars::bind(&mut g, &store, "f").unwrap();
        let (a, b) = (g.constant(xt), g.constant(xp));
        let (ya, yb) = (ffn_block(&mut g, &w, a).unwrap(), ffn_block(&mut g, &w, b).unwrap());
        for (i, &r) in perm.iter().enumerate() {
            assert_eq!(g.value(yb).row(i), g.value(ya).row(r));
        }
    }

    #[test]
    fn conv1d_examples() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_f64(&[3, 2], &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap());
        let ident = g.constant(Tensor::identity(2).reshape(&[1, 2, 2]).unwrap());
        let y = conv1d(&mut g, x, ident, true).unwrap();
        assert_eq!(g.value(y), g.value(x));

        // Box kernel of width 3, per channel.
        let mut k = vec![0.0; 3 * 2 * 2];
        for kk in 0..3 {
            k[kk * 4] = 1.0;
            k[kk * 4 + 3] = 1.0;
        }
        let boxk = g.constant(Tensor::from_f64(&[3, 2, 2], &k).unwrap());
        let y = conv1d(&mut g, x, boxk, true).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 9.0, 6.0, 15.0, 5.0, 11.0]);

        let x2 = g.constant(g.value(x).map(|v| v * 2.5));
        let y2 = conv1d(&mut g, x2, boxk, true).unwrap();
        assert!(g.value(y2).max_abs_diff(&g.value(y).map(|v| v * 2.5)) < 1e-9);

        let e = g.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(conv1d(&mut g, e, boxk, true), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn mean_pool_examples() {
        let mut g = Graph::<f64>::inference();
        let c = g.constant(Tensor::filled(&[5, 3], 0.25));
        let y = mean_pool(&mut g, c, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, 0.25, 0.25]);
        let x = g.constant(Tensor::from_f64(&[2, 1], &[1.0, 3.0]).unwrap());
        let y = mean_pool(&mut g, x, None).unwrap();
        assert_eq!(g.value(y).data(), &[2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = rand_tensor(&mut rng, &[7, 3]);
        let x = g.constant(t.clone());
        let y = mean_pool(&mut g, x, None).unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            for r in 0..7 {
                s += t.at(r, c);
            }
            assert!((g.value(y).data()[c] - s / 7.0).abs() < 1e-12);
        }

        let e = g.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(mean_pool(&mut g, e, None), Err(crate::Error::Contract(_))));
        let m = [false; 7];
        assert!(mean_pool(&mut g, x, Some(&m)).is_err());
    }
}
