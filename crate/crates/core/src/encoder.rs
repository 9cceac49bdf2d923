//! Small Pre-LN Transformer encoder with sinusoidal positions, a learned mask
//! embedding and the linear predictor head `U`.
//!
//! Utterances are packed row-wise into one matrix; attention never crosses
//! segment boundaries, so no padding is needed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{Graph, ParameterStore, Segment, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub causal: bool,
}

impl EncoderConfig {
    /// 2 layers of width 64 with 4 heads.
    pub fn desk(input_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
            causal: false,
        }
    }

    /// 12 layers of width 768.
    pub fn base(input_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            layers: 12,
            model_dim: 768,
            heads: 6,
            ffn_dim: 3072,
            dropout: 0.1,
            causal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_dim >= 1, InvalidArgument, "input_dim must be positive");
        ensure!(self.model_dim >= 1 && self.ffn_dim >= 1, InvalidArgument, "widths must be positive");
        ensure!(
            self.heads >= 1 && self.model_dim.is_multiple_of(self.heads),
            InvalidArgument,
            "{} heads do not divide model_dim {}",
            self.heads,
            self.model_dim
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            InvalidArgument,
            "dropout must be in [0, 1)"
        );
        Ok(())
    }
}

pub const MASK_EMB: &str = "mask_emb";
pub const HEAD_U: &str = "head.u";

fn lname(l: usize, part: &str) -> String {
    format!("layers.{l}.{part}")
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let n = Normal::new(0.0, std).expect("positive std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect())
}

/// Registers encoder parameters (input projection, mask embedding, blocks,
/// final layer norm) in `store`.
pub fn init_encoder(store: &mut ParameterStore, cfg: &EncoderConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h, f) = (cfg.input_dim, cfg.model_dim, cfg.ffn_dim);
    let w = |rng: &mut ChaCha8Rng, r: usize, c: usize| normal_matrix(rng, r, c, (1.0 / r as f64).sqrt());
    store.insert("input_proj.weight", w(&mut rng, d, h), true)?;
    store.insert("input_proj.bias", Tensor::zeros(&[1, h]), true)?;
    let mask: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
    store.insert(MASK_EMB, Tensor::matrix(1, d, mask), true)?;
    for l in 0..cfg.layers {
        for ln in ["ln1", "ln2"] {
            store.insert(lname(l, &format!("{ln}.gamma")), Tensor::full(&[1, h], 1.0), true)?;
            store.insert(lname(l, &format!("{ln}.beta")), Tensor::zeros(&[1, h]), true)?;
        }
        for m in ["wq", "wk", "wv", "wo"] {
            store.insert(lname(l, &format!("attn.{m}")), w(&mut rng, h, h), true)?;
            store.insert(lname(l, &format!("attn.b{}", &m[1..])), Tensor::zeros(&[1, h]), true)?;
        }
        store.insert(lname(l, "ffn.w1"), w(&mut rng, h, f), true)?;
        store.insert(lname(l, "ffn.b1"), Tensor::zeros(&[1, f]), true)?;
        store.insert(lname(l, "ffn.w2"), w(&mut rng, f, h), true)?;
        store.insert(lname(l, "ffn.b2"), Tensor::zeros(&[1, h]), true)?;
    }
    store.insert("final_ln.gamma", Tensor::full(&[1, h], 1.0), true)?;
    store.insert("final_ln.beta", Tensor::zeros(&[1, h]), true)?;
    Ok(())
}

/// Registers the `K x h` predictor matrix `U`.
pub fn init_head(store: &mut ParameterStore, k: usize, model_dim: usize, seed: u64) -> Result<()> {
    ensure!(k >= 1, InvalidArgument, "K must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.insert(HEAD_U, normal_matrix(&mut rng, k, model_dim, (1.0 / model_dim as f64).sqrt()), true)
}

/// Sinusoidal position table for positions `0..len`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let a = p as f64 * freq;
            data[p * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::matrix(len, dim, data)
}

/// Packed encoder input.
pub struct EncodeInput<'a> {
    /// `[n, d]`, utterances stacked row-wise.
    pub frames: &'a Tensor,
    pub segments: &'a [Segment],
    /// Packed row indices replaced by the mask embedding.
    pub masked: &'a [usize],
    /// Rows that may be attended to; `None` means all.
    pub key_valid: Option<&'a [bool]>,
    /// Dropout is applied only when a generator is supplied.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> EncodeInput<'a> {
    pub fn eval(frames: &'a Tensor, segments: &'a [Segment]) -> Self {
        EncodeInput {
            frames,
            segments,
            masked: &[],
            key_valid: None,
            dropout_rng: None,
        }
    }
}

pub struct EncoderOutput {
    /// Entry 0 is the input projection, entry `l` the output of block `l`
    /// (the last one after the final layer norm).
    pub layers: Vec<Var>,
}

impl EncoderOutput {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least the projection layer")
    }
}

fn dropout(g: &mut Graph, x: Var, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => {
            let t = g.value(x);
            let keep = 1.0 / (1.0 - p);
            let data = (0..t.numel())
                .map(|_| if r.gen_bool(p) { 0.0 } else { keep })
                .collect();
            let m = g.constant(Tensor::matrix(t.rows(), t.cols(), data));
            g.mul(x, m)
        }
        _ => Ok(x),
    }
}

fn linear(g: &mut Graph, store: &ParameterStore, x: Var, w: &str, b: &str) -> Result<Var> {
    let wv = g.param(store, w)?;
    let bv = g.param(store, b)?;
    let y = g.matmul(x, wv)?;
    g.add_row(y, bv)
}

fn layer_norm(g: &mut Graph, store: &ParameterStore, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

pub fn encode(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    mut input: EncodeInput<'_>,
) -> Result<EncoderOutput> {
    cfg.validate()?;
    let n = input.frames.rows();
    if input.frames.cols() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "frames have {} dims, encoder expects {}",
            input.frames.cols(),
            cfg.input_dim
        )));
    }
    let covered: usize = input.segments.iter().map(|s| s.len).sum();
    ensure!(covered == n, Shape, "segments cover {covered} of {n} rows");
    let h = cfg.model_dim;

    let mut x = g.constant(input.frames.clone());
    if !input.masked.is_empty() {
        let m = g.param(store, MASK_EMB)?;
        x = g.substitute_rows(x, m, input.masked)?;
    }
    let proj = linear(g, store, x, "input_proj.weight", "input_proj.bias")?;
    let proj = dropout(g, proj, cfg.dropout, &mut input.dropout_rng)?;
    let mut layers = vec![proj];

    let mut pos = Vec::with_capacity(n * h);
    for s in input.segments {
        pos.extend_from_slice(sinusoidal_positions(s.len, h).data());
    }
    let pos = g.constant(Tensor::matrix(n, h, pos));
    let mut x = g.add(proj, pos)?;

    for l in 0..cfg.layers {
        let a = layer_norm(g, store, x, &lname(l, "ln1"))?;
        let q = linear(g, store, a, &lname(l, "attn.wq"), &lname(l, "attn.bq"))?;
        let k = linear(g, store, a, &lname(l, "attn.wk"), &lname(l, "attn.bk"))?;
        let v = linear(g, store, a, &lname(l, "attn.wv"), &lname(l, "attn.bv"))?;
        let att = g.attention(q, k, v, cfg.heads, input.segments, cfg.causal, input.key_valid)?;
        let o = linear(g, store, att, &lname(l, "attn.wo"), &lname(l, "attn.bo"))?;
        let o = dropout(g, o, cfg.dropout, &mut input.dropout_rng)?;
        x = g.add(x, o)?;

        let f = layer_norm(g, store, x, &lname(l, "ln2"))?;
        let f = linear(g, store, f, &lname(l, "ffn.w1"), &lname(l, "ffn.b1"))?;
        let f = g.gelu(f);
        let f = linear(g, store, f, &lname(l, "ffn.w2"), &lname(l, "ffn.b2"))?;
        let f = dropout(g, f, cfg.dropout, &mut input.dropout_rng)?;
        x = g.add(x, f)?;
        if l + 1 < cfg.layers {
            layers.push(x);
        }
    }
    let last = layer_norm(g, store, x, "final_ln")?;
    layers.push(last);
    Ok(EncoderOutput { layers })
}

/// `[T, K]` logits `<hidden_i, u_k>` on the graph.
pub fn predictor_logits_var(g: &mut Graph, store: &ParameterStore, hidden: Var) -> Result<Var> {
    let u = g.param(store, HEAD_U)?;
    g.matmul_t(hidden, u, false, true)
}

/// `[T, K]` logits `<hidden_i, u_k>`.
pub fn predictor_logits(hidden: &Tensor, u: &Tensor) -> Result<Tensor> {
    if hidden.cols() != u.cols() {
        return Err(Error::Shape(format!(
            "hidden width {} vs head width {}",
            hidden.cols(),
            u.cols()
        )));
    }
    let mut g = Graph::new();
    let hv = g.constant(hidden.clone());
    let uv = g.constant(u.clone());
    let out = g.matmul_t(hv, uv, false, true)?;
    Ok(g.value(out).clone())
}

/// Evaluation-mode hidden states for one sequence, all layers.
pub fn encode_sequence(
    store: &ParameterStore,
    cfg: &EncoderConfig,
    frames: &Tensor,
    masked: &[usize],
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let segs = [Segment {
        start: 0,
        len: frames.rows(),
    }];
    let mut input = EncodeInput::eval(frames, &segs);
    input.masked = masked;
    let out = encode(&mut g, store, cfg, input)?;
    Ok(out.layers.iter().map(|&v| g.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(causal: bool) -> (EncoderConfig, ParameterStore) {
        let cfg = EncoderConfig {
            input_dim: 3,
            layers: 2,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
            causal,
        };
        let mut store = ParameterStore::new();
        init_encoder(&mut store, &cfg, 1).unwrap();
        (cfg, store)
    }

    fn frames(seed: u64, t: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal_matrix(&mut rng, t, 3, 1.0)
    }

    #[test]
    fn rejects_bad_configs_and_shapes() {
        let mut cfg = EncoderConfig::desk(40);
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
        let (cfg, store) = tiny(false);
        assert!(encode_sequence(&store, &cfg, &Tensor::zeros(&[4, 2]), &[]).is_err());
    }

    #[test]
    fn preserves_length_and_layer_count() {
        let (cfg, store) = tiny(false);
        let out = encode_sequence(&store, &cfg, &frames(0, 7), &[]).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|t| t.shape() == [7, 8]));
    }

    #[test]
    fn causal_prefix_is_unchanged_bitwise() {
        let (cfg, store) = tiny(true);
        let x = frames(2, 9);
        let base = encode_sequence(&store, &cfg, &x, &[]).unwrap();
        for j in 0..9 {
            let mut y = x.clone();
            y.row_mut(j)[1] += 0.5;
            let out = encode_sequence(&store, &cfg, &y, &[]).unwrap();
            for (a, b) in out.iter().zip(&base) {
                assert_eq!(&a.data()[..j * 8], &b.data()[..j * 8]);
                assert_ne!(a.row(j), b.row(j));
            }
        }
    }

    #[test]
    fn bidirectional_perturbation_reaches_every_position() {
        let (cfg, store) = tiny(false);
        let x = frames(3, 6);
        let base = encode_sequence(&store, &cfg, &x, &[]).unwrap();
        let mut y = x.clone();
        y.row_mut(5)[0] += 0.3;
        let out = encode_sequence(&store, &cfg, &y, &[]).unwrap();
        for i in 0..6 {
            assert_ne!(out[2].row(i), base[2].row(i));
        }
    }

    #[test]
    fn fully_masked_input_forgets_the_frames() {
        let (cfg, store) = tiny(false);
        let all: Vec<usize> = (0..5).collect();
        let a = encode_sequence(&store, &cfg, &frames(4, 5), &all).unwrap();
        let b = encode_sequence(&store, &cfg, &frames(5, 5), &all).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn packed_segments_do_not_interact() {
        let (cfg, store) = tiny(false);
        let (x1, x2) = (frames(6, 4), frames(7, 5));
        let alone = encode_sequence(&store, &cfg, &x1, &[]).unwrap();
        let packed = Tensor::vstack(&[&x1, &x2]).unwrap();
        let segs = [Segment { start: 0, len: 4 }, Segment { start: 4, len: 5 }];
        let mut g = Graph::new();
        let out = encode(&mut g, &store, &cfg, EncodeInput::eval(&packed, &segs)).unwrap();
        let last = g.value(out.last());
        for i in 0..4 {
            for (a, b) in last.row(i).iter().zip(alone[2].row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padding_rows_never_leak() {
        let (cfg, store) = tiny(false);
        let x = frames(8, 6);
        let valid = [true, true, true, true, false, false];
        let segs = [Segment { start: 0, len: 6 }];
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let mut input = EncodeInput::eval(x, &segs);
            input.key_valid = Some(&valid);
            let out = encode(&mut g, &store, &cfg, input).unwrap();
            g.value(out.last()).clone()
        };
        let base = run(&x);
        let mut y = x.clone();
        y.row_mut(4)[0] = 100.0;
        y.row_mut(5)[2] = -7.0;
        assert_eq!(&run(&y).data()[..4 * 8], &base.data()[..4 * 8]);
    }

    #[test]
    fn predictor_logit_examples() {
        let u = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let l = predictor_logits(&Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]), &u).unwrap();
        assert_eq!(l.data(), &[1.0, 0.0, 0.0]);
        let z = predictor_logits(&Tensor::zeros(&[1, 3]), &u).unwrap();
        let lp = crate::numerics::log_softmax(z.data());
        assert!(lp.iter().all(|v| (v + 3f64.ln()).abs() < 1e-15));
        assert!(predictor_logits(&Tensor::zeros(&[1, 2]), &u).is_err());
    }

    #[test]
    fn dropout_is_seeded_and_train_only() {
        let (mut cfg, store) = tiny(false);
        cfg.dropout = 0.5;
        let x = frames(9, 5);
        let segs = [Segment { start: 0, len: 5 }];
        let run = |seed: Option<u64>| {
            let mut g = Graph::new();
            let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
            let mut input = EncodeInput::eval(&x, &segs);
            input.dropout_rng = rng.as_mut();
            let out = encode(&mut g, &store, &cfg, input).unwrap();
            g.value(out.last()).clone()
        };
        assert_eq!(run(None), run(None));
        assert_eq!(run(Some(1)), run(Some(1)));
        assert_ne!(run(Some(1)), run(None));
    }
}
