//! Diagonal-masked multi-head self-attention and the encoder layer built on it.
//!
//! Inputs are stacked series: `[batch·seq_len × d_model]`. Each head scores
//! `K·Qᵀ/√d_k + DM`, normalises rows with sparsegen-lin (or softmax for the
//! dense baseline) and mixes `V`. The diagonal mask `DM` puts the sentinel on
//! `(i, i)` so no timestep can attend to itself.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Normalizer, Tape, Var};
use crate::tensor::{Tensor, MASK_SENTINEL};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Sparse,
    Softmax,
}

impl AttentionKind {
    pub fn normalizer(self, lambda: f64) -> Normalizer {
        match self {
            AttentionKind::Sparse => Normalizer::Sparsegen(lambda),
            AttentionKind::Softmax => Normalizer::Softmax,
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(AttentionKind::Sparse),
            "softmax" => Ok(AttentionKind::Softmax),
            other => Err(Error::Config(format!("unknown attention kind `{other}`"))),
        }
    }
}

/// Additive `[n×n]` mask with the sentinel on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalMask {
    n: usize,
    matrix: Tensor,
}

impl DiagonalMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// All-zero mask of the same size, for the no-mask ablation.
    pub fn disabled(n: usize) -> Tensor {
        Tensor::zeros(&[n, n])
    }
}

pub fn diagonal_mask(n: usize) -> Result<DiagonalMask> {
    if n < 2 {
        return Err(Error::contract(format!(
            "diagonal mask needs at least 2 timesteps, got {n}"
        )));
    }
    let mut matrix = Tensor::zeros(&[n, n]);
    for i in 0..n {
        matrix.data_mut()[i * n + i] = MASK_SENTINEL;
    }
    Ok(DiagonalMask { n, matrix })
}

/// Sinusoidal position table `[n × d_model]`.
pub fn positional_encoding(n: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::contract(format!(
            "positional encoding needs an even width, got {d_model}"
        )));
    }
    let mut out = vec![0.0; n * d_model];
    for pos in 0..n {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            out[pos * d_model + 2 * i] = angle.sin();
            out[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![n, d_model], out)
}

/// Parameters of one encoder layer. `T` is a parameter index in the owning
/// model or a [`Var`] once registered on a tape.
///
/// `w_q`, `w_k`, `w_v` are `[d_model × d_model]` with head `h` occupying
/// columns `h·d_k .. (h+1)·d_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLayer<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
}

impl<T: Copy> EncoderLayer<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> EncoderLayer<U> {
        EncoderLayer {
            w_q: f(self.w_q),
            w_k: f(self.w_k),
            w_v: f(self.w_v),
            w_o: f(self.w_o),
            ln1_gamma: f(self.ln1_gamma),
            ln1_beta: f(self.ln1_beta),
            ln2_gamma: f(self.ln2_gamma),
            ln2_beta: f(self.ln2_beta),
            ffn_w1: f(self.ffn_w1),
            ffn_b1: f(self.ffn_b1),
            ffn_w2: f(self.ffn_w2),
            ffn_b2: f(self.ffn_b2),
        }
    }

    pub fn named(&self) -> [(&'static str, T); 12] {
        [
            ("w_q", self.w_q),
            ("w_k", self.w_k),
            ("w_v", self.w_v),
            ("w_o", self.w_o),
            ("ln1_gamma", self.ln1_gamma),
            ("ln1_beta", self.ln1_beta),
            ("ln2_gamma", self.ln2_gamma),
            ("ln2_beta", self.ln2_beta),
            ("ffn_w1", self.ffn_w1),
            ("ffn_b1", self.ffn_b1),
            ("ffn_w2", self.ffn_w2),
            ("ffn_b2", self.ffn_b2),
        ]
    }
}

/// Shapes of every tensor in an encoder layer, in [`EncoderLayer::named`] order.
pub fn encoder_layer_shapes(d_model: usize) -> [Vec<usize>; 12] {
    let d = d_model;
    let ff = 4 * d_model;
    [
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d],
        vec![d],
        vec![d, ff],
        vec![ff],
        vec![ff, d],
        vec![d],
    ]
}

/// Per-forward settings shared by all layers.
#[derive(Debug, Clone)]
pub struct AttentionSettings<'m> {
    pub heads: usize,
    pub seq_len: usize,
    pub normalizer: Normalizer,
    /// Additive `[seq_len × seq_len]` mask; the diagonal mask unless ablated.
    pub mask: &'m Tensor,
}

/// Inverted dropout with seed-driven masks. `None` rate or rate 0 disables it.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let shape = tape.value(x).shape().to_vec();
        let keep = 1.0 - self.rate;
        let n = tape.value(x).len();
        let factors = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let factors = Tensor::new(shape, factors)?;
        tape.mul_const(x, &factors)
    }
}

pub struct AttentionOutput {
    pub output: Var,
    /// `[batch·heads, seq_len, seq_len]` row-normalised weights.
    pub weights: Var,
}

/// Multi-head masked self-attention followed by the output projection.
pub fn sparse_self_attention(
    tape: &mut Tape,
    x: Var,
    layer: &EncoderLayer<Var>,
    settings: &AttentionSettings<'_>,
) -> Result<AttentionOutput> {
    let (_, d_model) = tape.value(x).dims2();
    if settings.heads == 0 || d_model % settings.heads != 0 {
        return Err(Error::Config(format!(
            "d_model {d_model} is not divisible by {} heads",
            settings.heads
        )));
    }
    if settings.mask.dims2() != (settings.seq_len, settings.seq_len) {
        return Err(Error::Shape {
            op: "sparse_self_attention",
            left: settings.mask.shape().to_vec(),
            right: vec![settings.seq_len, settings.seq_len],
        });
    }
    let q = tape.matmul(x, layer.w_q)?;
    let k = tape.matmul(x, layer.w_k)?;
    let v = tape.matmul(x, layer.w_v)?;
    let scores = tape.head_scores(k, q, settings.seq_len, settings.heads)?;
    let weights = tape.attention_weights(scores, settings.mask, settings.normalizer)?;
    let mixed = tape.head_mix(weights, v, settings.seq_len, settings.heads)?;
    let output = tape.matmul(mixed, layer.w_o)?;
    Ok(AttentionOutput { output, weights })
}

/// Pre-norm encoder layer:
/// `h = x + Drop(Attn(LN(x)))`, `out = h + Drop(FFN(LN(h)))`, FFN width `4·d_model`.
pub fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    layer: &EncoderLayer<Var>,
    settings: &AttentionSettings<'_>,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<AttentionOutput> {
    let normed = tape.layer_norm(x, layer.ln1_gamma, layer.ln1_beta, LAYER_NORM_EPS)?;
    let attn = sparse_self_attention(tape, normed, layer, settings)?;
    let mut a = attn.output;
    if let Some(d) = dropout.as_deref_mut() {
        a = d.apply(tape, a)?;
    }
    let h = tape.add(x, a)?;

    let normed = tape.layer_norm(h, layer.ln2_gamma, layer.ln2_beta, LAYER_NORM_EPS)?;
    let f = tape.matmul(normed, layer.ffn_w1)?;
    let f = tape.add_bias(f, layer.ffn_b1)?;
    let f = tape.relu(f)?;
    let f = tape.matmul(f, layer.ffn_w2)?;
    let mut f = tape.add_bias(f, layer.ffn_b2)?;
    if let Some(d) = dropout.as_deref_mut() {
        f = d.apply(tape, f)?;
    }
    let output = tape.add(h, f)?;
    Ok(AttentionOutput {
        output,
        weights: attn.weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::sparsegen_lin;
    use crate::tensor::{matmul, transpose};
    use rand::SeedableRng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    fn random_layer(rng: &mut ChaCha8Rng, d: usize) -> EncoderLayer<Tensor> {
        let shapes = encoder_layer_shapes(d);
        let mut it = shapes.iter().map(|s| random(rng, s, 0.6));
        EncoderLayer {
            w_q: it.next().unwrap(),
            w_k: it.next().unwrap(),
            w_v: it.next().unwrap(),
            w_o: it.next().unwrap(),
            ln1_gamma: it.next().unwrap(),
            ln1_beta: it.next().unwrap(),
            ln2_gamma: it.next().unwrap(),
            ln2_beta: it.next().unwrap(),
            ffn_w1: it.next().unwrap(),
            ffn_b1: it.next().unwrap(),
            ffn_w2: it.next().unwrap(),
            ffn_b2: it.next().unwrap(),
        }
    }

    fn register(tape: &mut Tape, layer: &EncoderLayer<Tensor>) -> EncoderLayer<Var> {
        EncoderLayer {
            w_q: tape.leaf(layer.w_q.clone().with_requires_grad(true)),
            w_k: tape.leaf(layer.w_k.clone().with_requires_grad(true)),
            w_v: tape.leaf(layer.w_v.clone().with_requires_grad(true)),
            w_o: tape.leaf(layer.w_o.clone().with_requires_grad(true)),
            ln1_gamma: tape.leaf(layer.ln1_gamma.clone().with_requires_grad(true)),
            ln1_beta: tape.leaf(layer.ln1_beta.clone().with_requires_grad(true)),
            ln2_gamma: tape.leaf(layer.ln2_gamma.clone().with_requires_grad(true)),
            ln2_beta: tape.leaf(layer.ln2_beta.clone().with_requires_grad(true)),
            ffn_w1: tape.leaf(layer.ffn_w1.clone().with_requires_grad(true)),
            ffn_b1: tape.leaf(layer.ffn_b1.clone().with_requires_grad(true)),
            ffn_w2: tape.leaf(layer.ffn_w2.clone().with_requires_grad(true)),
            ffn_b2: tape.leaf(layer.ffn_b2.clone().with_requires_grad(true)),
        }
    }

    #[test]
    fn diagonal_mask_layout() {
        let m = diagonal_mask(2).unwrap();
        assert_eq!(m.matrix().data(), &[MASK_SENTINEL, 0.0, 0.0, MASK_SENTINEL]);
        let m = diagonal_mask(3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v = m.matrix().get2(i, j);
                assert_eq!(v, if i == j { MASK_SENTINEL } else { 0.0 });
            }
        }
        assert!(diagonal_mask(1).is_err());
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(5, 8).unwrap();
        for j in 0..8 {
            assert_eq!(pe.get2(0, j), if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((pe.get2(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get2(1, 0) - 0.8415).abs() < 1e-4);
        assert!(positional_encoding(3, 7).is_err());
    }

    fn run_attention(
        x: &Tensor,
        layer: &EncoderLayer<Tensor>,
        heads: usize,
        kind: Normalizer,
    ) -> (Tensor, Tensor) {
        let n = x.dims2().0;
        let mask = diagonal_mask(n).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let vars = register(&mut tape, layer);
        let settings = AttentionSettings {
            heads,
            seq_len: n,
            normalizer: kind,
            mask: mask.matrix(),
        };
        let out = sparse_self_attention(&mut tape, xv, &vars, &settings).unwrap();
        (tape.value(out.output).clone(), tape.value(out.weights).clone())
    }

    #[test]
    fn two_steps_attend_to_each_other_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = random_layer(&mut rng, 8);
        let x = random(&mut rng, &[2, 8], 1.0);
        for kind in [Normalizer::Sparsegen(0.5), Normalizer::Softmax] {
            let (_, w) = run_attention(&x, &layer, 4, kind);
            for h in 0..4 {
                assert_eq!(&w.data()[h * 4..h * 4 + 4], &[0.0, 1.0, 1.0, 0.0]);
            }
        }
    }

    #[test]
    fn identical_rows_give_uniform_off_diagonal_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = random_layer(&mut rng, 8);
        let row = random(&mut rng, &[1, 8], 1.0);
        let x = Tensor::new(vec![4, 8], row.data().repeat(4)).unwrap();
        let (_, w) = run_attention(&x, &layer, 2, Normalizer::Sparsegen(0.5));
        for (r, chunk) in w.data().chunks(4).enumerate() {
            for (j, &p) in chunk.iter().enumerate() {
                let expect = if j == r % 4 { 0.0 } else { 1.0 / 3.0 };
                assert!((p - expect).abs() < 1e-12);
            }
        }
    }

    /// Straight-line recomputation: per head, slice the projections, form
    /// `K Qᵀ/√d_k + DM`, apply sparsegen-lin row by row, multiply by `V`,
    /// concatenate and project.
    #[test]
    fn matches_straight_line_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d, heads, lambda) = (6, 8, 2, 0.5);
        let layer = random_layer(&mut rng, d);
        let x = random(&mut rng, &[n, d], 1.5);
        let (out, _) = run_attention(&x, &layer, heads, Normalizer::Sparsegen(lambda));

        let dk = d / heads;
        let slice = |t: &Tensor, h: usize| {
            let mut data = Vec::new();
            for r in 0..n {
                data.extend_from_slice(&t.row(r)[h * dk..(h + 1) * dk]);
            }
            Tensor::new(vec![n, dk], data).unwrap()
        };
        let mut concat = vec![vec![0.0; d]; n];
        for h in 0..heads {
            let full_q = matmul(&x, &layer.w_q).unwrap();
            let full_k = matmul(&x, &layer.w_k).unwrap();
            let full_v = matmul(&x, &layer.w_v).unwrap();
            let (qh, kh, vh) = (slice(&full_q, h), slice(&full_k, h), slice(&full_v, h));
            let scores = matmul(&kh, &transpose(&qh).unwrap()).unwrap();
            let mut weights = vec![0.0; n * n];
            for i in 0..n {
                let mut row: Vec<f64> = scores.row(i).iter().map(|s| s / (dk as f64).sqrt()).collect();
                row[i] += MASK_SENTINEL;
                let p = sparsegen_lin(&row, lambda).unwrap().p;
                weights[i * n..(i + 1) * n].copy_from_slice(&p);
            }
            let head_out = matmul(&Tensor::new(vec![n, n], weights).unwrap(), &vh).unwrap();
            for i in 0..n {
                concat[i][h * dk..(h + 1) * dk].copy_from_slice(head_out.row(i));
            }
        }
        let expect = matmul(&Tensor::from_rows(&concat), &layer.w_o).unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn encoder_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, d) = (4, 8);
        let layer = random_layer(&mut rng, d);
        let x = random(&mut rng, &[n, d], 1.0).with_requires_grad(true);
        let mask = diagonal_mask(n).unwrap();
        let weights: Vec<f64> = (0..n * d).map(|i| ((i * 31) % 11) as f64 / 5.0 - 1.0).collect();
        let weights = Tensor::new(vec![n, d], weights).unwrap();

        for kind in [Normalizer::Sparsegen(0.5), Normalizer::Softmax] {
            let eval = |layer: &EncoderLayer<Tensor>, x: &Tensor| -> Result<(Tape, Var, EncoderLayer<Var>, Var)> {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone());
                let vars = register(&mut tape, layer);
                let settings = AttentionSettings {
                    heads: 2,
                    seq_len: n,
                    normalizer: kind,
                    mask: mask.matrix(),
                };
                let mut drng = ChaCha8Rng::seed_from_u64(9);
                let mut dropout = Dropout { rate: 0.15, rng: &mut drng };
                let out = encoder_layer(&mut tape, xv, &vars, &settings, Some(&mut dropout))?;
                let w = tape.constant(weights.clone());
                let prod = tape.mul(out.output, w)?;
                let loss = tape.sum(prod)?;
                Ok((tape, loss, vars, xv))
            };
            let (mut tape, loss, vars, xv) = eval(&layer, &x).unwrap();
            tape.backward(loss).unwrap();

            let mut targets: Vec<(String, Vec<f64>, Tensor)> = vec![("x".into(), tape.grad(xv).unwrap().to_vec(), x.clone())];
            for ((name, var), (_, t)) in vars.named().iter().zip(layer.named_tensors()) {
                targets.push((name.to_string(), tape.grad(*var).unwrap().to_vec(), t.clone()));
            }
            for (name, analytic, value) in targets {
                let numeric = crate::tensor::finite_difference_gradient(
                    |probe| {
                        let (mut l2, mut x2) = (layer.clone(), x.clone());
                        if name == "x" {
                            x2 = probe.clone();
                        } else {
                            *l2.tensor_mut(&name) = probe.clone();
                        }
                        let (t, loss, _, _) = eval(&l2, &x2)?;
                        Ok(t.value(loss).data()[0])
                    },
                    &value,
                    1e-6,
                )
                .unwrap();
                let scale = analytic.iter().chain(numeric.data()).fold(1e-10_f64, |m, v| m.max(v.abs()));
                let err = analytic
                    .iter()
                    .zip(numeric.data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
                    / scale;
                assert!(err < 1e-4, "{kind:?} {name}: {err}");
            }
        }
    }

    impl EncoderLayer<Tensor> {
        fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
            vec![
                ("w_q", &self.w_q),
                ("w_k", &self.w_k),
                ("w_v", &self.w_v),
                ("w_o", &self.w_o),
                ("ln1_gamma", &self.ln1_gamma),
                ("ln1_beta", &self.ln1_beta),
                ("ln2_gamma", &self.ln2_gamma),
                ("ln2_beta", &self.ln2_beta),
                ("ffn_w1", &self.ffn_w1),
                ("ffn_b1", &self.ffn_b1),
                ("ffn_w2", &self.ffn_w2),
                ("ffn_b2", &self.ffn_b2),
            ]
        }

        fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
            match name {
                "w_q" => &mut self.w_q,
                "w_k" => &mut self.w_k,
                "w_v" => &mut self.w_v,
                "w_o" => &mut self.w_o,
                "ln1_gamma" => &mut self.ln1_gamma,
                "ln1_beta" => &mut self.ln1_beta,
                "ln2_gamma" => &mut self.ln2_gamma,
                "ln2_beta" => &mut self.ln2_beta,
                "ffn_w1" => &mut self.ffn_w1,
                "ffn_b1" => &mut self.ffn_b1,
                "ffn_w2" => &mut self.ffn_w2,
                "ffn_b2" => &mut self.ffn_b2,
                _ => unreachable!(),
            }
        }
    }
}
