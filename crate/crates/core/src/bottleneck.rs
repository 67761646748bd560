//! Discrete bottlenecks.
//!
//! Every bottleneck maps a model output vector `v` to a probability vector
//! `s` over a finite dictionary and a quantized vector `v_q` that is exactly
//! one dictionary row. The forward pass is discrete; the backward pass uses a
//! straight-through surrogate:
//!
//! * softmax and Gumbel: `v_q` backpropagates as the soft average
//!   `sum_i s[i] D[i]`;
//! * VQ: `v_q` backpropagates as `v` itself.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Var;
use crate::tensor::{argmax, argmin, Tensor};
use crate::vocab::Specials;

/// Bottleneck implementation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DbVariant {
    /// Maximum-likelihood decoding of `softmax(logits)`.
    #[default]
    Softmax,
    /// Argmax of `softmax((logits + g) / temperature)` with Gumbel noise `g`.
    Gumbel,
    /// Nearest dictionary row under the Euclidean norm.
    Vq,
}

impl DbVariant {
    /// Probability-based variants project the model output to logits.
    pub fn uses_projection(self) -> bool {
        !matches!(self, DbVariant::Vq)
    }
}

impl fmt::Display for DbVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DbVariant::Softmax => "softmax",
            DbVariant::Gumbel => "gumbel",
            DbVariant::Vq => "vq",
        })
    }
}

impl FromStr for DbVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(DbVariant::Softmax),
            "gumbel" => Ok(DbVariant::Gumbel),
            "vq" => Ok(DbVariant::Vq),
            other => Err(Error::Config(format!("unknown bottleneck {other:?} (softmax|gumbel|vq)"))),
        }
    }
}

/// The finite embedding set `D` of a bottleneck, bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct Dictionary<'g> {
    embeddings: Var<'g>,
    specials: Specials,
}

impl<'g> Dictionary<'g> {
    pub fn new(embeddings: Var<'g>, specials: Specials) -> Result<Self> {
        let value = embeddings.value();
        let shape = value.shape();
        if shape.len() != 2 {
            return Err(Error::Dictionary(format!("embeddings must be 2-D, got {shape:?}")));
        }
        let size = shape[0];
        let Specials { pad, bos, eos } = specials;
        if pad >= size || bos >= size || eos >= size {
            return Err(Error::Dictionary(format!("special ids {specials:?} out of range {size}")));
        }
        if pad == eos {
            return Err(Error::Dictionary("EOS and PAD must differ".into()));
        }
        if !value.is_finite() {
            return Err(Error::Dictionary("embedding rows must be finite".into()));
        }
        drop(value);
        Ok(Dictionary { embeddings, specials })
    }

    pub fn embeddings(&self) -> Var<'g> {
        self.embeddings
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn size(&self) -> usize {
        self.embeddings.value().shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.value().shape()[1]
    }

    /// Rows `ids` as a constant: a decode result carries no gradient of its own.
    pub fn rows(&self, ids: &[usize]) -> Var<'g> {
        let g = self.embeddings.graph();
        let value = {
            let table = self.embeddings.value();
            let d = table.last_dim();
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                data.extend_from_slice(table.row(i));
            }
            Tensor::new([ids.len(), d], data)
        };
        g.constant(value)
    }
}

/// Learned map from model outputs to vocabulary logits.
#[derive(Clone, Copy, Debug)]
pub struct Projection<'g> {
    pub weight: Var<'g>,
    pub bias: Var<'g>,
}

impl<'g> Projection<'g> {
    pub fn logits(&self, v: Var<'g>) -> Var<'g> {
        v.matmul(self.weight).add_broadcast(self.bias)
    }
}

/// One bottleneck application over `N` rows.
#[derive(Clone, Debug)]
pub struct BottleneckOutput<'g> {
    /// Probability vectors `s`, shape `[N, |V|]`.
    pub scores: Var<'g>,
    /// Quantized vectors `v_q`, shape `[N, d]`; forward data equals
    /// `dictionary[indices[n]]`.
    pub quantized: Var<'g>,
    /// Selected dictionary index per row.
    pub indices: Vec<usize>,
    /// Distances `l`, shape `[N, |V|]` (VQ only).
    pub distances: Option<Var<'g>>,
}

impl<'g> BottleneckOutput<'g> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `s[n][token]` for every row, as a `[N]` value.
    pub fn token_probability(&self, token: usize) -> Var<'g> {
        self.scores.pick_last(&vec![token; self.len()])
    }
}

fn as_rows(v: Var<'_>) -> Var<'_> {
    if v.value().shape().len() == 1 {
        let d = v.value().len();
        v.reshape([1, d])
    } else {
        v
    }
}

fn probability_db<'g>(scores: Var<'g>, dict: &Dictionary<'g>) -> Result<BottleneckOutput<'g>> {
    let indices: Vec<usize> = {
        let s = scores.value();
        (0..s.rows()).map(|r| argmax(s.row(r))).collect()
    };
    let soft = scores.matmul(dict.embeddings());
    let hard = dict.rows(&indices);
    let quantized = scores.graph().straight_through(hard, soft)?;
    Ok(BottleneckOutput { scores, quantized, indices, distances: None })
}

/// Softmax bottleneck: `s = softmax(v W + b)`, `v_q = D[argmax s]`.
pub fn softmax_db<'g>(v: Var<'g>, dict: &Dictionary<'g>, projection: &Projection<'g>) -> Result<BottleneckOutput<'g>> {
    probability_db(projection.logits(as_rows(v)).softmax(), dict)
}

/// Standard Gumbel samples `-ln(-ln u)`, `u ~ Uniform(0, 1)`.
pub fn sample_gumbel(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            gumbel_transform(u.max(f64::MIN_POSITIVE))
        })
        .collect()
}

/// Maps a uniform draw `u` in `(0, 1)` to a standard Gumbel sample.
pub fn gumbel_transform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Gumbel bottleneck with noise drawn from `rng`.
pub fn gumbel_db<'g>(
    v: Var<'g>,
    dict: &Dictionary<'g>,
    projection: &Projection<'g>,
    rng: &mut impl Rng,
    temperature: f64,
) -> Result<BottleneckOutput<'g>> {
    let v = as_rows(v);
    let rows = v.value().rows();
    let noise = Tensor::new([rows, dict.size()], sample_gumbel(rng, rows * dict.size()));
    gumbel_db_with_noise(v, dict, projection, noise, temperature)
}

/// Gumbel bottleneck with explicit noise `[N, |V|]`.
pub fn gumbel_db_with_noise<'g>(
    v: Var<'g>,
    dict: &Dictionary<'g>,
    projection: &Projection<'g>,
    noise: Tensor,
    temperature: f64,
) -> Result<BottleneckOutput<'g>> {
    let logits = projection.logits(as_rows(v));
    let perturbed = logits.add(logits.graph().constant(noise));
    let scores = if temperature == 1.0 { perturbed.softmax() } else { perturbed.scale(1.0 / temperature).softmax() };
    probability_db(scores, dict)
}

/// VQ bottleneck: `l[i] = |v - D[i]|`, `v_q = D[argmin l]`, `s = softmax(-l)`.
pub fn vq_db<'g>(v: Var<'g>, dict: &Dictionary<'g>) -> Result<BottleneckOutput<'g>> {
    let v = as_rows(v);
    let width = v.value().last_dim();
    if width != dict.dim() {
        return Err(Error::Dictionary(format!("vector width {width} vs dictionary width {}", dict.dim())));
    }
    let distances = v.pairwise_distance(dict.embeddings());
    let indices: Vec<usize> = {
        let l = distances.value();
        (0..l.rows()).map(|r| argmin(l.row(r))).collect()
    };
    let scores = distances.scale(-1.0).softmax();
    let quantized = v.graph().straight_through(dict.rows(&indices), v)?;
    Ok(BottleneckOutput { scores, quantized, indices, distances: Some(distances) })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::grad::{finite_difference_gradient, GradCheckReport, Graph};

    fn identity_projection(g: &Graph, n: usize) -> Projection<'_> {
        let mut w = Tensor::zeros([n, n]);
        for i in 0..n {
            w.data_mut()[i * n + i] = 1.0;
        }
        Projection { weight: g.constant(w), bias: g.constant(Tensor::zeros([n])) }
    }

    fn dict_from<'g>(g: &'g Graph, rows: &[&[f64]]) -> Dictionary<'g> {
        Dictionary::new(g.variable(Tensor::matrix(rows)), Specials { pad: 0, bos: 0, eos: rows.len() - 1 })
            .unwrap()
    }

    #[test]
    fn softmax_db_tie_breaks_low() {
        let g = Graph::new();
        let dict = dict_from(&g, &[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = softmax_db(g.constant(Tensor::vector(&[0.0, 0.0])), &dict, &identity_projection(&g, 2)).unwrap();
        assert_eq!(out.indices, vec![0]);
        assert_eq!(out.quantized.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn softmax_db_closed_form_scores() {
        let g = Graph::new();
        let dict = dict_from(&g, &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let out = softmax_db(g.constant(Tensor::vector(&[1.0, 3.0, 2.0])), &dict, &identity_projection(&g, 3)).unwrap();
        let z: f64 = [1f64, 3.0, 2.0].iter().map(|v| v.exp()).sum();
        let expect = [1f64.exp() / z, 3f64.exp() / z, 2f64.exp() / z];
        for (s, e) in out.scores.to_vec().iter().zip(expect) {
            assert!((s - e).abs() < 1e-12);
        }
        assert!((expect[0] - 0.0900).abs() < 5e-5 && (expect[1] - 0.6652).abs() < 5e-5);
        assert_eq!(out.indices, vec![1]);
        assert_eq!(out.quantized.to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_db_gradient_is_soft_average_gradient() {
        let rows: [&[f64]; 3] = [&[0.5, -1.0], &[2.0, 0.3], &[-0.7, 1.1]];
        let w = [0.9, -0.4];
        let logits = [0.2, -0.3, 0.8];
        let g = Graph::new();
        let dict = dict_from(&g, &rows);
        let x = g.variable(Tensor::vector(&logits));
        let out = softmax_db(x, &dict, &identity_projection(&g, 3)).unwrap();
        let loss = out.quantized.mul(g.constant(Tensor::matrix(&[&w]))).sum();
        let analytic = g.backward(loss).get(x).unwrap().data().to_vec();
        let numeric = finite_difference_gradient(
            |p| {
                let gg = Graph::new();
                let s = gg.constant(Tensor::vector(p)).softmax().to_vec();
                (0..2).map(|c| w[c] * (0..3).map(|i| s[i] * rows[i][c]).sum::<f64>()).sum()
            },
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(GradCheckReport::new(analytic, numeric).max_relative_error < 1e-4);
    }

    #[test]
    fn gumbel_transform_closed_form() {
        assert!((gumbel_transform(0.5) - 0.366_512_920_581_664_3).abs() < 1e-12);
        assert!((gumbel_transform(0.9) - 2.250_367_327_312_450_6).abs() < 1e-12);
    }

    #[test]
    fn gumbel_db_with_zero_noise_equals_softmax_db() {
        let g = Graph::new();
        let dict = dict_from(&g, &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let proj = identity_projection(&g, 3);
        let v = g.constant(Tensor::vector(&[0.1, 0.7, -0.2]));
        let a = softmax_db(v, &dict, &proj).unwrap();
        let b = gumbel_db_with_noise(v, &dict, &proj, Tensor::zeros([1, 3]), 1.0).unwrap();
        assert_eq!(a.scores.to_vec(), b.scores.to_vec());
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.quantized.to_vec(), b.quantized.to_vec());
    }

    #[test]
    fn gumbel_db_samples_the_softmax_distribution() {
        let g = Graph::new();
        let dict = dict_from(&g, &[&[1.0], &[2.0]]);
        let proj = identity_projection(&g, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut hits = [0usize; 2];
        for _ in 0..draws {
            let gg = Graph::new();
            let d = Dictionary::new(gg.constant(Tensor::matrix(&[&[1.0], &[2.0]])), dict.specials()).unwrap();
            let p = Projection {
                weight: gg.constant(proj.weight.value().clone()),
                bias: gg.constant(proj.bias.value().clone()),
            };
            let out = gumbel_db(gg.constant(Tensor::vector(&[0.0, 1.0])), &d, &p, &mut rng, 1.0).unwrap();
            hits[out.indices[0]] += 1;
        }
        let freq1 = hits[1] as f64 / draws as f64;
        let expect = 1f64.exp() / (1.0 + 1f64.exp());
        assert!((freq1 - expect).abs() < 0.01, "{freq1} vs {expect}");
    }

    #[test]
    fn gumbel_db_is_reproducible_per_seed() {
        let run = |seed| {
            let g = Graph::new();
            let dict = dict_from(&g, &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = g.constant(Tensor::matrix(&[&[0.1, 0.7, -0.2], &[0.0, 0.0, 0.0]]));
            let out = gumbel_db(v, &dict, &identity_projection(&g, 3), &mut rng, 0.5).unwrap();
            (out.scores.to_vec(), out.indices)
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn vq_db_hand_example() {
        let g = Graph::new();
        let dict = dict_from(&g, &[&[0.0, 0.0], &[3.0, 0.0]]);
        let out = vq_db(g.constant(Tensor::vector(&[1.0, 0.0])), &dict).unwrap();
        assert_eq!(out.distances.unwrap().to_vec(), vec![1.0, 2.0]);
        assert_eq!(out.indices, vec![0]);
        assert_eq!(out.quantized.to_vec(), vec![0.0, 0.0]);
        let s = out.scores.to_vec();
        assert!((s[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((s[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn vq_db_exact_row_has_zero_distance() {
        let g = Graph::new();
        let dict = dict_from(&g, &[&[0.0, 0.0], &[3.0, 0.5], &[1.0, 1.0]]);
        let out = vq_db(g.constant(Tensor::vector(&[3.0, 0.5])), &dict).unwrap();
        assert_eq!(out.indices, vec![1]);
        assert_eq!(out.distances.unwrap().to_vec()[1], 0.0);
    }

    #[test]
    fn vq_db_passes_gradient_verbatim() {
        let g = Graph::new();
        let dict = dict_from(&g, &[&[0.0, 0.0], &[3.0, 0.0]]);
        let v = g.variable(Tensor::vector(&[1.0, 0.0]));
        let out = vq_db(v, &dict).unwrap();
        let w = [0.25, -3.5];
        let loss = out.quantized.mul(g.constant(Tensor::matrix(&[&w]))).sum();
        assert_eq!(g.backward(loss).get(v).unwrap().data(), &w);
    }

    #[test]
    fn vq_db_rejects_width_mismatch() {
        let g = Graph::new();
        let dict = dict_from(&g, &[&[0.0, 0.0], &[3.0, 0.0]]);
        assert!(vq_db(g.constant(Tensor::vector(&[1.0, 0.0, 2.0])), &dict).is_err());
    }

    #[test]
    fn dictionary_validation() {
        let g = Graph::new();
        let table = g.constant(Tensor::zeros([3, 2]));
        assert!(Dictionary::new(table, Specials { pad: 0, bos: 1, eos: 0 }).is_err());
        assert!(Dictionary::new(table, Specials { pad: 0, bos: 1, eos: 3 }).is_err());
        let bad = g.constant(Tensor::vector(&[1.0, f64::NAN, 0.0, 0.0]).reshaped([2, 2]));
        assert!(Dictionary::new(bad, Specials { pad: 0, bos: 0, eos: 1 }).is_err());
        assert!(Dictionary::new(table, Specials { pad: 0, bos: 1, eos: 2 }).is_ok());
    }

    #[test]
    fn variant_parses() {
        assert_eq!("vq".parse::<DbVariant>().unwrap(), DbVariant::Vq);
        assert!("argmax".parse::<DbVariant>().is_err());
        assert_eq!(DbVariant::Gumbel.to_string(), "gumbel");
    }

    proptest::proptest! {
        #[test]
        fn outputs_are_dictionary_rows(
            size in 2usize..10,
            d in 1usize..6,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table: Vec<f64> = (0..size * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut weight: Vec<f64> = (0..d * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
            weight.push(0.0);
            let g = Graph::new();
            let dict = Dictionary::new(g.constant(Tensor::new([size, d], table.clone())), Specials { pad: 0, bos: 0, eos: size - 1 }).unwrap();
            let proj = Projection {
                weight: g.constant(Tensor::new([d, size], weight[..d * size].to_vec())),
                bias: g.constant(Tensor::zeros([size])),
            };
            let x = g.constant(Tensor::vector(&v));
            let outs = [
                softmax_db(x, &dict, &proj).unwrap(),
                gumbel_db(x, &dict, &proj, &mut rng, 0.7).unwrap(),
                vq_db(x, &dict).unwrap(),
            ];
            for out in outs {
                let i = out.indices[0];
                proptest::prop_assert_eq!(out.quantized.to_vec(), table[i * d..(i + 1) * d].to_vec());
                let s = out.scores.to_vec();
                proptest::prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                proptest::prop_assert_eq!(i, argmax(&s));
            }
        }
    }
}
