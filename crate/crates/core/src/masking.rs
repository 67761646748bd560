//! Halting masks for generated hidden sequences.
//!
//! Positions after the first EOS are zeroed in the forward pass. For the
//! backward pass the hard mask is replaced by its expectation under the
//! per-step EOS probabilities, so the loss downstream of the mask can push
//! EOS probabilities up or down.

use crate::error::{Error, Result};
use crate::grad::Var;
use crate::tensor::Tensor;

/// `m[0] = 1`; `m[i] = 1` iff no EOS occurs among `tokens[..i]`.
pub fn compute_hard_mask(tokens: &[usize], eos: usize) -> Vec<f64> {
    let mut open = true;
    tokens
        .iter()
        .map(|&t| {
            let m = if open { 1.0 } else { 0.0 };
            open &= t != eos;
            m
        })
        .collect()
}

/// `E[m][i] = prod_{k < i} (1 - p_k)`.
pub fn expected_mask(eos_probs: &[f64]) -> Result<Vec<f64>> {
    if let Some(&p) = eos_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Probability(p));
    }
    let mut acc = 1.0;
    Ok(eos_probs
        .iter()
        .map(|&p| {
            let e = acc;
            acc *= 1.0 - p;
            e
        })
        .collect())
}

/// Hard mask and its expectation for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub hard: Vec<f64>,
    pub expected: Vec<f64>,
}

impl MaskPair {
    pub fn new(tokens: &[usize], eos_probs: &[f64], eos: usize) -> Result<Self> {
        if tokens.len() != eos_probs.len() {
            return Err(Error::LengthMismatch(format!("{} tokens, {} probabilities", tokens.len(), eos_probs.len())));
        }
        Ok(MaskPair { hard: compute_hard_mask(tokens, eos), expected: expected_mask(eos_probs)? })
    }

    /// Number of unmasked positions.
    pub fn effective_length(&self) -> f64 {
        self.hard.iter().sum()
    }
}

/// Hard masks `[B, T]` for row-major token ids `[B, T]`.
pub fn hard_masks(ids: &[usize], rows: usize, eos: usize) -> Tensor {
    let t = if rows == 0 { 0 } else { ids.len() / rows };
    let data = ids.chunks(t.max(1)).flat_map(|row| compute_hard_mask(row, eos)).collect();
    Tensor::new([rows, t], data)
}

/// Mean number of unmasked positions per row of `[B, T]` masks.
pub fn effective_length(hard: &Tensor) -> f64 {
    let rows = hard.shape()[0];
    if rows == 0 {
        return 0.0;
    }
    hard.data().iter().sum::<f64>() / rows as f64
}

fn check_shapes(vq: Var<'_>, hard: &Tensor) -> Result<()> {
    let shape = vq.shape();
    if shape.len() != 3 || hard.shape() != &shape[..2] {
        return Err(Error::LengthMismatch(format!("sequence {shape:?} against mask {:?}", hard.shape())));
    }
    Ok(())
}

/// Forward `hard ⊙ vq`; backward as if the multiplier were `E[m]` built from
/// `eos_probs`. `vq` is `[B, T, d]`, `hard` and `eos_probs` are `[B, T]`.
pub fn apply_mask_feedback<'g>(vq: Var<'g>, hard: &Tensor, eos_probs: Var<'g>) -> Result<Var<'g>> {
    check_shapes(vq, hard)?;
    if eos_probs.shape() != hard.shape() {
        return Err(Error::LengthMismatch(format!("probabilities {:?} against mask {:?}", eos_probs.shape(), hard.shape())));
    }
    if let Some(&p) = eos_probs.value().data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Probability(p));
    }
    let g = vq.graph();
    let expected = eos_probs.affine(-1.0, 1.0).exclusive_cumprod();
    let mask = g.straight_through(g.constant(hard.clone()), expected)?;
    Ok(vq.scale_rows(mask))
}

/// Forward `hard ⊙ vq` with the mask treated as a constant: no gradient
/// reaches the EOS probabilities.
pub fn apply_hard_mask<'g>(vq: Var<'g>, hard: &Tensor) -> Result<Var<'g>> {
    check_shapes(vq, hard)?;
    Ok(vq.scale_rows(vq.graph().constant(hard.clone())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_difference_gradient, Graph};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const A: usize = 3;
    const B: usize = 4;
    const EOS: usize = 2;

    #[test]
    fn hard_mask_examples() {
        assert_eq!(compute_hard_mask(&[A, EOS, B], EOS), vec![1.0, 1.0, 0.0]);
        assert_eq!(compute_hard_mask(&[A, B, A], EOS), vec![1.0; 3]);
        assert_eq!(compute_hard_mask(&[EOS, A, EOS, B], EOS), vec![1.0, 0.0, 0.0, 0.0]);
        assert!(compute_hard_mask(&[], EOS).is_empty());
    }

    #[test]
    fn expected_mask_examples() {
        let e = expected_mask(&[0.2, 0.5, 0.9]).unwrap();
        let oracle: Vec<f64> = (0..3).map(|i| [0.2, 0.5, 0.9][..i].iter().map(|p| 1.0 - p).product()).collect();
        for (a, b) in e.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((e[1] - 0.8).abs() < 1e-12 && (e[2] - 0.4).abs() < 1e-12);
        assert_eq!(expected_mask(&[0.0; 4]).unwrap(), vec![1.0; 4]);
        assert_eq!(expected_mask(&[1.0, 0.3, 0.3]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(expected_mask(&[0.5, 1.5]), Err(Error::Probability(_))));
        assert!(expected_mask(&[-0.1]).is_err());
    }

    #[test]
    fn monte_carlo_matches_expectation() {
        let p = [0.1, 0.3, 0.05, 0.6, 0.2, 0.0];
        let expected = expected_mask(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 100_000;
        let mut sum = vec![0.0; p.len()];
        for _ in 0..trials {
            let tokens: Vec<usize> = p.iter().map(|&pk| if rng.gen::<f64>() < pk { EOS } else { A }).collect();
            for (s, m) in sum.iter_mut().zip(compute_hard_mask(&tokens, EOS)) {
                *s += m;
            }
        }
        for (s, e) in sum.iter().zip(&expected) {
            assert!((s / trials as f64 - e).abs() < 0.01, "{} vs {e}", s / trials as f64);
        }
    }

    fn sequence(g: &Graph) -> Var<'_> {
        let data = (0..2 * 4 * 3).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        g.variable(Tensor::new([2, 4, 3], data))
    }

    #[test]
    fn forward_is_exactly_hard_masked() {
        let g = Graph::new();
        let vq = sequence(&g);
        let hard = Tensor::new([2, 4], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let p = g.variable(Tensor::new([2, 4], vec![0.1, 0.7, 0.2, 0.4, 0.0, 0.1, 0.2, 0.3]));
        let out = apply_mask_feedback(vq, &hard, p).unwrap();
        let (o, v) = (out.to_vec(), vq.to_vec());
        for i in 0..8 {
            for j in 0..3 {
                let expect = if hard.data()[i] == 1.0 { v[i * 3 + j] } else { 0.0 };
                assert_eq!(o[i * 3 + j].to_bits() & !(1 << 63), expect.to_bits() & !(1 << 63));
            }
        }
    }

    #[test]
    fn identity_with_no_eos() {
        let g = Graph::new();
        let vq = sequence(&g);
        let hard = Tensor::full([2, 4], 1.0);
        let p = g.variable(Tensor::zeros([2, 4]));
        let out = apply_mask_feedback(vq, &hard, p).unwrap();
        assert_eq!(out.to_vec(), vq.to_vec());
        let w = Tensor::new([2, 4, 3], (0..24).map(|i| [0.3, -1.0, 2.0][i % 3]).collect());
        let loss = out.mul(g.constant(w.clone())).sum();
        let grads = g.backward(loss);
        assert_eq!(grads.get_or_zeros(vq).data(), w.data());
        let gp = grads.get_or_zeros(p);
        assert!(gp.data().iter().enumerate().all(|(i, &x)| i % 4 != 3 || x == 0.0));
    }

    #[test]
    fn eos_gradient_matches_expected_mask_finite_difference() {
        let hard = Tensor::new([2, 4], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let p0 = Tensor::new([2, 4], vec![0.1, 0.7, 0.2, 0.4, 0.05, 0.1, 0.2, 0.3]);
        let w = [0.3, -1.0, 2.0];
        let values: Vec<f64> = (0..2 * 4 * 3).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let g = Graph::new();
        let vq = g.constant(Tensor::new([2, 4, 3], values.clone()));
        let p = g.variable(p0.clone());
        let wv = g.constant(Tensor::new([2, 4, 3], (0..24).map(|i| w[i % 3]).collect()));
        let loss = apply_mask_feedback(vq, &hard, p).unwrap().mul(wv).sum();
        let analytic = g.backward(loss).get_or_zeros(p);
        // Oracle: the same loss with the multiplier E[m] computed in plain f64.
        let oracle = |p: &[f64]| -> f64 {
            let mut total = 0.0;
            for r in 0..2 {
                let e = expected_mask(&p[r * 4..r * 4 + 4]).unwrap();
                for t in 0..4 {
                    for j in 0..3 {
                        total += e[t] * values[(r * 4 + t) * 3 + j] * w[j];
                    }
                }
            }
            total
        };
        let numeric = finite_difference_gradient(oracle, p0.data(), 1e-6).unwrap();
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn raising_eos_probability_lowers_later_contribution() {
        let g = Graph::new();
        let vq = g.variable(Tensor::full([1, 5, 2], 1.5));
        let hard = Tensor::full([1, 5], 1.0);
        let p = g.variable(Tensor::new([1, 5], vec![0.1, 0.2, 0.3, 0.1, 0.2]));
        let masked = apply_mask_feedback(vq, &hard, p).unwrap();
        let loss = masked.mul(masked).sum();
        let gp = g.backward(loss).get_or_zeros(p);
        assert!(gp.data()[..4].iter().all(|&x| x < 0.0), "{gp:?}");
    }

    #[test]
    fn hard_mask_blocks_eos_gradient() {
        let g = Graph::new();
        let vq = sequence(&g);
        let hard = Tensor::full([2, 4], 1.0);
        let out = apply_hard_mask(vq, &hard).unwrap();
        assert_eq!(out.to_vec(), vq.to_vec());
        assert!(apply_hard_mask(vq, &Tensor::full([2, 3], 1.0)).is_err());
    }

    #[test]
    fn shape_and_probability_errors() {
        let g = Graph::new();
        let vq = sequence(&g);
        let hard = Tensor::full([2, 4], 1.0);
        assert!(matches!(apply_mask_feedback(vq, &hard, g.variable(Tensor::zeros([2, 3]))), Err(Error::LengthMismatch(_))));
        assert!(matches!(apply_mask_feedback(vq, &hard, g.variable(Tensor::full([2, 4], 1.2))), Err(Error::Probability(_))));
        assert!(MaskPair::new(&[A, B], &[0.1], EOS).is_err());
    }

    #[test]
    fn batch_helpers() {
        let m = hard_masks(&[A, EOS, B, B, B, B], 2, EOS);
        assert_eq!(m.data(), &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(effective_length(&m), 2.5);
        let pair = MaskPair::new(&[A, EOS, B], &[0.2, 0.5, 0.9], EOS).unwrap();
        assert_eq!(pair.effective_length(), 2.0);
    }

    proptest! {
        #[test]
        fn masks_are_non_increasing(
            tokens in prop::collection::vec(0usize..5, 1..20),
            probs in prop::collection::vec(0.0f64..=1.0, 1..20),
        ) {
            let hard = compute_hard_mask(&tokens, EOS);
            prop_assert_eq!(hard[0], 1.0);
            prop_assert!(hard.windows(2).all(|w| w[1] <= w[0]));
            let e = expected_mask(&probs).unwrap();
            prop_assert_eq!(e[0], 1.0);
            prop_assert!(e.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(e.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
