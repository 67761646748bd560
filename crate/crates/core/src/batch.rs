use crate::error::{Error, Result};
use crate::vocab::{Side, BOS, EOS, PAD};

/// A padded batch of token-id sequences from one vocabulary.
///
/// Sequences are stored without BOS/EOS; the helpers below add them in the
/// positions each consumer expects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    ids: Vec<usize>,
    lengths: Vec<usize>,
    width: usize,
    side: Side,
}

impl SequenceBatch {
    pub fn from_sequences(seqs: &[Vec<usize>], side: Side) -> Self {
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![PAD; seqs.len() * width];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * width..r * width + s.len()].copy_from_slice(s);
        }
        SequenceBatch { ids, lengths: seqs.iter().map(Vec::len).collect(), width, side }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Padded id matrix, `rows x width`.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Valid tokens of row `r`.
    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.width..r * self.width + self.lengths[r]]
    }

    pub fn sequences(&self) -> Vec<Vec<usize>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    /// Validity mask, `rows x width`.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.ids.len()];
        for (r, &len) in self.lengths.iter().enumerate() {
            m[r * self.width..r * self.width + len].fill(true);
        }
        m
    }

    /// Source layout: tokens followed by EOS, PAD-filled to `max_len`.
    /// Returns the ids and a 0/1 validity weight per position.
    pub fn source_layout(&self, max_len: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut ids = vec![PAD; self.rows() * max_len];
        let mut valid = vec![0.0; self.rows() * max_len];
        for r in 0..self.rows() {
            let row = self.row(r);
            if row.len() + 1 > max_len {
                return Err(Error::TooLong { length: row.len() + 1, max: max_len });
            }
            ids[r * max_len..r * max_len + row.len()].copy_from_slice(row);
            ids[r * max_len + row.len()] = EOS;
            valid[r * max_len..r * max_len + row.len() + 1].fill(1.0);
        }
        Ok((ids, valid))
    }

    /// Number of decoder steps needed to emit every row plus its EOS.
    pub fn target_steps(&self) -> usize {
        self.width + 1
    }

    /// Decoder inputs `BOS, y_0, ..., y_{T-2}`, PAD-filled to
    /// [`target_steps`](Self::target_steps) positions.
    pub fn decoder_inputs(&self) -> Vec<usize> {
        let steps = self.target_steps();
        let mut ids = vec![PAD; self.rows() * steps];
        for r in 0..self.rows() {
            ids[r * steps] = BOS;
            let row = self.row(r);
            ids[r * steps + 1..r * steps + 1 + row.len()].copy_from_slice(row);
        }
        ids
    }

    /// Targets `y_0, ..., y_{T-1}, EOS` with a 0/1 weight per position.
    pub fn targets(&self) -> (Vec<usize>, Vec<f64>) {
        let steps = self.target_steps();
        let mut ids = vec![PAD; self.rows() * steps];
        let mut weights = vec![0.0; self.rows() * steps];
        for r in 0..self.rows() {
            let row = self.row(r);
            ids[r * steps..r * steps + row.len()].copy_from_slice(row);
            ids[r * steps + row.len()] = EOS;
            weights[r * steps..r * steps + row.len() + 1].fill(1.0);
        }
        (ids, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts() {
        let b = SequenceBatch::from_sequences(&[vec![5, 6, 7], vec![8]], Side::Z);
        assert_eq!(b.width(), 3);
        assert_eq!(b.ids(), &[5, 6, 7, 8, PAD, PAD]);
        assert_eq!(b.row(1), &[8]);
        assert_eq!(b.decoder_inputs(), vec![BOS, 5, 6, 7, BOS, 8, PAD, PAD]);
        let (t, w) = b.targets();
        assert_eq!(t, vec![5, 6, 7, EOS, 8, EOS, PAD, PAD]);
        assert_eq!(w, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let (s, v) = b.source_layout(5).unwrap();
        assert_eq!(s, vec![5, 6, 7, EOS, PAD, 8, EOS, PAD, PAD, PAD]);
        assert_eq!(v.iter().sum::<f64>(), 6.0);
        assert!(matches!(b.source_layout(3), Err(Error::TooLong { length: 4, max: 3 })));
        assert_eq!(b.mask(), vec![true, true, true, true, false, false]);
    }
}
