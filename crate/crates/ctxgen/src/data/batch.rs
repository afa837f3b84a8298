use crate::data::vocab::{Vocabulary, BOS, EOS, PAD};
use crate::rng::permutation;
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;

/// A batch of encoded sentences: a B x (max_len + 2) id matrix with BOS,
/// content, EOS, then PAD to the right. `lengths[b]` counts the non-PAD
/// positions of row b (content + 2).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    ids: Vec<usize>,
    pub width: usize,
    pub lengths: Vec<usize>,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    /// Encode sentences into one batch. Rejects over-length sentences.
    pub fn from_sentences<S: AsRef<str>>(
        sentences: &[S],
        labels: Option<Vec<usize>>,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Batch> {
        let width = max_len + 2;
        let mut ids = Vec::with_capacity(sentences.len() * width);
        let mut lengths = Vec::with_capacity(sentences.len());
        for s in sentences {
            let content = vocab.encode(s.as_ref(), max_len)?;
            lengths.push(content.len() + 2);
            ids.push(BOS);
            ids.extend_from_slice(&content);
            ids.push(EOS);
            ids.resize(ids.len() + (max_len - content.len()), PAD);
        }
        debug_assert!(lengths.iter().all(|&l| l <= width));
        Ok(Batch { ids, width, lengths, labels })
    }

    /// Batch rows of pre-encoded content ids (sampled sentences bypass the
    /// vocabulary). Rejects rows longer than max_len.
    pub fn from_token_rows(rows: &[Vec<usize>], max_len: usize) -> Result<Batch> {
        let width = max_len + 2;
        let mut ids = Vec::with_capacity(rows.len() * width);
        let mut lengths = Vec::with_capacity(rows.len());
        for r in rows {
            if r.len() > max_len {
                return Err(Error::OverLength { len: r.len(), max_len });
            }
            lengths.push(r.len() + 2);
            ids.push(BOS);
            ids.extend_from_slice(r);
            ids.push(EOS);
            ids.resize(ids.len() + (max_len - r.len()), PAD);
        }
        Ok(Batch { ids, width, lengths, labels: None })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.width..(b + 1) * self.width]
    }

    /// Ids of column `t`, one per example.
    pub fn column(&self, t: usize) -> Vec<usize> {
        (0..self.size()).map(|b| self.ids[b * self.width + t]).collect()
    }

    /// 1.0 where column `t` is a real (non-PAD) position, else 0.0.
    pub fn mask_column(&self, t: usize) -> Vec<f64> {
        self.lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect()
    }

    /// Total number of non-PAD positions.
    pub fn total_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Content ids of row b (without BOS/EOS/PAD).
    pub fn content_row(&self, b: usize) -> &[usize] {
        let l = self.lengths[b];
        &self.row(b)[1..l - 1]
    }

    /// Same rows extended with extra PAD columns; outputs of padding
    /// invariant consumers must not change.
    pub fn pad_extended(&self, extra: usize) -> Batch {
        let new_width = self.width + extra;
        let mut ids = Vec::with_capacity(self.size() * new_width);
        for b in 0..self.size() {
            ids.extend_from_slice(self.row(b));
            ids.resize(ids.len() + extra, PAD);
        }
        Batch { ids, width: new_width, lengths: self.lengths.clone(), labels: self.labels.clone() }
    }
}

/// Deterministically shuffle `n` example indices and cut them into batches;
/// the last partial batch is kept.
pub fn batch_order(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let perm = permutation(rng, n);
    perm.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::build_vocabulary;
    use crate::rng::stream;

    fn vocab() -> Vocabulary {
        build_vocabulary(&["a b c d e"], 1).unwrap()
    }

    #[test]
    fn rows_are_bos_content_eos_pad() {
        let v = vocab();
        let b = Batch::from_sentences(&["a b", "c"], None, &v, 4).unwrap();
        assert_eq!(b.width, 6);
        assert_eq!(b.row(0), &[BOS, 4, 5, EOS, PAD, PAD]);
        assert_eq!(b.row(1), &[BOS, 6, EOS, PAD, PAD, PAD]);
        assert_eq!(b.lengths, vec![4, 3]);
        assert_eq!(b.content_row(0), &[4, 5]);
    }

    #[test]
    fn masks_flag_pad_positions_zero() {
        let v = vocab();
        let b = Batch::from_sentences(&["a b", "c"], None, &v, 4).unwrap();
        assert_eq!(b.mask_column(0), vec![1.0, 1.0]);
        assert_eq!(b.mask_column(3), vec![1.0, 0.0]);
        assert_eq!(b.mask_column(5), vec![0.0, 0.0]);
        // every PAD id sits at a zero-mask position, in every column
        for t in 0..b.width {
            let col = b.column(t);
            let mask = b.mask_column(t);
            for (i, &id) in col.iter().enumerate() {
                assert_eq!(id == PAD, mask[i] == 0.0);
            }
        }
    }

    #[test]
    fn batch_order_splits_with_partial_tail() {
        let mut rng = stream(5, "shuffle", 0);
        let batches = batch_order(10, 4, &mut rng);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_order_is_seed_deterministic() {
        let mut r1 = stream(5, "shuffle", 1);
        let mut r2 = stream(5, "shuffle", 1);
        assert_eq!(batch_order(32, 8, &mut r1), batch_order(32, 8, &mut r2));
    }

    #[test]
    fn pad_extension_preserves_content() {
        let v = vocab();
        let b = Batch::from_sentences(&["a b"], None, &v, 3).unwrap();
        let e = b.pad_extended(2);
        assert_eq!(e.width, b.width + 2);
        assert_eq!(e.lengths, b.lengths);
        assert_eq!(&e.row(0)[..b.width], b.row(0));
        assert!(e.row(0)[b.width..].iter().all(|&i| i == PAD));
    }
}
