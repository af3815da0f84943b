use crate::data::tokenizer::{CLS, PAD};
use crate::error::{Error, Result};

/// Padded token ids, one row per caption. Each row carries exactly one
/// `[CLS]`, which is its last non-pad token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextBatch {
    ids: Vec<usize>,
    batch: usize,
    len: usize,
    lengths: Vec<usize>,
    cls_positions: Vec<usize>,
}

impl TextBatch {
    /// Pads framed rows (see `Tokenizer::frame`) to `pad_to`, or to the
    /// longest row when `pad_to` is `None`.
    pub fn new(rows: &[Vec<usize>], vocab_size: usize, pad_to: Option<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("empty text batch"));
        }
        let longest = rows.iter().map(Vec::len).max().unwrap_or(0);
        let len = pad_to.unwrap_or(longest);
        if longest > len {
            return Err(Error::invalid(format!(
                "caption of {longest} tokens exceeds the {len}-token limit"
            )));
        }
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut lengths = Vec::with_capacity(rows.len());
        let mut cls_positions = Vec::with_capacity(rows.len());
        for (r, row) in rows.iter().enumerate() {
            let trimmed = match row.iter().rposition(|&t| t != PAD) {
                Some(p) => &row[..=p],
                None => &row[..0],
            };
            if let Some(&bad) = trimmed.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
            }
            let n_cls = trimmed.iter().filter(|&&t| t == CLS).count();
            if n_cls != 1 || trimmed.last() != Some(&CLS) {
                return Err(Error::invalid(format!(
                    "row {r} must end with exactly one [CLS] token"
                )));
            }
            cls_positions.push(trimmed.len() - 1);
            lengths.push(trimmed.len());
            ids.extend_from_slice(trimmed);
            ids.extend(std::iter::repeat_n(PAD, len - trimmed.len()));
        }
        Ok(TextBatch {
            ids,
            batch: rows.len(),
            len,
            lengths,
            cls_positions,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.len..(r + 1) * self.len]
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn cls_positions(&self) -> &[usize] {
        &self.cls_positions
    }

    /// Next-token targets per position; `[PAD]` and `[CLS]` targets are excluded.
    pub fn caption_targets(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.ids.len());
        for r in 0..self.batch {
            let row = self.row(r);
            for i in 0..self.len {
                out.push(match row.get(i + 1) {
                    Some(&t) if t != PAD && t != CLS => Some(t),
                    _ => None,
                });
            }
        }
        out
    }

    /// Selects a subset of rows, keeping the padded length.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let picked: Vec<Vec<usize>> = rows
            .iter()
            .map(|&r| {
                if r >= self.batch {
                    Err(Error::invalid(format!("row {r} out of range")))
                } else {
                    Ok(self.row(r).to_vec())
                }
            })
            .collect::<Result<_>>()?;
        let vocab = self.ids.iter().max().copied().unwrap_or(0) + 1;
        TextBatch::new(&picked, vocab, Some(self.len))
    }
}
