//! Prompt rendering and embedding splicing.
//!
//! A prompt carries `K` literal placeholder pairs. Splicing inserts each
//! series' adapted rows between the two boundary tokens of its pair; both
//! boundary tokens are retained, so the fused length is always
//! `M + sum(N_i)` where `M` counts every text token.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adapter::AdaptedEmbedding;
use crate::error::{Error, Result};
use crate::tokenizer::{Tokenizer, TS_CLOSE, TS_OPEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSegment {
    pub role: Role,
    pub text: String,
}

/// Prompt text with `K` placeholder pairs, split into role segments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub segments: Vec<PromptSegment>,
}

impl PromptTemplate {
    pub fn user(text: impl Into<String>) -> Self {
        PromptTemplate {
            segments: vec![PromptSegment {
                role: Role::User,
                text: text.into(),
            }],
        }
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        for (i, seg) in self.segments.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&seg.text);
        }
        out
    }

    /// Number of well-formed placeholder pairs.
    pub fn placeholder_count(&self) -> Result<usize> {
        count_placeholder_pairs(&self.text())
    }
}

/// Counts adjacent open/close pairs, rejecting orphan or nested markers.
pub fn count_placeholder_pairs(text: &str) -> Result<usize> {
    let mut count = 0;
    let mut rest = text;
    while let Some(open) = rest.find(TS_OPEN) {
        let after = &rest[open + TS_OPEN.len()..];
        if !after.starts_with(TS_CLOSE) {
            return Err(Error::config(
                "malformed placeholder: open marker not immediately followed by close marker",
            ));
        }
        count += 1;
        rest = &after[TS_CLOSE.len()..];
    }
    if rest.contains(TS_CLOSE) || text[..text.len() - rest.len()].matches(TS_CLOSE).count() != count {
        return Err(Error::config("malformed placeholder: orphan close marker"));
    }
    Ok(count)
}

/// Emit the final prompt text, checking the placeholder arity.
pub fn render_prompt(template: &PromptTemplate, k_series: usize) -> Result<String> {
    let k = template.placeholder_count()?;
    if k != k_series {
        return Err(Error::PlaceholderMismatch {
            placeholders: k,
            series: k_series,
        });
    }
    Ok(template.text())
}

/// Tag for every fused position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    /// Index into the original text-token sequence.
    Text { token_index: usize },
    /// Row `row` of adapted series `series`.
    Series { series: usize, row: usize },
}

/// The interleaved token/series sequence fed to the language model.
pub struct FusedInput {
    /// `T x d_text` with `T = M + sum(N_i)`; no positional encoding yet.
    pub embeddings: Array2<f64>,
    pub segment_map: Vec<Segment>,
    /// 1 where the position holds a supervised target token.
    pub loss_mask: Vec<u8>,
    /// Per fused position: the text token id, or pad at series rows.
    pub target_ids: Vec<u32>,
    /// The original text token ids (length `M`).
    pub token_ids: Vec<u32>,
    /// Fused offset where the answer region begins (`T` when absent).
    pub answer_span: usize,
}

impl FusedInput {
    pub fn len(&self) -> usize {
        self.segment_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_map.is_empty()
    }

    /// Positions (fused row, token index) of text rows, for scatter ops.
    pub fn text_rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.segment_map.iter().enumerate().filter_map(|(pos, seg)| match seg {
            Segment::Text { token_index } => Some((pos, *token_index)),
            Segment::Series { .. } => None,
        })
    }

    /// Contiguous fused row range occupied by series `i`.
    pub fn series_rows(&self, series: usize) -> Option<std::ops::Range<usize>> {
        let mut start = None;
        let mut end = 0;
        for (pos, seg) in self.segment_map.iter().enumerate() {
            if let Segment::Series { series: s, .. } = seg {
                if *s == series {
                    if start.is_none() {
                        start = Some(pos);
                    }
                    end = pos + 1;
                }
            }
        }
        start.map(|s| s..end)
    }
}

/// Insert adapted series rows between each placeholder pair's tokens.
pub fn splice(
    token_embs: &Array2<f64>,
    token_ids: &[u32],
    series_embs: &[AdaptedEmbedding],
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<FusedInput> {
    if token_embs.nrows() != token_ids.len() {
        return Err(Error::config(format!(
            "token embedding rows {} != token id count {}",
            token_embs.nrows(),
            token_ids.len()
        )));
    }
    let open = tokenizer.ts_open_id();
    let close = tokenizer.ts_close_id();
    let mut pairs = Vec::new();
    let mut idx = 0;
    while idx < token_ids.len() {
        if token_ids[idx] == open {
            if idx + 1 >= token_ids.len() || token_ids[idx + 1] != close {
                return Err(Error::config(
                    "malformed placeholder: open marker not immediately followed by close marker",
                ));
            }
            pairs.push(idx);
            idx += 2;
        } else if token_ids[idx] == close {
            return Err(Error::config("malformed placeholder: orphan close marker"));
        } else {
            idx += 1;
        }
    }
    if pairs.len() != series_embs.len() {
        return Err(Error::PlaceholderMismatch {
            placeholders: pairs.len(),
            series: series_embs.len(),
        });
    }
    let m = token_ids.len();
    let total: usize = m + series_embs.iter().map(|e| e.matrix.nrows()).sum::<usize>();
    if total > max_len {
        return Err(Error::Overlength {
            actual: total,
            max: max_len,
        });
    }
    let d = token_embs.ncols();
    let mut embeddings = Array2::zeros((total, d));
    let mut segment_map = Vec::with_capacity(total);
    let mut target_ids = Vec::with_capacity(total);
    let mut fused_row = 0;
    let mut next_series = 0;
    for (token_index, &id) in token_ids.iter().enumerate() {
        embeddings.row_mut(fused_row).assign(&token_embs.row(token_index));
        segment_map.push(Segment::Text { token_index });
        target_ids.push(id);
        fused_row += 1;
        if next_series < pairs.len() && token_index == pairs[next_series] {
            let block = &series_embs[next_series].matrix;
            if block.ncols() != d {
                return Err(Error::config(format!(
                    "series {} width {} does not match text width {d}",
                    next_series,
                    block.ncols()
                )));
            }
            for row in 0..block.nrows() {
                embeddings.row_mut(fused_row).assign(&block.row(row));
                segment_map.push(Segment::Series {
                    series: next_series,
                    row,
                });
                target_ids.push(tokenizer.pad_id());
                fused_row += 1;
            }
            next_series += 1;
        }
    }
    debug_assert_eq!(fused_row, total);
    Ok(FusedInput {
        embeddings,
        segment_map,
        loss_mask: vec![0; total],
        target_ids,
        token_ids: token_ids.to_vec(),
        answer_span: total,
    })
}

/// Mark the trailing `target_len` fused positions as supervised.
pub fn supervise_tail(fused: &mut FusedInput, target_len: usize) -> Result<()> {
    if target_len == 0 {
        return Err(Error::NoSupervisedPositions);
    }
    let t = fused.len();
    if target_len >= t {
        return Err(Error::config("target overlaps the whole sequence"));
    }
    for pos in t - target_len..t {
        if matches!(fused.segment_map[pos], Segment::Series { .. }) {
            return Err(Error::config("target region overlaps series rows"));
        }
        fused.loss_mask[pos] = 1;
    }
    fused.answer_span = t - target_len;
    Ok(())
}
