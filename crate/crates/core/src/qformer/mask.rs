use serde::{Deserialize, Serialize};

use crate::tensor::AttentionMask;

/// Self-attention pattern over the concatenated `(queries ‖ text)` sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Queries see queries, text sees text.
    Unimodal,
    /// Everything sees everything.
    Bidirectional,
    /// Queries see queries; text position `t` sees all queries and text `<= t`.
    MultimodalCausal,
}

impl MaskMode {
    pub const ALL: [MaskMode; 3] = [
        MaskMode::Unimodal,
        MaskMode::Bidirectional,
        MaskMode::MultimodalCausal,
    ];
}

pub fn build_attention_mask(mode: MaskMode, n_queries: usize, text_len: usize) -> AttentionMask {
    let n = n_queries + text_len;
    AttentionMask::from_fn(n, n, |i, j| {
        let (iq, jq) = (i < n_queries, j < n_queries);
        match mode {
            MaskMode::Bidirectional => true,
            MaskMode::Unimodal => iq == jq,
            MaskMode::MultimodalCausal => {
                if iq {
                    jq
                } else {
                    jq || j <= i
                }
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(m: &AttentionMask) -> Vec<Vec<u8>> {
        m.to_rows()
    }

    #[test]
    fn unimodal_is_block_diagonal() {
        assert_eq!(
            rows(&build_attention_mask(MaskMode::Unimodal, 2, 2)),
            vec![vec![1, 1, 0, 0], vec![1, 1, 0, 0], vec![0, 0, 1, 1], vec![0, 0, 1, 1]]
        );
    }

    #[test]
    fn bidirectional_is_full() {
        let m = build_attention_mask(MaskMode::Bidirectional, 2, 2);
        assert!(m.as_slice().iter().all(|&b| b));
    }

    #[test]
    fn causal_example() {
        assert_eq!(
            rows(&build_attention_mask(MaskMode::MultimodalCausal, 1, 2)),
            vec![vec![1, 0, 0], vec![1, 1, 0], vec![1, 1, 1]]
        );
    }

    #[test]
    fn text_only_sequences() {
        let m = build_attention_mask(MaskMode::MultimodalCausal, 0, 2);
        assert_eq!(rows(&m), vec![vec![1, 0], vec![1, 1]]);
    }
}
