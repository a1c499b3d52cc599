use serde::{Deserialize, Serialize};

/// Attention pattern over the concatenated `[video | text]` sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Every real position sees every real position.
    Bidirectional,
    /// Video sees video only; text position `i` sees all video and text `<= i`.
    Seq2seqCausal,
}

/// Row-major `L × L` allow matrix with `L = video_len + text_len`.
/// `allow[q * L + k]` says whether query `q` may attend to key `k`. Padded text
/// positions neither attend nor are attended to.
pub fn build_attention_matrix(
    video_len: usize,
    text_len: usize,
    text_pad: &[bool],
    mode: AttentionMode,
) -> Vec<bool> {
    assert_eq!(text_pad.len(), text_len, "one padding flag per text position");
    let total = video_len + text_len;
    let padded = |p: usize| p >= video_len && text_pad[p - video_len];
    let mut allow = vec![false; total * total];
    for q in 0..total {
        if padded(q) {
            continue;
        }
        for k in 0..total {
            if padded(k) {
                continue;
            }
            allow[q * total + k] = match mode {
                AttentionMode::Bidirectional => true,
                AttentionMode::Seq2seqCausal => {
                    if q < video_len {
                        k < video_len
                    } else {
                        k < video_len || k <= q
                    }
                }
            };
        }
    }
    allow
}
