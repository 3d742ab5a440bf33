//! Whitespace tokenizer over a fixed vocabulary and a frozen embedding table,
//! standing in for a pretrained text encoder.

use std::sync::OnceLock;

use crate::enhance::{lemma, normalize_token, FUNCTION_WORDS, IRREGULAR, VERBS};
use crate::error::Result;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

const NOUNS: &[&str] = &[
    "hand", "hands", "finger", "fingers", "thumb", "palm", "fist", "wrist", "arm", "arms", "person", "man",
    "woman", "child", "people", "face", "head", "body", "cup", "mug", "umbrella", "phone", "ball", "book",
    "pen", "pencil", "bag", "bottle", "glass", "knife", "fork", "spoon", "keyboard", "table", "desk", "chair",
    "camera", "handle", "guitar", "flower", "apple", "card", "sign", "rope", "door", "wall", "window", "room",
    "kitchen", "street", "park", "beach", "office", "studio", "background", "light", "sun", "sunny", "indoor",
    "outdoor", "left", "right", "open", "palm", "gesture", "peace", "thumbs", "wave", "blob", "silhouette",
    "pink", "red", "blue", "green", "white", "black", "bright", "dark", "textured", "plain", "small", "large",
    "casually", "smiling", "camera", "towards", "around", "front", "side", "top", "bottom", "center",
];

/// Fixed vocabulary: two specials followed by the deduplicated word lists.
pub fn vocabulary() -> &'static [String] {
    static VOCAB: OnceLock<Vec<String>> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let mut words: Vec<String> = vec!["<pad>".into(), "<unk>".into()];
        for w in FUNCTION_WORDS.iter().chain(VERBS).chain(IRREGULAR).chain(NOUNS) {
            if !words.iter().any(|x| x == w) {
                words.push((*w).to_string());
            }
        }
        words
    })
}

pub fn token_id(word: &str) -> usize {
    let vocab = vocabulary();
    let w = normalize_token(word);
    let find = |w: &str| vocab.iter().position(|v| v == w);
    find(&w).or_else(|| lemma(&w).and_then(|l| find(&l))).unwrap_or(UNK)
}

#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub tokens: Vec<usize>,
    /// `[L×d_text]`.
    pub embeddings: Tensor,
    pub token_strings: Vec<String>,
}

impl TextEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Splits on whitespace and truncates to `max_tokens` (with a warning).
/// An empty prompt becomes a single `<pad>` token.
pub fn tokenize(prompt: &str, max_tokens: usize) -> (Vec<usize>, Vec<String>) {
    let mut words: Vec<String> = prompt.split_whitespace().map(str::to_string).collect();
    if words.len() > max_tokens {
        log::warn!("prompt has {} tokens, truncating to {max_tokens}", words.len());
        words.truncate(max_tokens);
    }
    if words.is_empty() {
        return (vec![PAD], vec!["<pad>".to_string()]);
    }
    (words.iter().map(|w| token_id(w)).collect(), words)
}

fn positional(pos: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..width)
        .map(|i| {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            if i < half {
                (pos as f64 * freq).sin()
            } else {
                (pos as f64 * freq).cos()
            }
        })
        .collect()
}

/// Looks up rows of `table[V×d]` and adds a fixed sinusoidal position code.
pub fn embed(table: &Tensor, prompt: &str, max_tokens: usize) -> Result<TextEmbedding> {
    let d = table.shape()[1];
    let (tokens, token_strings) = tokenize(prompt, max_tokens);
    let mut data = Vec::with_capacity(tokens.len() * d);
    for (pos, &id) in tokens.iter().enumerate() {
        let row = &table.data()[id * d..(id + 1) * d];
        data.extend(row.iter().zip(positional(pos, d)).map(|(a, b)| a + b));
    }
    Ok(TextEmbedding { embeddings: Tensor::from_vec(&[tokens.len(), d], data)?, tokens, token_strings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_stable_and_unique() {
        let v = vocabulary();
        assert_eq!(v[PAD], "<pad>");
        assert_eq!(v[UNK], "<unk>");
        let mut sorted = v.to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), v.len());
    }

    #[test]
    fn inflections_map_to_lemmas() {
        assert_eq!(token_id("holding"), token_id("hold"));
        assert_eq!(token_id("Grabbing,"), token_id("grab"));
        assert_ne!(token_id("hold"), UNK);
        assert_eq!(token_id("zyzzyva"), UNK);
    }

    #[test]
    fn embedding_rows_align_with_tokens() {
        let table = Tensor::ones(&[vocabulary().len(), 8]);
        let e = embed(&table, "a hand holding a cup", 16).unwrap();
        assert_eq!(e.tokens.len(), 5);
        assert_eq!(e.token_strings.len(), 5);
        assert_eq!(e.embeddings.shape(), &[5, 8]);
        let e = embed(&table, "", 16).unwrap();
        assert_eq!(e.tokens, vec![PAD]);
        let e = embed(&table, "w w w w w w", 4).unwrap();
        assert_eq!(e.len(), 4);
    }
}
