//! Hand-structure attention enhancement: tag hand-related prompt tokens and
//! add a constant logit bias on those keys inside cross-attention.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default bias strength.
pub const DEFAULT_ALPHA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BiasSpec {
    pub alpha: f64,
    pub index_list: BTreeSet<usize>,
}

impl BiasSpec {
    pub fn new(alpha: f64, index_list: impl IntoIterator<Item = usize>) -> Result<BiasSpec> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidRange(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        Ok(BiasSpec { alpha, index_list: index_list.into_iter().collect() })
    }

    pub fn is_noop(&self) -> bool {
        self.alpha == 0.0 || self.index_list.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosTag {
    Verb,
    Noun,
    Other,
}

/// How the VERB and "hand" criteria combine into the index list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IndexRule {
    #[default]
    Union,
    Intersection,
}

impl FromStr for IndexRule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "union" => Ok(IndexRule::Union),
            "intersection" => Ok(IndexRule::Intersection),
            other => Err(format!("unknown index rule {other:?} (expected union|intersection)")),
        }
    }
}

impl fmt::Display for IndexRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IndexRule::Union => "union",
            IndexRule::Intersection => "intersection",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedPrompt {
    pub tokens: Vec<String>,
    pub tags: Vec<PosTag>,
    pub index_list: BTreeSet<usize>,
}

pub const VERBS: &[&str] = &[
    "hold", "grab", "grip", "wave", "shake", "point", "clap", "touch", "raise", "lift", "carry", "wear", "use",
    "play", "type", "write", "draw", "paint", "cook", "cut", "eat", "drink", "throw", "catch", "push", "pull",
    "open", "close", "press", "hug", "fold", "cross", "rest", "reach", "give", "take", "put", "show", "sign",
    "count", "pet", "stroke", "scratch", "rub", "wash", "brush", "tie", "squeeze", "pick", "smile", "look",
    "stand", "sit", "walk", "run", "lean", "wrap", "cover", "support", "adjust", "tap", "knock", "swing",
    "hit", "kick", "jump", "dance", "sing", "read", "talk", "call", "text", "scroll", "pour", "stir", "slice",
    "chop", "peel", "mix", "feed", "hang", "climb", "balance", "spread", "stretch", "flex", "clench", "pinch",
    "twist", "turn", "rotate", "hide", "snap", "salute", "applaud", "gesture", "gesticulate", "greet",
];

pub const IRREGULAR: &[&str] = &[
    "held", "caught", "threw", "thrown", "took", "taken", "gave", "given", "wore", "worn", "ate", "eaten",
    "drank", "drunk", "drew", "drawn", "wrote", "written", "shook", "shaken", "stood", "sat", "ran", "hung",
    "swung", "hit", "read", "spread", "put",
];

// Function words and auxiliaries never count as verbs here; only lexical
// verbs carry hand-action content.
pub const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "the", "of", "with", "in", "on", "at", "to", "and", "or", "but", "his", "her", "their", "its",
    "my", "your", "our", "is", "are", "was", "were", "be", "been", "being", "am", "has", "have", "had", "do",
    "does", "did", "by", "for", "from", "while", "as", "this", "that", "these", "those", "near", "under",
    "over", "behind", "into", "onto", "up", "down", "out", "off", "it", "he", "she", "they", "we", "i", "you",
    "him", "them", "who", "which", "what", "there", "here", "very", "not", "no", "so", "than", "then",
    "appears", "seems", "possibly", "likely", "one", "two", "both", "each", "some", "any", "all",
];

/// Lowercased token with leading/trailing punctuation removed.
pub fn normalize_token(token: &str) -> String {
    token.trim_matches(|c: char| !c.is_ascii_alphanumeric()).to_ascii_lowercase()
}

/// Base form of a regular verb inflection ("grabbing" -> "grab"), if the
/// stem is in the verb list.
pub fn lemma(word: &str) -> Option<String> {
    let resolve = |stem: &str| -> Option<String> {
        if VERBS.contains(&stem) {
            return Some(stem.to_string());
        }
        let with_e = format!("{stem}e");
        if VERBS.contains(&with_e.as_str()) {
            return Some(with_e);
        }
        let b = stem.as_bytes();
        if b.len() >= 2 && b[b.len() - 1] == b[b.len() - 2] && VERBS.contains(&&stem[..stem.len() - 1]) {
            return Some(stem[..stem.len() - 1].to_string());
        }
        None
    };
    ["ing", "ed", "es", "s"].iter().find_map(|suf| word.strip_suffix(suf).and_then(resolve))
}

pub fn tag_word(word: &str) -> PosTag {
    let w = normalize_token(word);
    if w.is_empty() || !w.bytes().all(|b| b.is_ascii_alphabetic()) {
        return PosTag::Other;
    }
    if FUNCTION_WORDS.contains(&w.as_str()) {
        return PosTag::Other;
    }
    if VERBS.contains(&w.as_str()) || IRREGULAR.contains(&w.as_str()) {
        return PosTag::Verb;
    }
    if lemma(&w).is_some() {
        return PosTag::Verb;
    }
    // unknown "-ing" forms of 3+ letter stems are still taken as verbs
    if w.strip_suffix("ing").is_some_and(|stem| stem.len() >= 3) {
        return PosTag::Verb;
    }
    PosTag::Noun
}

/// Whitespace-tokenizes `prompt`, tags each token and derives the index list.
pub fn tag_hand_tokens(prompt: &str, rule: IndexRule) -> Result<TaggedPrompt> {
    let tokens: Vec<String> = prompt.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let tags: Vec<PosTag> = tokens.iter().map(|t| tag_word(t)).collect();
    let index_list = tokens
        .iter()
        .zip(&tags)
        .enumerate()
        .filter(|(_, (tok, tag))| {
            let verb = **tag == PosTag::Verb;
            let hand = normalize_token(tok).contains("hand");
            match rule {
                IndexRule::Union => verb || hand,
                IndexRule::Intersection => verb && hand,
            }
        })
        .map(|(i, _)| i)
        .collect();
    Ok(TaggedPrompt { tokens, tags, index_list })
}

/// `B[q,k] = alpha` for `k` in the index list, else 0.
pub fn build_bias(spec: &BiasSpec, q_count: usize, k_count: usize) -> Result<Tensor> {
    if let Some(&bad) = spec.index_list.iter().find(|&&i| i >= k_count) {
        return Err(Error::IndexOutOfRange { index: bad, count: k_count });
    }
    let mut data = vec![0.0; q_count * k_count];
    for row in data.chunks_mut(k_count) {
        for &k in &spec.index_list {
            row[k] = spec.alpha;
        }
    }
    Ok(Tensor::from_vec(&[q_count, k_count], data)?)
}

/// Projection weights of one cross-attention layer.
#[derive(Debug, Clone)]
pub struct CrossAttentionWeights {
    /// `[C×C]`, applied to the image-side tokens.
    pub query: Tensor,
    /// `[d_text×C]`, applied to the text embedding.
    pub key: Tensor,
    /// `[d_text×C]`.
    pub value: Tensor,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct CrossAttentionOut {
    /// `M·V` with heads concatenated, `[N×C]`.
    pub output: Tensor,
    /// Head-averaged `M_cross`, `[N×L]`.
    pub attention: Tensor,
    /// Per-head `M_cross`.
    pub per_head: Vec<Tensor>,
}

/// `M = softmax(Q Kᵀ / sqrt(d_k) + B)`, output `M V`, per head.
/// Queries come from `phi[N×C]`, keys and values from `text[L×d_text]`.
pub fn biased_cross_attention(
    phi: &Tensor,
    text: &Tensor,
    weights: &CrossAttentionWeights,
    spec: Option<&BiasSpec>,
) -> Result<CrossAttentionOut> {
    let q = phi.matmul(&weights.query)?;
    let k = text.matmul(&weights.key)?;
    let v = text.matmul(&weights.value)?;
    let c = q.shape()[1];
    if k.shape()[1] != c || v.shape()[1] != c {
        return Err(Error::ShapeMismatch(format!("query width {c}, key width {}", k.shape()[1])));
    }
    let heads = weights.heads;
    if heads == 0 || c % heads != 0 {
        return Err(Error::ShapeMismatch(format!("{c} channels not divisible by {heads} heads")));
    }
    let dh = c / heads;
    let (n, l) = (q.shape()[0], k.shape()[0]);
    let bias = match spec {
        Some(s) => Some(build_bias(s, n, l)?),
        None => None,
    };
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.narrow(1, h * dh, dh)?;
        let kh = k.narrow(1, h * dh, dh)?;
        let vh = v.narrow(1, h * dh, dh)?;
        let logits = qh.matmul(&kh.transpose()?)?.scale(scale);
        let m = logits.softmax_rows(bias.as_ref())?;
        outs.push(m.matmul(&vh)?);
        maps.push(m);
    }
    let mut attention = maps[0].clone();
    for m in &maps[1..] {
        attention = attention.add(m)?;
    }
    let attention = if heads > 1 { attention.scale(1.0 / heads as f64) } else { attention };
    Ok(CrossAttentionOut { output: Tensor::concat(&outs, 1)?, attention, per_head: maps })
}

/// Mean over queries of the attention mass that lands on `indices`.
pub fn attention_mass(m_cross: &Tensor, indices: &BTreeSet<usize>) -> f64 {
    let (q, k) = (m_cross.shape()[0], m_cross.shape()[1]);
    let total: f64 = m_cross
        .data()
        .chunks(k)
        .map(|row| indices.iter().filter(|&&i| i < k).map(|&i| row[i]).sum::<f64>())
        .sum();
    total / q as f64
}
