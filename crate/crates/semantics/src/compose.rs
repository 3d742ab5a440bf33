use serde::{Deserialize, Serialize};

use crate::SemanticsRecord;

pub const SEPARATOR: &str = ". ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptComposition {
    pub final_text: String,
    pub source: SemanticsRecord,
    pub separator: String,
}

/// Collapses whitespace runs (newlines included) to one space, trims, and
/// drops a single trailing period. Ellipses are kept.
pub fn normalize_field(s: &str) -> String {
    let mut out = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if out.ends_with('.') && !out.ends_with("..") {
        out.pop();
        out.truncate(out.trim_end().len());
    }
    out
}

/// `P_f`: pose, action, hand action and environment joined with `". "`.
/// `key_entities` is not part of the prompt. A field ending in an ellipsis
/// gets a space before the separator so the ellipsis stays intact.
pub fn compose(record: &SemanticsRecord) -> PromptComposition {
    let fields = [&record.pose, &record.action, &record.hand_action, &record.env].map(|f| normalize_field(f));
    let mut text = String::new();
    for (i, f) in fields.iter().enumerate() {
        if i > 0 {
            if text.ends_with('.') {
                text.push(' ');
            }
            text.push_str(SEPARATOR);
        }
        text.push_str(f);
    }
    PromptComposition { final_text: text, source: record.clone(), separator: SEPARATOR.into() }
}

/// Inverse of [`compose`] for fields that do not themselves contain `". "`.
pub fn decompose(text: &str) -> Vec<String> {
    let mut parts = Vec::new();
    let mut rest = text;
    loop {
        let cut = rest.match_indices(SEPARATOR).find_map(|(i, _)| {
            let before = &rest[..i];
            if before.ends_with('.') {
                None
            } else if before.ends_with(". ") {
                Some((i - 1, i + SEPARATOR.len()))
            } else {
                Some((i, i + SEPARATOR.len()))
            }
        });
        match cut {
            Some((end, next)) => {
                parts.push(rest[..end].to_string());
                rest = &rest[next..];
            }
            None => {
                parts.push(rest.to_string());
                return parts;
            }
        }
    }
}
