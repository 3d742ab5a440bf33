use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::client::{Client, Role};
use crate::compose::compose;
use crate::{Result, SemanticsError, SemanticsRecord, FIELDS};

const CAPTION_INSTRUCTION: &str = "Describe the person in this image: their pose, what they are doing, \
what each hand is doing and holding, and the surroundings. Answer in a few plain sentences.";

const EXTRACT_INSTRUCTION: &str = "Extract human behavior semantics from the image description. \
Reply with only a JSON object with exactly these string keys: \
\"key_entities\", \"pose\", \"action\", \"hand_action\", \"env\". \
\"hand_action\" must describe what the hands are doing.";

/// One worked input/output pair shown to the extractor before the real caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShot {
    pub input: String,
    pub output: SemanticsRecord,
}

impl Default for FewShot {
    fn default() -> Self {
        FewShot {
            input: "In the image, the person is holding a pink umbrella with one hand and appears to be smiling while looking towards the camera...".into(),
            output: SemanticsRecord {
                key_entities: "person, umbrella".into(),
                pose: "standing casually".into(),
                action: "appears to be smiling while looking towards the camera".into(),
                hand_action: "One hand is holding a pink umbrella and wraps around the handle...".into(),
                env: "possibly at sunny beach".into(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractOptions {
    pub max_field_len: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions { max_field_len: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub record: SemanticsRecord,
    pub repair_count: u32,
}

fn require_role(client: &Client, expected: Role) -> Result<()> {
    if client.endpoint.role != expected {
        return Err(SemanticsError::WrongRole { endpoint: client.endpoint.base_url.clone(), expected, actual: client.endpoint.role });
    }
    Ok(())
}

fn mime_for(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("ppm") => "image/x-portable-pixmap",
        Some("pgm") => "image/x-portable-graymap",
        _ => "application/octet-stream",
    }
}

/// Chat messages for captioning an image file's bytes, sent as a base64 data URL.
pub fn caption_messages(image_path: &Path, bytes: &[u8]) -> Vec<Value> {
    let data = base64::engine::general_purpose::STANDARD.encode(bytes);
    vec![
        json!({"role": "system", "content": CAPTION_INSTRUCTION}),
        json!({"role": "user", "content": [
            {"type": "text", "text": "Describe this image."},
            {"type": "image_url", "image_url": {"url": format!("data:{};base64,{data}", mime_for(image_path))}},
        ]}),
    ]
}

/// `X_t = Captioner(X)`.
pub fn caption(image_path: &Path, client: &Client) -> Result<String> {
    require_role(client, Role::Captioner)?;
    let bytes = std::fs::read(image_path).map_err(|e| SemanticsError::Io(format!("{}: {e}", image_path.display())))?;
    client.complete(&caption_messages(image_path, &bytes))
}

/// Instruction, the few-shot pair as a prior exchange, then the caption.
pub fn extract_messages(caption: &str, few_shot: &FewShot) -> Vec<Value> {
    let example = serde_json::to_string(&few_shot.output).expect("record serializes");
    vec![
        json!({"role": "system", "content": EXTRACT_INSTRUCTION}),
        json!({"role": "user", "content": few_shot.input}),
        json!({"role": "assistant", "content": example}),
        json!({"role": "user", "content": caption}),
    ]
}

/// `messages` extended with the unparsable reply and a request to fix it.
pub fn repair_messages(messages: &[Value], bad_reply: &str) -> Vec<Value> {
    let detail = match parse_record(bad_reply) {
        Err(SemanticsError::MalformedJson { detail, .. }) => detail,
        _ => "invalid JSON".into(),
    };
    let mut out = messages.to_vec();
    out.push(json!({"role": "assistant", "content": bad_reply}));
    out.push(json!({"role": "user", "content": format!("Your reply could not be parsed ({detail}). Reply again with only the JSON object.")}));
    out
}

/// Parses a five-key record, tolerating surrounding prose or code fences.
pub fn parse_record(text: &str) -> Result<SemanticsRecord> {
    let malformed = |detail: String| SemanticsError::MalformedJson { detail, repairs: 0 };
    let (start, end) = match (text.find('{'), text.rfind('}')) {
        (Some(s), Some(e)) if s < e => (s, e),
        _ => return Err(malformed("no JSON object in reply".into())),
    };
    let value: Value = serde_json::from_str(&text[start..=end]).map_err(|e| malformed(e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(malformed("reply is not a JSON object".into()));
    };
    for f in FIELDS {
        if !map.contains_key(f) {
            return Err(SemanticsError::MissingField(f.into()));
        }
    }
    if let Some(extra) = map.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(SemanticsError::UnexpectedField(extra.clone()));
    }
    let get = |f: &str| match &map[f] {
        Value::String(s) => Ok(s.clone()),
        other => Err(malformed(format!("field {f:?} is {other}, expected a string"))),
    };
    Ok(SemanticsRecord { key_entities: get("key_entities")?, pose: get("pose")?, action: get("action")?, hand_action: get("hand_action")?, env: get("env")? })
}

pub fn extract(caption: &str, few_shot: &FewShot, client: &Client) -> Result<Extraction> {
    extract_with(caption, few_shot, client, &ExtractOptions::default())
}

/// `P = Extractor(X_t, P_e)`. A reply that is not valid JSON gets one
/// re-prompt quoting the parse error.
pub fn extract_with(caption: &str, few_shot: &FewShot, client: &Client, opts: &ExtractOptions) -> Result<Extraction> {
    require_role(client, Role::Extractor)?;
    let messages = extract_messages(caption, few_shot);
    let reply = client.complete(&messages)?;
    let (record, repair_count) = match parse_record(&reply) {
        Err(SemanticsError::MalformedJson { .. }) => {
            let retry = client.complete(&repair_messages(&messages, &reply))?;
            match parse_record(&retry) {
                Err(SemanticsError::MalformedJson { detail, .. }) => return Err(SemanticsError::MalformedJson { detail, repairs: 1 }),
                other => (other?, 1),
            }
        }
        other => (other?, 0),
    };
    record.validate(opts.max_field_len)?;
    Ok(Extraction { record, repair_count })
}

/// One manifest row. Failed images keep their partial results and the error;
/// `status` is `ok`, `error`, or `network_error` for transport failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub image: String,
    pub caption: Option<String>,
    pub semantics: Option<SemanticsRecord>,
    pub final_prompt: Option<String>,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn process(image: &Path, captioner: &Client, extractor: &Client, few_shot: &FewShot, opts: &ExtractOptions) -> ManifestLine {
    let mut line = ManifestLine {
        image: image.display().to_string(),
        caption: None,
        semantics: None,
        final_prompt: None,
        status: "ok".into(),
        error: None,
    };
    let result = caption(image, captioner).and_then(|c| {
        line.caption = Some(c.clone());
        extract_with(&c, few_shot, extractor, opts)
    });
    match result {
        Ok(ex) => {
            line.final_prompt = Some(compose(&ex.record).final_text);
            line.semantics = Some(ex.record);
        }
        Err(e) => {
            log::warn!("{}: {e}", image.display());
            line.status = if e.is_network() { "network_error" } else { "error" }.into();
            line.error = Some(e.to_string());
        }
    }
    line
}

/// Runs caption -> extract -> compose for every image with up to
/// `parallelism` workers and writes a JSON-lines manifest in input order.
/// Per-image failures are recorded, not raised.
pub fn build_dataset(
    images: &[PathBuf],
    captioner: &Client,
    extractor: &Client,
    few_shot: &FewShot,
    opts: &ExtractOptions,
    parallelism: usize,
    out_path: &Path,
) -> Result<Vec<ManifestLine>> {
    let slots: Mutex<Vec<Option<ManifestLine>>> = Mutex::new(vec![None; images.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..parallelism.clamp(1, images.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(img) = images.get(i) else { break };
                let line = process(img, captioner, extractor, few_shot, opts);
                slots.lock().expect("slot lock")[i] = Some(line);
            });
        }
    });
    let lines: Vec<ManifestLine> = slots.into_inner().expect("slot lock").into_iter().map(|l| l.expect("every slot filled")).collect();
    let io = |e: std::io::Error| SemanticsError::Io(format!("{}: {e}", out_path.display()));
    let mut out = std::io::BufWriter::new(std::fs::File::create(out_path).map_err(io)?);
    for l in &lines {
        writeln!(out, "{}", serde_json::to_string(l).expect("manifest line serializes")).map_err(io)?;
    }
    out.flush().map_err(io)?;
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_tolerates_fences_and_rejects_schema_violations() {
        let ok = "```json\n{\"key_entities\":\"a\",\"pose\":\"b\",\"action\":\"c\",\"hand_action\":\"d\",\"env\":\"e\"}\n```";
        assert_eq!(parse_record(ok).unwrap().env, "e");
        let missing = r#"{"key_entities":"a","pose":"b","action":"c","hand_action":"d"}"#;
        assert_eq!(parse_record(missing), Err(SemanticsError::MissingField("env".into())));
        let extra = r#"{"key_entities":"a","pose":"b","action":"c","hand_action":"d","env":"e","mood":"f"}"#;
        assert_eq!(parse_record(extra), Err(SemanticsError::UnexpectedField("mood".into())));
        let number = r#"{"key_entities":"a","pose":1,"action":"c","hand_action":"d","env":"e"}"#;
        assert!(matches!(parse_record(number), Err(SemanticsError::MalformedJson { .. })));
        assert!(matches!(parse_record("not json"), Err(SemanticsError::MalformedJson { .. })));
        assert!(matches!(parse_record("{oops}"), Err(SemanticsError::MalformedJson { .. })));
    }

    #[test]
    fn validation_caps_and_requires_hand_action() {
        let mut r = FewShot::default().output;
        assert!(r.validate(1024).is_ok());
        assert!(matches!(r.validate(10), Err(SemanticsError::FieldTooLong { .. })));
        r.hand_action = " ".into();
        assert_eq!(r.validate(1024), Err(SemanticsError::MissingField("hand_action".into())));
    }
}
