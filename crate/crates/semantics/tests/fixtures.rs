use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use sesa_semantics::{
    build_dataset, caption, caption_messages, compose, extract, extract_messages, repair_messages, Client, ExtractOptions, FewShot,
    FixtureResponse, FixtureTable, ModelEndpoint, Role, SemanticsError, SemanticsRecord,
};

const UMBRELLA_INPUT: &str =
    "In the image, the person is holding a pink umbrella with one hand and appears to be smiling while looking towards the camera...";

const UMBRELLA_OUTPUT: &str = r#"{
  "key_entities": "person, umbrella",
  "pose": "standing casually",
  "action": "appears to be smiling while looking towards the camera",
  "hand_action": "One hand is holding a pink umbrella and wraps around the handle...",
  "env": "possibly at sunny beach"
}"#;

fn endpoint(role: Role) -> ModelEndpoint {
    let url = if role == Role::Captioner { "mock:captioner" } else { "mock:extractor" };
    ModelEndpoint::new(url, "mock-model", Duration::from_secs(1), 0, role).unwrap()
}

fn client(role: Role, table: &FixtureTable) -> Client {
    Client::for_endpoint(endpoint(role), Some(Arc::new(table.clone()))).unwrap()
}

fn body(role: Role, messages: &[serde_json::Value]) -> serde_json::Value {
    Client::with_transport(endpoint(role), Arc::new(FixtureTable::default())).unwrap().request_body(messages)
}

fn add_extract(table: &mut FixtureTable, caption: &str, reply: &str) {
    table.insert(&body(Role::Extractor, &extract_messages(caption, &FewShot::default())), FixtureResponse::Content(reply.into()));
}

fn umbrella_record() -> SemanticsRecord {
    SemanticsRecord {
        key_entities: "person, umbrella".into(),
        pose: "standing casually".into(),
        action: "appears to be smiling while looking towards the camera".into(),
        hand_action: "One hand is holding a pink umbrella and wraps around the handle...".into(),
        env: "possibly at sunny beach".into(),
    }
}

#[test]
fn umbrella_example_round_trips() {
    let mut table = FixtureTable::default();
    add_extract(&mut table, UMBRELLA_INPUT, UMBRELLA_OUTPUT);
    let ex = extract(UMBRELLA_INPUT, &FewShot::default(), &client(Role::Extractor, &table)).unwrap();
    assert_eq!(ex.record, umbrella_record());
    assert_eq!(ex.repair_count, 0);
    assert_eq!(
        compose(&ex.record).final_text,
        "standing casually. appears to be smiling while looking towards the camera. One hand is holding a pink umbrella and wraps around the handle... . possibly at sunny beach"
    );
}

#[test]
fn caption_fixture_is_returned_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.pgm");
    std::fs::write(&img, b"P5\n1 1\n255\n\x80").unwrap();
    let mut table = FixtureTable::default();
    let bytes = std::fs::read(&img).unwrap();
    table.insert(&body(Role::Captioner, &caption_messages(&img, &bytes)), FixtureResponse::Content(UMBRELLA_INPUT.into()));
    assert_eq!(caption(&img, &client(Role::Captioner, &table)).unwrap(), UMBRELLA_INPUT);
    let wrong = caption(&img, &client(Role::Extractor, &table)).unwrap_err();
    assert!(matches!(wrong, SemanticsError::WrongRole { .. }));
}

#[test]
fn malformed_reply_is_repaired_once() {
    let mut table = FixtureTable::default();
    add_extract(&mut table, "cap", "not json");
    let repair = repair_messages(&extract_messages("cap", &FewShot::default()), "not json");
    table.insert(&body(Role::Extractor, &repair), FixtureResponse::Content(UMBRELLA_OUTPUT.into()));
    let ex = extract("cap", &FewShot::default(), &client(Role::Extractor, &table)).unwrap();
    assert_eq!(ex.repair_count, 1);
    assert_eq!(ex.record, umbrella_record());

    let mut table = FixtureTable::default();
    add_extract(&mut table, "cap", "still {not json");
    let repair = repair_messages(&extract_messages("cap", &FewShot::default()), "still {not json");
    table.insert(&body(Role::Extractor, &repair), FixtureResponse::Content("nope".into()));
    let err = extract("cap", &FewShot::default(), &client(Role::Extractor, &table)).unwrap_err();
    assert!(matches!(err, SemanticsError::MalformedJson { repairs: 1, .. }));
}

#[test]
fn schema_is_enforced() {
    let mut table = FixtureTable::default();
    add_extract(&mut table, "no env", r#"{"key_entities":"a","pose":"b","action":"c","hand_action":"d"}"#);
    let err = extract("no env", &FewShot::default(), &client(Role::Extractor, &table)).unwrap_err();
    assert_eq!(err, SemanticsError::MissingField("env".into()));
}

fn write_images(dir: &Path, n: usize) -> Vec<PathBuf> {
    (0..n)
        .map(|i| {
            let p = dir.join(format!("img{i}.pgm"));
            std::fs::write(&p, [b"P5\n1 1\n255\n".as_slice(), &[i as u8 * 40]].concat()).unwrap();
            p
        })
        .collect()
}

fn dataset_fixtures(images: &[PathBuf], broken: Option<usize>) -> FixtureTable {
    let mut table = FixtureTable::default();
    for (i, img) in images.iter().enumerate() {
        let cap = format!("A person number {i} is waving one hand in a park.");
        let bytes = std::fs::read(img).unwrap();
        table.insert(&body(Role::Captioner, &caption_messages(img, &bytes)), FixtureResponse::Content(cap.clone()));
        if broken == Some(i) {
            table.insert(&body(Role::Extractor, &extract_messages(&cap, &FewShot::default())), FixtureResponse::Status { status: 500 });
        } else {
            let rec = format!(
                r#"{{"key_entities":"person","pose":"standing","action":"looking around","hand_action":"one hand waving {i}","env":"in a park"}}"#
            );
            add_extract(&mut table, &cap, &rec);
        }
    }
    table
}

#[test]
fn dataset_manifest_accounting_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let images = write_images(dir.path(), 3);
    let table = dataset_fixtures(&images, Some(1));
    let out = dir.path().join("manifest.jsonl");
    let run = |par: usize| {
        let (cap, ext) = (client(Role::Captioner, &table), client(Role::Extractor, &table));
        build_dataset(&images, &cap, &ext, &FewShot::default(), &ExtractOptions::default(), par, &out).unwrap();
        std::fs::read(&out).unwrap()
    };
    let first = run(1);
    let text = String::from_utf8(first.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines.iter().filter(|l| l.contains("\"status\":\"ok\"")).count(), 2);
    assert!(lines[1].contains("\"status\":\"network_error\""));
    assert!(lines[0].contains("\"final_prompt\":\"standing. looking around. one hand waving 0. in a park\""));
    assert_eq!(run(1), first);
    assert_eq!(run(3), first);
}

#[test]
fn empty_dataset_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.jsonl");
    let table = FixtureTable::default();
    let lines = build_dataset(&[], &client(Role::Captioner, &table), &client(Role::Extractor, &table), &FewShot::default(), &ExtractOptions::default(), 4, &out)
        .unwrap();
    assert!(lines.is_empty());
    assert_eq!(std::fs::read(&out).unwrap(), b"");
}
