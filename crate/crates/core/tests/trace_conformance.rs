//! MOER reader conformance against the checked-in fixture files.

use std::fs;
use std::path::PathBuf;

use moe_congestion::traces::format::{decode, encode};
use moe_congestion::traces::RoutingTrace;
use moe_congestion::TraceError;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn tiny() -> RoutingTrace {
    let logits: Vec<f32> = (0..6 * 2 * 4)
        .map(|i| ((i * 7) % 11) as f32 * 0.25 - 1.0)
        .collect();
    RoutingTrace::new(4, 2, 2, 1.0, Some(0.01), logits, vec![0, 2, 6]).unwrap()
}

fn put_u32(bytes: &mut [u8], at: usize, v: u32) {
    bytes[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

/// Each corrupted fixture with the error class and field it must produce.
fn corruptions() -> Vec<(&'static str, Vec<u8>)> {
    let good = encode(&tiny());
    let mut out = Vec::new();

    let mut b = good.clone();
    b[..4].copy_from_slice(b"MOEX");
    out.push(("bad_magic.moer", b));

    let mut b = good.clone();
    put_u32(&mut b, 4, 2);
    out.push(("bad_version.moer", b));

    out.push(("empty.moer", Vec::new()));
    out.push(("truncated_header.moer", good[..20].to_vec()));
    out.push(("truncated_offsets.moer", good[..44].to_vec()));
    out.push(("truncated_logits.moer", good[..good.len() - 3].to_vec()));

    let mut b = good.clone();
    b.extend_from_slice(&[0, 0, 0, 0]);
    out.push(("trailing_bytes.moer", b));

    let mut b = good.clone();
    put_u32(&mut b, 20, 5);
    out.push(("topk_exceeds_experts.moer", b));

    let mut b = good.clone();
    put_u32(&mut b, 16, 1);
    out.push(("single_expert.moer", b));

    let mut b = good.clone();
    put_u32(&mut b, 40, 0);
    out.push(("offsets_not_increasing.moer", b));

    let mut b = good.clone();
    put_u32(&mut b, 44, 5);
    out.push(("offsets_end_mismatch.moer", b));

    let mut b = good.clone();
    b[24..28].copy_from_slice(&0.0f32.to_le_bytes());
    out.push(("zero_lambda.moer", b));

    let mut b = good.clone();
    let at = b.len() - 8;
    b[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    out.push(("nan_logit.moer", b));

    let mut b = good;
    put_u32(&mut b, 8, u32::MAX);
    put_u32(&mut b, 44, u32::MAX);
    out.push(("huge_token_count.moer", b));
    out
}

#[test]
#[ignore = "rewrites tests/fixtures"]
fn regenerate_fixtures() {
    let dir = fixtures();
    fs::write(dir.join("valid_tiny.moer"), encode(&tiny())).unwrap();
    let mut index = String::from("# file\tclass\tfield\n");
    for (name, bytes) in corruptions() {
        let err = decode(&bytes).unwrap_err();
        let (class, field) = classify(&err);
        index.push_str(&format!("{name}\t{class}\t{field}\n"));
        fs::write(dir.join(name), bytes).unwrap();
    }
    fs::write(dir.join("corrupted.tsv"), index).unwrap();
}

fn classify(e: &TraceError) -> (&'static str, &'static str) {
    match e {
        TraceError::BadMagic { .. } => ("bad_magic", "magic"),
        TraceError::UnsupportedVersion { .. } => ("unsupported_version", "version"),
        TraceError::Truncated { field, .. } => ("truncated", field),
        TraceError::Inconsistent { field, .. } => ("inconsistent", field),
    }
}

fn index() -> Vec<(String, String, String)> {
    fs::read_to_string(fixtures().join("corrupted.tsv"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].to_string(), f[1].to_string(), f[2].to_string())
        })
        .collect()
}

#[test]
fn valid_fixture_decodes_to_known_trace() {
    let bytes = fs::read(fixtures().join("valid_tiny.moer")).unwrap();
    let t = decode(&bytes).unwrap();
    assert_eq!(t, tiny());
    assert_eq!(encode(&t), bytes);
}

#[test]
fn every_corrupted_fixture_is_rejected_with_its_class() {
    let idx = index();
    assert_eq!(idx.len(), corruptions().len());
    for (name, class, field) in idx {
        let bytes = fs::read(fixtures().join(&name)).unwrap();
        let err = decode(&bytes).expect_err(&name);
        assert_eq!(
            classify(&err),
            (class.as_str(), field.as_str()),
            "{name}: {err}"
        );
    }
}

#[test]
fn fixtures_match_their_generator() {
    for (name, bytes) in corruptions() {
        assert_eq!(
            fs::read(fixtures().join(name)).unwrap(),
            bytes,
            "{name} is stale"
        );
    }
}

#[test]
fn error_messages_name_field_and_offset() {
    let bytes = fs::read(fixtures().join("truncated_logits.moer")).unwrap();
    let msg = decode(&bytes).unwrap_err().to_string();
    assert!(msg.contains("logits") && msg.contains("byte 48"), "{msg}");
    let bytes = fs::read(fixtures().join("nan_logit.moer")).unwrap();
    let msg = decode(&bytes).unwrap_err().to_string();
    assert!(msg.contains(&format!("byte {}", bytes.len() - 8)), "{msg}");
}
