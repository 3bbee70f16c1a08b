use std::fs;
use std::path::PathBuf;

use perceparator::data::{parse_manifest, wav_decode, wav_encode};
use perceparator::{Checkpoint, Error, RunConfig};
use proptest::prelude::*;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn checkpoint_seeds_decode_as_labelled() {
    for (name, bytes) in seeds("checkpoint_decode") {
        let r = Checkpoint::from_bytes(&bytes);
        match name.as_str() {
            "tiny.pcpr" => {
                let c = r.unwrap();
                assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
            }
            "version2.pcpr" => assert!(matches!(r, Err(Error::FormatVersionMismatch { found: 2, .. }))),
            "bad_crc.pcpr" | "truncated.pcpr" => assert!(matches!(r, Err(Error::CorruptChecksum { .. }))),
            _ => {
                let _ = r;
            }
        }
    }
}

#[test]
fn wav_seeds_round_trip_when_valid() {
    for (name, bytes) in seeds("wav_decode") {
        match wav_decode(&bytes) {
            Ok(w) => assert_eq!(wav_decode(&wav_encode(&w.samples, w.sample_rate).unwrap()).unwrap(), w),
            Err(e) => assert_eq!(name, "truncated.wav", "{e}"),
        }
    }
}

#[test]
fn config_and_manifest_seeds() {
    for (name, bytes) in seeds("config_parse") {
        let text = String::from_utf8(bytes).unwrap();
        match RunConfig::parse(&text) {
            Ok(c) => assert_eq!(RunConfig::parse(&c.render()).unwrap(), c),
            Err(e) => assert_eq!(name, "bad_key.cfg", "{e}"),
        }
    }
    for (name, bytes) in seeds("manifest_parse") {
        let text = String::from_utf8(bytes).unwrap();
        match parse_manifest(&text, None) {
            Ok(entries) => assert!(!entries.is_empty(), "{name}"),
            Err(e) => assert!(matches!(e, Error::Manifest { line: 2, .. }) && name == "ragged.tsv", "{name}: {e}"),
        }
    }
}

fn tiny_checkpoint() -> Vec<u8> {
    seeds("checkpoint_decode").into_iter().find(|(n, _)| n == "tiny.pcpr").unwrap().1
}

proptest! {
    #[test]
    fn mutated_checkpoints_never_panic(pos in any::<prop::sample::Index>(), byte in any::<u8>(), cut in any::<prop::sample::Index>()) {
        let mut bytes = tiny_checkpoint();
        let i = pos.index(bytes.len());
        bytes[i] = byte;
        let _ = Checkpoint::from_bytes(&bytes);
        let _ = Checkpoint::from_bytes(&bytes[..cut.index(bytes.len())]);
    }

    #[test]
    fn arbitrary_bytes_never_panic(data in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = Checkpoint::from_bytes(&data);
        let _ = wav_decode(&data);
        if let Ok(text) = std::str::from_utf8(&data) {
            let _ = RunConfig::parse(text);
            let _ = parse_manifest(text, None);
        }
    }

    #[test]
    fn wav_headers_with_any_prefix_never_panic(
        head in prop::collection::vec(any::<u8>(), 0..64),
    ) {
        let mut data = b"RIFF\0\0\0\0WAVE".to_vec();
        data.extend(head);
        let _ = wav_decode(&data);
    }
}
