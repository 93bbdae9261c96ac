//! Replays the checked-in fuzz seeds through the same checks the fuzz
//! targets make, so decoder regressions show up without a fuzzing toolchain.

use std::fs;
use std::path::PathBuf;

use fedgraph::config::ExperimentConfig;
use fedgraph::fed::wire::{Frame, GradientUpdate};
use fedgraph::gat::ModelParams;
use fedgraph::graph::{graph_from_json, graph_to_json};
use fedgraph::secagg::{decode_ciphertexts, encode_ciphertexts, read_ciphertext};

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
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Runs `check` on every seed and returns how many decoded.
fn replay(target: &str, check: impl Fn(&[u8]) -> bool) -> usize {
    seeds(target).iter().filter(|(_, bytes)| check(bytes)).count()
}

#[test]
fn graph_json_seeds() {
    let ok = replay("graph_json", |data| match graph_from_json(data) {
        Ok(g) => {
            let again = graph_from_json(graph_to_json(&g).as_bytes()).unwrap();
            assert_eq!(again.edges(), g.edges());
            true
        }
        Err(_) => false,
    });
    assert!(ok >= 2);
}

#[test]
fn checkpoint_seeds() {
    let ok = replay("checkpoint", |data| match ModelParams::from_checkpoint(data) {
        Ok(p) => {
            assert_eq!(ModelParams::from_checkpoint(&p.to_checkpoint()).unwrap(), p);
            true
        }
        Err(_) => false,
    });
    assert_eq!(ok, 1);
}

#[test]
fn frame_seeds() {
    let ok = replay("frame", |data| {
        let _ = Frame::decode(data);
        match Frame::decode_prefix(data) {
            Ok((frame, used)) => {
                assert_eq!(frame.encode(), &data[..used]);
                true
            }
            Err(_) => false,
        }
    });
    assert_eq!(ok, 5);
}

#[test]
fn gradient_update_seeds() {
    let ok = replay("gradient_update", |data| match GradientUpdate::decode(data) {
        Ok(u) => {
            assert_eq!(GradientUpdate::decode(&u.encode()).unwrap(), u);
            true
        }
        Err(_) => false,
    });
    assert_eq!(ok, 3);
}

#[test]
fn ciphertext_seeds() {
    let ok = replay("ciphertext", |data| {
        let _ = read_ciphertext(data);
        match decode_ciphertexts(data) {
            Ok(cs) => {
                assert_eq!(decode_ciphertexts(&encode_ciphertexts(&cs)).unwrap(), cs);
                true
            }
            Err(_) => false,
        }
    });
    assert_eq!(ok, 2);
}

#[test]
fn config_seeds() {
    let ok = replay("config", |data| match ExperimentConfig::from_json(data) {
        Ok(cfg) => {
            let _ = cfg.validate();
            let again = ExperimentConfig::from_json(cfg.to_json().as_bytes()).unwrap();
            assert_eq!(again.to_json(), cfg.to_json());
            true
        }
        Err(_) => false,
    });
    assert_eq!(ok, 3);
}

#[test]
fn corrupt_seeds_are_rejected_not_panicking() {
    for target in ["graph_json", "checkpoint", "frame", "gradient_update", "ciphertext", "config"] {
        for (_, bytes) in seeds(target) {
            for cut in 0..bytes.len().min(64) {
                let data = &bytes[..cut];
                let _ = graph_from_json(data);
                let _ = ModelParams::from_checkpoint(data);
                let _ = Frame::decode_prefix(data);
                let _ = GradientUpdate::decode(data);
                let _ = decode_ciphertexts(data);
                let _ = ExperimentConfig::from_json(data);
            }
        }
    }
}
