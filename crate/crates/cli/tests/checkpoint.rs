use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use stdfnc::model::{ModelConfig, ModelParams};
use stdfnc::train::OptimState;
use stdfnc_cli::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
use stdfnc_cli::CliError;

fn small_config(n: usize, w: usize, seed: u64) -> ModelConfig {
    let mut c = ModelConfig::new(n, w);
    c.conv_channels = vec![2, 3];
    c.embed_dim = 4;
    c.ffn_dim = 6;
    c.n_blocks = 1;
    c.seed = seed;
    c
}

fn checkpoint(config: ModelConfig, with_optimizer: bool) -> Checkpoint {
    let params = ModelParams::init(&config).unwrap();
    let optimizer = with_optimizer.then(|| {
        let mut s = OptimState { t: 7, ..OptimState::default() };
        for (name, t) in params.iter() {
            s.m.insert(name.clone(), t.data().iter().map(|v| v * 0.5).collect());
            s.v.insert(name.clone(), t.data().iter().map(|v| v * v + 1e-300).collect());
        }
        s
    });
    Checkpoint { config, params, optimizer, seed: 99, fold: 3 }
}

fn bits(c: &Checkpoint) -> BTreeMap<String, Vec<u64>> {
    c.params.iter().map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
}

#[test]
fn round_trip_is_bit_identical() {
    let dir = std::env::temp_dir().join(format!("stdfnc-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    for with_optimizer in [false, true] {
        let c = checkpoint(small_config(5, 4, 11), with_optimizer);
        let path = dir.join("fold.ckpt");
        save_checkpoint(&path, &c).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(bits(&back), bits(&c));
        assert_eq!(back, c);
    }
    std::fs::remove_dir_all(dir).unwrap();
}

/// Byte offset where the payload starts.
fn payload_start(bytes: &[u8]) -> usize {
    16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize
}

#[test]
fn corrupted_payload_fails_checksum() {
    let bytes = encode_checkpoint(&checkpoint(small_config(4, 3, 1), false)).unwrap();
    let mut bad = bytes.clone();
    let at = payload_start(&bytes) + 17;
    bad[at] ^= 0x01;
    match decode_checkpoint(Path::new("x.ckpt"), &bad) {
        Err(CliError::Checksum { expected, found, .. }) => assert_ne!(expected, found),
        other => panic!("expected a checksum error, got {other:?}"),
    }
}

#[test]
fn future_version_is_named() {
    let bytes = encode_checkpoint(&checkpoint(small_config(4, 3, 1), false)).unwrap();
    let start = payload_start(&bytes);
    let manifest = String::from_utf8(bytes[16..start].to_vec()).unwrap();
    let old = format!("\"version\":{CHECKPOINT_VERSION}");
    assert!(manifest.contains(&old));
    let newer = manifest.replace(&old, &format!("\"version\":{}", CHECKPOINT_VERSION + 1));
    let mut bad = b"STDFNCCK".to_vec();
    bad.extend_from_slice(&(newer.len() as u64).to_le_bytes());
    bad.extend_from_slice(newer.as_bytes());
    bad.extend_from_slice(&bytes[start..]);
    let err = decode_checkpoint(Path::new("x.ckpt"), &bad).unwrap_err();
    assert!(matches!(err, CliError::CheckpointVersion { found: 2, supported: 1, .. }), "{err:?}");
    let msg = err.to_string();
    assert!(msg.contains("version 2") && msg.contains("version 1"), "{msg}");
}

#[test]
fn truncation_is_reported() {
    let bytes = encode_checkpoint(&checkpoint(small_config(4, 3, 1), true)).unwrap();
    for cut in [bytes.len() - 1, payload_start(&bytes) + 8, payload_start(&bytes) - 3, 10] {
        match decode_checkpoint(Path::new("x.ckpt"), &bytes[..cut]) {
            Err(CliError::Truncated { expected, found, .. }) => {
                assert_eq!(found, cut as u64);
                assert!(expected > found);
            }
            other => panic!("cut at {cut}: expected truncation, got {other:?}"),
        }
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_checkpoint(Path::new("x.ckpt"), &long), Err(CliError::Format { .. })));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(decode_checkpoint(Path::new("x.ckpt"), &magic), Err(CliError::Format { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn random_configs_round_trip(
        n in 1usize..7,
        w in 1usize..6,
        c1 in 1usize..4,
        layers in 1usize..3,
        heads in 1usize..3,
        per_head in 1usize..4,
        blocks in 1usize..3,
        classes in 2usize..4,
        attention in prop::sample::select(vec!["sparsemax", "softmax"]),
        seed in any::<u64>(),
        fold in 0usize..10,
        with_optimizer in any::<bool>(),
    ) {
        let mut c = ModelConfig::new(n, w);
        c.conv_channels = vec![c1; layers];
        c.n_heads = heads;
        c.embed_dim = heads * per_head;
        c.ffn_dim = 3;
        c.n_blocks = blocks;
        c.n_classes = classes;
        c.attention = attention.to_string();
        c.seed = seed;
        let mut ck = checkpoint(c, with_optimizer);
        ck.fold = fold;
        ck.seed = seed ^ 1;
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(Path::new("p.ckpt"), &bytes).unwrap();
        prop_assert_eq!(bits(&back), bits(&ck));
        prop_assert_eq!(back, ck);
    }
}
