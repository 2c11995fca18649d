use std::fs;
use std::path::Path;

use proptest::prelude::*;
use seglrp::{io, toy, Error, Tensor};
use sha2::{Digest, Sha256};

fn sha256_hex(path: &Path) -> String {
    let digest = Sha256::digest(fs::read(path).unwrap());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hashes of every file under `dir`, keyed by relative path.
fn tree_hashes(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, sha256_hex(&p)));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn saved_model_reloads_with_bit_identical_forward() {
    let dir = tempfile::tempdir().unwrap();
    let g = toy::toy_unet(7, 6);
    let manifest = io::save_model(&g, dir.path(), &toy::sequence_labels()).unwrap();
    let loaded = io::load_model(&manifest).unwrap();
    assert_eq!(loaded, g);

    let v = toy::synthetic_volume(2, 6, 16, 3).unwrap();
    let a = g.forward(&v.volume).unwrap();
    let b = loaded.forward(&v.volume).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.logits()), bits(b.logits()));
}

#[test]
fn generation_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        toy::gen_toy_model(7, d.join("model")).unwrap();
        toy::gen_synthetic_volume(7, 6, 64, 3, d).unwrap();
    }
    let ha = tree_hashes(a.path());
    assert_eq!(ha, tree_hashes(b.path()));
    // manifest, volume, mask, and kernel + bias for each of the 4 convolutions
    assert_eq!(ha.len(), 11);

    let c = tempfile::tempdir().unwrap();
    toy::gen_toy_model(8, c.path().join("model")).unwrap();
    let m7 = sha256_hex(&a.path().join("model/weights/enc1.kernel.tnsr"));
    let m8 = sha256_hex(&c.path().join("model/weights/enc1.kernel.tnsr"));
    assert_ne!(m7, m8);
}

#[test]
fn manifest_text_round_trips() {
    let g = toy::toy_unet(3, 6);
    let m = io::manifest_for(&g, &toy::sequence_labels());
    let text = io::write_manifest(&m).unwrap();
    let back = io::parse_manifest(&text, Path::new("model.toml")).unwrap();
    assert_eq!(back, m);
    assert_eq!(io::write_manifest(&back).unwrap(), text);
}

fn write_model(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("model.toml");
    fs::write(&p, text).unwrap();
    p
}

const TINY: &str = r#"
version = 1
output_id = "head"
input_channels = 1
output_channels = 1

[[layers]]
id = "input"
kind = "Input"
channels = 1
spatial_rank = 2

[[layers]]
id = "head"
kind = "Conv"
inputs = ["input"]
kernel = "k.tnsr"
bias = "b.tnsr"
stride = [1, 1]
padding = [0, 0]
"#;

#[test]
fn hand_written_manifest_loads() {
    let dir = tempfile::tempdir().unwrap();
    io::save_tensor(
        dir.path().join("k.tnsr"),
        &Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(),
    )
    .unwrap();
    io::save_tensor(
        dir.path().join("b.tnsr"),
        &Tensor::new(vec![1], vec![0.5]).unwrap(),
    )
    .unwrap();
    let g = io::load_model(write_model(dir.path(), TINY)).unwrap();
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(
        g.forward(&x).unwrap().logits().data(),
        &[2.5, 4.5, 6.5, 8.5]
    );
}

#[test]
fn manifest_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    io::save_tensor(
        dir.path().join("k.tnsr"),
        &Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(),
    )
    .unwrap();
    io::save_tensor(
        dir.path().join("b.tnsr"),
        &Tensor::new(vec![1], vec![0.5]).unwrap(),
    )
    .unwrap();

    let unknown = TINY.replace("kind = \"Conv\"", "kind = \"Softmax\"");
    let e = io::load_model(write_model(dir.path(), &unknown)).unwrap_err();
    assert!(
        matches!(&e, Error::UnsupportedKind { id, kind } if id == "head" && kind == "Softmax"),
        "{e}"
    );

    let version = TINY.replace("version = 1", "version = 2");
    let e = io::load_model(write_model(dir.path(), &version)).unwrap_err();
    assert!(e.to_string().contains("version"), "{e}");

    let dangling = TINY.replace("inputs = [\"input\"]", "inputs = [\"nowhere\"]");
    let e = io::load_model(write_model(dir.path(), &dangling)).unwrap_err();
    assert!(e.to_string().contains("nowhere"), "{e}");

    let missing = TINY.replace("b.tnsr", "absent.tnsr");
    let e = io::load_model(write_model(dir.path(), &missing)).unwrap_err();
    assert!(e.to_string().contains("absent.tnsr"), "{e}");

    let extra = TINY.replace("kind = \"Input\"", "kind = \"Input\"\ncolour = 3");
    assert!(io::load_model(write_model(dir.path(), &extra)).is_err());
}

#[test]
fn malformed_tensor_files_are_rejected() {
    let p = Path::new("t.tnsr");
    let good =
        io::encode_tensor(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    assert!(io::decode_tensor(&good, p).is_ok());

    let offset = |bytes: &[u8]| match io::decode_tensor(bytes, p).unwrap_err() {
        Error::TensorFormat { offset, .. } => offset,
        e => panic!("unexpected error {e}"),
    };

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert_eq!(offset(&bad_magic), 0);

    let mut zero_rank = good[..4].to_vec();
    zero_rank.extend_from_slice(&0u32.to_le_bytes());
    assert_eq!(offset(&zero_rank), 4);

    let mut zero_dim = good.clone();
    zero_dim[12..16].copy_from_slice(&0u32.to_le_bytes());
    assert_eq!(offset(&zero_dim), 12);

    assert_eq!(offset(&good[..good.len() - 1]), good.len() - 1);
    assert_eq!(offset(&good[..6]), 6);

    let mut trailing = good.clone();
    trailing.push(0);
    assert_eq!(offset(&trailing), good.len());

    let mut nan = good.clone();
    nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
    assert_eq!(offset(&nan), 20);
    let mut inf = good.clone();
    inf[16..20].copy_from_slice(&f32::INFINITY.to_le_bytes());
    assert_eq!(offset(&inf), 16);

    let mut huge = b"TNSR".to_vec();
    huge.extend_from_slice(&3u32.to_le_bytes());
    for _ in 0..3 {
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
    }
    assert!(io::decode_tensor(&huge, p).is_err());

    let e = io::decode_tensor(&bad_magic, Path::new("dir/x.tnsr")).unwrap_err();
    assert!(e.to_string().starts_with("dir/x.tnsr: byte 0:"), "{e}");
}

#[test]
fn pgm_heatmap_layout() {
    let m = Tensor::new(
        vec![2, 2, 3],
        vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 7.0, 7.0, 7.0, 7.0, 7.0],
    )
    .unwrap();
    let pgm = io::heatmap_pgm(&m, 0).unwrap();
    let header = b"P5\n3 2\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(&pgm[header.len()..], &[0, 51, 102, 153, 204, 255]);
    let flat = io::heatmap_pgm(&m, 1).unwrap();
    assert!(flat[header.len()..].iter().all(|&b| b == 128));
    assert!(io::heatmap_pgm(&m, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tnsr_write_read_write_is_stable(
        shape in prop::collection::vec(1usize..5, 1..5),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(&shape, |_| rng.gen_range(-1e6..1e6));
        let first = io::encode_tensor(&t).unwrap();
        let back = io::decode_tensor(&first, Path::new("p")).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(&back, &io::quantize_f32(&t));
        prop_assert_eq!(io::encode_tensor(&back).unwrap(), first);
    }
}
