use std::fs;

use ccs::synthdata::{self, Dataset, Prototypes, SynthConfig, MANIFEST_FILE};
use ccs::{CcsError, Modality};

fn mean_row(frames: &ccs::numeric::Tensor) -> Vec<f64> {
    let mut m = vec![0.0; frames.cols()];
    for r in 0..frames.rows() {
        for (a, b) in m.iter_mut().zip(frames.row(r)) {
            *a += b;
        }
    }
    m.iter().map(|v| v / frames.rows() as f64).collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest-prototype classifier over `candidates` on the time-averaged
/// observation; ties go to the first candidate.
fn oracle(
    ds: &Dataset,
    protos: &Prototypes,
    modalities: &[Modality],
    candidates: &[usize],
    idx: usize,
) -> usize {
    let inst = &ds.instances[idx];
    let means: Vec<Vec<f64>> = modalities
        .iter()
        .map(|&m| mean_row(inst.frames(m)))
        .collect();
    let mut best = (f64::INFINITY, 0);
    for &c in candidates {
        let d: f64 = modalities
            .iter()
            .zip(&means)
            .map(|(&m, x)| sq(x, &protos.lifted(c, m)))
            .sum();
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

#[test]
fn nearest_prototype_oracle_confusability() {
    let cfg = SynthConfig {
        per_class: 500,
        ..SynthConfig::default()
    };
    let ds = synthdata::generate(&cfg).unwrap();
    let protos = synthdata::prototypes(&cfg).unwrap();

    for pair in &ds.manifest.confusable_pairs {
        let idx: Vec<usize> = (0..ds.instances.len())
            .filter(|&i| pair.labels.contains(&ds.instances[i].label))
            .collect();
        assert_eq!(idx.len(), 1000);
        let single = idx
            .iter()
            .filter(|&&i| {
                oracle(&ds, &protos, &[pair.modality], &pair.labels, i) == ds.instances[i].label
            })
            .count() as f64
            / 1000.0;
        assert!(
            (single - 0.5).abs() <= 0.05,
            "pair {:?}: single-modality accuracy {single}",
            pair.labels
        );
    }

    let all: Vec<usize> = (0..ds.n_classes()).collect();
    let joint = (0..ds.instances.len())
        .filter(|&i| oracle(&ds, &protos, &Modality::BOTH, &all, i) == ds.instances[i].label)
        .count() as f64
        / ds.instances.len() as f64;
    assert!(joint >= 0.95, "joint accuracy {joint}");
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let cfg = SynthConfig {
        per_class: 3,
        ..SynthConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synthdata::save(&synthdata::generate(&cfg).unwrap(), a.path()).unwrap();
    synthdata::save(&synthdata::generate(&cfg).unwrap(), b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 8 * 3 + 1);
    for name in names {
        assert_eq!(
            fs::read(a.path().join(&name)).unwrap(),
            fs::read(b.path().join(&name)).unwrap()
        );
    }
    let other = synthdata::generate(&SynthConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(
        other.instances[0].frames_f,
        synthdata::generate(&SynthConfig {
            per_class: 3,
            ..SynthConfig::default()
        })
        .unwrap()
        .instances[0]
            .frames_f
    );
}

#[test]
fn save_load_round_trip_preserves_values_and_seed() {
    let cfg = SynthConfig {
        n: 4,
        per_class: 2,
        length: 5,
        d_in: 3,
        seed: 99,
    };
    let ds = synthdata::generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    synthdata::save(&ds, dir.path()).unwrap();
    let back = synthdata::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.manifest.seed, 99);
    let via_manifest = synthdata::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(via_manifest, ds);
}

fn saved_small() -> (tempfile::TempDir, Dataset) {
    let cfg = SynthConfig {
        n: 4,
        per_class: 2,
        length: 5,
        d_in: 3,
        seed: 5,
    };
    let ds = synthdata::generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    synthdata::save(&ds, dir.path()).unwrap();
    (dir, ds)
}

#[test]
fn truncated_payload_is_an_integrity_error() {
    let (dir, ds) = saved_small();
    let file = dir.path().join(&ds.manifest.instances[3].file);
    let bytes = fs::read(&file).unwrap();
    fs::write(&file, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(
        synthdata::load(dir.path()),
        Err(CcsError::Integrity(_))
    ));
    fs::write(&file, &bytes[..7]).unwrap();
    assert!(matches!(
        synthdata::load(dir.path()),
        Err(CcsError::Integrity(_))
    ));
}

#[test]
fn malformed_manifest_reports_byte_offset() {
    let (dir, _) = saved_small();
    let path = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let broken = text.replacen("\"per_class\": 2", "\"per_class\": two", 1);
    fs::write(&path, &broken).unwrap();
    match synthdata::load(dir.path()) {
        Err(CcsError::Parse { offset, .. }) => {
            let expected = broken.find("two").unwrap() as u64;
            assert!(
                offset >= expected && offset <= expected + 3,
                "offset {offset} vs {expected}"
            );
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn manifest_count_mismatch_is_an_integrity_error() {
    let (dir, mut ds) = saved_small();
    ds.manifest.instances.pop();
    let json = serde_json::to_string_pretty(&ds.manifest).unwrap();
    fs::write(dir.path().join(MANIFEST_FILE), json).unwrap();
    assert!(matches!(
        synthdata::load(dir.path()),
        Err(CcsError::Integrity(_))
    ));
}

#[test]
fn bad_magic_is_a_parse_error() {
    let (dir, ds) = saved_small();
    let file = dir.path().join(&ds.manifest.instances[0].file);
    let mut bytes = fs::read(&file).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&file, bytes).unwrap();
    assert!(matches!(
        synthdata::load(dir.path()),
        Err(CcsError::Parse { offset: 0, .. })
    ));
}
