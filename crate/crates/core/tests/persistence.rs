use std::fs;
use std::path::Path;

use loopworld::env::TaskSpec;
use loopworld::policy::{self, Policy, PolicyConfig};
use loopworld::sans::{self, generate_sans, SansDataset, MANIFEST_FILE, RECORDS_FILE};
use loopworld::worldmodel::{self, WorldModel, WorldModelConfig};
use loopworld::Error;
use serde_json::Value;

fn dataset() -> SansDataset {
    generate_sans(&TaskSpec::reference(), 3, 3, 11).unwrap()
}

fn bits(ds: &SansDataset) -> Vec<u64> {
    ds.records
        .iter()
        .flat_map(|r| r.frames.iter().flat_map(|f| f.data.iter().map(|v| v.to_bits())))
        .collect()
}

fn edit_manifest(dir: &Path, f: impl FnOnce(&mut Value)) {
    let path = dir.join(MANIFEST_FILE);
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    fs::write(&path, v.to_string()).unwrap();
}

#[test]
fn sans_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset();
    sans::save(&ds, dir.path()).unwrap();
    let back = sans::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(bits(&back), bits(&ds));
}

#[test]
fn corrupted_manifest_count_is_an_invariant_violation() {
    let dir = tempfile::tempdir().unwrap();
    sans::save(&dataset(), dir.path()).unwrap();
    edit_manifest(dir.path(), |v| v["counts"][0]["count"] = Value::from(99));
    assert!(matches!(sans::load(dir.path()), Err(Error::InvariantViolation(_))));
}

#[test]
fn wrong_format_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    sans::save(&dataset(), dir.path()).unwrap();
    edit_manifest(dir.path(), |v| v["format_version"] = Value::from(7));
    assert!(matches!(
        sans::load(dir.path()),
        Err(Error::VersionMismatch { expected: 1, found: 7, .. })
    ));
}

#[test]
fn truncated_records_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    sans::save(&dataset(), dir.path()).unwrap();
    let path = dir.path().join(RECORDS_FILE);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(sans::load(dir.path()), Err(Error::Truncated { .. })));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(sans::load(dir.path().join("nope")), Err(Error::Io { .. })));
}

#[test]
fn checkpoints_roundtrip_and_reject_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let wm = WorldModel::new(
        WorldModelConfig {
            denoiser_hidden: vec![16],
            ..WorldModelConfig::default()
        },
        3,
    )
    .unwrap();
    let p = Policy::new(PolicyConfig::default(), 4).unwrap();
    let (wdir, pdir) = (dir.path().join("wm"), dir.path().join("policy"));
    wm.save(&wdir).unwrap();
    p.save(&pdir).unwrap();
    assert_eq!(WorldModel::load(&wdir).unwrap(), wm);
    assert_eq!(Policy::load(&pdir).unwrap(), p);

    for path in [wdir.join(worldmodel::CHECKPOINT_FILE), pdir.join(policy::CHECKPOINT_FILE)] {
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    }
    assert!(matches!(WorldModel::load(&wdir), Err(Error::Truncated { .. })));
    assert!(matches!(Policy::load(&pdir), Err(Error::Truncated { .. })));
}

#[test]
fn checkpoint_of_another_architecture_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let small = WorldModelConfig {
        denoiser_hidden: vec![16],
        ..WorldModelConfig::default()
    };
    WorldModel::new(small.clone(), 1).unwrap().save(dir.path()).unwrap();
    // Swap the sidecar for a wider architecture; the tensors no longer fit.
    let wide = WorldModelConfig {
        denoiser_hidden: vec![24],
        ..small
    };
    fs::write(
        dir.path().join(worldmodel::SIDECAR_FILE),
        serde_json::to_string(&wide).unwrap(),
    )
    .unwrap();
    assert!(matches!(WorldModel::load(dir.path()), Err(Error::Dimension { .. })));
}
