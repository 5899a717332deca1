//! Replays the checked-in fuzz corpus through the same decoders and
//! round-trip checks as the fuzz targets.

use std::fs;
use std::path::PathBuf;

use weightsym::metanet::{read_history_csv, read_metrics_csv, Metanet, MetanetConfig};
use weightsym::netmodels::Envelope;
use weightsym::symmetry::GroupElement;
use weightsym::zoogen::{Task, Zoo};
use weightsym::{Arch, NetParams};

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<PathBuf> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert!(!files.is_empty(), "empty corpus {}", dir.display());
    files.into_iter().map(|p| (p.clone(), fs::read(p).unwrap())).collect()
}

#[test]
fn envelope() {
    for (path, data) in corpus("envelope") {
        let env = Envelope::from_json(&data).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(Envelope::from_json(env.to_json().as_bytes()).unwrap().to_json(), env.to_json());
    }
}

#[test]
fn net_params() {
    for (path, data) in corpus("net_params") {
        let p = NetParams::deserialize(&data).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(p.serialize(), data, "{} is not canonical", path.display());
        assert_eq!(NetParams::deserialize(&p.serialize()).unwrap(), p);
    }
}

#[test]
fn group_element() {
    let mut decoded = 0;
    for (_, data) in corpus("group_element") {
        if let Ok(g) = GroupElement::deserialize(&data) {
            assert_eq!(GroupElement::deserialize(&g.serialize()).unwrap(), g);
            decoded += 1;
        }
    }
    assert_eq!(decoded, 2);
}

#[test]
fn zoo() {
    for (path, data) in corpus("zoo") {
        let zoo = Zoo::from_json(&data).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(Zoo::from_json(zoo.to_json().as_bytes()).unwrap(), zoo);
        zoo.write_manifest(std::io::sink()).unwrap();
    }
}

#[test]
fn metanet_checkpoint() {
    for (path, data) in corpus("metanet_checkpoint") {
        let m = Metanet::from_json(&data).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(Metanet::from_json(m.to_json().as_bytes()).unwrap(), m);
    }
}

#[test]
fn metanet_config() {
    for (path, data) in corpus("metanet_config") {
        let c: MetanetConfig = serde_json::from_slice(&data).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        c.validate().unwrap();
    }
}

#[test]
fn metrics_csv() {
    let mut tables = 0;
    for (_, data) in corpus("metrics_csv") {
        if let Ok(Some(rows)) = read_metrics_csv(&data[..]) {
            tables += 1;
            assert!(!rows.is_empty());
        }
        let _ = read_history_csv(&data[..]);
    }
    assert_eq!(tables, 2);
}

#[test]
fn names() {
    let mut known = 0;
    for (_, data) in corpus("names") {
        let s = std::str::from_utf8(&data).unwrap();
        known += usize::from(Arch::parse(s).is_ok_and(|a| a.name() == s));
        known += usize::from(Task::parse(s).is_ok_and(|t| t.name() == s));
    }
    assert_eq!(known, 7);
}
