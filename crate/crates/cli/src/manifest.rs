use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Hashes every file under `run_dir` except the manifest itself, in
/// lexicographic order of the relative path.
pub fn build(run_dir: &Path) -> std::io::Result<Manifest> {
    let mut paths = Vec::new();
    collect(run_dir, &mut paths)?;
    let mut files = Vec::with_capacity(paths.len());
    for p in paths {
        let rel = p.strip_prefix(run_dir).expect("walked below run_dir");
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        if rel == MANIFEST_NAME {
            continue;
        }
        let bytes = fs::read(&p)?;
        files.push(ManifestEntry { path: rel, bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest { tool: format!("srhc {}", env!("CARGO_PKG_VERSION")), files })
}

pub fn write(run_dir: &Path) -> std::io::Result<Manifest> {
    let m = build(run_dir)?;
    let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    text.push('\n');
    fs::write(run_dir.join(MANIFEST_NAME), text)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_abc() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_is_sorted_and_skips_itself() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("z.csv"), "1\n").unwrap();
        fs::write(dir.path().join("sub/a.csv"), "2\n").unwrap();
        let first = write(dir.path()).unwrap();
        let second = write(dir.path()).unwrap();
        assert_eq!(first, second);
        let names: Vec<_> = first.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(names, ["sub/a.csv", "z.csv"]);
    }
}
