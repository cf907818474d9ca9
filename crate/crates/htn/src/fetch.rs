//! Copies dataset files from a local mirror and checks their digests.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use htn_core::data::sha256_hex;
use thiserror::Error;

/// Environment variable naming the mirror directory.
pub const MIRROR_ENV: &str = "HTN_DATA_MIRROR";

pub const FILES: [&str; 4] =
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];

/// SHA-256 of the uncompressed MNIST distribution files, in [`FILES`] order.
pub const MNIST_SHA256: [&str; 4] = [
    "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
];

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("no mirror directory: pass --mirror or set {MIRROR_ENV}")]
    NoMirror,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{file}: SHA-256 {actual} does not match {expected}")]
    Digest { file: String, expected: String, actual: String },
}

#[derive(Debug, PartialEq, Eq)]
pub struct Fetched {
    pub file: String,
    pub sha256: String,
    pub verified: bool,
}

/// Copies the four IDX files of `dataset` from `<mirror>/<dataset>/` (or
/// `<mirror>/` if that subdirectory does not exist) into `dest`. MNIST files
/// are checked against [`MNIST_SHA256`] before anything is written.
pub fn fetch(dataset: &str, mirror: Option<&Path>, dest: &Path) -> Result<Vec<Fetched>, FetchError> {
    let mirror = match mirror {
        Some(m) => m.to_path_buf(),
        None => std::env::var_os(MIRROR_ENV).map(PathBuf::from).ok_or(FetchError::NoMirror)?,
    };
    let source = if mirror.join(dataset).is_dir() { mirror.join(dataset) } else { mirror };
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| FetchError::Io { path, source }
    };
    let mut contents = Vec::new();
    for (k, file) in FILES.iter().enumerate() {
        let path = source.join(file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let sha256 = sha256_hex(&bytes);
        let verified = dataset == "mnist";
        if verified && sha256 != MNIST_SHA256[k] {
            return Err(FetchError::Digest { file: file.to_string(), expected: MNIST_SHA256[k].into(), actual: sha256 });
        }
        contents.push((file, bytes, Fetched { file: file.to_string(), sha256, verified }));
    }
    fs::create_dir_all(dest).map_err(io_err(dest))?;
    let mut out = Vec::new();
    for (file, bytes, fetched) in contents {
        let path = dest.join(file);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        out.push(fetched);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unverified_copy_and_digest_mismatch() {
        let mirror = tempfile::tempdir().unwrap();
        let dest = tempfile::tempdir().unwrap();
        for file in FILES {
            fs::write(mirror.path().join(file), file.as_bytes()).unwrap();
        }
        let got = fetch("fashion", Some(mirror.path()), dest.path()).unwrap();
        assert_eq!(got.len(), 4);
        assert!(got.iter().all(|f| !f.verified));
        assert_eq!(fs::read(dest.path().join(FILES[0])).unwrap(), FILES[0].as_bytes());

        let err = fetch("mnist", Some(mirror.path()), &dest.path().join("m")).unwrap_err();
        assert!(matches!(err, FetchError::Digest { .. }));
        assert!(!dest.path().join("m").exists());
    }
}
