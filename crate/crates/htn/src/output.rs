//! Run directories, lock files and image dumps.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

pub const LOCK_NAME: &str = ".htn.lock";

/// Exclusive use of an output directory for the lifetime of the value.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `path` if needed and takes its lock. Fails with
    /// [`io::ErrorKind::AlreadyExists`] while another run holds it.
    pub fn acquire(path: &Path) -> io::Result<Self> {
        fs::create_dir_all(path)?;
        let mut lock = OpenOptions::new().write(true).create_new(true).open(path.join(LOCK_NAME))?;
        writeln!(lock, "{}", std::process::id())?;
        Ok(RunDir { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> io::Result<()> {
        fs::write(self.file(name), contents)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_NAME));
    }
}

/// Binary 8-bit PGM (P5) from row-major values in `[0, 1]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> io::Result<()> {
    assert_eq!(values.len(), width * height);
    let mut f = io::BufWriter::new(File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    f.flush()
}

/// Places equally sized row-major images side by side.
pub fn side_by_side(images: &[&[f64]], width: usize, height: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(images.len() * width * height);
    for r in 0..height {
        for img in images {
            out.extend_from_slice(&img[r * width..(r + 1) * width]);
        }
    }
    out
}
