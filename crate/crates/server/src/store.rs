use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

/// Images keyed by their SHA-256. Identical uploads share one file.
#[derive(Clone, Debug)]
pub struct ImageStore {
    dir: PathBuf,
}

impl ImageStore {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn reference(bytes: &[u8]) -> String {
        format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
    }

    pub fn path_of(&self, reference: &str) -> Option<PathBuf> {
        let h = reference.strip_prefix("sha256:")?;
        (h.len() == 64 && h.bytes().all(|b| b.is_ascii_hexdigit())).then(|| self.dir.join(h))
    }

    /// Write once; a temp file plus rename keeps readers from seeing partial data.
    pub fn put(&self, bytes: &[u8]) -> std::io::Result<String> {
        let reference = Self::reference(bytes);
        let path = self.path_of(&reference).expect("fresh reference is well formed");
        if !path.exists() {
            let tmp = self.dir.join(format!(".{}.{}", uuid::Uuid::new_v4().simple(), "part"));
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(reference)
    }
}
