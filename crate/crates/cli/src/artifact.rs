//! Output files with a reproducibility header.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::failure::Failure;

/// Header fields shared by every artifact of one run.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub scenario_sha256: String,
    pub timestamp: bool,
}

impl Provenance {
    /// `# key = value` lines; the timestamp line is omitted when disabled.
    pub fn header(&self, seed: Option<u64>) -> String {
        let mut out = format!(
            "# lopa {}\n# scenario_sha256 = {}\n",
            env!("CARGO_PKG_VERSION"),
            self.scenario_sha256
        );
        if let Some(seed) = seed {
            out.push_str(&format!("# seed = {seed}\n"));
        }
        if self.timestamp {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            out.push_str(&format!("# generated_unix_s = {secs}\n"));
        }
        out
    }
}

pub struct OutDir {
    root: PathBuf,
    provenance: Provenance,
}

impl OutDir {
    pub fn create(root: &Path, provenance: Provenance) -> Result<Self, Failure> {
        fs::create_dir_all(root)
            .map_err(|e| Failure::Io(format!("cannot create {}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            provenance,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `header + body` to `name` inside the output directory.
    pub fn write(&self, name: &str, seed: Option<u64>, body: &[u8]) -> Result<PathBuf, Failure> {
        let path = self.path(name);
        let mut bytes = self.provenance.header(seed).into_bytes();
        bytes.extend_from_slice(body);
        fs::write(&path, bytes).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    /// Serializes rows with the `csv` writer, then stores them via [`OutDir::write`].
    pub fn write_table<I, R>(&self, name: &str, seed: Option<u64>, header: &[&str], rows: I) -> Result<PathBuf, Failure>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator,
        R::Item: AsRef<[u8]>,
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Failure::Io(e.to_string());
        w.write_record(header).map_err(io)?;
        for row in rows {
            w.write_record(row).map_err(io)?;
        }
        let body = w.into_inner().map_err(|e| Failure::Io(e.to_string()))?;
        self.write(name, seed, &body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let p = Provenance {
            scenario_sha256: "ab".into(),
            timestamp: false,
        };
        let h = p.header(Some(3));
        assert_eq!(
            h,
            format!("# lopa {}\n# scenario_sha256 = ab\n# seed = 3\n", env!("CARGO_PKG_VERSION"))
        );
        let stamped = Provenance { timestamp: true, ..p }.header(None);
        assert!(stamped.contains("generated_unix_s"));
        assert!(!stamped.contains("seed"));
    }

    #[test]
    fn tables_carry_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(
            dir.path(),
            Provenance {
                scenario_sha256: "x".into(),
                timestamp: false,
            },
        )
        .unwrap();
        let path = out
            .write_table("t.csv", None, &["a", "b"], vec![vec!["1".to_string(), "2".to_string()]])
            .unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert!(text.ends_with("a,b\n1,2\n"));
    }
}
