//! Tab-separated dataset manifest: `photo  sketch-or-dash  lx  ly  rx  ry`.
//! Blank lines and lines starting with `#` are skipped; relative paths are
//! resolved against the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::align::Eyes;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub photo: PathBuf,
    pub sketch: Option<PathBuf>,
    pub eyes: Eyes,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Parses manifest text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Manifest { line: line_no, msg };
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 6 {
                return Err(err(format!(
                    "expected 6 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let mut coords = [0.0; 4];
            for (c, f) in coords.iter_mut().zip(&fields[2..]) {
                *c = f
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("bad eye coordinate {f:?}")))?;
            }
            if fields[0].is_empty() {
                return Err(err("empty photo path".into()));
            }
            let resolve = |p: &str| base.join(p);
            let sketch = match fields[1] {
                "-" => None,
                "" => return Err(err("empty sketch path; use - for none".into())),
                s => Some(resolve(s)),
            };
            records.push(ManifestRecord {
                photo: resolve(fields[0]),
                sketch,
                eyes: Eyes::new(coords[0], coords[1], coords[2], coords[3]),
            });
        }
        Ok(DatasetManifest { records })
    }

    /// Reads and parses a manifest, then checks every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, base)?;
        for r in &m.records {
            for p in std::iter::once(&r.photo).chain(&r.sketch) {
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(
                            std::io::ErrorKind::NotFound,
                            "listed in manifest but missing",
                        ),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let sketch = r
                .sketch
                .as_ref()
                .map_or_else(|| "-".to_string(), |p| p.display().to_string());
            let e = r.eyes;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.photo.display(),
                sketch,
                e.left.x,
                e.left.y,
                e.right.x,
                e.right.y
            );
        }
        out
    }

    /// Records that carry a sketch.
    pub fn pairs(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| r.sketch.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_test_photos() {
        let text = "# header\np1.png\ts1.png\t1\t2\t3\t4\n\n/abs/p2.png\t-\t5.5\t6\t7\t8\n";
        let m = DatasetManifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].photo, PathBuf::from("/data/p1.png"));
        assert_eq!(m.records[0].sketch, Some(PathBuf::from("/data/s1.png")));
        assert_eq!(m.records[1].photo, PathBuf::from("/abs/p2.png"));
        assert_eq!(m.records[1].sketch, None);
        assert_eq!(m.records[1].eyes, Eyes::new(5.5, 6.0, 7.0, 8.0));
        assert_eq!(m.pairs().count(), 1);
    }

    #[test]
    fn text_round_trip() {
        let text = "/d/p1.png\t/d/s1.png\t1.25\t2\t3\t4\n/d/p2.png\t-\t5\t6\t7\t8\n";
        let m = DatasetManifest::parse(text, Path::new("/")).unwrap();
        assert_eq!(m.to_text(), text);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = DatasetManifest::parse("a\tb\t1\t2\t3\n", Path::new("/")).unwrap_err();
        assert!(matches!(e, Error::Manifest { line: 1, .. }));
        let e = DatasetManifest::parse("\na\tb\t1\tx\t3\t4\n", Path::new("/")).unwrap_err();
        assert!(matches!(e, Error::Manifest { line: 2, .. }));
        let e = DatasetManifest::parse("a\tb\t1\tNaN\t3\t4\n", Path::new("/")).unwrap_err();
        assert!(matches!(e, Error::Manifest { line: 1, .. }));
    }

    #[test]
    fn load_checks_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "nope.png\t-\t1\t1\t2\t2\n").unwrap();
        let e = DatasetManifest::load(&path).unwrap_err();
        assert!(e.to_string().contains("nope.png"));
        std::fs::write(dir.path().join("nope.png"), b"").unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap().records.len(), 1);
    }
}
