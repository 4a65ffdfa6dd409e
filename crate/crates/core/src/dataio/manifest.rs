use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Degradation, DegradedPair, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub input: PathBuf,
    pub target: PathBuf,
    pub meta: Degradation,
}

/// Ordered list of image pairs, one `input<TAB>target<TAB>meta` line each.
///
/// Relative paths are resolved against the manifest's directory. A leading
/// `# seed=N` comment records the dataset seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("# seed={}\n", self.seed);
        for e in &self.entries {
            writeln!(
                s,
                "{}\t{}\t{}",
                e.input.display(),
                e.target.display(),
                e.meta
            )
            .unwrap();
        }
        s
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut seed = 0;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg,
            };
            if let Some(c) = line.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("seed=") {
                    seed = v.parse().map_err(|_| err(format!("bad seed `{v}`")))?;
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [input, target, meta] = cols[..] else {
                return Err(err(format!(
                    "expected 3 tab-separated fields, got {}",
                    cols.len()
                )));
            };
            entries.push(ManifestEntry {
                input: input.into(),
                target: target.into(),
                meta: meta.parse().map_err(|e: Error| err(e.to_string()))?,
            });
        }
        Ok(Self { seed, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses the manifest and checks that every referenced file exists,
    /// returning paths resolved against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            e.input = base.join(&e.input);
            e.target = base.join(&e.target);
        }
        let missing: Vec<String> = m
            .entries
            .iter()
            .flat_map(|e| [&e.input, &e.target])
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "manifest {} references missing files: {}",
                path.display(),
                missing.join(", ")
            )));
        }
        Ok(m)
    }

    /// Reads every pair, named by its input file stem.
    pub fn read_pairs(&self) -> Result<Vec<(String, DegradedPair)>> {
        self.entries
            .iter()
            .map(|e| {
                let name = e
                    .input
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok((
                    name,
                    DegradedPair::new(Image::read(&e.input)?, Image::read(&e.target)?, e.meta)?,
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let m = Manifest {
            seed: 7,
            entries: vec![ManifestEntry {
                input: "lr/0000.ppm".into(),
                target: "hr/0000.ppm".into(),
                meta: Degradation::Bicubic { scale: 2 },
            }],
        };
        assert_eq!(Manifest::parse(&m.to_text(), "m").unwrap(), m);
        assert!(Manifest::parse("a\tb\n", "m").is_err());
    }

    #[test]
    fn load_fails_when_any_file_is_missing() {
        let dir = tempfile::tempdir().unwrap();
        Image::filled(2, 2, 1, 0.5)
            .unwrap()
            .write(dir.path().join("a.pgm"))
            .unwrap();
        let text = "# seed=1\na.pgm\ta.pgm\tbicubic scale=1\na.pgm\tb.pgm\tbicubic scale=1\n";
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, text).unwrap();
        let err = Manifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("b.pgm"));

        std::fs::write(&path, "# seed=1\na.pgm\ta.pgm\tbicubic scale=1\n").unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.read_pairs().unwrap().len(), 1);
    }
}
