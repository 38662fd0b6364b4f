//! Dataset manifests: a CSV of `degraded,clean,kind,severity,seed` rows whose paths are
//! relative to the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use weatherir_core::scenes::scene;
use weatherir_core::synth::{degrade, plan_corpus, SeveritySampler, WeatherKind};
use weatherir_core::trainer::{Dataset, TrainSample};
use weatherir_core::Image;

use crate::error::{CliError, Result};
use crate::imageio::{load_png, save_png};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Record {
    degraded: String,
    clean: String,
    kind: String,
    severity: f64,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub degraded: PathBuf,
    pub clean: PathBuf,
    pub kind: WeatherKind,
    pub severity: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory that row paths are relative to.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

/// A decoded manifest row.
#[derive(Clone, Debug)]
pub struct LoadedRow {
    pub row: ManifestRow,
    pub degraded: Image,
    pub clean: Image,
}

impl Manifest {
    /// Reads and validates a manifest: known kinds, severities in `[0, 1]`, at least one
    /// row, and every referenced file present.
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CliError::Missing(path.to_path_buf()));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        if header.iter().collect::<Vec<_>>() != ["degraded", "clean", "kind", "severity", "seed"] {
            return Err(CliError::Data(format!(
                "{}: expected header degraded,clean,kind,severity,seed",
                path.display()
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<Record>().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let line = i + 2;
            let kind = rec
                .kind
                .parse::<WeatherKind>()
                .map_err(|_| CliError::Data(format!("line {line}: unknown kind '{}'", rec.kind)))?;
            if !(0.0..=1.0).contains(&rec.severity) {
                return Err(CliError::Data(format!(
                    "line {line}: severity {} outside [0, 1]",
                    rec.severity
                )));
            }
            rows.push(ManifestRow {
                degraded: PathBuf::from(rec.degraded),
                clean: PathBuf::from(rec.clean),
                kind,
                severity: rec.severity,
                seed: rec.seed,
            });
        }
        let m = Self { root, rows };
        m.check_files()?;
        Ok(m)
    }

    fn check_files(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(CliError::Data("manifest has no rows".into()));
        }
        for r in &self.rows {
            for p in [&r.degraded, &r.clean] {
                let full = self.root.join(p);
                if !full.is_file() {
                    return Err(CliError::Missing(full));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(Record {
                degraded: path_text(&r.degraded),
                clean: path_text(&r.clean),
                kind: r.kind.to_string(),
                severity: r.severity,
                seed: r.seed,
            })
            .map_err(|e| CliError::Data(e.to_string()))?;
        }
        w.into_inner().map_err(|e| CliError::Data(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_csv()?;
        std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
    }

    /// Hex SHA-256 of the CSV serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex_digest(&self.to_csv()?))
    }

    /// Decodes every row. Degraded and clean images of a row must match in size.
    pub fn load(&self) -> Result<Vec<LoadedRow>> {
        self.rows
            .iter()
            .map(|r| {
                let degraded = load_png(&self.root.join(&r.degraded))?;
                let clean = load_png(&self.root.join(&r.clean))?;
                if !degraded.same_shape(&clean) {
                    return Err(CliError::Data(format!(
                        "{}: degraded and clean sizes differ",
                        r.degraded.display()
                    )));
                }
                Ok(LoadedRow {
                    row: r.clone(),
                    degraded,
                    clean,
                })
            })
            .collect()
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let samples = self
            .load()?
            .into_iter()
            .map(|l| TrainSample {
                kind: l.row.kind,
                degraded: l.degraded,
                clean: l.clean,
            })
            .collect();
        Ok(Dataset::new(samples)?)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    if let csv::ErrorKind::Io(io) = e.kind() {
        if io.kind() == std::io::ErrorKind::NotFound {
            return CliError::Missing(path.to_path_buf());
        }
    }
    CliError::Data(format!("{}: {e}", path.display()))
}

fn path_text(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// PNG files of a directory in name order.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| CliError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Renders `count` procedural clean scenes of `size` x `size` into `dir`.
pub fn render_scenes(dir: &Path, count: usize, size: usize) -> Result<()> {
    for i in 0..count {
        save_png(&dir.join(format!("{i:04}.png")), &scene(size, size, i as u64))?;
    }
    Ok(())
}

/// Degrades the clean PNGs of `clean_dir` into `out` and writes `out/manifest.csv`.
/// Clean images are copied to `out/clean` so the corpus is self-contained.
pub fn generate_corpus(
    clean_dir: &Path,
    out: &Path,
    counts: &[(WeatherKind, usize)],
    sampler: &SeveritySampler,
    seed: u64,
) -> Result<Manifest> {
    let sources = list_pngs(clean_dir)?;
    if sources.is_empty() {
        return Err(CliError::Data(format!("no PNG images in {}", clean_dir.display())));
    }
    let cleans = sources.iter().map(|p| load_png(p)).collect::<Result<Vec<_>>>()?;
    let plan = plan_corpus(cleans.len(), counts, sampler, seed)?;

    for (i, c) in cleans.iter().enumerate() {
        save_png(&out.join(clean_name(i)), c)?;
    }
    let mut rows = Vec::with_capacity(plan.len());
    for item in &plan {
        let clean = &cleans[item.clean_index];
        let degraded = degrade(clean, &item.spec)?;
        let name = PathBuf::from(format!("degraded/{}_{:05}.png", item.spec.kind, item.index));
        save_png(&out.join(&name), &degraded)?;
        rows.push(ManifestRow {
            degraded: name,
            clean: clean_name(item.clean_index),
            kind: item.spec.kind,
            severity: item.spec.severity,
            seed: item.spec.seed,
        });
    }
    let m = Manifest {
        root: out.to_path_buf(),
        rows,
    };
    m.write(&out.join("manifest.csv"))?;
    Ok(m)
}

fn clean_name(i: usize) -> PathBuf {
    PathBuf::from(format!("clean/{i:04}.png"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(dir: &Path) -> Manifest {
        let clean = dir.join("src");
        render_scenes(&clean, 4, 16).unwrap();
        let counts = [
            (WeatherKind::Haze, 4),
            (WeatherKind::Snow, 4),
            (WeatherKind::RainStreak, 4),
        ];
        let s = SeveritySampler::Uniform { low: 0.2, high: 0.8 };
        generate_corpus(&clean, &dir.join("out"), &counts, &s, 3).unwrap()
    }

    #[test]
    fn corpus_rows_and_rereading() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path());
        assert_eq!(m.rows.len(), 12);
        let back = Manifest::read(&dir.path().join("out/manifest.csv")).unwrap();
        assert_eq!(back.rows, m.rows);
        let loaded = back.load().unwrap();
        assert_eq!(loaded[0].degraded.height(), 16);
        assert_eq!(back.load_dataset().unwrap().len(), 12);
    }

    #[test]
    fn regeneration_reproduces_hash() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (ma, mb) = (corpus(a.path()), corpus(b.path()));
        assert_eq!(ma.hash().unwrap(), mb.hash().unwrap());
        let img = |d: &Path| std::fs::read(d.join("out").join(&ma.rows[5].degraded)).unwrap();
        assert_eq!(img(a.path()), img(b.path()));
    }

    #[test]
    fn empty_clean_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = SeveritySampler::Fixed(0.5);
        let r = generate_corpus(dir.path(), &dir.path().join("o"), &[(WeatherKind::Haze, 2)], &s, 0);
        assert!(matches!(r, Err(CliError::Data(_))));
    }

    #[test]
    fn malformed_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path());
        let path = dir.path().join("out/bad.csv");
        let write = |text: String| std::fs::write(&path, text).unwrap();
        let row = |kind: &str, sev: &str| {
            format!(
                "degraded,clean,kind,severity,seed\n{},{},{kind},{sev},1\n",
                path_text(&m.rows[0].degraded),
                path_text(&m.rows[0].clean)
            )
        };
        write(row("fog", "0.5"));
        assert!(matches!(Manifest::read(&path), Err(CliError::Data(_))));
        write(row("haze", "1.5"));
        assert!(matches!(Manifest::read(&path), Err(CliError::Data(_))));
        write(row("haze", "x"));
        assert!(matches!(Manifest::read(&path), Err(CliError::Data(_))));
        write("a,b\n1,2\n".into());
        assert!(matches!(Manifest::read(&path), Err(CliError::Data(_))));
        write("degraded,clean,kind,severity,seed\nnope.png,nope.png,haze,0.5,1\n".into());
        assert!(matches!(Manifest::read(&path), Err(CliError::Missing(_))));
        write("degraded,clean,kind,severity,seed\n".into());
        assert!(matches!(Manifest::read(&path), Err(CliError::Data(_))));
        assert!(matches!(
            Manifest::read(&dir.path().join("x.csv")),
            Err(CliError::Missing(_))
        ));
        write(row("haze", "0.5"));
        assert_eq!(Manifest::read(&path).unwrap().rows.len(), 1);
    }
}
