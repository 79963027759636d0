//! Dataset manifest (JSON-lines, one object per sample) and corpus-stats
//! JSON.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use handprint_core::data::{CorpusStats, LabeledSample, SampleSource};

use crate::error::{CliError, Result};
use crate::pngio;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub hw_path: String,
    pub mp_path: String,
    pub label: String,
    pub boxes: Vec<[usize; 2]>,
}

/// Writes image files plus the JSON-lines manifest. Paths inside the
/// manifest are relative to the manifest's directory.
pub fn write_dataset(dir: &Path, samples: &[LabeledSample]) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let hw_rel = format!("images/hw_{i:05}.png");
        let mp_rel = format!("images/mp_{i:05}.png");
        pngio::write_png(&dir.join(&hw_rel), &s.hw)?;
        pngio::write_png(&dir.join(&mp_rel), &s.mp)?;
        entries.push(ManifestEntry {
            hw_path: hw_rel,
            mp_path: mp_rel,
            label: s.label.clone(),
            boxes: s.char_boxes.iter().map(|&(a, b)| [a, b]).collect(),
        });
    }
    let mut file = std::fs::File::create(dir.join("manifest.jsonl"))?;
    for e in &entries {
        let line = serde_json::to_string(e)
            .map_err(|e| CliError::Data(format!("manifest encode: {e}")))?;
        writeln!(file, "{line}")?;
    }
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join("manifest.jsonl");
    let file = std::fs::File::open(&path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            CliError::Data(format!(
                "{}:{}: bad manifest line: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(CliError::Data(format!(
            "{}: empty manifest",
            path.display()
        )));
    }
    Ok(entries)
}

/// Loads the images referenced by a manifest back into labeled samples.
pub fn load_samples(dir: &Path, entries: &[ManifestEntry]) -> Result<Vec<LabeledSample>> {
    entries
        .iter()
        .map(|e| {
            let hw = pngio::read_png(&dir.join(&e.hw_path))?;
            let mp = pngio::read_png(&dir.join(&e.mp_path))?;
            let sample = LabeledSample {
                hw,
                mp,
                label: e.label.clone(),
                char_boxes: e.boxes.iter().map(|b| (b[0], b[1])).collect(),
                source: SampleSource::Manifest,
            };
            sample.validate().map_err(CliError::from)?;
            Ok(sample)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StatsFile {
    pub mean: f64,
    pub std: f64,
    pub config_hash: String,
}

pub fn write_stats(dir: &Path, stats: &CorpusStats, config_hash: &str) -> Result<()> {
    let payload = StatsFile {
        mean: stats.mean,
        std: stats.std,
        config_hash: config_hash.into(),
    };
    let text = serde_json::to_string_pretty(&payload)
        .map_err(|e| CliError::Data(format!("stats encode: {e}")))?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("stats.json"), text)?;
    Ok(())
}

pub fn read_stats(dir: &Path) -> Result<CorpusStats> {
    let path = dir.join("stats.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let parsed: StatsFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(CorpusStats {
        mean: parsed.mean,
        std: parsed.std,
    })
}

/// Reads a newline-separated word list.
pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let words: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if words.is_empty() {
        return Err(CliError::Data(format!(
            "{}: empty vocabulary",
            path.display()
        )));
    }
    Ok(words)
}

/// run.json: the resolved configuration and its hash, written into every
/// output directory for traceability.
pub fn write_run_metadata(
    dir: &Path,
    pairs: &std::collections::BTreeMap<String, String>,
    hash: &str,
) -> Result<()> {
    #[derive(Serialize)]
    struct RunFile<'a> {
        config_hash: &'a str,
        config: &'a std::collections::BTreeMap<String, String>,
    }
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(&RunFile {
        config_hash: hash,
        config: pairs,
    })
    .map_err(|e| CliError::Data(format!("run.json encode: {e}")))?;
    std::fs::write(dir.join("run.json"), text)?;
    Ok(())
}

pub fn manifest_dir_of(data_dir: &Path) -> PathBuf {
    data_dir.to_path_buf()
}

#[cfg(test)]
mod tests {
    use super::*;
    use handprint_core::data::{make_synthetic_dataset, toy_vocabulary, FontSpec};

    #[test]
    fn manifest_round_trip_reproduces_samples() {
        let dir = std::env::temp_dir().join("handprint_manifest_test");
        let _ = std::fs::remove_dir_all(&dir);
        let data =
            make_synthetic_dataset(&toy_vocabulary(), 6, &FontSpec::default(), 1.0, 3).unwrap();
        let entries = write_dataset(&dir, &data).unwrap();
        let back_entries = read_manifest(&dir).unwrap();
        assert_eq!(entries, back_entries);
        let back = load_samples(&dir, &back_entries).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.char_boxes, b.char_boxes);
            // 8-bit quantization round trip
            for (x, y) in a.hw.pixels.iter().zip(&b.hw.pixels) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-9);
            }
        }
    }

    #[test]
    fn stats_round_trip() {
        let dir = std::env::temp_dir().join("handprint_stats_test");
        let stats = CorpusStats {
            mean: 0.123,
            std: 0.456,
        };
        write_stats(&dir, &stats, "deadbeef").unwrap();
        let back = read_stats(&dir).unwrap();
        assert_eq!(back, stats);
    }
}
