//! Paired image folders: `root/<task>/<split>/input/*.png` and
//! `root/<task>/<split>/target/*.png`, matched by file name, with an optional
//! `spec.json` sidecar per split directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    generate_clean, sample_spec, synthesize_degradation, DegradationSpec, Domain, ImageTensor,
    RegimeConfig, SamplePair, Task,
};
use crate::error::{Error, Result};

pub const SIDECAR_FILE: &str = "spec.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Source-domain training pairs.
    Train,
    /// Held-out source-domain pairs.
    Test,
    /// Target-domain evaluation pairs.
    Target,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Target => "target",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::Target => Domain::Target,
            _ => Domain::Source,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "target" => Ok(Split::Target),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Provenance record of one synthesized image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub file: String,
    pub task: Task,
    pub domain: Domain,
    pub seed: u64,
    pub spec: DegradationSpec,
}

fn split_dir(root: &Path, task: Task, split: Split) -> PathBuf {
    root.join(task.as_str()).join(split.as_str())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn read_png(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(ImageTensor::from_rgb8(&img.to_rgb8()))
}

fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    img.to_rgb8()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn read_sidecar(dir: &Path) -> Result<BTreeMap<String, SidecarEntry>> {
    let path = dir.join(SIDECAR_FILE);
    if !path.is_file() {
        return Ok(BTreeMap::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries: Vec<SidecarEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(entries.into_iter().map(|e| (e.file.clone(), e)).collect())
}

/// Pairs of one task and split, ordered by file name.
pub fn load_task_split(root: &Path, task: Task, split: Split) -> Result<Vec<SamplePair>> {
    let dir = split_dir(root, task, split);
    let inputs = png_names(&dir.join("input"))?;
    let targets = png_names(&dir.join("target"))?;
    if let Some(orphan) = targets.iter().find(|t| inputs.binary_search(t).is_err()) {
        return Err(Error::Pairing(format!(
            "{}: target {orphan} has no input",
            dir.display()
        )));
    }
    let sidecar = read_sidecar(&dir)?;
    let mut out = Vec::with_capacity(inputs.len());
    for name in &inputs {
        if targets.binary_search(name).is_err() {
            return Err(Error::Pairing(format!(
                "{}: input {name} has no clean counterpart",
                dir.display()
            )));
        }
        let degraded = read_png(&dir.join("input").join(name))?;
        let clean = read_png(&dir.join("target").join(name))?;
        let domain = sidecar
            .get(name)
            .map(|e| e.domain)
            .unwrap_or_else(|| split.domain());
        let id = format!("{}/{}/{}", task, split, name.trim_end_matches(".png"));
        out.push(SamplePair::new(id, degraded, clean, task, domain)?);
    }
    Ok(out)
}

/// Every pair of `split` across task folders, in lexicographic order of
/// `<task>/<file>`.
pub fn load_folder_dataset(root: &Path, split: Split) -> Result<Vec<SamplePair>> {
    let mut tasks: Vec<Task> = Task::ALL
        .into_iter()
        .filter(|t| split_dir(root, *t, split).is_dir())
        .collect();
    tasks.sort_by_key(|t| t.as_str());
    let mut out = Vec::new();
    for task in tasks {
        out.extend(load_task_split(root, task, split)?);
    }
    if out.is_empty() {
        log::warn!("no {split} samples found under {}", root.display());
    }
    Ok(out)
}

/// Writes pairs (and their sidecar entries) into the folder layout. Pairs
/// are named by `entries[i].file`.
pub fn write_split(
    root: &Path,
    task: Task,
    split: Split,
    pairs: &[SamplePair],
    entries: &[SidecarEntry],
) -> Result<()> {
    assert_eq!(pairs.len(), entries.len());
    let dir = split_dir(root, task, split);
    for sub in ["input", "target"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (pair, entry) in pairs.iter().zip(entries) {
        write_png(&dir.join("input").join(&entry.file), &pair.degraded)?;
        write_png(&dir.join("target").join(&entry.file), &pair.clean)?;
    }
    let path = dir.join(SIDECAR_FILE);
    let text = serde_json::to_string_pretty(entries)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Seed of sample `index` of `(task, split)` in a run seeded with `seed`.
pub fn sample_seed(seed: u64, task: Task, split: Split, index: usize) -> u64 {
    // splitmix64 finaliser over the packed coordinates
    let mut z = seed
        ^ ((task.index() as u64) << 56)
        ^ ((split as u64) << 48)
        ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` synthetic `size × size` pairs of one task and split, with their
/// sidecar records. Deterministic given `seed`.
pub fn synthesize_split(
    task: Task,
    split: Split,
    count: usize,
    size: usize,
    regimes: &RegimeConfig,
    seed: u64,
) -> Result<(Vec<SamplePair>, Vec<SidecarEntry>)> {
    let domain = split.domain();
    let mut pairs = Vec::with_capacity(count);
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let s = sample_seed(seed, task, split, i);
        let mut rng = crate::rng::seeded(s);
        let clean = generate_clean(size, size, &mut rng);
        let spec = sample_spec(task, domain, regimes, &mut rng);
        let degraded = synthesize_degradation(&clean, &spec, &mut rng)?;
        let file = format!("{i:05}.png");
        let id = format!("{task}/{split}/{i:05}");
        pairs.push(SamplePair::new(id, degraded, clean, task, domain)?);
        entries.push(SidecarEntry {
            file,
            task,
            domain,
            seed: s,
            spec,
        });
    }
    Ok((pairs, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DegradationParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_pairs(root: &Path, task: Task, split: Split, n: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let mut pairs = Vec::new();
        let mut entries = Vec::new();
        for i in 0..n {
            let clean = generate_clean(8, 8, &mut rng);
            let degraded = clean.map_clamped(|v| v * 0.5);
            pairs.push(SamplePair::new("x", degraded, clean, task, split.domain()).unwrap());
            entries.push(SidecarEntry {
                file: format!("{i:04}.png"),
                task,
                domain: split.domain(),
                seed: i as u64,
                spec: DegradationSpec::source(DegradationParams::Lowlight {
                    gamma: 1.0,
                    gain: 0.5,
                }),
            });
        }
        write_split(root, task, split, &pairs, &entries).unwrap();
    }

    #[test]
    fn loads_matched_pairs_in_order() {
        let dir = tempfile::tempdir().unwrap();
        write_pairs(dir.path(), Task::Lowlight, Split::Train, 3);
        let data = load_folder_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(data.len(), 3);
        let ids: Vec<&str> = data.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(
            ids,
            [
                "lowlight/train/0000",
                "lowlight/train/0001",
                "lowlight/train/0002"
            ]
        );
        assert!(data
            .iter()
            .all(|p| p.task == Task::Lowlight && p.domain == Domain::Source));
    }

    #[test]
    fn tasks_are_lexicographic() {
        let dir = tempfile::tempdir().unwrap();
        write_pairs(dir.path(), Task::Noise, Split::Test, 1);
        write_pairs(dir.path(), Task::Haze, Split::Test, 1);
        let data = load_folder_dataset(dir.path(), Split::Test).unwrap();
        assert_eq!(data[0].task, Task::Haze);
        assert_eq!(data[1].task, Task::Noise);
    }

    #[test]
    fn missing_counterpart_is_pairing_error() {
        let dir = tempfile::tempdir().unwrap();
        write_pairs(dir.path(), Task::Rain, Split::Train, 2);
        fs::remove_file(dir.path().join("rain/train/target/0001.png")).unwrap();
        assert!(matches!(
            load_folder_dataset(dir.path(), Split::Train),
            Err(Error::Pairing(_))
        ));
    }

    #[test]
    fn undecodable_image_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        write_pairs(dir.path(), Task::Rain, Split::Train, 1);
        fs::write(dir.path().join("rain/train/input/0000.png"), b"not a png").unwrap();
        assert!(matches!(
            load_folder_dataset(dir.path(), Split::Train),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn synthesized_split_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let regimes = RegimeConfig::default();
        let (pairs, entries) =
            synthesize_split(Task::Haze, Split::Target, 3, 16, &regimes, 5).unwrap();
        let (again, _) = synthesize_split(Task::Haze, Split::Target, 3, 16, &regimes, 5).unwrap();
        assert_eq!(pairs, again);
        assert!(pairs.iter().all(|p| p.domain == Domain::Target));
        write_split(dir.path(), Task::Haze, Split::Target, &pairs, &entries).unwrap();
        let loaded = load_task_split(dir.path(), Task::Haze, Split::Target).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in loaded.iter().zip(&pairs) {
            assert_eq!(a.id, b.id);
            // 8-bit storage
            assert!(a
                .degraded
                .data()
                .iter()
                .zip(b.degraded.data())
                .all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
    }

    #[test]
    fn empty_folder_is_empty_sequence() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_folder_dataset(dir.path(), Split::Train)
            .unwrap()
            .is_empty());
    }
}
