//! Dataset indexing, source/target pairing, opposite-direction fusion and
//! reproducible train/test splits for VIDIT-style corpora.
//!
//! A corpus is a set of scenes, each captured under several illumination
//! settings (compass direction + colour temperature). Files are matched
//! either through a filename pattern such as `{scene}_{temp}_{direction}.png`
//! or through an explicit JSON manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

/// Colour temperatures (Kelvin) of the capture light sources.
pub const TEMPERATURES_K: [u32; 5] = [2500, 3500, 4500, 5500, 6500];

/// Default filename pattern understood by [`index_dataset`].
pub const DEFAULT_PATTERN: &str = "{scene}_{temp}_{direction}.png";

/// Name of the manifest written next to generated corpora.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Azimuthal light direction, clockwise from north.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::N,
        Direction::NE,
        Direction::E,
        Direction::SE,
        Direction::S,
        Direction::SW,
        Direction::W,
        Direction::NW,
    ];

    fn index(self) -> usize {
        Self::ALL.iter().position(|&d| d == self).expect("listed")
    }

    /// Compass bearing in degrees (N = 0, E = 90).
    pub fn azimuth_deg(self) -> f64 {
        45.0 * self.index() as f64
    }

    pub fn token(self) -> &'static str {
        ["N", "NE", "E", "SE", "S", "SW", "W", "NW"][self.index()]
    }
}

/// The direction rotated by 180 degrees.
pub fn opposite(d: Direction) -> Direction {
    Direction::ALL[(d.index() + 4) % 8]
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        let full = [
            "NORTH",
            "NORTHEAST",
            "EAST",
            "SOUTHEAST",
            "SOUTH",
            "SOUTHWEST",
            "WEST",
            "NORTHWEST",
        ];
        Direction::ALL
            .iter()
            .zip(full)
            .find(|(d, name)| d.token() == up || *name == up.replace(['-', '_'], ""))
            .map(|(d, _)| *d)
            .ok_or_else(|| Error::Data(format!("unknown direction token {s:?}")))
    }
}

/// One capture condition: light direction and colour temperature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IlluminationSetting {
    pub direction: Direction,
    pub temperature_k: u32,
}

impl IlluminationSetting {
    pub fn new(direction: Direction, temperature_k: u32) -> Result<Self> {
        if !TEMPERATURES_K.contains(&temperature_k) {
            return Err(Error::Data(format!(
                "temperature {temperature_k} K is not one of {TEMPERATURES_K:?}"
            )));
        }
        Ok(Self { direction, temperature_k })
    }

    /// Every (direction, temperature) combination, direction-major.
    pub fn all() -> Vec<Self> {
        Direction::ALL
            .iter()
            .flat_map(|&d| TEMPERATURES_K.iter().map(move |&t| Self { direction: d, temperature_k: t }))
            .collect()
    }
}

impl fmt::Display for IlluminationSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}K", self.direction, self.temperature_k)
    }
}

/// A file that could not be mapped to a (scene, setting).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Per-scene map from illumination setting to image path.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SceneIndex {
    scenes: BTreeMap<String, BTreeMap<IlluminationSetting, PathBuf>>,
    skipped: Vec<SkippedFile>,
}

impl SceneIndex {
    pub fn insert(&mut self, scene: impl Into<String>, setting: IlluminationSetting, path: PathBuf) -> Option<PathBuf> {
        self.scenes.entry(scene.into()).or_default().insert(setting, path)
    }

    pub fn scene_ids(&self) -> impl Iterator<Item = &str> {
        self.scenes.keys().map(String::as_str)
    }

    pub fn scene_count(&self) -> usize {
        self.scenes.len()
    }

    pub fn entry_count(&self) -> usize {
        self.scenes.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn settings(&self, scene: &str) -> Option<&BTreeMap<IlluminationSetting, PathBuf>> {
        self.scenes.get(scene)
    }

    pub fn path(&self, scene: &str, setting: &IlluminationSetting) -> Option<&Path> {
        self.scenes.get(scene)?.get(setting).map(PathBuf::as_path)
    }

    pub fn skipped(&self) -> &[SkippedFile] {
        &self.skipped
    }

    /// Restriction of the index to the listed scenes (unknown ids are ignored).
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> SceneIndex {
        let scenes = ids
            .into_iter()
            .filter_map(|id| self.scenes.get(id).map(|m| (id.to_string(), m.clone())))
            .collect();
        SceneIndex { scenes, skipped: Vec::new() }
    }

    /// Manifest entries with paths relative to `base` where possible.
    pub fn to_manifest(&self, base: &Path) -> Vec<ManifestEntry> {
        self.scenes
            .iter()
            .flat_map(|(scene, m)| {
                m.iter().map(move |(s, p)| ManifestEntry {
                    path: p.strip_prefix(base).unwrap_or(p).to_path_buf(),
                    scene: scene.clone(),
                    direction: s.direction,
                    temp: s.temperature_k,
                })
            })
            .collect()
    }

    fn warn_on_incomplete(&self) {
        let counts: Vec<usize> = self.scenes.values().map(BTreeMap::len).collect();
        let full = counts.iter().copied().max().unwrap_or(0);
        for (scene, m) in &self.scenes {
            if m.len() < full {
                warn!("scene {scene} has {} settings, others have up to {full}", m.len());
            }
        }
    }
}

/// Filename pattern with `{scene}`, `{direction}` and `{temp}` fields.
#[derive(Clone, Debug)]
pub struct FilenamePattern {
    source: String,
    regex: Regex,
}

impl FilenamePattern {
    pub fn new(pattern: &str) -> Result<Self> {
        let mut re = String::from("^");
        let mut rest = pattern;
        let mut seen = BTreeSet::new();
        while let Some(open) = rest.find('{') {
            re.push_str(&regex::escape(&rest[..open]));
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| Error::Config(format!("unterminated field in pattern {pattern:?}")))?
                + open;
            let field = &rest[open + 1..close];
            let group = match field {
                "scene" => r"(?P<scene>.+?)",
                "direction" => r"(?P<direction>[A-Za-z_\-]+?)",
                "temp" => r"(?P<temp>\d+)",
                other => return Err(Error::Config(format!("unknown pattern field {{{other}}}"))),
            };
            if !seen.insert(field) {
                return Err(Error::Config(format!("field {{{field}}} repeated in pattern")));
            }
            re.push_str(group);
            rest = &rest[close + 1..];
        }
        re.push_str(&regex::escape(rest));
        re.push('$');
        if seen.len() != 3 {
            return Err(Error::Config(format!("pattern {pattern:?} must contain {{scene}}, {{direction}} and {{temp}}")));
        }
        let regex = Regex::new(&re).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { source: pattern.to_string(), regex })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    /// Renders a filename for the given scene and setting.
    pub fn format(&self, scene: &str, setting: &IlluminationSetting) -> String {
        self.source
            .replace("{scene}", scene)
            .replace("{direction}", setting.direction.token())
            .replace("{temp}", &setting.temperature_k.to_string())
    }

    /// Parses a file name into (scene, setting).
    pub fn parse(&self, file_name: &str) -> Result<(String, IlluminationSetting)> {
        let caps = self
            .regex
            .captures(file_name)
            .ok_or_else(|| Error::Data(format!("{file_name:?} does not match {:?}", self.source)))?;
        let direction: Direction = caps["direction"].parse()?;
        let temp: u32 = caps["temp"]
            .parse()
            .map_err(|_| Error::Data(format!("bad temperature in {file_name:?}")))?;
        Ok((caps["scene"].to_string(), IlluminationSetting::new(direction, temp)?))
    }
}

impl Default for FilenamePattern {
    fn default() -> Self {
        Self::new(DEFAULT_PATTERN).expect("default pattern is valid")
    }
}

/// Scans `root` (recursively) and maps every matching file to its scene and setting.
pub fn index_dataset(root: &Path, pattern: &FilenamePattern) -> Result<SceneIndex> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    let mut index = SceneIndex::default();
    for path in files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name == MANIFEST_FILE || !name.to_ascii_lowercase().ends_with(".png") {
            continue;
        }
        match pattern.parse(name) {
            Ok((scene, setting)) => {
                if let Some(prev) = index.insert(scene, setting, path.clone()) {
                    warn!("{} duplicates {}; keeping the later file", path.display(), prev.display());
                }
            }
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                index.skipped.push(SkippedFile { path, reason: e.to_string() });
            }
        }
    }
    if index.is_empty() {
        return Err(Error::Data(format!("no images matching {:?} under {}", pattern.as_str(), root.display())));
    }
    index.warn_on_incomplete();
    Ok(index)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// One manifest record; `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub scene: String,
    pub direction: Direction,
    pub temp: u32,
}

/// Builds an index from a manifest file, bypassing filename matching.
pub fn index_manifest(manifest: &Path) -> Result<SceneIndex> {
    let entries: Vec<ManifestEntry> = serde_json::from_slice(&std::fs::read(manifest)?)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut index = SceneIndex::default();
    for e in entries {
        let path = if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) };
        match IlluminationSetting::new(e.direction, e.temp) {
            Ok(s) => {
                index.insert(e.scene, s, path);
            }
            Err(err) => index.skipped.push(SkippedFile { path, reason: err.to_string() }),
        }
    }
    if index.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no usable images", manifest.display())));
    }
    index.warn_on_incomplete();
    Ok(index)
}

pub fn write_manifest(index: &SceneIndex, manifest: &Path) -> Result<()> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let json = serde_json::to_string_pretty(&index.to_manifest(base))?;
    std::fs::write(manifest, json + "\n")?;
    Ok(())
}

/// Pixelwise `w1 * a + w2 * b`.
pub fn fuse_opposite(a: &ImageTensor, b: &ImageTensor, w1: f32, w2: f32) -> Result<ImageTensor> {
    a.tensor().expect_same_shape(b.tensor())?;
    if ((w1 + w2) - 1.0).abs() > 1e-6 || w1 < 0.0 || w2 < 0.0 {
        warn!("fusion weights {w1} + {w2} are not a convex combination; output is clamped to [0, 1]");
    }
    let fused = a.tensor().zip_map(b.tensor(), |x, y| w1 * x + w2 * y)?;
    ImageTensor::from_clamped(&fused)
}

/// Which captures form the network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    /// One capture under `source`.
    Single { source: IlluminationSetting },
    /// Fusion of two captures from opposite directions at one temperature.
    Multi { first: Direction, second: Direction, temperature_k: u32 },
}

impl Task {
    pub fn multi(first: Direction, temperature_k: u32) -> Self {
        Task::Multi { first, second: opposite(first), temperature_k }
    }

    pub fn input_settings(&self) -> Result<Vec<IlluminationSetting>> {
        match *self {
            Task::Single { source } => Ok(vec![IlluminationSetting::new(source.direction, source.temperature_k)?]),
            Task::Multi { first, second, temperature_k } => {
                if second != opposite(first) {
                    return Err(Error::Config(format!("{first} and {second} are not opposite directions")));
                }
                Ok(vec![
                    IlluminationSetting::new(first, temperature_k)?,
                    IlluminationSetting::new(second, temperature_k)?,
                ])
            }
        }
    }
}

/// Default input temperature for the opposite-direction task.
pub const MULTI_DEFAULT_TEMPERATURE_K: u32 = 6500;

/// Weights used when fusing opposite-direction captures.
pub const FUSE_WEIGHTS: (f32, f32) = (0.5, 0.5);

/// One training or evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub scene: String,
    pub input: ImageTensor,
    pub input_settings: Vec<IlluminationSetting>,
    pub target: ImageTensor,
    pub target_setting: IlluminationSetting,
}

/// Builds one pair per scene that has every setting the task needs; other
/// scenes are skipped with a warning.
pub fn make_pairs(index: &SceneIndex, task: &Task, target: IlluminationSetting) -> Result<Vec<ScenePair>> {
    let inputs = task.input_settings()?;
    let target = IlluminationSetting::new(target.direction, target.temperature_k)?;
    let mut pairs = Vec::new();
    for scene in index.scene_ids() {
        let lookup = |s: &IlluminationSetting| index.path(scene, s);
        let (Some(input_paths), Some(target_path)) =
            (inputs.iter().map(lookup).collect::<Option<Vec<_>>>(), lookup(&target))
        else {
            warn!("scene {scene} lacks a setting required by {task:?} -> {target}; skipped");
            continue;
        };
        let images = input_paths.iter().map(ImageTensor::load_png).collect::<Result<Vec<_>>>()?;
        let input = match images.as_slice() {
            [single] => single.clone(),
            [a, b] => fuse_opposite(a, b, FUSE_WEIGHTS.0, FUSE_WEIGHTS.1)?,
            _ => unreachable!("tasks use one or two inputs"),
        };
        let target_img = ImageTensor::load_png(target_path)?;
        input.tensor().expect_same_shape(target_img.tensor())?;
        pairs.push(ScenePair {
            scene: scene.to_string(),
            input,
            input_settings: inputs.clone(),
            target: target_img,
            target_setting: target,
        });
    }
    Ok(pairs)
}

/// Scene ids of each partition of a split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Samples `n_test` scenes uniformly at random (seeded) as the test set.
pub fn split_custom(index: &SceneIndex, n_test: usize, seed: u64) -> Result<(SceneIndex, SceneIndex, SplitFile)> {
    let mut ids: Vec<&str> = index.scene_ids().collect();
    if n_test >= ids.len() {
        return Err(Error::Data(format!("cannot hold out {n_test} of {} scenes", ids.len())));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test: Vec<String> = ids[..n_test].iter().map(|s| s.to_string()).collect();
    let mut train: Vec<String> = ids[n_test..].iter().map(|s| s.to_string()).collect();
    test.sort();
    train.sort();
    let split = SplitFile { seed, train, test };
    Ok((
        index.subset(split.train.iter().map(String::as_str)),
        index.subset(split.test.iter().map(String::as_str)),
        split,
    ))
}
