//! On-disk dataset layout, following the usual action-segmentation
//! benchmark conventions:
//!
//! ```text
//! <root>/mapping.txt               "<id> <name>" per class
//! <root>/groundTruth/<video>.txt   one class name per frame
//! <root>/features/<video>.bin      frame features (see below)
//! <root>/splits/{train,test}.split<k>.bundle   "<video>.txt" per line
//! ```
//!
//! Feature files: magic `TASFEAT\0`, `u32` version (1), `u32` frames `T`,
//! `u32` dimension `D`, then `T·D` little-endian `f32` values, row-major.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use tas_tensor::Tensor;

use super::{Fold, VideoRecord};
use crate::error::{contract, io_err, Result, TasError};

pub const FEATURE_MAGIC: &[u8; 8] = b"TASFEAT\0";
pub const FEATURE_VERSION: u32 = 1;

/// Action names of the default 15-class resuscitation workflow, in order.
pub const CPR_CLASSES: [&str; 15] = [
    "checking_scene_safety",
    "tapping_the_shoulders",
    "calling_out_to_the_patient",
    "checking_breathing",
    "checking_the_pulse",
    "declaring_someone_is_sick",
    "calling_for_help",
    "asking_for_a_defibrillator",
    "positioning_the_patient",
    "requesting_professional_assistance",
    "locating_the_compression_site",
    "performing_chest_compressions",
    "opening_the_airway",
    "giving_rescue_breaths",
    "reassessing_the_patient",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return contract("ClassMap", format!("class {i} name {n:?} must be a non-empty single token"));
            }
            if names[..i].contains(n) {
                return contract("ClassMap", format!("duplicate class name {n}"));
            }
        }
        Ok(Self { names })
    }

    /// The first `classes` workflow names; extra classes are `action_<i>`.
    pub fn workflow(classes: usize) -> Self {
        let names = (0..classes)
            .map(|i| CPR_CLASSES.get(i).map_or_else(|| format!("action_{i}"), |s| s.to_string()))
            .collect();
        Self { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    /// Human-readable form used in prompts (underscores become spaces).
    pub fn display(&self, id: usize) -> String {
        self.names[id].replace('_', " ")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn to_text(&self) -> String {
        self.names.iter().enumerate().map(|(i, n)| format!("{i} {n}\n")).collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut names = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| TasError::Parse {
                path: path.to_path_buf(),
                line: line_no + 1,
                msg,
            };
            let (id, name) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| parse_err("expected \"<id> <name>\"".into()))?;
            let id: usize = id.parse().map_err(|e| parse_err(format!("bad id: {e}")))?;
            if id != names.len() {
                return Err(parse_err(format!("expected id {}, found {id}", names.len())));
            }
            names.push(name.trim().to_string());
        }
        Self::new(names)
    }

    pub fn labels_to_text(&self, labels: &[usize]) -> String {
        labels.iter().map(|&c| format!("{}\n", self.names[c])).collect()
    }

    pub fn parse_labels(&self, text: &str, path: &Path) -> Result<Vec<usize>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                self.id(l.trim()).ok_or_else(|| TasError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("unknown class {:?}", l.trim()),
                })
            })
            .collect()
    }
}

pub fn encode_features(features: &Tensor) -> Vec<u8> {
    let (t, d) = features.dims2();
    let mut out = Vec::with_capacity(20 + t * d * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: &str| TasError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("not a feature file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    if word(8) != FEATURE_VERSION as usize {
        return Err(bad("unsupported feature file version"));
    }
    let (t, d) = (word(12), word(16));
    let body = &bytes[20..];
    if body.len() != t * d * 4 {
        return Err(bad("truncated feature file"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor::new(vec![t, d], data)?)
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    fs::write(path, encode_features(features)).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_features(&bytes, path)
}

/// A dataset directory and its class vocabulary.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: ClassMap,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join("mapping.txt");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let classes = ClassMap::parse(&text, &path)?;
        Ok(Self { root, classes })
    }

    pub fn create(root: impl Into<PathBuf>, classes: ClassMap) -> Result<Self> {
        let root = root.into();
        for sub in ["groundTruth", "features", "splits"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let path = root.join("mapping.txt");
        fs::write(&path, classes.to_text()).map_err(io_err(&path))?;
        Ok(Self { root, classes })
    }

    pub fn gt_path(&self, id: &str) -> PathBuf {
        self.root.join("groundTruth").join(format!("{id}.txt"))
    }

    pub fn feature_path(&self, id: &str) -> PathBuf {
        self.root.join("features").join(format!("{id}.bin"))
    }

    /// Video ids with a ground-truth file, sorted.
    pub fn video_ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join("groundTruth");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".txt").map(str::to_string)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn read_labels(&self, id: &str) -> Result<Vec<usize>> {
        let path = self.gt_path(id);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        self.classes.parse_labels(&text, &path)
    }

    pub fn write_labels(&self, id: &str, labels: &[usize]) -> Result<()> {
        let path = self.gt_path(id);
        fs::write(&path, self.classes.labels_to_text(labels)).map_err(io_err(&path))
    }

    pub fn load_video(&self, id: &str, fps: f64) -> Result<VideoRecord> {
        let video = VideoRecord {
            id: id.to_string(),
            features: read_features(&self.feature_path(id))?,
            labels: self.read_labels(id)?,
            fps,
        };
        video.validate(self.classes.len())?;
        Ok(video)
    }

    pub fn save_video(&self, video: &VideoRecord) -> Result<()> {
        self.write_labels(&video.id, &video.labels)?;
        write_features(&self.feature_path(&video.id), &video.features)
    }

    pub fn write_folds(&self, folds: &[Fold]) -> Result<()> {
        let dir = self.root.join("splits");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (k, fold) in folds.iter().enumerate() {
            for (kind, ids) in [("train", &fold.train), ("test", &fold.test)] {
                let path = dir.join(format!("{kind}.split{}.bundle", k + 1));
                let mut f = BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
                for id in ids {
                    writeln!(f, "{id}.txt").map_err(io_err(&path))?;
                }
                f.flush().map_err(io_err(&path))?;
            }
        }
        Ok(())
    }

    /// Reads fold `k` (1-based, as in the bundle file names).
    pub fn read_fold(&self, k: usize) -> Result<Fold> {
        let read = |kind: &str| -> Result<Vec<String>> {
            let path = self.root.join("splits").join(format!("{kind}.split{k}.bundle"));
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            Ok(text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| l.strip_suffix(".txt").unwrap_or(l).to_string())
                .collect())
        };
        Ok(Fold {
            train: read("train")?,
            test: read("test")?,
        })
    }

    pub fn fold_count(&self) -> usize {
        (1..)
            .take_while(|k| self.root.join("splits").join(format!("test.split{k}.bundle")).exists())
            .count()
    }
}
