//! Datasets: the VOC-style directory layout, its manifest, and the
//! synthetic shape generator.
//!
//! Layout of a dataset root:
//!
//! ```text
//! root/
//!   classes.txt                       one foreground class name per line
//!   JPEGImages/<id>.png               images (.png/.jpg/.ppm accepted)
//!   ImageSets/Main/<set>.txt          image ids of the split
//!   ImageSets/Main/<class>_<set>.txt  "<id> 1" present / "<id> -1" absent
//!   SegmentationClass/<id>.png        optional label masks, evaluation only
//! ```
//!
//! Image-level labels come solely from the per-class presence files; masks
//! are carried separately so the training path never touches them.

pub mod imageio;
pub mod synth;

use crate::error::{Error, Result};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// One dataset record. `mask_path` exists only for evaluation; the training
/// projection [`DatasetManifest::training_examples`] drops it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub image_path: PathBuf,
    /// Present foreground classes, 0-based, sorted ascending.
    pub present: Vec<usize>,
    pub mask_path: Option<PathBuf>,
}

/// What the training loop is allowed to see: image plus image-level labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub id: String,
    pub image_path: PathBuf,
    pub present: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// The weak-supervision projection: no mask paths.
    pub fn training_examples(&self) -> Vec<TrainExample> {
        self.records
            .iter()
            .map(|r| TrainExample {
                id: r.id.clone(),
                image_path: r.image_path.clone(),
                present: r.present.clone(),
            })
            .collect()
    }
}

fn find_image(root: &Path, id: &str) -> Option<PathBuf> {
    for ext in ["png", "jpg", "jpeg", "ppm"] {
        let candidate = root.join("JPEGImages").join(format!("{id}.{ext}"));
        if candidate.is_file() {
            return Some(candidate);
        }
    }
    None
}

/// Load a VOC-layout dataset manifest for one image set (e.g. `all`,
/// `train`). Missing masks are tolerated; any other missing piece is
/// reported, all problems at once.
pub fn load_voc_manifest(root: &Path, set_name: &str) -> Result<DatasetManifest> {
    let mut problems: Vec<String> = Vec::new();

    let classes_path = root.join("classes.txt");
    let class_names: Vec<String> = match std::fs::read_to_string(&classes_path) {
        Ok(text) => text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        Err(_) => {
            problems.push(format!("missing class table {}", classes_path.display()));
            Vec::new()
        }
    };

    let set_path = root
        .join("ImageSets")
        .join("Main")
        .join(format!("{set_name}.txt"));
    let ids: Vec<String> = match std::fs::read_to_string(&set_path) {
        Ok(text) => text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        Err(_) => {
            problems.push(format!("missing image-set list {}", set_path.display()));
            Vec::new()
        }
    };

    let mut seen = BTreeSet::new();
    for id in &ids {
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!(
                "duplicate image id `{id}` in {}",
                set_path.display()
            )));
        }
    }

    // Per-class presence flags.
    let mut present_sets: Vec<BTreeSet<String>> = Vec::with_capacity(class_names.len());
    for name in &class_names {
        let label_path = root
            .join("ImageSets")
            .join("Main")
            .join(format!("{name}_{set_name}.txt"));
        match std::fs::read_to_string(&label_path) {
            Ok(text) => {
                let mut set = BTreeSet::new();
                for (lineno, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() {
                        continue;
                    }
                    let mut parts = line.split_whitespace();
                    let (Some(id), Some(flag)) = (parts.next(), parts.next()) else {
                        problems.push(format!(
                            "{}:{}: expected `<id> 1|-1`",
                            label_path.display(),
                            lineno + 1
                        ));
                        continue;
                    };
                    match flag {
                        "1" => {
                            set.insert(id.to_string());
                        }
                        "-1" | "0" => {}
                        other => problems.push(format!(
                            "{}:{}: bad presence flag `{other}`",
                            label_path.display(),
                            lineno + 1
                        )),
                    }
                }
                present_sets.push(set);
            }
            Err(_) => {
                problems.push(format!("missing label file {}", label_path.display()));
                present_sets.push(BTreeSet::new());
            }
        }
    }

    let mut records = Vec::with_capacity(ids.len());
    for id in &ids {
        let Some(image_path) = find_image(root, id) else {
            problems.push(format!("missing image for id `{id}` under JPEGImages/"));
            continue;
        };
        let present: Vec<usize> = present_sets
            .iter()
            .enumerate()
            .filter(|(_, set)| set.contains(id))
            .map(|(c, _)| c)
            .collect();
        let mask_candidate = root.join("SegmentationClass").join(format!("{id}.png"));
        records.push(Record {
            id: id.clone(),
            image_path,
            present,
            mask_path: mask_candidate.is_file().then_some(mask_candidate),
        });
    }

    if !problems.is_empty() {
        return Err(Error::Data(format!(
            "dataset at {} is malformed:\n  {}",
            root.display(),
            problems.join("\n  ")
        )));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        class_names,
        records,
    })
}
