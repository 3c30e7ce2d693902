//! Top-1 evaluation over a directory-per-class image set.
//!
//! Each subdirectory of the root is one class. When every subdirectory
//! name is an integer that integer is the class index; otherwise classes
//! are numbered by sorted directory name.

use std::fs;
use std::path::{Path, PathBuf};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use patchprune::io::load_image;
use patchprune::model::Model;
use patchprune::Exec;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledImage {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub evaluated: usize,
    pub correct: usize,
    pub skipped: Vec<(PathBuf, String)>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.correct as f64 / self.evaluated as f64
        }
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| CliError::io(dir, err)))
        .collect::<Result<Vec<_>, _>>()?;
    entries.sort();
    Ok(entries)
}

/// Lists every file under the class subdirectories, sorted by path.
pub fn scan_dataset(root: &Path) -> Result<Vec<LabeledImage>, CliError> {
    let class_dirs: Vec<PathBuf> = read_dir_sorted(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    let names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let numeric: Option<Vec<usize>> = names.iter().map(|n| n.parse().ok()).collect();
    let labels = numeric.unwrap_or_else(|| (0..names.len()).collect());

    let mut items = Vec::new();
    for (dir, label) in class_dirs.iter().zip(labels) {
        for path in read_dir_sorted(dir)? {
            if path.is_file() {
                items.push(LabeledImage { path, label });
            }
        }
    }
    if items.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: no images found in class subdirectories",
            root.display()
        )));
    }
    Ok(items)
}

enum Outcome {
    Correct,
    Wrong,
    Skipped(String),
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn evaluate_one(model: &Model, item: &LabeledImage) -> Result<Outcome, CliError> {
    let image = match load_image(&item.path, model.config.image_size) {
        Ok(img) => img,
        Err(e) => return Ok(Outcome::Skipped(e.to_string())),
    };
    let out = model.forward(&image, &Exec::default())?;
    Ok(if argmax(&out.logits) == item.label {
        Outcome::Correct
    } else {
        Outcome::Wrong
    })
}

/// Runs every image; unreadable files are skipped and reported. The result
/// does not depend on how many worker threads run it.
pub fn evaluate(model: &Model, items: &[LabeledImage]) -> Result<EvalReport, CliError> {
    #[cfg(feature = "parallel")]
    let outcomes: Vec<_> = items.par_iter().map(|it| evaluate_one(model, it)).collect();
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<_> = items.iter().map(|it| evaluate_one(model, it)).collect();

    let mut report = EvalReport {
        evaluated: 0,
        correct: 0,
        skipped: Vec::new(),
    };
    for (item, outcome) in items.iter().zip(outcomes) {
        match outcome? {
            Outcome::Correct => {
                report.evaluated += 1;
                report.correct += 1;
            }
            Outcome::Wrong => report.evaluated += 1,
            Outcome::Skipped(why) => report.skipped.push((item.path.clone(), why)),
        }
    }
    Ok(report)
}
