//! Dataset generation, pretraining, adaptation and evaluation on disk.

use crate::config::ExperimentConfig;
use anyhow::{bail, Context, Result};
use falcon_lab::adaptation::{self, evaluate_map, AdaptRecord, MapReport};
use falcon_lab::detector::DetectorParams;
use falcon_lab::scenes::{generate_split, load_split, split_dir, write_split, Domain, Scene, Split, CLASS_NAMES};
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const SOURCE_CHECKPOINT: &str = "source.ck";
pub const TEACHER_CHECKPOINT: &str = "teacher.ck";
pub const STUDENT_CHECKPOINT: &str = "student.ck";
pub const PRETRAIN_METRICS: &str = "pretrain_metrics.jsonl";
pub const ADAPT_METRICS: &str = "adapt_metrics.jsonl";
/// The resolved config of the last command, rendered in full.
pub const CONFIG_SNAPSHOT: &str = "config.txt";

/// One of the four dataset splits, written `domain-split` on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRef {
    pub domain: Domain,
    pub split: Split,
}

impl SplitRef {
    pub const TARGET_VAL: SplitRef = SplitRef { domain: Domain::Target, split: Split::Val };

    pub fn name(self) -> String {
        format!("{}-{}", self.domain.name(), self.split.name())
    }
}

impl FromStr for SplitRef {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (d, sp) = s.split_once('-').unwrap_or((s, ""));
        let domain = match d {
            "source" => Domain::Source,
            "target" => Domain::Target,
            _ => bail!("unknown split {s:?} (expected source-train, source-val, target-train or target-val)"),
        };
        let split = match sp {
            "train" => Split::Train,
            "val" => Split::Val,
            _ => bail!("unknown split {s:?} (expected source-train, source-val, target-train or target-val)"),
        };
        Ok(SplitRef { domain, split })
    }
}

/// The splits the pipeline reads, held in memory.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub source_train: Vec<Scene>,
    pub target_train: Vec<Scene>,
    pub target_val: Vec<Scene>,
}

impl Datasets {
    /// Renders the splits without touching the disk.
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.dataset;
        Ok(Datasets {
            source_train: generate_split(d, Domain::Source, Split::Train)?,
            target_train: generate_split(d, Domain::Target, Split::Train)?,
            target_val: generate_split(d, Domain::Target, Split::Val)?,
        })
    }

    pub fn load(root: &Path) -> Result<Self> {
        Ok(Datasets {
            source_train: load(root, Domain::Source, Split::Train)?,
            target_train: load(root, Domain::Target, Split::Train)?,
            target_val: load(root, Domain::Target, Split::Val)?,
        })
    }
}

fn load(root: &Path, domain: Domain, split: Split) -> Result<Vec<Scene>> {
    let dir = split_dir(root, domain, split);
    load_split(&dir).with_context(|| format!("loading {} (run gen-data first)", dir.display()))
}

/// Writes all four splits under `data_dir` and removes files left over from
/// a larger earlier run, so the directory depends only on the config.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let root = &cfg.data_dir;
    for domain in [Domain::Source, Domain::Target] {
        for split in [Split::Train, Split::Val] {
            let dir = split_dir(root, domain, split);
            let scenes = generate_split(&cfg.dataset, domain, split)?;
            write_split(&dir, &scenes).with_context(|| format!("writing {}", dir.display()))?;
            remove_stale(&dir, scenes.len())?;
        }
    }
    Ok(root.clone())
}

fn remove_stale(dir: &Path, from: usize) -> Result<()> {
    for i in from.. {
        let mut found = false;
        for prefix in ["img", "mask"] {
            found |= remove_if_present(&dir.join(format!("{prefix}_{i:05}.pgm")))?;
        }
        found |= remove_if_present(&dir.join(format!("ann_{i:05}.json")))?;
        if !found {
            return Ok(());
        }
    }
    Ok(())
}

fn remove_if_present(path: &Path) -> Result<bool> {
    match fs::remove_file(path) {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(e).with_context(|| format!("removing {}", path.display())),
    }
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<&Path> {
    let out = cfg.out_dir.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_SNAPSHOT), cfg.render()).with_context(|| format!("writing {}", out.display()))?;
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn save(params: &DetectorParams, path: &Path) -> Result<()> {
    params.save(path).with_context(|| format!("writing checkpoint {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorParams> {
    if !path.is_file() {
        bail!("checkpoint {} not found", path.display());
    }
    DetectorParams::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// Trains the source model and writes `source.ck` plus per-step metrics.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let scenes = load(&cfg.data_dir, Domain::Source, Split::Train)?;
    let mut records = Vec::with_capacity(cfg.train.steps_source);
    let params = adaptation::pretrain_source(&cfg.train, &scenes, &mut |r| records.push(*r))?;
    let out = prepare_out(cfg)?;
    write_jsonl(&out.join(PRETRAIN_METRICS), &records)?;
    let path = out.join(SOURCE_CHECKPOINT);
    save(&params, &path)?;
    Ok(path)
}

#[derive(Serialize)]
struct AdaptLine {
    #[serde(flatten)]
    record: AdaptRecord,
    skipped_images: usize,
}

/// Adapts `source` (default `out/source.ck`) on the target training split
/// and writes both final models plus per-step metrics.
pub fn adapt(cfg: &ExperimentConfig, source: Option<&Path>) -> Result<PathBuf> {
    let source_path = source.map_or_else(|| cfg.out_dir.join(SOURCE_CHECKPOINT), Path::to_path_buf);
    let source = load_checkpoint(&source_path)?;
    let scenes = load(&cfg.data_dir, Domain::Target, Split::Train)?;
    let mut lines = Vec::with_capacity(cfg.train.steps_adapt);
    let outcome = adaptation::adapt(&source, &cfg.train, &cfg.switches, &scenes, &mut |s| {
        lines.push(AdaptLine { record: *s.record, skipped_images: s.skipped_images })
    })?;
    let out = prepare_out(cfg)?;
    write_jsonl(&out.join(ADAPT_METRICS), &lines)?;
    save(&outcome.student, &out.join(STUDENT_CHECKPOINT))?;
    let path = out.join(TEACHER_CHECKPOINT);
    save(&outcome.teacher, &path)?;
    Ok(path)
}

/// `class,ap` rows in class order, then the mean. Classes without ground
/// truth print `NA` and are left out of the mean.
pub fn report_csv(report: &MapReport) -> String {
    let mut csv = String::from("class,ap\n");
    for c in &report.per_class {
        let name = CLASS_NAMES.get(c.class).copied().unwrap_or("unknown");
        match c.ap {
            Some(ap) => csv.push_str(&format!("{name},{ap:.6}\n")),
            None => csv.push_str(&format!("{name},NA\n")),
        }
    }
    csv.push_str(&format!("mAP,{:.6}\n", report.map));
    csv
}

pub struct EvalOutput {
    pub report: MapReport,
    pub csv: String,
    pub path: PathBuf,
}

/// Evaluates a checkpoint (default `out/teacher.ck`) on one split and writes
/// `eval_<split>.csv`.
pub fn eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>, split: SplitRef) -> Result<EvalOutput> {
    let ck = checkpoint.map_or_else(|| cfg.out_dir.join(TEACHER_CHECKPOINT), Path::to_path_buf);
    let params = load_checkpoint(&ck)?;
    let scenes = load(&cfg.data_dir, split.domain, split.split)?;
    let report = evaluate_map(&params, &scenes, cfg.eval_iou);
    let csv = report_csv(&report);
    let out = prepare_out(cfg)?;
    let path = out.join(format!("eval_{}.csv", split.name().replace('-', "_")));
    let mut file = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    file.write_all(csv.as_bytes())?;
    Ok(EvalOutput { report, csv, path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use falcon_lab::adaptation::ClassAp;

    #[test]
    fn split_names_round_trip() {
        for s in ["source-train", "source-val", "target-train", "target-val"] {
            assert_eq!(s.parse::<SplitRef>().unwrap().name(), s);
        }
        for bad in ["target", "val", "target-test", ""] {
            assert!(bad.parse::<SplitRef>().is_err(), "{bad}");
        }
    }

    #[test]
    fn csv_layout() {
        let report = MapReport {
            per_class: vec![
                ClassAp { class: 0, num_gt: 3, ap: Some(0.5) },
                ClassAp { class: 1, num_gt: 0, ap: None },
                ClassAp { class: 2, num_gt: 1, ap: Some(1.0 / 3.0) },
            ],
            map: (0.5 + 1.0 / 3.0) / 2.0,
        };
        assert_eq!(report_csv(&report), "class,ap\nsquare,0.500000\ndisk,NA\ntriangle,0.333333\nmAP,0.416667\n");
    }

    #[test]
    fn stale_files_are_removed() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..4 {
            for name in [format!("img_{i:05}.pgm"), format!("mask_{i:05}.pgm"), format!("ann_{i:05}.json")] {
                fs::write(dir.path().join(name), b"x").unwrap();
            }
        }
        fs::write(dir.path().join("notes.txt"), b"keep").unwrap();
        remove_stale(dir.path(), 2).unwrap();
        let mut left: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        left.sort();
        assert_eq!(left.len(), 7);
        assert!(dir.path().join("img_00001.pgm").exists() && !dir.path().join("ann_00002.json").exists());
    }
}
