//! Dataset manifests, label semantics, and per-category train/validation
//! splitting.
//!
//! A manifest is newline-delimited JSON, one record per line with fields
//! `id`, `image_path`, `smoke`, `fire`, `partition`. Image paths are stored
//! relative to the manifest file and resolved to absolute paths on load.

mod synth;

pub use synth::{
    load_truths, synth_generate, ObjectKind, ObjectTruth, Palette, SynthCounts, SynthOutput,
    SynthSpec,
};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, stream};

/// Independent binary targets for the two classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector {
    pub smoke: bool,
    pub fire: bool,
}

impl LabelVector {
    pub const NEGATIVE: LabelVector = LabelVector {
        smoke: false,
        fire: false,
    };

    pub fn is_positive(self) -> bool {
        self.smoke || self.fire
    }
}

/// Sample role in the corpus. Positives carry at least one true label flag;
/// both negative kinds carry none.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Positive,
    SimpleNegative,
    ComplexNegative,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Positive => "positive",
            Partition::SimpleNegative => "simple_negative",
            Partition::ComplexNegative => "complex_negative",
        }
    }

    fn consistent_with(self, label: LabelVector) -> bool {
        match self {
            Partition::Positive => label.is_positive(),
            Partition::SimpleNegative | Partition::ComplexNegative => !label.is_positive(),
        }
    }
}

/// Stratification category: the five-way breakdown used for splitting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    FireOnly,
    SmokeOnly,
    FireAndSmoke,
    SimpleNegative,
    ComplexNegative,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::FireOnly,
        Category::SmokeOnly,
        Category::FireAndSmoke,
        Category::SimpleNegative,
        Category::ComplexNegative,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::FireOnly => "fire_only",
            Category::SmokeOnly => "smoke_only",
            Category::FireAndSmoke => "fire_and_smoke",
            Category::SimpleNegative => "simple_negative",
            Category::ComplexNegative => "complex_negative",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labeled image reference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    /// Absolute (or cwd-relative) path, resolved against the manifest dir.
    pub image_path: PathBuf,
    pub label: LabelVector,
    pub partition: Partition,
}

impl Sample {
    pub fn category(&self) -> Category {
        match (self.partition, self.label.fire, self.label.smoke) {
            (Partition::SimpleNegative, _, _) => Category::SimpleNegative,
            (Partition::ComplexNegative, _, _) => Category::ComplexNegative,
            (Partition::Positive, true, true) => Category::FireAndSmoke,
            (Partition::Positive, true, false) => Category::FireOnly,
            (Partition::Positive, false, true) => Category::SmokeOnly,
            (Partition::Positive, false, false) => {
                unreachable!("validated: positive samples carry a true flag")
            }
        }
    }
}

/// Ordered collection of validated samples.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Manifest {
    samples: Vec<Sample>,
}

impl Manifest {
    /// Builds a manifest, enforcing unique ids and label/partition
    /// consistency.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.clone()) {
                return Err(Error::Manifest(format!("duplicate sample id '{}'", s.id)));
            }
            if !s.partition.consistent_with(s.label) {
                return Err(Error::Manifest(format!(
                    "sample '{}': partition {} contradicts labels smoke={} fire={}",
                    s.id,
                    s.partition.as_str(),
                    s.label.smoke,
                    s.label.fire
                )));
            }
        }
        Ok(Manifest { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Tally over samples, keyed by stratification category.
    pub fn category_counts(&self) -> BTreeMap<Category, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.category()).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    image_path: String,
    smoke: bool,
    fire: bool,
    partition: Partition,
}

/// Reads a newline-delimited JSON manifest. Record order is preserved;
/// malformed records report their line number.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut samples = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Manifest(format!(
                "{}:{}: malformed record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        let label = LabelVector {
            smoke: rec.smoke,
            fire: rec.fire,
        };
        if !rec.partition.consistent_with(label) {
            return Err(Error::Manifest(format!(
                "{}:{}: sample '{}': partition {} contradicts labels smoke={} fire={}",
                path.display(),
                lineno + 1,
                rec.id,
                rec.partition.as_str(),
                rec.smoke,
                rec.fire
            )));
        }
        samples.push(Sample {
            id: rec.id,
            image_path: base.join(rec.image_path),
            label,
            partition: rec.partition,
        });
    }
    if samples.is_empty() {
        return Err(Error::Manifest(format!(
            "{}: empty manifest",
            path.display()
        )));
    }
    Manifest::from_samples(samples)
}

/// Writes a manifest as newline-delimited JSON. Image paths are made
/// relative to the output file's directory when possible.
pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    for s in manifest.samples() {
        let rel = s
            .image_path
            .strip_prefix(base)
            .unwrap_or(&s.image_path)
            .to_string_lossy()
            .into_owned();
        let rec = ManifestRecord {
            id: s.id.clone(),
            image_path: rel,
            smoke: s.label.smoke,
            fire: s.label.fire,
            partition: s.partition,
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::Manifest(format!("serialize record '{}': {e}", s.id)))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Stratified split parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Splits per category: `floor(train_fraction * n)` samples train, the rest
/// validate. Deterministic given the seed; original manifest order is kept
/// within each output.
pub fn split_train_val(manifest: &Manifest, spec: &SplitSpec) -> Result<(Manifest, Manifest)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let counts = manifest.category_counts();
    for cat in Category::ALL {
        if !counts.contains_key(&cat) {
            return Err(Error::Manifest(format!("empty category: {cat}")));
        }
    }

    let mut in_train = vec![false; manifest.len()];
    for (ci, cat) in Category::ALL.iter().enumerate() {
        let mut indices: Vec<usize> = manifest
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.category() == *cat)
            .map(|(i, _)| i)
            .collect();
        let n_train = (spec.train_fraction * indices.len() as f64).floor() as usize;
        if n_train == 0 {
            log::warn!(
                "category {cat} has {} sample(s); all assigned to validation",
                indices.len()
            );
        }
        let mut rng = derive_rng(spec.seed, &[stream::SPLIT, ci as u64]);
        indices.shuffle(&mut rng);
        for &i in indices.iter().take(n_train) {
            in_train[i] = true;
        }
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in manifest.samples().iter().enumerate() {
        if in_train[i] {
            train.push(s.clone());
        } else {
            val.push(s.clone());
        }
    }
    Ok((Manifest { samples: train }, Manifest { samples: val }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, smoke: bool, fire: bool, partition: Partition) -> Sample {
        Sample {
            id: id.to_string(),
            image_path: PathBuf::from(format!("{id}.png")),
            label: LabelVector { smoke, fire },
            partition,
        }
    }

    fn five_way(n_per: usize) -> Manifest {
        let mut samples = Vec::new();
        for i in 0..n_per {
            samples.push(sample(&format!("f{i}"), false, true, Partition::Positive));
            samples.push(sample(&format!("s{i}"), true, false, Partition::Positive));
            samples.push(sample(&format!("b{i}"), true, true, Partition::Positive));
            samples.push(sample(&format!("n{i}"), false, false, Partition::SimpleNegative));
            samples.push(sample(&format!("h{i}"), false, false, Partition::ComplexNegative));
        }
        Manifest::from_samples(samples).unwrap()
    }

    #[test]
    fn empty_manifest_file_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "").unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("empty manifest"));
    }

    #[test]
    fn label_partition_contradiction_is_error_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"a","image_path":"a.png","smoke":false,"fire":true,"partition":"positive"}"#,
                "\n",
                r#"{"id":"b","image_path":"b.png","smoke":true,"fire":false,"partition":"simple_negative"}"#,
                "\n"
            ),
        )
        .unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        assert!(err.contains("contradicts"), "{err}");
    }

    #[test]
    fn malformed_record_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"a","image_path":"a.png","smoke":false,"fire":true,"partition":"positive"}"#,
                "\n",
                "{not json}\n"
            ),
        )
        .unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn well_formed_file_counts_sum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        // Hand-built fixture: 2 fire-only, 1 smoke-only, 1 both, 1 simple.
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"a","image_path":"a.png","smoke":false,"fire":true,"partition":"positive"}"#, "\n",
                r#"{"id":"b","image_path":"b.png","smoke":false,"fire":true,"partition":"positive"}"#, "\n",
                r#"{"id":"c","image_path":"c.png","smoke":true,"fire":false,"partition":"positive"}"#, "\n",
                r#"{"id":"d","image_path":"d.png","smoke":true,"fire":true,"partition":"positive"}"#, "\n",
                r#"{"id":"e","image_path":"e.png","smoke":false,"fire":false,"partition":"simple_negative"}"#, "\n"
            ),
        )
        .unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 5);
        let counts = m.category_counts();
        assert_eq!(counts[&Category::FireOnly], 2);
        assert_eq!(counts[&Category::SmokeOnly], 1);
        assert_eq!(counts[&Category::FireAndSmoke], 1);
        assert_eq!(counts[&Category::SimpleNegative], 1);
        assert_eq!(counts.values().sum::<usize>(), 5);
        // Order preserved from file.
        assert_eq!(m.samples()[0].id, "a");
        assert_eq!(m.samples()[4].id, "e");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let samples = vec![
            sample("x", false, true, Partition::Positive),
            sample("x", true, false, Partition::Positive),
        ];
        assert!(Manifest::from_samples(samples).is_err());
    }

    #[test]
    fn split_ten_gives_eight_two_per_category() {
        let m = five_way(10);
        let (train, val) = split_train_val(&m, &SplitSpec::default()).unwrap();
        let tc = train.category_counts();
        let vc = val.category_counts();
        for cat in Category::ALL {
            assert_eq!(tc[&cat], 8, "{cat}");
            assert_eq!(vc[&cat], 2, "{cat}");
        }
        assert_eq!(train.len() + val.len(), m.len());
    }

    #[test]
    fn single_sample_category_goes_to_validation() {
        let m = five_way(1);
        let (train, val) = split_train_val(&m, &SplitSpec::default()).unwrap();
        assert_eq!(train.len(), 0);
        assert_eq!(val.len(), 5);
    }

    #[test]
    fn same_seed_gives_identical_split() {
        let m = five_way(13);
        let spec = SplitSpec {
            train_fraction: 0.8,
            seed: 99,
        };
        let (t1, v1) = split_train_val(&m, &spec).unwrap();
        let (t2, v2) = split_train_val(&m, &spec).unwrap();
        let ids = |m: &Manifest| -> Vec<String> {
            m.samples().iter().map(|s| s.id.clone()).collect()
        };
        assert_eq!(ids(&t1), ids(&t2));
        assert_eq!(ids(&v1), ids(&v2));
        // Disjoint and exhaustive.
        let tset: HashSet<_> = ids(&t1).into_iter().collect();
        let vset: HashSet<_> = ids(&v1).into_iter().collect();
        assert!(tset.is_disjoint(&vset));
        assert_eq!(tset.len() + vset.len(), m.len());
    }

    #[test]
    fn missing_category_is_error_naming_it() {
        let samples = vec![
            sample("f", false, true, Partition::Positive),
            sample("s", true, false, Partition::Positive),
            sample("b", true, true, Partition::Positive),
            sample("n", false, false, Partition::SimpleNegative),
        ];
        let m = Manifest::from_samples(samples).unwrap();
        let err = split_train_val(&m, &SplitSpec::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("complex_negative"), "{err}");
    }

    #[test]
    fn manifest_round_trip_preserves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = five_way(2);
        let path = dir.path().join("sub").join("m.jsonl");
        save_manifest(&m, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.len(), m.len());
        assert!(loaded.samples()[0]
            .image_path
            .starts_with(dir.path().join("sub")));
    }
}
