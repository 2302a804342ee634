use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_graph, serialize_sample, TaskSpec, Vocabulary};
use crate::error::{Error, IoContext, Result};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FORMAT: u32 = 1;

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub prefix: Vec<usize>,
    pub answer: Vec<usize>,
    pub d: usize,
    pub l: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub sample_index: u64,
}

impl SampleRecord {
    pub fn task(&self) -> TaskSpec {
        TaskSpec { degree: self.d, path_len: self.l, n_values: self.n }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: u32,
    pub task: TaskSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Test draws discarded because their prefix was already present.
    pub duplicates_skipped: usize,
    /// Digest of the task, counts and seed.
    pub dataset_hash: String,
}

impl DatasetManifest {
    pub fn compute_hash(task: &TaskSpec, n_train: usize, n_test: usize, seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "pathstar-v{DATASET_FORMAT}:{}:{}:{}:{n_train}:{n_test}:{seed}",
            task.degree, task.path_len, task.n_values
        ));
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// RNG for one sample: the run seed picks the key, split and index pick the
/// stream, so samples are reproducible regardless of generation order.
pub fn sample_rng(seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    rng.set_stream((tag << 48) | index);
    rng
}

pub fn make_record(task: TaskSpec, seed: u64, split: Split, index: u64) -> Result<SampleRecord> {
    let vocab = Vocabulary::new(task.n_values, 0);
    let mut rng = sample_rng(seed, split, index);
    let graph = generate_graph(task, &mut rng)?;
    let s = serialize_sample(&graph, &mut rng, &vocab);
    Ok(SampleRecord {
        prefix: s.prefix,
        answer: s.answer,
        d: task.degree,
        l: task.path_len,
        n: task.n_values,
        seed,
        sample_index: index,
    })
}

/// In-memory train and test splits with prefix-level deduplication across
/// them (and within the test split).
pub fn build_dataset(task: TaskSpec, n_train: usize, n_test: usize, seed: u64) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>, DatasetManifest)> {
    task.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("n_train and n_test must be positive".into()));
    }
    let train: Vec<SampleRecord> = (0..n_train as u64)
        .into_par_iter()
        .map(|i| make_record(task, seed, Split::Train, i))
        .collect::<Result<_>>()?;
    let mut seen: HashSet<Vec<usize>> = train.iter().map(|r| r.prefix.clone()).collect();
    let mut test = Vec::with_capacity(n_test);
    let mut next = 0u64;
    let mut skipped = 0;
    // Bail out rather than loop forever on a tiny graph space.
    let budget = (n_test as u64 + 1000) * 100;
    while test.len() < n_test {
        if next >= budget {
            return Err(Error::Config(format!("could not draw {n_test} unseen test prefixes")));
        }
        let r = make_record(task, seed, Split::Test, next)?;
        next += 1;
        if seen.insert(r.prefix.clone()) {
            test.push(r);
        } else {
            skipped += 1;
        }
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT,
        task,
        n_train,
        n_test,
        seed,
        duplicates_skipped: skipped,
        dataset_hash: DatasetManifest::compute_hash(&task, n_train, n_test, seed),
    };
    Ok((train, test, manifest))
}

pub fn write_records(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = fs::File::create(path).io_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").io_context(|| format!("writing {}", path.display()))?;
    }
    w.flush().io_context(|| format!("writing {}", path.display()))
}

pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = fs::File::open(path).io_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.io_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.prefix.is_empty() || rec.answer.is_empty() {
            return Err(Error::Parse { path: path.to_path_buf(), line: i + 1, msg: "empty prefix or answer".into() });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Paths of the files making up a dataset directory.
#[derive(Clone, Debug)]
pub struct DatasetFiles {
    pub dir: PathBuf,
}

impl DatasetFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn train(&self) -> PathBuf {
        self.dir.join(TRAIN_FILE)
    }
    pub fn test(&self) -> PathBuf {
        self.dir.join(TEST_FILE)
    }
    pub fn vocab(&self) -> PathBuf {
        self.dir.join(VOCAB_FILE)
    }
    pub fn manifest(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    pub fn read_manifest(&self) -> Result<DatasetManifest> {
        let p = self.manifest();
        let text = fs::read_to_string(&p).io_context(|| format!("reading {}", p.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Generates and writes a dataset. The configuration is validated before
/// anything touches the filesystem.
pub fn write_dataset(dir: &Path, task: TaskSpec, n_train: usize, n_test: usize, seed: u64) -> Result<DatasetManifest> {
    let (train, test, manifest) = build_dataset(task, n_train, n_test, seed)?;
    fs::create_dir_all(dir).io_context(|| format!("creating {}", dir.display()))?;
    let files = DatasetFiles::new(dir);
    write_records(&files.train(), &train)?;
    write_records(&files.test(), &test)?;
    let vocab = Vocabulary::new(task.n_values, 0);
    let vocab_text = serde_json::to_string_pretty(&vocab.to_json())?;
    fs::write(files.vocab(), vocab_text + "\n").io_context(|| "writing vocabulary".into())?;
    let manifest_text = serde_json::to_string_pretty(&manifest)?;
    fs::write(files.manifest(), manifest_text + "\n").io_context(|| "writing manifest".into())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_share_no_prefix() {
        let task = TaskSpec::new(2, 3, None).unwrap();
        let (train, test, m) = build_dataset(task, 3000, 50, 4).unwrap();
        let train_set: HashSet<_> = train.iter().map(|r| &r.prefix).collect();
        assert!(test.iter().all(|r| !train_set.contains(&r.prefix)));
        assert_eq!(test.len(), 50);
        // G(2,3) with N = 6 has a small graph space, so collisions do happen.
        assert!(m.duplicates_skipped > 0);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let task = TaskSpec::new(2, 3, None).unwrap();
        let good = serde_json::to_string(&make_record(task, 1, Split::Train, 0).unwrap()).unwrap();
        fs::write(&p, format!("{good}\n{{not json}}\n")).unwrap();
        match read_records(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn zero_sized_split_is_rejected() {
        let task = TaskSpec::new(2, 3, None).unwrap();
        assert!(build_dataset(task, 0, 5, 1).is_err());
    }
}
