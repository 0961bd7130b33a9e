//! Task and example data model, JSONL ingestion, split handling, few-shot
//! sampling and label-word replacement.
//!
//! A corpus is a set of named tasks, each an ordered list of input/output
//! examples with an optional candidate option list. The on-disk form is JSONL
//! with one example per line:
//!
//! ```text
//! {"task": "t", "input": "...", "output": "...", "options": ["A","B"]?,
//!  "instruction": "..."?, "answer_span_required": true?, "format": "..."?}
//! ```
//!
//! Split files are JSON:
//!
//! ```text
//! {"meta_train": ["a", ...], "target": ["b", ...],
//!  "max_train_examples_per_task": 16384, "unseen_domain": ["b"]?}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Few-shot sampling seeds used by the evaluation protocol. The same seeds
/// are shared across all methods so comparisons are paired.
pub const PROTOCOL_SEEDS: [u64; 5] = [100, 13, 21, 42, 87];

/// One labeled example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: String,
    pub output: String,
    /// True only for extractive-QA-style meta-training examples whose output
    /// must appear verbatim in the input (truncation preserves the span).
    #[serde(default, skip_serializing_if = "is_false")]
    pub answer_span_required: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl Example {
    pub fn new(input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            output: output.into(),
            answer_span_required: false,
        }
    }
}

/// How a task is scored and whether it may appear on the target side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFormat {
    /// Fixed label set; scored with macro-F1.
    Classification,
    /// Candidate options; scored with accuracy.
    Multichoice,
    /// No option list; meta-training only.
    Freeform,
}

/// A named set of examples with an optional candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub name: String,
    pub examples: Vec<Example>,
    /// Candidate set; empty for freeform tasks.
    pub options: Vec<String>,
    pub format: TaskFormat,
    pub instruction: Option<String>,
}

impl Task {
    /// Check all task invariants.
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Error::InvalidTask {
            task: self.name.clone(),
            msg,
        };
        if self.name.is_empty() {
            return Err(err("task name is empty".into()));
        }
        match self.format {
            TaskFormat::Classification | TaskFormat::Multichoice => {
                if self.options.is_empty() {
                    return Err(err("options required for this format".into()));
                }
            }
            TaskFormat::Freeform => {
                if !self.options.is_empty() {
                    return Err(err("freeform task must not carry options".into()));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for opt in &self.options {
            if opt.is_empty() {
                return Err(err("empty option".into()));
            }
            if !seen.insert(opt.as_str()) {
                return Err(err(format!("duplicate option '{opt}'")));
            }
        }
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.input.trim().is_empty() {
                return Err(err(format!("example {i}: empty input")));
            }
            if ex.output.is_empty() {
                return Err(err(format!("example {i}: empty output")));
            }
            if !self.options.is_empty() && !self.options.contains(&ex.output) {
                return Err(err(format!(
                    "example {i}: output '{}' not in options",
                    ex.output
                )));
            }
            if ex.answer_span_required && !ex.input.contains(&ex.output) {
                return Err(err(format!(
                    "example {i}: answer_span_required but output is not a substring of input"
                )));
            }
        }
        Ok(())
    }
}

/// Immutable map of task name to task. Iteration order is name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub tasks: BTreeMap<String, Task>,
}

impl Corpus {
    pub fn from_tasks(tasks: impl IntoIterator<Item = Task>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for task in tasks {
            task.validate()?;
            if map.insert(task.name.clone(), task.clone()).is_some() {
                return Err(Error::InvalidTask {
                    task: task.name,
                    msg: "duplicate task name".into(),
                });
            }
        }
        Ok(Self { tasks: map })
    }

    pub fn get(&self, name: &str) -> Result<&Task> {
        self.tasks.get(name).ok_or_else(|| Error::InvalidTask {
            task: name.to_string(),
            msg: "task not found in corpus".into(),
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// On-disk JSONL record; one per example.
#[derive(Debug, Serialize, Deserialize)]
struct LineRecord {
    task: String,
    input: String,
    output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instruction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer_span_required: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    format: Option<TaskFormat>,
}

/// Load a corpus from one JSONL file or a directory of `*.jsonl` files.
///
/// Lines of the same task may be interleaved; example order within a task is
/// file order. Option lists and instructions must be consistent across all
/// lines of a task.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in fs::read_dir(path)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "jsonl") {
                files.push(p);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "no .jsonl files in directory {}",
                path.display()
            )));
        }
    } else {
        files.push(path.to_path_buf());
    }

    // Name -> (task under construction, first line it appeared on).
    let mut building: BTreeMap<String, (Task, String, usize)> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();

    for file in &files {
        let text = fs::read_to_string(file)?;
        let fname = file.display().to_string();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LineRecord =
                serde_json::from_str(line).map_err(|e| Error::CorpusFormat {
                    path: fname.clone(),
                    line: line_no,
                    msg: format!("malformed JSON: {e}"),
                })?;
            let fmt_err = |msg: String| Error::CorpusFormat {
                path: fname.clone(),
                line: line_no,
                msg,
            };
            if rec.input.trim().is_empty() {
                return Err(fmt_err(format!("task '{}': empty input", rec.task)));
            }
            if rec.output.is_empty() {
                return Err(fmt_err(format!("task '{}': empty output", rec.task)));
            }
            let options = rec.options.clone().unwrap_or_default();
            let format = rec.format.unwrap_or(if options.is_empty() {
                TaskFormat::Freeform
            } else {
                TaskFormat::Classification
            });
            let example = Example {
                input: rec.input,
                output: rec.output,
                answer_span_required: rec.answer_span_required.unwrap_or(false),
            };
            if example.answer_span_required && !example.input.contains(&example.output) {
                return Err(fmt_err(format!(
                    "task '{}': answer_span_required but output is not a substring of input",
                    rec.task
                )));
            }
            if !options.is_empty() && !options.contains(&example.output) {
                return Err(fmt_err(format!(
                    "task '{}': output '{}' not in options",
                    rec.task, example.output
                )));
            }
            match building.get_mut(&rec.task) {
                None => {
                    order.push(rec.task.clone());
                    building.insert(
                        rec.task.clone(),
                        (
                            Task {
                                name: rec.task,
                                examples: vec![example],
                                options,
                                format,
                                instruction: rec.instruction,
                            },
                            fname.clone(),
                            line_no,
                        ),
                    );
                }
                Some((task, _, _)) => {
                    if task.options != options {
                        return Err(fmt_err(format!(
                            "task '{}': options inconsistent with earlier lines",
                            rec.task
                        )));
                    }
                    if task.format != format {
                        return Err(fmt_err(format!(
                            "task '{}': format inconsistent with earlier lines",
                            rec.task
                        )));
                    }
                    if task.instruction != rec.instruction {
                        return Err(fmt_err(format!(
                            "task '{}': instruction inconsistent with earlier lines",
                            rec.task
                        )));
                    }
                    task.examples.push(example);
                }
            }
        }
    }

    let mut corpus = Corpus::default();
    for name in order {
        let (task, _, _) = building.remove(&name).unwrap();
        task.validate()?;
        corpus.tasks.insert(name, task);
    }
    Ok(corpus)
}

/// Serialize a corpus to JSONL text, tasks in name order, examples in order.
pub fn corpus_to_jsonl(corpus: &Corpus) -> Result<String> {
    let mut out = String::new();
    for task in corpus.tasks.values() {
        for ex in &task.examples {
            let rec = LineRecord {
                task: task.name.clone(),
                input: ex.input.clone(),
                output: ex.output.clone(),
                options: if task.options.is_empty() {
                    None
                } else {
                    Some(task.options.clone())
                },
                instruction: task.instruction.clone(),
                answer_span_required: if ex.answer_span_required {
                    Some(true)
                } else {
                    None
                },
                format: Some(task.format),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Write a corpus as JSONL via a temp file and atomic rename.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    atomic_write(path, corpus_to_jsonl(corpus)?.as_bytes())
}

/// Write bytes to `path` through a temporary sibling and rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Meta-training / target task split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub meta_train: Vec<String>,
    pub target: Vec<String>,
    pub max_train_examples_per_task: usize,
    /// Target tasks with no domain overlap with any meta-training task.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unseen_domain: Vec<String>,
}

impl Split {
    /// Check split invariants against a corpus.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        let train: BTreeSet<_> = self.meta_train.iter().collect();
        let target: BTreeSet<_> = self.target.iter().collect();
        if train.len() != self.meta_train.len() || target.len() != self.target.len() {
            return Err(Error::InvalidConfig(
                "split lists contain duplicate task names".into(),
            ));
        }
        if let Some(name) = train.intersection(&target).next() {
            return Err(Error::InvalidConfig(format!(
                "task '{name}' appears in both meta_train and target"
            )));
        }
        for name in self.meta_train.iter().chain(&self.target) {
            corpus.get(name)?;
        }
        for name in &self.target {
            if corpus.get(name)?.format == TaskFormat::Freeform {
                return Err(Error::InvalidTask {
                    task: name.clone(),
                    msg: "freeform tasks may only appear on the meta-training side".into(),
                });
            }
        }
        for name in &self.unseen_domain {
            if !target.contains(name) {
                return Err(Error::InvalidConfig(format!(
                    "unseen_domain task '{name}' is not a target task"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        atomic_write(path, text.as_bytes())
    }
}

/// k examples drawn without replacement from one task.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSet {
    pub task: String,
    pub seed: u64,
    /// Positions of the shots within the task's example list.
    pub indices: Vec<usize>,
    pub shots: Vec<Example>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG keyed by (task name, seed, k) so sampling is a pure function of them.
fn shot_rng(task_name: &str, seed: u64, k: usize) -> ChaCha8Rng {
    let mut key = Vec::with_capacity(task_name.len() + 17);
    key.extend_from_slice(task_name.as_bytes());
    key.push(0xff);
    key.extend_from_slice(&seed.to_le_bytes());
    key.extend_from_slice(&(k as u64).to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(&key))
}

/// Sample `k` examples uniformly without replacement.
///
/// Deterministic in `(task.name, seed, k)`. There is no per-label quota:
/// label balance in the sample is whatever uniform sampling produces.
pub fn sample_few_shot(task: &Task, k: usize, seed: u64) -> Result<FewShotSet> {
    if k > task.examples.len() {
        return Err(Error::InvalidTask {
            task: task.name.clone(),
            msg: format!(
                "cannot sample k={k} shots from {} examples",
                task.examples.len()
            ),
        });
    }
    let mut rng = shot_rng(&task.name, seed, k);
    let indices = sample_without_replacement(&mut rng, task.examples.len(), k);
    let shots = indices.iter().map(|&i| task.examples[i].clone()).collect();
    Ok(FewShotSet {
        task: task.name.clone(),
        seed,
        indices,
        shots,
    })
}

/// Partial Fisher-Yates: first `k` entries of a shuffle of `0..n`.
pub(crate) fn sample_without_replacement(
    rng: &mut impl Rng,
    n: usize,
    k: usize,
) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Replace a task's option words with distinct random words from `word_list`.
///
/// The option-to-word bijection is deterministic in `seed`; every example
/// output equal to an option is rewritten through the same map.
pub fn replace_labels(task: &Task, seed: u64, word_list: &[String]) -> Result<Task> {
    if task.options.is_empty() {
        return Err(Error::InvalidTask {
            task: task.name.clone(),
            msg: "replace_labels requires a task with options".into(),
        });
    }
    if word_list.len() < task.options.len() {
        return Err(Error::InvalidConfig(format!(
            "word list has {} entries but task '{}' has {} options",
            word_list.len(),
            task.name,
            task.options.len()
        )));
    }
    let mut key = Vec::with_capacity(task.name.len() + 9);
    key.extend_from_slice(task.name.as_bytes());
    key.push(0xfe);
    key.extend_from_slice(&seed.to_le_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&key));
    let picks = sample_without_replacement(&mut rng, word_list.len(), task.options.len());

    let map: BTreeMap<&str, &str> = task
        .options
        .iter()
        .zip(picks.iter())
        .map(|(opt, &w)| (opt.as_str(), word_list[w].as_str()))
        .collect();
    let mut out = task.clone();
    out.options = task.options.iter().map(|o| map[o.as_str()].to_string()).collect();
    for ex in &mut out.examples {
        if let Some(&new) = map.get(ex.output.as_str()) {
            ex.output = new.to_string();
        }
    }
    out.validate()?;
    Ok(out)
}

/// Bundled list of 2,048 distinct lowercase pseudo-words used as
/// semantics-free replacement labels.
pub fn replacement_word_list() -> Vec<String> {
    // Deterministic CV-syllable construction; no external word list needed.
    const CONSONANTS: [char; 16] = [
        'b', 'd', 'f', 'g', 'h', 'j', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
    ];
    const VOWELS: [char; 4] = ['a', 'e', 'o', 'u'];
    let mut words = Vec::with_capacity(2048);
    // 16 * 4 * 16 * 2 = 2048 distinct three- or four-letter words.
    for &c1 in &CONSONANTS {
        for &v1 in &VOWELS {
            for &c2 in &CONSONANTS {
                words.push(format!("{c1}{v1}{c2}"));
                words.push(format!("{c1}{v1}{c2}{v1}"));
            }
        }
    }
    debug_assert_eq!(words.len(), 2048);
    words
}
