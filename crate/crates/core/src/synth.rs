//! Deterministic synthetic task families.
//!
//! Three families separate the skills needed for in-context learning:
//!
//! * `mapping` — each task fixes a fresh bijection from input symbols to a
//!   shared set of label words. The bijection is only inferable from the
//!   in-context examples, so any context-free classifier sits at chance.
//! * `extract` — the answer is the word at a task-specific position of the
//!   input (positional induction).
//! * `majority` — the answer is the most frequent option word in the input
//!   (counting); generation rejects draws with tied counts.
//!
//! Generation is a pure function of the spec: the same spec yields
//! byte-identical JSONL.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Task, TaskFormat};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mapping,
    Extract,
    Majority,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Mapping => "mapping",
            Family::Extract => "extract",
            Family::Majority => "majority",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mapping" => Ok(Family::Mapping),
            "extract" => Ok(Family::Extract),
            "majority" => Ok(Family::Majority),
            other => Err(Error::InvalidConfig(format!("unknown family '{other}'"))),
        }
    }
}

/// Parameters of one family generation run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub family: Family,
    /// Number of distinct input symbols `s0..s{m-1}` (mapping family).
    pub vocab_symbols: usize,
    /// Size of the shared candidate set.
    pub num_options: usize,
    /// Words per input.
    pub input_len: usize,
    pub num_tasks: usize,
    pub examples_per_task: usize,
    pub seed: u64,
    /// Fixed extract position for every task; `None` samples one per task.
    pub position: Option<usize>,
}

impl FamilySpec {
    pub fn new(family: Family, seed: u64) -> Self {
        let input_len = match family {
            Family::Mapping => 1,
            Family::Extract => 4,
            Family::Majority => 5,
        };
        Self {
            family,
            vocab_symbols: 4,
            num_options: 4,
            input_len,
            num_tasks: 8,
            examples_per_task: 64,
            seed,
            position: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_options < 2 {
            return Err(Error::InvalidConfig("num_options must be >= 2".into()));
        }
        if self.num_options > 26 {
            return Err(Error::InvalidConfig(
                "num_options above 26 exceeds the single-letter label alphabet".into(),
            ));
        }
        if self.input_len < 1 {
            return Err(Error::InvalidConfig("input_len must be >= 1".into()));
        }
        if self.num_tasks == 0 || self.examples_per_task == 0 {
            return Err(Error::InvalidConfig(
                "num_tasks and examples_per_task must be positive".into(),
            ));
        }
        match self.family {
            Family::Mapping => {
                if self.vocab_symbols != self.num_options {
                    return Err(Error::InvalidConfig(format!(
                        "mapping family needs vocab_symbols == num_options for a bijection \
                         (got {} vs {})",
                        self.vocab_symbols, self.num_options
                    )));
                }
            }
            Family::Extract => {
                if let Some(p) = self.position {
                    if p >= self.input_len {
                        return Err(Error::InvalidConfig(format!(
                            "extract position {p} out of range for input_len {}",
                            self.input_len
                        )));
                    }
                }
            }
            Family::Majority => {
                if self.num_options == 2 && self.input_len % 2 == 0 {
                    return Err(Error::InvalidConfig(
                        "majority with two options needs an odd input_len".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Shared label alphabet: "A", "B", ...
pub fn option_words(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| char::from(b'A' + i as u8).to_string())
        .collect()
}

fn symbol(i: usize) -> String {
    format!("s{i}")
}

/// Generate all tasks of a family. Pure function of the spec.
pub fn generate_family(spec: &FamilySpec) -> Result<Vec<Task>> {
    spec.validate()?;
    let options = option_words(spec.num_options);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ fam_tag(spec.family));
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let name = format!("{}_{:03}", spec.family.name(), t);
        let examples = match spec.family {
            Family::Mapping => gen_mapping_task(spec, &options, &mut rng),
            Family::Extract => gen_extract_task(spec, &options, &mut rng),
            Family::Majority => gen_majority_task(spec, &options, &mut rng),
        };
        let task = Task {
            name,
            examples,
            options: options.clone(),
            format: TaskFormat::Multichoice,
            instruction: None,
        };
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}

fn fam_tag(family: Family) -> u64 {
    match family {
        Family::Mapping => 0x6d61_7070,
        Family::Extract => 0x6578_7472,
        Family::Majority => 0x6d61_6a6f,
    }
}

fn gen_mapping_task(spec: &FamilySpec, options: &[String], rng: &mut ChaCha8Rng) -> Vec<Example> {
    // Fresh bijection symbol -> label for this task.
    let mut perm: Vec<usize> = (0..spec.num_options).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    (0..spec.examples_per_task)
        .map(|_| {
            let query = rng.gen_range(0..spec.vocab_symbols);
            let mut words: Vec<String> = (0..spec.input_len.saturating_sub(1))
                .map(|_| symbol(rng.gen_range(0..spec.vocab_symbols)))
                .collect();
            words.push(format!("q: {}", symbol(query)));
            Example::new(words.join(" "), options[perm[query]].clone())
        })
        .collect()
}

fn gen_extract_task(spec: &FamilySpec, options: &[String], rng: &mut ChaCha8Rng) -> Vec<Example> {
    let position = match spec.position {
        Some(p) => p,
        None => rng.gen_range(0..spec.input_len),
    };
    (0..spec.examples_per_task)
        .map(|_| {
            let words: Vec<&str> = (0..spec.input_len)
                .map(|_| options[rng.gen_range(0..spec.num_options)].as_str())
                .collect();
            Example::new(words.join(" "), words[position].to_string())
        })
        .collect()
}

fn gen_majority_task(spec: &FamilySpec, options: &[String], rng: &mut ChaCha8Rng) -> Vec<Example> {
    (0..spec.examples_per_task)
        .map(|_| {
            // Resample until the max count is unique; ties are impossible in
            // the emitted data.
            loop {
                let picks: Vec<usize> = (0..spec.input_len)
                    .map(|_| rng.gen_range(0..spec.num_options))
                    .collect();
                let mut counts = vec![0usize; spec.num_options];
                for &p in &picks {
                    counts[p] += 1;
                }
                let best = *counts.iter().max().unwrap();
                if counts.iter().filter(|&&c| c == best).count() == 1 {
                    let winner = counts.iter().position(|&c| c == best).unwrap();
                    let words: Vec<&str> = picks.iter().map(|&p| options[p].as_str()).collect();
                    return Example::new(words.join(" "), options[winner].clone());
                }
            }
        })
        .collect()
}

/// Expected accuracy of the best context-free strategy on a family.
///
/// For `mapping` the bijections are uniform, so any fixed classifier scores
/// `1/num_options`. For `extract` and `majority` the generators are symmetric
/// across options, so always predicting the globally most frequent option
/// also scores `1/num_options`.
pub fn family_chance_accuracy(spec: &FamilySpec) -> f64 {
    1.0 / spec.num_options as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_to_jsonl, Corpus};
    use std::collections::BTreeMap;

    #[test]
    fn mapping_examples_follow_one_bijection() {
        let spec = FamilySpec::new(Family::Mapping, 11);
        let tasks = generate_family(&spec).unwrap();
        assert_eq!(tasks.len(), spec.num_tasks);
        for task in &tasks {
            let mut map: BTreeMap<String, String> = BTreeMap::new();
            for ex in &task.examples {
                let query = ex.input.rsplit("q: ").next().unwrap().to_string();
                let prev = map.entry(query).or_insert_with(|| ex.output.clone());
                assert_eq!(prev, &ex.output, "bijection inconsistent in {}", task.name);
            }
            // Distinct symbols get distinct labels.
            let labels: std::collections::HashSet<_> = map.values().collect();
            assert_eq!(labels.len(), map.len());
        }
    }

    #[test]
    fn extract_output_is_word_at_fixed_position() {
        let spec = FamilySpec {
            position: Some(2),
            ..FamilySpec::new(Family::Extract, 3)
        };
        for task in generate_family(&spec).unwrap() {
            for ex in &task.examples {
                let words: Vec<&str> = ex.input.split(' ').collect();
                assert_eq!(words[2], ex.output);
            }
        }
    }

    #[test]
    fn extract_position_out_of_range_rejected() {
        let spec = FamilySpec {
            input_len: 1,
            position: Some(3),
            ..FamilySpec::new(Family::Extract, 3)
        };
        assert!(generate_family(&spec).is_err());
    }

    #[test]
    fn majority_output_recounts_and_never_ties() {
        let spec = FamilySpec::new(Family::Majority, 9);
        for task in generate_family(&spec).unwrap() {
            for ex in &task.examples {
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for w in ex.input.split(' ') {
                    *counts.entry(w).or_default() += 1;
                }
                let best = counts.values().copied().max().unwrap();
                assert_eq!(counts.values().filter(|&&c| c == best).count(), 1);
                assert_eq!(counts[ex.output.as_str()], best);
            }
        }
    }

    #[test]
    fn chance_accuracy_values() {
        let mapping = FamilySpec::new(Family::Mapping, 0);
        assert_eq!(family_chance_accuracy(&mapping), 0.25);

        let majority2 = FamilySpec {
            num_options: 2,
            vocab_symbols: 2,
            ..FamilySpec::new(Family::Majority, 0)
        };
        assert_eq!(family_chance_accuracy(&majority2), 0.5);
    }

    #[test]
    fn extract_base_rate_matches_generator_distribution() {
        // Enumerate the generated corpus: the option marginal at the task
        // position is uniform, so the best fixed guess scores 1/|C|.
        let spec = FamilySpec {
            num_tasks: 32,
            examples_per_task: 256,
            ..FamilySpec::new(Family::Extract, 17)
        };
        let tasks = generate_family(&spec).unwrap();
        let mut counts = BTreeMap::new();
        let mut total = 0usize;
        for task in &tasks {
            for ex in &task.examples {
                *counts.entry(ex.output.clone()).or_insert(0usize) += 1;
                total += 1;
            }
        }
        let best = counts.values().copied().max().unwrap() as f64 / total as f64;
        assert!(
            (best - family_chance_accuracy(&spec)).abs() < 0.03,
            "best fixed-guess rate {best}"
        );
    }

    #[test]
    fn mapping_label_marginal_is_uniform_over_tasks() {
        let spec = FamilySpec {
            num_tasks: 256,
            examples_per_task: 16,
            ..FamilySpec::new(Family::Mapping, 23)
        };
        let tasks = generate_family(&spec).unwrap();
        // For each symbol, the label assigned by the bijection is uniform
        // across tasks; this grounds the k=0 chance baseline.
        let mut per_symbol: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for task in &tasks {
            for ex in &task.examples {
                let sym = ex.input.rsplit("q: ").next().unwrap().to_string();
                *per_symbol
                    .entry(sym)
                    .or_default()
                    .entry(ex.output.clone())
                    .or_default() += 1;
            }
        }
        for (sym, labels) in &per_symbol {
            let total: usize = labels.values().sum();
            for (label, &c) in labels {
                let freq = c as f64 / total as f64;
                assert!(
                    (freq - 0.25).abs() < 0.08,
                    "symbol {sym} label {label}: marginal {freq}"
                );
            }
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let spec = FamilySpec::new(Family::Mapping, 77);
        let a = Corpus::from_tasks(generate_family(&spec).unwrap()).unwrap();
        let b = Corpus::from_tasks(generate_family(&spec).unwrap()).unwrap();
        assert_eq!(corpus_to_jsonl(&a).unwrap(), corpus_to_jsonl(&b).unwrap());
    }
}
