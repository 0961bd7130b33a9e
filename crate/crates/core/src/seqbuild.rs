//! Construction of every token sequence the model sees.
//!
//! One place owns the assembly grammar: examples are rendered as
//! `input sep_io output` (or flipped for the channel direction), examples are
//! joined by `sep_ex`, the final segment carries the loss mask, per-example
//! truncation caps long inputs, and over-long concatenations drop their
//! earliest tokens while always preserving the supervised suffix.

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::tokenizer::{self, TokenId};

/// Which side of each example the model is trained/scored to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Predict the output given the input: P(y | x).
    Direct,
    /// Noisy-channel: flip the pair and predict the input: P(x | y).
    Channel,
}

/// Sequence assembly parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildConfig {
    /// Default number of conditioning examples callers sample.
    pub k: usize,
    pub direction: Direction,
    /// Separator between an example's input and output.
    pub sep_io: String,
    /// Separator between examples.
    pub sep_ex: String,
    pub max_seq_len: usize,
    /// Per-example cap on input tokens, applied before assembly.
    pub per_example_cap: usize,
    /// Prepend the task instruction (when present) to every input.
    pub include_instruction: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            k: 16,
            direction: Direction::Direct,
            sep_io: "\n".into(),
            sep_ex: "\n\n\n".into(),
            max_seq_len: 512,
            per_example_cap: 256,
            include_instruction: false,
        }
    }
}

impl BuildConfig {
    /// Space-separated preset (the convention raw GPT-2 prefers).
    pub fn space_separated() -> Self {
        Self {
            sep_io: " ".into(),
            sep_ex: "   ".into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sep_io.is_empty() || self.sep_ex.is_empty() {
            return Err(Error::InvalidConfig("separators must be non-empty".into()));
        }
        if self.per_example_cap == 0 {
            return Err(Error::InvalidConfig("per_example_cap must be >= 1".into()));
        }
        if self.per_example_cap > self.max_seq_len {
            return Err(Error::InvalidConfig(
                "per_example_cap must not exceed max_seq_len".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceMeta {
    pub task: String,
    pub direction: Direction,
    pub k_effective: usize,
}

/// Tokens plus the loss mask selecting the supervised suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub tokens: Vec<TokenId>,
    /// Same length as `tokens`; true exactly on the supervised segment.
    pub loss_mask: Vec<bool>,
    pub meta: SequenceMeta,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn masked_len(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Decode the masked positions; equals the supervised text exactly.
    pub fn supervised_text(&self) -> Result<String> {
        let toks: Vec<TokenId> = self
            .tokens
            .iter()
            .zip(&self.loss_mask)
            .filter_map(|(&t, &m)| m.then_some(t))
            .collect();
        tokenizer::decode(&toks)
    }
}

/// Cap an example's input at `cap` tokens.
///
/// Without `preserve_answer` the head window is kept. With it the window is
/// centered on the answer span (clipped to bounds) so the full output
/// substring survives; this is the meta-training rule for extractive QA.
/// The output text itself is never truncated. Window edges are shrunk to
/// char boundaries so the result stays valid text.
pub fn truncate_example(ex: &Example, cap: usize, preserve_answer: bool) -> Result<Example> {
    if cap == 0 {
        return Err(Error::InvalidConfig("truncation cap must be >= 1".into()));
    }
    let len = ex.input.len();
    if len <= cap {
        return Ok(ex.clone());
    }
    let (mut start, mut end) = if preserve_answer {
        let span_start = ex.input.find(&ex.output).ok_or_else(|| {
            Error::SequenceBuild(format!(
                "preserve_answer set but output is not a substring of input"
            ))
        })?;
        let span_len = ex.output.len();
        if span_len > cap {
            return Err(Error::SequenceBuild(format!(
                "answer span of {span_len} tokens does not fit in cap {cap}"
            )));
        }
        let center = span_start + span_len / 2;
        let start = center.saturating_sub(cap / 2).min(len - cap);
        (start, start + cap)
    } else {
        (0, cap)
    };
    while !ex.input.is_char_boundary(start) {
        start += 1;
    }
    while !ex.input.is_char_boundary(end) {
        end -= 1;
    }
    let input = ex.input[start..end].to_string();
    if input.trim().is_empty() {
        return Err(Error::SequenceBuild(
            "truncation left an empty input".into(),
        ));
    }
    Ok(Example {
        input,
        output: ex.output.clone(),
        answer_span_required: ex.answer_span_required,
    })
}

/// (text, is_supervised) segments in final order.
fn assemble(
    task: &str,
    segments: &[(String, bool)],
    direction: Direction,
    k_effective: usize,
    max_seq_len: usize,
) -> Result<EncodedSequence> {
    let mut tokens = Vec::new();
    let mut loss_mask = Vec::new();
    for (text, supervised) in segments {
        let toks = tokenizer::encode(text);
        loss_mask.extend(std::iter::repeat(*supervised).take(toks.len()));
        tokens.extend(toks);
    }
    let masked = loss_mask.iter().filter(|&&m| m).count();
    if masked == 0 {
        return Err(Error::SequenceBuild(format!(
            "task '{task}': supervised segment is empty"
        )));
    }
    if masked > max_seq_len {
        return Err(Error::SequenceBuild(format!(
            "task '{task}': supervised segment of {masked} tokens exceeds max_seq_len {max_seq_len}"
        )));
    }
    // Drop earliest tokens so the model sees the recent ones; the supervised
    // suffix is never dropped.
    if tokens.len() > max_seq_len {
        let cut = tokens.len() - max_seq_len;
        tokens.drain(..cut);
        loss_mask.drain(..cut);
    }
    Ok(EncodedSequence {
        tokens,
        loss_mask,
        meta: SequenceMeta {
            task: task.to_string(),
            direction,
            k_effective,
        },
    })
}

fn effective_input(ex_input: &str, instruction: Option<&str>, cfg: &BuildConfig) -> String {
    match instruction {
        Some(instr) if cfg.include_instruction => {
            format!("{instr}{}{ex_input}", cfg.sep_io)
        }
        _ => ex_input.to_string(),
    }
}

/// Render one example as two segments in direction order.
fn pair_segments(
    ex: &Example,
    instruction: Option<&str>,
    cfg: &BuildConfig,
    supervised: bool,
) -> [(String, bool); 3] {
    let input = effective_input(&ex.input, instruction, cfg);
    let output = ex.output.clone();
    match cfg.direction {
        // Only the second element of the final pair is ever supervised.
        Direction::Direct => [
            (input, false),
            (cfg.sep_io.clone(), false),
            (output, supervised),
        ],
        Direction::Channel => [
            (output, false),
            (cfg.sep_io.clone(), false),
            (input, supervised),
        ],
    }
}

/// Build a meta-training sequence from `k+1` examples of one task.
///
/// The first `k` examples are the in-context demonstration; the final
/// example's output (direct) or input (channel) carries the loss mask.
pub fn build_train_sequence(
    task: &str,
    shots: &[Example],
    instruction: Option<&str>,
    cfg: &BuildConfig,
) -> Result<EncodedSequence> {
    cfg.validate()?;
    if shots.is_empty() {
        return Err(Error::SequenceBuild(format!(
            "task '{task}': cannot build a training sequence from zero examples"
        )));
    }
    let k_effective = shots.len() - 1;
    let mut segments = Vec::with_capacity(shots.len() * 4);
    for (i, ex) in shots.iter().enumerate() {
        let capped = truncate_example(ex, cfg.per_example_cap, ex.answer_span_required)?;
        if i > 0 {
            segments.push((cfg.sep_ex.clone(), false));
        }
        segments.extend(pair_segments(&capped, instruction, cfg, i == shots.len() - 1));
    }
    assemble(task, &segments, cfg.direction, k_effective, cfg.max_seq_len)
}

/// Build an inference sequence scoring `candidate` for `test_input` after
/// `k` demonstration examples.
///
/// Direct: `x_1 y_1 ... x_k y_k test candidate` with the mask on the
/// candidate. Channel: flipped pairs then `candidate test` with the mask on
/// the test input. Demonstration inputs are capped like training examples
/// (without the answer-preserving rule); the test input is never truncated
/// on its own, only by whole-sequence suffix truncation.
pub fn build_score_sequence(
    task: &str,
    shots: &[Example],
    test_input: &str,
    candidate: &str,
    instruction: Option<&str>,
    cfg: &BuildConfig,
) -> Result<EncodedSequence> {
    cfg.validate()?;
    if candidate.is_empty() {
        return Err(Error::SequenceBuild(format!(
            "task '{task}': empty candidate"
        )));
    }
    let mut segments = Vec::with_capacity(shots.len() * 4 + 3);
    for ex in shots {
        let capped = truncate_example(ex, cfg.per_example_cap, false)?;
        segments.extend(pair_segments(&capped, instruction, cfg, false));
        segments.push((cfg.sep_ex.clone(), false));
    }
    let test = effective_input(test_input, instruction, cfg);
    match cfg.direction {
        Direction::Direct => {
            segments.push((test, false));
            segments.push((cfg.sep_io.clone(), false));
            segments.push((candidate.to_string(), true));
        }
        Direction::Channel => {
            segments.push((candidate.to_string(), false));
            segments.push((cfg.sep_io.clone(), false));
            segments.push((test, true));
        }
    }
    assemble(task, &segments, cfg.direction, shots.len(), cfg.max_seq_len)
}

/// Swap input and output of every example (the channel transformation).
pub fn flip_examples(examples: &[Example]) -> Vec<Example> {
    examples
        .iter()
        .map(|ex| Example {
            input: ex.output.clone(),
            output: ex.input.clone(),
            answer_span_required: false,
        })
        .collect()
}
