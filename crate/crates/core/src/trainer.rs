//! Parameter-updating regimes: episodic few-shot meta-training, multi-task
//! zero-shot training, and per-target fine-tuning.
//!
//! Every regime runs the same loop: per batch slot, sample a task uniformly,
//! sample `k+1` of its examples without replacement, assemble the training
//! sequence, then take one Adam step on the mean masked NLL. The zero-shot
//! regime is literally this loop with `k = 0`, so given equal seeds the two
//! regimes produce identical parameter trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    replace_labels, replacement_word_list, sample_without_replacement, Corpus, FewShotSet, Split,
    Task,
};
use crate::error::{Error, Result};
use crate::model::{Gradients, ModelParams};
use crate::scalar::Scalar;
use crate::seqbuild::{build_train_sequence, BuildConfig, Direction, EncodedSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Episodic k-shot meta-training: supervise the final example of a
    /// sampled (k+1)-example episode.
    FewShot,
    /// Multi-task training on single examples (k forced to 0).
    ZeroShot,
    /// Supervised training on the few-shot examples of one target task.
    Finetune,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::FewShot => "fewshot",
            Regime::ZeroShot => "zeroshot",
            Regime::Finetune => "finetune",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fewshot" => Ok(Regime::FewShot),
            "zeroshot" => Ok(Regime::ZeroShot),
            "finetune" => Ok(Regime::Finetune),
            other => Err(Error::InvalidConfig(format!("unknown regime '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub direction: Direction,
    pub k: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_steps: u64,
    /// Linear warmup steps; the rate is constant afterwards.
    pub warmup_steps: u64,
    pub seed: u64,
    pub adam: AdamHyper,
    pub build: BuildConfig,
    /// Map each sampled task's label words to fresh random words, with an
    /// independent mapping per sampled sequence.
    pub replace_labels_each_iteration: bool,
}

impl TrainConfig {
    /// Desk-scale few-shot meta-training defaults. The model trains from
    /// scratch, so the rate is 3e-4 rather than the 1e-5 used when
    /// fine-tuning a large pretrained LM; step budget is 5,000 rather than
    /// 30,000 for the same reason.
    pub fn desk_fewshot() -> Self {
        Self {
            regime: Regime::FewShot,
            direction: Direction::Direct,
            k: 16,
            batch_size: 8,
            learning_rate: 3e-4,
            total_steps: 5_000,
            warmup_steps: 100,
            seed: 0,
            adam: AdamHyper::default(),
            build: BuildConfig::default(),
            replace_labels_each_iteration: false,
        }
    }

    /// Zero-shot multi-task defaults; single-example sequences use the short
    /// sequence length.
    pub fn desk_zeroshot() -> Self {
        Self {
            regime: Regime::ZeroShot,
            k: 0,
            build: BuildConfig {
                max_seq_len: 256,
                ..BuildConfig::default()
            },
            ..Self::desk_fewshot()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.build.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Shots per episode: the zeroshot regime ignores `k`.
    pub fn effective_k(&self) -> usize {
        match self.regime {
            Regime::FewShot => self.k,
            Regime::ZeroShot | Regime::Finetune => 0,
        }
    }

    /// Build configuration actually used for sequence assembly: the trainer's
    /// direction and effective k are authoritative.
    pub fn effective_build(&self) -> BuildConfig {
        BuildConfig {
            k: self.effective_k(),
            direction: self.direction,
            ..self.build.clone()
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tasks_sampled: Vec<String>,
}

/// Result of a training run; parameters are updated in place.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    pub steps_run: u64,
    /// Final position of the training RNG stream, for checkpoint headers.
    pub rng_word_pos: u128,
}

pub fn log_to_jsonl(log: &[StepLog]) -> Result<String> {
    let mut out = String::new();
    for entry in log {
        out.push_str(&serde_json::to_string(entry)?);
        out.push('\n');
    }
    Ok(out)
}

/// Adam optimizer state (first and second moments).
pub struct AdamState<F: Scalar> {
    m: Gradients<F>,
    v: Gradients<F>,
    steps: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
        }
    }

    /// One update with bias correction. Iteration order over parameters is
    /// fixed, so updates are bitwise deterministic.
    pub fn apply(
        &mut self,
        params: &mut ModelParams<F>,
        grads: &Gradients<F>,
        lr: f64,
        hyper: &AdamHyper,
    ) {
        self.steps += 1;
        let b1 = F::from_f64(hyper.beta1);
        let b2 = F::from_f64(hyper.beta2);
        let one_m_b1 = F::from_f64(1.0 - hyper.beta1);
        let one_m_b2 = F::from_f64(1.0 - hyper.beta2);
        let eps = F::from_f64(hyper.eps);
        let t = self.steps as i32;
        let bc1 = F::from_f64(1.0 / (1.0 - hyper.beta1.powi(t)));
        let bc2 = F::from_f64(1.0 / (1.0 - hyper.beta2.powi(t)));
        let step_lr = F::from_f64(lr);

        let g_slices = grads.param_slices();
        let mut p_slices = params.param_slices_mut();
        let mut m_slices = self.m.param_slices_mut();
        let mut v_slices = self.v.param_slices_mut();
        for i in 0..g_slices.len() {
            let g = g_slices[i];
            let p = &mut p_slices[i];
            let m = &mut m_slices[i];
            let v = &mut v_slices[i];
            for j in 0..g.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + one_m_b1 * gj;
                v[j] = b2 * v[j] + one_m_b2 * gj * gj;
                let mhat = m[j] * bc1;
                let vhat = v[j] * bc2;
                p[j] = p[j] - step_lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Meta-training task pool: split order, example lists capped.
fn training_pool(corpus: &Corpus, split: &Split) -> Result<Vec<Task>> {
    split.validate(corpus)?;
    if split.meta_train.is_empty() {
        return Err(Error::InvalidConfig("split has no meta-training tasks".into()));
    }
    let mut pool = Vec::with_capacity(split.meta_train.len());
    for name in &split.meta_train {
        let mut task = corpus.get(name)?.clone();
        task.examples.truncate(split.max_train_examples_per_task);
        pool.push(task);
    }
    Ok(pool)
}

/// Sample and assemble one training batch. Exposed for tests: the sequences
/// built here are exactly what the optimizer sees.
pub fn build_training_batch(
    rng: &mut ChaCha8Rng,
    pool: &[Task],
    word_list: &[String],
    cfg: &TrainConfig,
    build: &BuildConfig,
) -> Result<(Vec<EncodedSequence>, Vec<String>)> {
    let episode = cfg.effective_k() + 1;
    let mut seqs = Vec::with_capacity(cfg.batch_size);
    let mut names = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let task = &pool[rng.gen_range(0..pool.len())];
        let replaced;
        let task = if cfg.replace_labels_each_iteration && !task.options.is_empty() {
            let label_seed = rng.gen::<u64>();
            replaced = replace_labels(task, label_seed, word_list)?;
            &replaced
        } else {
            task
        };
        let idx = sample_without_replacement(rng, task.examples.len(), episode);
        let shots: Vec<_> = idx.into_iter().map(|i| task.examples[i].clone()).collect();
        seqs.push(build_train_sequence(
            &task.name,
            &shots,
            task.instruction.as_deref(),
            build,
        )?);
        names.push(task.name.clone());
    }
    Ok((seqs, names))
}

fn train_loop<F: Scalar>(
    params: &mut ModelParams<F>,
    pool: &[Task],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let episode = cfg.effective_k() + 1;
    for task in pool {
        if task.examples.len() < episode {
            return Err(Error::InvalidTask {
                task: task.name.clone(),
                msg: format!(
                    "has {} examples but the regime needs k+1 = {episode} per episode",
                    task.examples.len()
                ),
            });
        }
    }
    let build = cfg.effective_build();
    let word_list = replacement_word_list();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(params);
    let mut log = Vec::with_capacity(cfg.total_steps as usize);

    for step in 0..cfg.total_steps {
        let (seqs, names) = build_training_batch(&mut rng, pool, &word_list, cfg, &build)?;
        let (loss, grads) = params.loss_and_grads(&seqs).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence { step },
            other => other,
        })?;
        let lr = if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
            cfg.learning_rate * (step + 1) as f64 / cfg.warmup_steps as f64
        } else {
            cfg.learning_rate
        };
        adam.apply(params, &grads, lr, &cfg.adam);
        log.push(StepLog {
            step,
            loss: loss.into_f64(),
            lr,
            tasks_sampled: names,
        });
    }
    Ok(TrainOutcome {
        log,
        steps_run: cfg.total_steps,
        rng_word_pos: rng.get_word_pos(),
    })
}

/// Episodic few-shot meta-training over the split's meta-training tasks.
pub fn meta_train<F: Scalar>(
    params: &mut ModelParams<F>,
    corpus: &Corpus,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.regime != Regime::FewShot {
        return Err(Error::InvalidConfig(
            "meta_train requires the fewshot regime".into(),
        ));
    }
    let pool = training_pool(corpus, split)?;
    train_loop(params, &pool, cfg)
}

/// Multi-task training on single examples; identical to the few-shot loop
/// with k forced to 0.
pub fn multitask_zero_train<F: Scalar>(
    params: &mut ModelParams<F>,
    corpus: &Corpus,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.regime != Regime::ZeroShot {
        return Err(Error::InvalidConfig(
            "multitask_zero_train requires the zeroshot regime".into(),
        ));
    }
    let pool = training_pool(corpus, split)?;
    train_loop(params, &pool, cfg)
}

/// Supervised training on the k few-shot examples of a single target task.
/// `params` may be freshly initialized or loaded from a meta-trained
/// checkpoint; the caller records that provenance in the checkpoint header.
pub fn finetune<F: Scalar>(
    params: &mut ModelParams<F>,
    task: &Task,
    few_shot: &FewShotSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.regime != Regime::Finetune {
        return Err(Error::InvalidConfig(
            "finetune requires the finetune regime".into(),
        ));
    }
    if few_shot.shots.is_empty() {
        return Err(Error::InvalidTask {
            task: task.name.clone(),
            msg: "cannot fine-tune on an empty few-shot set".into(),
        });
    }
    let pool = vec![Task {
        examples: few_shot.shots.clone(),
        ..task.clone()
    }];
    train_loop(params, &pool, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{sample_few_shot, Example, TaskFormat};
    use crate::model::ModelConfig;
    use crate::synth::{generate_family, Family, FamilySpec};

    fn small_corpus(n_tasks: usize, examples: usize) -> (Corpus, Split) {
        let tasks: Vec<Task> = (0..n_tasks)
            .map(|t| Task {
                name: format!("task{t}"),
                examples: (0..examples)
                    .map(|i| Example::new(format!("in{t}x{i}"), if i % 2 == 0 { "A" } else { "B" }))
                    .collect(),
                options: vec!["A".into(), "B".into()],
                format: TaskFormat::Classification,
                instruction: None,
            })
            .collect();
        let names: Vec<String> = tasks.iter().map(|t| t.name.clone()).collect();
        let corpus = Corpus::from_tasks(tasks).unwrap();
        let split = Split {
            meta_train: names,
            target: vec![],
            max_train_examples_per_task: 16_384,
            unseen_domain: vec![],
        };
        (corpus, split)
    }

    fn mini_cfg(regime: Regime, k: usize, steps: u64) -> TrainConfig {
        TrainConfig {
            regime,
            k,
            total_steps: steps,
            warmup_steps: 4,
            seed: 5,
            build: BuildConfig {
                max_seq_len: 256,
                ..BuildConfig::default()
            },
            ..TrainConfig::desk_fewshot()
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let (corpus, split) = small_corpus(2, 8);
        let mut params = ModelParams::<f32>::init(ModelConfig::mini(), 1).unwrap();
        let before = params.clone();
        let out = meta_train(&mut params, &corpus, &split, &mini_cfg(Regime::FewShot, 1, 0))
            .unwrap();
        assert_eq!(params, before);
        assert!(out.log.is_empty());
    }

    #[test]
    fn fewshot_needs_k_plus_one_examples() {
        let (corpus, split) = small_corpus(1, 3);
        let mut params = ModelParams::<f32>::init(ModelConfig::mini(), 1).unwrap();
        let err = meta_train(&mut params, &corpus, &split, &mini_cfg(Regime::FewShot, 3, 1))
            .unwrap_err()
            .to_string();
        assert!(err.contains("task0"), "{err}");
    }

    #[test]
    fn episodes_hold_exactly_k_plus_one_examples() {
        let (corpus, split) = small_corpus(1, 8);
        let cfg = mini_cfg(Regime::FewShot, 1, 0);
        let build = cfg.effective_build();
        let pool = training_pool(&corpus, &split).unwrap();
        let words = replacement_word_list();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (seqs, names) = build_training_batch(&mut rng, &pool, &words, &cfg, &build).unwrap();
        assert_eq!(seqs.len(), cfg.batch_size);
        assert!(names.iter().all(|n| n == "task0"));
        for seq in &seqs {
            // Two examples: exactly one example separator.
            let text = crate::tokenizer::decode(&seq.tokens).unwrap();
            assert_eq!(text.matches("\n\n\n").count(), 1, "text: {text:?}");
            assert_eq!(seq.meta.k_effective, 1);
            // Mask sits on the final segment.
            let supervised = seq.supervised_text().unwrap();
            assert!(text.ends_with(&supervised));
        }
    }

    #[test]
    fn regime_equivalence_at_k0() {
        // Identical parameter trajectories: zeroshot vs fewshot loop at k=0.
        // The public fewshot config rejects k=0, so drive the shared loop
        // directly for the fewshot side.
        let (corpus, split) = small_corpus(3, 8);
        let pool = training_pool(&corpus, &split).unwrap();

        let mut zero_cfg = mini_cfg(Regime::ZeroShot, 0, 12);
        zero_cfg.k = 16; // ignored: forced to 0 by the regime
        let mut a = ModelParams::<f32>::init(ModelConfig::mini(), 9).unwrap();
        let out_a = multitask_zero_train(&mut a, &corpus, &split, &zero_cfg).unwrap();

        let mut few_cfg = zero_cfg.clone();
        few_cfg.regime = Regime::FewShot;
        few_cfg.k = 0;
        let mut b = ModelParams::<f32>::init(ModelConfig::mini(), 9).unwrap();
        let out_b = train_loop(&mut b, &pool, &few_cfg).unwrap();

        assert_eq!(a, b, "parameter trajectories diverged");
        for (x, y) in out_a.log.iter().zip(&out_b.log) {
            assert_eq!(x.loss, y.loss);
            assert_eq!(x.tasks_sampled, y.tasks_sampled);
        }
    }

    #[test]
    fn zeroshot_sequences_are_single_example_and_short() {
        let (corpus, split) = small_corpus(2, 8);
        let cfg = mini_cfg(Regime::ZeroShot, 0, 0);
        let build = cfg.effective_build();
        assert_eq!(build.max_seq_len, 256);
        let pool = training_pool(&corpus, &split).unwrap();
        let words = replacement_word_list();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (seqs, _) = build_training_batch(&mut rng, &pool, &words, &cfg, &build).unwrap();
        for seq in &seqs {
            assert!(seq.len() <= 256);
            let text = crate::tokenizer::decode(&seq.tokens).unwrap();
            assert_eq!(text.matches("\n\n\n").count(), 0);
        }
    }

    #[test]
    fn zeroshot_direction_controls_masked_side() {
        let (corpus, split) = small_corpus(1, 4);
        let pool = training_pool(&corpus, &split).unwrap();
        let words = replacement_word_list();

        let direct = mini_cfg(Regime::ZeroShot, 0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (seqs, _) =
            build_training_batch(&mut rng, &pool, &words, &direct, &direct.effective_build())
                .unwrap();
        for s in &seqs {
            let sup = s.supervised_text().unwrap();
            assert!(sup == "A" || sup == "B", "direct masks the output: {sup}");
        }

        let channel = TrainConfig {
            direction: Direction::Channel,
            ..direct
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (seqs, _) =
            build_training_batch(&mut rng, &pool, &words, &channel, &channel.effective_build())
                .unwrap();
        for s in &seqs {
            let sup = s.supervised_text().unwrap();
            assert!(sup.starts_with("in0x"), "channel masks the input: {sup}");
        }
    }

    #[test]
    fn task_sampling_is_uniform() {
        let (corpus, split) = small_corpus(8, 4);
        let pool = training_pool(&corpus, &split).unwrap();
        let cfg = mini_cfg(Regime::ZeroShot, 0, 0);
        let build = cfg.effective_build();
        let words = replacement_word_list();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut counts = std::collections::BTreeMap::<String, u32>::new();
        let steps = 10_000usize;
        for _ in 0..steps {
            let (_, names) = build_training_batch(&mut rng, &pool, &words, &cfg, &build).unwrap();
            for n in names {
                *counts.entry(n).or_default() += 1;
            }
        }
        let total: u32 = counts.values().sum();
        let expect = 1.0 / 8.0;
        for (name, c) in counts {
            let freq = f64::from(c) / f64::from(total);
            assert!(
                (freq - expect).abs() < 0.03 * expect + 0.005,
                "task {name}: frequency {freq:.4} vs {expect:.4}"
            );
        }
    }

    #[test]
    fn label_replacement_rewrites_labels_per_iteration() {
        let (corpus, split) = small_corpus(1, 8);
        let cfg = TrainConfig {
            replace_labels_each_iteration: true,
            ..mini_cfg(Regime::ZeroShot, 0, 0)
        };
        let build = cfg.effective_build();
        let pool = training_pool(&corpus, &split).unwrap();
        let words = replacement_word_list();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut supervised = std::collections::BTreeSet::new();
        for _ in 0..8 {
            let (seqs, _) = build_training_batch(&mut rng, &pool, &words, &cfg, &build).unwrap();
            for s in &seqs {
                let sup = s.supervised_text().unwrap();
                assert!(sup != "A" && sup != "B", "label not replaced: {sup}");
                supervised.insert(sup);
            }
        }
        // Fresh mappings across iterations: many distinct replacement words.
        assert!(supervised.len() > 4, "only {:?}", supervised);
    }

    #[test]
    fn divergence_reports_step() {
        let (corpus, split) = small_corpus(1, 4);
        let mut params = ModelParams::<f32>::init(ModelConfig::mini(), 1).unwrap();
        // Non-finite weights force a non-finite loss at the first step.
        params.tok_emb.fill(f32::INFINITY);
        let err = multitask_zero_train(
            &mut params,
            &corpus,
            &split,
            &mini_cfg(Regime::ZeroShot, 0, 3),
        )
        .unwrap_err();
        match err {
            Error::Divergence { step } => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn training_reduces_loss_on_synthetic_mapping() {
        // Training-progress oracle: later losses beat early losses.
        let spec = FamilySpec {
            num_tasks: 4,
            examples_per_task: 32,
            ..FamilySpec::new(Family::Mapping, 3)
        };
        let corpus = Corpus::from_tasks(generate_family(&spec).unwrap()).unwrap();
        let split = Split {
            meta_train: corpus.tasks.keys().cloned().collect(),
            target: vec![],
            max_train_examples_per_task: 16_384,
            unseen_domain: vec![],
        };
        let cfg = TrainConfig {
            total_steps: 120,
            warmup_steps: 20,
            k: 4,
            batch_size: 4,
            ..mini_cfg(Regime::FewShot, 4, 120)
        };
        let mut params = ModelParams::<f32>::init(ModelConfig::mini(), 2).unwrap();
        let out = meta_train(&mut params, &corpus, &split, &cfg).unwrap();
        let first: f64 = out.log[..20].iter().map(|l| l.loss).sum::<f64>() / 20.0;
        let last: f64 = out.log[out.log.len() - 20..]
            .iter()
            .map(|l| l.loss)
            .sum::<f64>()
            / 20.0;
        assert!(
            last < first,
            "loss did not improve: first {first:.3} vs last {last:.3}"
        );
    }

    #[test]
    fn finetune_zero_steps_identity_and_descent() {
        let (corpus, _) = small_corpus(1, 8);
        let task = corpus.get("task0").unwrap();
        let shots = sample_few_shot(task, 4, 100).unwrap();
        let mut params = ModelParams::<f32>::init(ModelConfig::mini(), 4).unwrap();
        let before = params.clone();
        let cfg = TrainConfig {
            regime: Regime::Finetune,
            total_steps: 0,
            ..mini_cfg(Regime::ZeroShot, 0, 0)
        };
        finetune(&mut params, task, &shots, &cfg).unwrap();
        assert_eq!(params, before);

        // Descent oracle: loss on the shots decreases monotonically over the
        // first 10 steps when each step's rate is line-searched.
        let build = cfg.effective_build();
        let seqs: Vec<EncodedSequence> = shots
            .shots
            .iter()
            .map(|ex| {
                build_train_sequence(&task.name, std::slice::from_ref(ex), None, &build).unwrap()
            })
            .collect();
        let mut current = params.clone();
        let (mut loss, _) = current.loss_and_grads(&seqs).unwrap();
        for _ in 0..10 {
            let (_, grads) = current.loss_and_grads(&seqs).unwrap();
            let flat: Vec<f32> = grads.param_slices().concat();
            let mut improved = None;
            for lr_exp in 1..=8 {
                let lr = 10f32.powi(-lr_exp);
                let mut trial = current.clone();
                let mut offset = 0;
                for slice in trial.param_slices_mut() {
                    for v in slice.iter_mut() {
                        *v -= lr * flat[offset];
                        offset += 1;
                    }
                }
                let (trial_loss, _) = trial.loss_and_grads(&seqs).unwrap();
                if trial_loss < loss {
                    improved = Some((trial, trial_loss));
                    break;
                }
            }
            let (next, next_loss) = improved.expect("no rate decreased the loss");
            current = next;
            loss = next_loss;
        }
    }

    #[test]
    fn finetune_rejects_empty_shots() {
        let (corpus, _) = small_corpus(1, 4);
        let task = corpus.get("task0").unwrap();
        let empty = FewShotSet {
            task: task.name.clone(),
            seed: 0,
            indices: vec![],
            shots: vec![],
        };
        let mut params = ModelParams::<f32>::init(ModelConfig::mini(), 4).unwrap();
        let cfg = TrainConfig {
            regime: Regime::Finetune,
            ..mini_cfg(Regime::ZeroShot, 0, 1)
        };
        assert!(finetune(&mut params, task, &empty, &cfg).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (corpus, split) = small_corpus(2, 8);
        let cfg = mini_cfg(Regime::ZeroShot, 0, 6);
        let mut a = ModelParams::<f32>::init(ModelConfig::mini(), 7).unwrap();
        multitask_zero_train(&mut a, &corpus, &split, &cfg).unwrap();
        let mut b = ModelParams::<f32>::init(ModelConfig::mini(), 7).unwrap();
        multitask_zero_train(&mut b, &corpus, &split, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
