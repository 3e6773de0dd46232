//! Distilled decision model: a small causal transformer with a
//! language-modeling head over every position and a decision head read at the
//! prompt-termination position, trained jointly so the action distribution is
//! available before any rationale text is decoded.

pub mod model;
pub mod tokenizer;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::memory::{build_augmented_query, sample_k, MemoryBank, MemoryError};
use crate::scene::{DecisionDistribution, N_ACTIONS};
use crate::workflow::MemoryItem;

pub use model::{dpp_loss, lm_loss, softmax, total_loss, ForwardOutput, Model, KL_EPSILON};
pub use tokenizer::{
    Tokenizer, IM_END_TEXT, IM_START_TEXT, TOK_ASSISTANT, TOK_IM_END, TOK_IM_START, TOK_NEWLINE,
    TOK_PAD,
};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StudentError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no assistant-turn opener found in the token sequence")]
    MarkerNotFound,
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("language-model mask is empty")]
    EmptyMask,
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("checkpoint version {got} unsupported (expected {expected})")]
    VersionMismatch { expected: u32, got: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub n_actions: usize,
    pub classifier_hidden: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            max_seq_len: 768,
            n_actions: N_ACTIONS,
            classifier_hidden: 128,
            lambda: 0.7,
            learning_rate: 0.1,
            epochs: 20,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<(), StudentError> {
        let bad = |msg: &str| Err(StudentError::InvalidConfig(msg.to_string()));
        if self.embed_dim == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return bad("architecture dimensions must be positive");
        }
        if self.embed_dim % self.n_heads != 0 {
            return bad("embed_dim must be divisible by n_heads");
        }
        if self.max_seq_len == 0 || self.classifier_hidden == 0 {
            return bad("max_seq_len and classifier_hidden must be positive");
        }
        if self.n_actions != N_ACTIONS {
            return bad("the decision head is fixed at ten actions");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be a nonnegative real");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// One distillation record: token sequence, termination position, target
/// action distribution, and the positions the LM loss averages over.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub tokens: Vec<u32>,
    pub m_star: usize,
    pub target: DecisionDistribution,
    pub lm_mask: Vec<usize>,
}

impl TrainingExample {
    /// Mask variant covering only the final assistant response span.
    pub fn response_mask(&self) -> Vec<usize> {
        (self.m_star + 3..self.tokens.len().saturating_sub(1)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lm: f64,
    pub dpp: f64,
    pub total: f64,
}

/// Renders a loss log as CSV with an `epoch,lm,dpp,total` header.
pub fn loss_log_csv(log: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,lm,dpp,total\n");
    for e in log {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.lm, e.dpp, e.total));
    }
    out
}

/// Index of the position immediately before the last `<|im_start|>assistant`
/// marker pair.
pub fn find_prompt_termination(tokens: &[u32]) -> Result<usize, StudentError> {
    let mut found = None;
    for i in 0..tokens.len().saturating_sub(1) {
        if tokens[i] == TOK_IM_START && tokens[i + 1] == TOK_ASSISTANT {
            found = Some(i);
        }
    }
    match found {
        Some(i) if i > 0 => Ok(i - 1),
        _ => Err(StudentError::MarkerNotFound),
    }
}

/// Wraps a rendered query as an unterminated chat exchange, leaving the
/// assistant turn open for the model to fill.
pub fn chat_wrap_query(q_md: &str) -> String {
    format!("{IM_START_TEXT}user\n{q_md}{IM_END_TEXT}\n{IM_START_TEXT}assistant\n")
}

/// Leave-one-out distillation views of a memory bank: for item i the few-shot
/// count is drawn from {k_min..k_max}, the most similar OTHER items are
/// prepended, and the item's own rationale closes the assistant turn. Returns
/// (full text, target probabilities) pairs in bank order.
pub fn distillation_texts(
    bank: &MemoryBank,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<Vec<(String, DecisionDistribution)>, MemoryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(bank.len());
    for (i, item) in bank.items().iter().enumerate() {
        let k = sample_k(&mut rng, k_min, k_max)?;
        let wrapped = chat_wrap_query(&item.q_md);
        let prompt = if k == 0 {
            wrapped
        } else {
            let result = bank.top_k(&item.embedding, k + 1)?;
            let picked: Vec<&MemoryItem> = result
                .indices
                .iter()
                .filter(|&&j| j != i)
                .take(k)
                .map(|&j| bank.get(j).expect("index from top_k"))
                .collect();
            build_augmented_query(&wrapped, &picked)
        };
        let text = format!("{prompt}{}{IM_END_TEXT}", item.rationale);
        out.push((text, item.distribution.clone()));
    }
    Ok(out)
}

/// Tokenizer plus transformer, the unit that trains, infers, and persists.
pub struct Student {
    pub tokenizer: Tokenizer,
    pub model: Model,
}

impl Student {
    /// Builds the vocabulary from `corpus` and initializes fresh parameters.
    pub fn new<S: AsRef<str>>(config: StudentConfig, corpus: &[S]) -> Result<Student, StudentError> {
        let tokenizer = Tokenizer::build(corpus.iter().map(|s| s.as_ref()));
        let model = Model::new(config, tokenizer.vocab_size())?;
        Ok(Student { tokenizer, model })
    }

    pub fn config(&self) -> &StudentConfig {
        &self.model.config
    }

    /// Tokenizes a full training text (augmented query plus completed
    /// assistant answer) and locates the termination position. `lm_mask`
    /// defaults to every position with a successor.
    pub fn build_training_example(
        &self,
        text: &str,
        target: DecisionDistribution,
        lm_mask: Option<Vec<usize>>,
    ) -> Result<TrainingExample, StudentError> {
        let tokens = self.tokenizer.encode(text);
        if tokens.len() > self.model.config.max_seq_len {
            return Err(StudentError::SequenceTooLong {
                len: tokens.len(),
                max: self.model.config.max_seq_len,
            });
        }
        let m_star = find_prompt_termination(&tokens)?;
        let lm_mask = match lm_mask {
            Some(mask) => {
                if mask.is_empty() {
                    return Err(StudentError::EmptyMask);
                }
                assert!(
                    mask.iter().all(|&m| m + 1 < tokens.len()),
                    "mask positions must have a next token"
                );
                mask
            }
            None => (0..tokens.len() - 1).collect(),
        };
        Ok(TrainingExample { tokens, m_star, target, lm_mask })
    }

    pub fn forward(&self, tokens: &[u32], m_star: usize) -> Result<ForwardOutput, StudentError> {
        self.model.forward(tokens, m_star)
    }

    /// Loss pair for one example under current parameters, no gradients.
    pub fn losses(&self, example: &TrainingExample) -> Result<(f64, f64), StudentError> {
        if example.lm_mask.is_empty() {
            return Err(StudentError::EmptyMask);
        }
        let out = self.model.forward(&example.tokens, example.m_star)?;
        let lm = lm_loss(&out.lm_logits, &example.tokens, &example.lm_mask)?;
        let dpp = dpp_loss(&out.decision_probs(), &example.target);
        Ok((lm, dpp))
    }

    /// Minibatch SGD over the dataset. Deterministic given the config seed;
    /// returns one mean-loss row per epoch.
    pub fn train(&mut self, dataset: &[TrainingExample]) -> Result<Vec<EpochLoss>, StudentError> {
        if dataset.is_empty() {
            return Err(StudentError::EmptyDataset);
        }
        let cfg = self.model.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut grads = vec![0.0f64; self.model.params.len()];
        let mut log = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            let mut lm_sum = 0.0;
            let mut dpp_sum = 0.0;
            for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
                grads.iter_mut().for_each(|g| *g = 0.0);
                for &idx in batch {
                    let ex = &dataset[idx];
                    let cache = self.model.forward_cached(&ex.tokens, ex.m_star)?;
                    let target = ex.target.probs();
                    let (lm, dpp) = self.model.backward(
                        &ex.tokens,
                        ex.m_star,
                        &ex.lm_mask,
                        target,
                        cfg.lambda,
                        &cache,
                        &mut grads,
                    )?;
                    if !lm.is_finite() || !dpp.is_finite() {
                        return Err(StudentError::NonFiniteLoss { epoch, step });
                    }
                    lm_sum += lm;
                    dpp_sum += dpp;
                }
                let scale = 1.0 / batch.len() as f64;
                grads.iter_mut().for_each(|g| *g *= scale);
                self.model.sgd_step(&grads, cfg.learning_rate);
            }
            let n = dataset.len() as f64;
            let lm = lm_sum / n;
            let dpp = dpp_sum / n;
            log.push(EpochLoss { epoch, lm, dpp, total: total_loss(lm, dpp, cfg.lambda) });
        }
        Ok(log)
    }

    /// Decision distribution read at the termination position, then an
    /// optional greedily decoded rationale (`max_rationale_tokens` 0 skips
    /// text generation entirely).
    pub fn infer(
        &self,
        text: &str,
        max_rationale_tokens: usize,
    ) -> Result<(DecisionDistribution, String), StudentError> {
        let mut tokens = self.tokenizer.encode(text);
        if tokens.len() > self.model.config.max_seq_len {
            return Err(StudentError::SequenceTooLong {
                len: tokens.len(),
                max: self.model.config.max_seq_len,
            });
        }
        let m_star = find_prompt_termination(&tokens)?;
        let out = self.model.forward(&tokens, m_star)?;
        let distribution = out.decision_probs();

        let mut generated = Vec::new();
        for _ in 0..max_rationale_tokens {
            if tokens.len() >= self.model.config.max_seq_len {
                break;
            }
            let step = self.model.forward(&tokens, m_star)?;
            let last = step.lm_logits.last().expect("nonempty sequence");
            let next = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i as u32)
                .expect("nonempty vocabulary");
            if next == TOK_IM_END {
                break;
            }
            tokens.push(next);
            generated.push(next);
        }
        let rationale = if generated.is_empty() {
            String::new()
        } else {
            self.tokenizer.decode(&generated)
        };
        Ok((distribution, rationale))
    }

    /// Compares analytic gradients against central finite differences on
    /// `samples` randomly chosen parameters (all parameters are first
    /// re-randomized from `seed` so every path carries signal). Returns the
    /// maximum relative error.
    pub fn gradient_check(
        &mut self,
        example: &TrainingExample,
        epsilon: f64,
        seed: u64,
        samples: usize,
    ) -> Result<f64, StudentError> {
        self.model.randomize_params(seed);
        let lambda = self.model.config.lambda;
        let cache = self.model.forward_cached(&example.tokens, example.m_star)?;
        let mut grads = vec![0.0f64; self.model.params.len()];
        self.model.backward(
            &example.tokens,
            example.m_star,
            &example.lm_mask,
            example.target.probs(),
            lambda,
            &cache,
            &mut grads,
        )?;

        let n = self.model.params.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut picks: BTreeSet<usize> = BTreeSet::new();
        // Cover the decision head explicitly, then fill at random.
        let o = &self.model.offsets;
        picks.insert(o.cls_w2);
        picks.insert(o.cls_b2);
        picks.insert(o.cls_w1);
        picks.insert(o.lm_w);
        picks.insert(o.lnf_g);
        while picks.len() < samples.min(n) {
            picks.insert(rng.gen_range(0..n));
        }

        let mut max_rel = 0.0f64;
        for &idx in &picks {
            let orig = self.model.params[idx];
            let plus = (orig as f64 + epsilon) as f32;
            let minus = (orig as f64 - epsilon) as f32;
            self.model.params[idx] = plus;
            let loss_plus = self.total_loss_of(example, lambda)?;
            self.model.params[idx] = minus;
            let loss_minus = self.total_loss_of(example, lambda)?;
            self.model.params[idx] = orig;
            let delta = plus as f64 - minus as f64;
            let gfd = (loss_plus - loss_minus) / delta;
            let ga = grads[idx];
            let rel = (ga - gfd).abs() / ga.abs().max(gfd.abs()).max(1e-5);
            max_rel = max_rel.max(rel);
        }
        Ok(max_rel)
    }

    fn total_loss_of(&self, example: &TrainingExample, lambda: f64) -> Result<f64, StudentError> {
        let (lm, dpp) = self.losses(example)?;
        Ok(total_loss(lm, dpp, lambda))
    }

    /// Writes header JSON (version, config, vocabulary and its hash) plus the
    /// raw little-endian f32 parameter buffer. Atomic via rename.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), StudentError> {
        #[derive(Serialize)]
        struct Header<'a> {
            version: u32,
            config: &'a StudentConfig,
            vocab_hash: u64,
            vocab: &'a [String],
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: &self.model.config,
            vocab_hash: self.tokenizer.vocab_hash(),
            vocab: self.tokenizer.words(),
        };
        let mut bytes = serde_json::to_vec(&header).expect("header serializes");
        bytes.push(b'\n');
        for &p in &self.model.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        let tmp = path.with_extension("tmp");
        {
            let mut file = fs::File::create(&tmp)?;
            file.write_all(&bytes)?;
            file.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Student, StudentError> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
            config: StudentConfig,
            vocab_hash: u64,
            vocab: Vec<String>,
        }
        let bytes = fs::read(path)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| StudentError::CorruptCheckpoint("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| StudentError::CorruptCheckpoint(format!("bad header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(StudentError::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                got: header.version,
            });
        }
        let tokenizer = Tokenizer::from_words(header.vocab);
        if tokenizer.vocab_hash() != header.vocab_hash {
            return Err(StudentError::CorruptCheckpoint(
                "vocabulary hash does not match the stored word list".into(),
            ));
        }
        let mut model = Model::new(header.config, tokenizer.vocab_size())?;
        let body = &bytes[newline + 1..];
        let expected = model.params.len() * 4;
        if body.len() != expected {
            return Err(StudentError::CorruptCheckpoint(format!(
                "parameter payload is {} bytes, expected {expected}",
                body.len()
            )));
        }
        for (i, chunk) in body.chunks_exact(4).enumerate() {
            model.params[i] = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
        Ok(Student { tokenizer, model })
    }
}
