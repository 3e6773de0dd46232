//! Demonstration store with exact cosine top-K retrieval and few-shot query
//! construction, persisted as a header line plus one JSON record per item.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::Embedding;
use crate::scene::{DecisionDistribution, N_ACTIONS};
use crate::workflow::{MemoryItem, MemoryMeta};

pub const BANK_FORMAT_VERSION: u32 = 1;

/// Default bounds for the per-sample few-shot count during training-set
/// construction, and the fixed count used at inference.
pub const DEFAULT_K_MIN: usize = 0;
pub const DEFAULT_K_MAX: usize = 3;
pub const DEFAULT_INFERENCE_K: usize = 3;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("embedding dimension mismatch: bank {expected}, item {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("retrieval from an empty bank")]
    EmptyBank,
    #[error("query embedding has zero norm")]
    ZeroNormQuery,
    #[error("invalid k range: {min}..={max}")]
    InvalidRange { min: usize, max: usize },
    #[error("bank file version {got}, expected {expected}")]
    VersionMismatch { expected: u32, got: u32 },
    #[error("corrupt bank record at line {line}: {reason}")]
    CorruptRecord { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered retrieval outcome: indices and their cosine similarities, both
/// non-increasing in similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

impl RetrievalResult {
    pub fn is_well_formed(&self) -> bool {
        self.indices.len() == self.similarities.len()
            && self.similarities.windows(2).all(|w| w[0] >= w[1])
            && self.indices.iter().collect::<HashSet<_>>().len() == self.indices.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    items: Vec<MemoryItem>,
    dimension: usize,
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    version: u32,
    dimension: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct BankRecord {
    q_md: String,
    rationale: String,
    probs: Vec<f64>,
    embedding: String,
    meta: MemoryMeta,
}

fn encode_embedding(e: &Embedding) -> String {
    let mut bytes = Vec::with_capacity(e.values.len() * 4);
    for v in &e.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    BASE64.encode(bytes)
}

fn decode_embedding(s: &str) -> Result<Embedding, String> {
    let bytes = BASE64.decode(s).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err("embedding byte length not a multiple of 4".to_string());
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Embedding { values })
}

impl MemoryBank {
    pub fn new(dimension: usize) -> MemoryBank {
        MemoryBank { items: Vec::new(), dimension }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[MemoryItem] {
        &self.items
    }

    pub fn get(&self, index: usize) -> Option<&MemoryItem> {
        self.items.get(index)
    }

    pub fn insert(&mut self, item: MemoryItem) -> Result<usize, MemoryError> {
        if item.embedding.dimension() != self.dimension {
            return Err(MemoryError::DimensionMismatch {
                expected: self.dimension,
                got: item.embedding.dimension(),
            });
        }
        self.items.push(item);
        Ok(self.items.len() - 1)
    }

    /// Exact greedy top-k by cosine similarity; ties go to the lower index.
    /// `k` is capped at the bank size.
    pub fn top_k(&self, query: &Embedding, k: usize) -> Result<RetrievalResult, MemoryError> {
        if k == 0 {
            return Ok(RetrievalResult { indices: vec![], similarities: vec![] });
        }
        if self.items.is_empty() {
            return Err(MemoryError::EmptyBank);
        }
        if query.dimension() != self.dimension {
            return Err(MemoryError::DimensionMismatch {
                expected: self.dimension,
                got: query.dimension(),
            });
        }
        if query.norm() <= 0.0 {
            return Err(MemoryError::ZeroNormQuery);
        }
        let sims: Vec<f64> = self.items.iter().map(|it| query.cosine(&it.embedding)).collect();
        let k = k.min(self.items.len());
        let mut taken = vec![false; sims.len()];
        let mut indices = Vec::with_capacity(k);
        let mut similarities = Vec::with_capacity(k);
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for (i, &s) in sims.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                if best.map_or(true, |b| s > sims[b]) {
                    best = Some(i);
                }
            }
            let b = best.expect("k capped at item count");
            taken[b] = true;
            indices.push(b);
            similarities.push(sims[b]);
        }
        Ok(RetrievalResult { indices, similarities })
    }

    /// Retrieve the top-k items themselves, most similar first.
    pub fn retrieve(&self, query: &Embedding, k: usize) -> Result<Vec<&MemoryItem>, MemoryError> {
        let result = self.top_k(query, k)?;
        Ok(result.indices.iter().map(|&i| &self.items[i]).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let tmp = path.with_extension("tmp");
        {
            let mut file = std::fs::File::create(&tmp)?;
            let header = BankHeader {
                version: BANK_FORMAT_VERSION,
                dimension: self.dimension,
                count: self.items.len(),
            };
            writeln!(file, "{}", serde_json::to_string(&header).expect("serializable header"))?;
            for item in &self.items {
                let record = BankRecord {
                    q_md: item.q_md.clone(),
                    rationale: item.rationale.clone(),
                    probs: item.distribution.probs().to_vec(),
                    embedding: encode_embedding(&item.embedding),
                    meta: item.meta.clone(),
                };
                writeln!(file, "{}", serde_json::to_string(&record).expect("serializable record"))?;
            }
            file.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MemoryBank, MemoryError> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();

        let header_line = lines.next().ok_or(MemoryError::CorruptRecord {
            line: 1,
            reason: "missing header".to_string(),
        })??;
        let header: BankHeader =
            serde_json::from_str(&header_line).map_err(|e| MemoryError::CorruptRecord {
                line: 1,
                reason: e.to_string(),
            })?;
        if header.version != BANK_FORMAT_VERSION {
            return Err(MemoryError::VersionMismatch {
                expected: BANK_FORMAT_VERSION,
                got: header.version,
            });
        }

        let mut bank = MemoryBank::new(header.dimension);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: BankRecord =
                serde_json::from_str(&line).map_err(|e| MemoryError::CorruptRecord {
                    line: line_no,
                    reason: e.to_string(),
                })?;
            let probs: [f64; N_ACTIONS] =
                record.probs.as_slice().try_into().map_err(|_| MemoryError::CorruptRecord {
                    line: line_no,
                    reason: format!("expected {N_ACTIONS} probabilities, got {}", record.probs.len()),
                })?;
            let distribution =
                DecisionDistribution::from_probs(probs).map_err(|e| MemoryError::CorruptRecord {
                    line: line_no,
                    reason: e.to_string(),
                })?;
            let embedding =
                decode_embedding(&record.embedding).map_err(|reason| MemoryError::CorruptRecord {
                    line: line_no,
                    reason,
                })?;
            bank.insert(MemoryItem {
                q_md: record.q_md,
                embedding,
                distribution,
                rationale: record.rationale,
                meta: record.meta,
            })
            .map_err(|e| MemoryError::CorruptRecord { line: line_no, reason: e.to_string() })?;
        }
        if bank.len() != header.count {
            return Err(MemoryError::CorruptRecord {
                line: bank.len() + 1,
                reason: format!("header count {} but {} records", header.count, bank.len()),
            });
        }
        Ok(bank)
    }
}

/// Draw the few-shot count uniformly from {k_min, ..., k_max}.
pub fn sample_k(rng: &mut impl Rng, k_min: usize, k_max: usize) -> Result<usize, MemoryError> {
    if k_min > k_max {
        return Err(MemoryError::InvalidRange { min: k_min, max: k_max });
    }
    Ok(rng.gen_range(k_min..=k_max))
}

/// Prepend retrieved demonstrations to a query, most similar first, each as a
/// chat-delimited user/assistant pair. With no examples the query passes
/// through unchanged.
pub fn build_augmented_query(query: &str, retrieved: &[&MemoryItem]) -> String {
    let mut out = String::new();
    for item in retrieved {
        out.push_str("<|im_start|>user\n");
        out.push_str(&item.q_md);
        out.push_str("<|im_end|>\n<|im_start|>assistant\n");
        out.push_str(&item.rationale);
        out.push_str("<|im_end|>\n");
    }
    out.push_str(query);
    out
}
