//! Deterministic datasets: synthetic regression and classification, and a
//! byte-level character corpus.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::{matmul_dense, DenseMatrix};
use crate::{Error, Result};

/// Embedded public-domain text used by the character language-model task.
pub const CORPUS: &str = include_str!("../../data/corpus.txt");

pub const FEATURE_DIM: usize = 8;
pub const TARGET_DIM: usize = 4;
pub const REGRESSION_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Regression,
    Classification,
    CharLm,
}

impl std::str::FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Self::Regression),
            "classification" => Ok(Self::Classification),
            "char_lm" => Ok(Self::CharLm),
            other => Err(Error::invalid(format!("unknown data kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchInput {
    Features(DenseMatrix),
    /// Row-major `batch × len` token ids.
    Tokens {
        ids: Vec<usize>,
        batch: usize,
        len: usize,
    },
}

impl BatchInput {
    /// Number of output rows the batch produces.
    pub fn rows(&self) -> usize {
        match self {
            BatchInput::Features(x) => x.rows(),
            BatchInput::Tokens { batch, len, .. } => batch * len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Values(DenseMatrix),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: BatchInput,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Split {
    Features { x: DenseMatrix, target: Target },
    Tokens(Vec<usize>),
}

impl Split {
    pub fn len(&self) -> usize {
        match self {
            Split::Features { x, .. } => x.rows(),
            Split::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DataKind,
    pub train: Split,
    pub val: Split,
    /// Byte vocabulary (sorted distinct bytes) for `CharLm`; empty otherwise.
    pub vocab: Vec<u8>,
    /// Generating map `A` for synthetic tasks (`TARGET_DIM × FEATURE_DIM`).
    pub generator: Option<DenseMatrix>,
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn split_at(size: usize) -> usize {
    (size * 9).div_ceil(10).min(size.saturating_sub(1)).max(1)
}

/// Builds a deterministic dataset with a 90/10 train/validation split.
///
/// `size` is the number of samples for the synthetic tasks and the number of
/// corpus bytes (capped at the corpus length) for `CharLm`.
pub fn make_data(kind: DataKind, seed: u64, size: usize) -> Result<Dataset> {
    if size < 2 {
        return Err(Error::invalid("dataset size must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        DataKind::Regression | DataKind::Classification => {
            let a = gaussian(TARGET_DIM, FEATURE_DIM, &mut rng)
                .scale(1.0 / (FEATURE_DIM as f64).sqrt());
            let x = gaussian(size, FEATURE_DIM, &mut rng);
            let clean = matmul_dense(&x, &a)?;
            let noise = gaussian(size, TARGET_DIM, &mut rng).scale(REGRESSION_NOISE);
            let y = clean.add(&noise)?;
            let cut = split_at(size);
            let target = |rows: std::ops::Range<usize>| -> Target {
                let part = y.slice_rows(rows.start, rows.end);
                match kind {
                    DataKind::Regression => Target::Values(part),
                    _ => Target::Classes(part.iter_rows().map(argmax).collect()),
                }
            };
            Ok(Dataset {
                kind,
                train: Split::Features {
                    x: x.slice_rows(0, cut),
                    target: target(0..cut),
                },
                val: Split::Features {
                    x: x.slice_rows(cut, size),
                    target: target(cut..size),
                },
                vocab: Vec::new(),
                generator: Some(a),
            })
        }
        DataKind::CharLm => {
            let bytes = &CORPUS.as_bytes()[..size.min(CORPUS.len())];
            let mut vocab = bytes.to_vec();
            vocab.sort_unstable();
            vocab.dedup();
            let ids: Vec<usize> = bytes
                .iter()
                .map(|b| vocab.binary_search(b).expect("byte is in vocabulary"))
                .collect();
            let cut = split_at(ids.len());
            Ok(Dataset {
                kind,
                train: Split::Tokens(ids[..cut].to_vec()),
                val: Split::Tokens(ids[cut..].to_vec()),
                vocab,
                generator: None,
            })
        }
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

impl Dataset {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn split(&self, part: Part) -> &Split {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
        }
    }

    /// Cuts a split into batches. Token splits are cut into non-overlapping
    /// windows of `context + 1` tokens (shorter if the split is small).
    /// With `shuffle`, sample order is permuted by the given generator.
    pub fn batches(
        &self,
        part: Part,
        batch_size: usize,
        context: usize,
        shuffle: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Batch>> {
        if batch_size == 0 || context == 0 {
            return Err(Error::invalid("batch size and context must be positive"));
        }
        match self.split(part) {
            Split::Features { x, target } => {
                let mut order: Vec<usize> = (0..x.rows()).collect();
                if let Some(rng) = shuffle {
                    order.shuffle(rng);
                }
                Ok(order
                    .chunks(batch_size)
                    .map(|idx| {
                        let input =
                            DenseMatrix::from_fn(idx.len(), x.cols(), |r, c| x.get(idx[r], c));
                        let target = match target {
                            Target::Values(y) => {
                                Target::Values(DenseMatrix::from_fn(idx.len(), y.cols(), |r, c| {
                                    y.get(idx[r], c)
                                }))
                            }
                            Target::Classes(l) => {
                                Target::Classes(idx.iter().map(|&i| l[i]).collect())
                            }
                        };
                        Batch {
                            input: BatchInput::Features(input),
                            target,
                        }
                    })
                    .collect())
            }
            Split::Tokens(ids) => {
                if ids.len() < 2 {
                    return Err(Error::invalid("token split too short"));
                }
                let len = context.min(ids.len() - 1);
                let mut starts: Vec<usize> = (0..)
                    .map(|i| i * len)
                    .take_while(|s| s + len < ids.len())
                    .collect();
                if let Some(rng) = shuffle {
                    starts.shuffle(rng);
                }
                Ok(starts
                    .chunks(batch_size)
                    .map(|chunk| {
                        let mut input = Vec::with_capacity(chunk.len() * len);
                        let mut target = Vec::with_capacity(chunk.len() * len);
                        for &s in chunk {
                            input.extend_from_slice(&ids[s..s + len]);
                            target.extend_from_slice(&ids[s + 1..s + len + 1]);
                        }
                        Batch {
                            input: BatchInput::Tokens {
                                ids: input,
                                batch: chunk.len(),
                                len,
                            },
                            target: Target::Classes(target),
                        }
                    })
                    .collect())
            }
        }
    }
}
