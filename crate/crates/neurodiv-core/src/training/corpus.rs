//! Seeded synthetic byte corpus: each sequence repeats one of a small set of
//! byte templates at a random phase, with per-byte noise. The repetition
//! gives streams memorizable structure to specialize on; the noise keeps the
//! task from being trivially solvable.

use rand::Rng;

use crate::autodiff::{Real, Tensor};
use crate::model::{BOS_TOKEN, EOS_TOKEN};
use crate::seeding::SeedTree;

use super::TrainingError;

/// Which half of the corpus a sample index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// Shape of the synthetic corpus: how many templates, how long they are,
/// how noisy the copies are, and how many sequences each split holds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusConfig {
    /// Number of distinct byte templates.
    pub templates: usize,
    /// Bytes per template.
    pub template_len: usize,
    /// Probability that a copied byte is replaced by a uniform random byte.
    pub noise: f64,
    /// Sequences in the training split.
    pub train_sequences: usize,
    /// Sequences in the held-out split.
    pub eval_sequences: usize,
    /// Tokens per sequence, including the leading start-of-sequence token.
    pub seq_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            templates: 8,
            template_len: 16,
            noise: 0.05,
            train_sequences: 2048,
            eval_sequences: 256,
            seq_len: 128,
        }
    }
}

/// One tokenized sequence: model inputs, next-token targets, and the
/// template and phase it was copied from (the multiple-choice probe uses
/// them to reconstruct the candidate continuations).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<u16>,
    pub targets: Vec<u16>,
    pub template: usize,
    pub phase: usize,
}

/// Deterministic synthetic corpus. Every sample is a pure function of
/// (config, seed, split, index), so regeneration is bit-identical and no
/// sequence data needs to be stored.
#[derive(Debug, Clone)]
pub struct Corpus {
    config: CorpusConfig,
    tree: SeedTree,
    templates: Vec<Vec<u8>>,
}

impl Corpus {
    pub fn new(config: CorpusConfig, seed: u64) -> Result<Self, TrainingError> {
        for (value, name) in [
            (config.templates, "corpus templates"),
            (config.template_len, "corpus template_len"),
            (config.train_sequences, "corpus train_sequences"),
            (config.eval_sequences, "corpus eval_sequences"),
        ] {
            if value == 0 {
                return Err(TrainingError::ZeroField(name));
            }
        }
        if config.seq_len < 2 {
            return Err(TrainingError::ZeroField("corpus seq_len"));
        }
        if !(0.0..=1.0).contains(&config.noise) {
            return Err(TrainingError::BadDropout(config.noise));
        }
        let tree = SeedTree::new(seed);
        let templates = (0..config.templates)
            .map(|t| {
                let mut rng = tree.rng_indexed("template", t as u64);
                (0..config.template_len).map(|_| rng.gen::<u8>()).collect()
            })
            .collect();
        Ok(Corpus {
            config,
            tree,
            templates,
        })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.config
    }

    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.config.train_sequences,
            Split::Eval => self.config.eval_sequences,
        }
    }

    /// Total tokens across both splits.
    pub fn token_count(&self) -> usize {
        (self.config.train_sequences + self.config.eval_sequences) * self.config.seq_len
    }

    pub fn template_count(&self) -> usize {
        self.templates.len()
    }

    pub fn template(&self, t: usize) -> &[u8] {
        &self.templates[t]
    }

    /// Raw byte stream of `len` bytes copied from template `t` starting at
    /// `phase`, with per-byte noise drawn from `rng`.
    fn noisy_copy<R: Rng>(&self, t: usize, phase: usize, len: usize, rng: &mut R) -> Vec<u8> {
        let template = &self.templates[t];
        (0..len)
            .map(|j| {
                let byte = template[(phase + j) % template.len()];
                if self.config.noise > 0.0 && rng.gen_bool(self.config.noise) {
                    rng.gen::<u8>()
                } else {
                    byte
                }
            })
            .collect()
    }

    /// Regenerate one sample. The framed stream is
    /// `[BOS, b_0 .. b_{L-2}, EOS]`; tokens are its first `seq_len` entries
    /// and targets the last `seq_len`, so the model predicts every byte and
    /// the end-of-sequence marker.
    pub fn sample(&self, split: Split, index: usize) -> Result<Sample, TrainingError> {
        let len = self.len(split);
        if index >= len {
            return Err(TrainingError::SampleOutOfRange { split, len, index });
        }
        let mut rng = self
            .tree
            .child(split.name())
            .rng_indexed("sample", index as u64);
        let template = rng.gen_range(0..self.config.templates);
        let phase = rng.gen_range(0..self.config.template_len);
        let bytes = self.noisy_copy(template, phase, self.config.seq_len - 1, &mut rng);

        let mut stream = Vec::with_capacity(self.config.seq_len + 1);
        stream.push(BOS_TOKEN as u16);
        stream.extend(bytes.iter().map(|&b| b as u16));
        stream.push(EOS_TOKEN as u16);
        Ok(Sample {
            tokens: stream[..self.config.seq_len].to_vec(),
            targets: stream[1..].to_vec(),
            template,
            phase,
        })
    }

    /// Stack samples into (tokens, targets) tensors of shape
    /// (indices.len(), seq_len).
    pub fn batch<T: Real>(
        &self,
        split: Split,
        indices: &[usize],
    ) -> Result<(Tensor<T>, Tensor<T>), TrainingError> {
        let seq = self.config.seq_len;
        let mut tokens = Vec::with_capacity(indices.len() * seq);
        let mut targets = Vec::with_capacity(indices.len() * seq);
        for &index in indices {
            let sample = self.sample(split, index)?;
            tokens.extend(sample.tokens.iter().map(|&t| t as f64));
            targets.extend(sample.targets.iter().map(|&t| t as f64));
        }
        let shape = [indices.len(), seq];
        Ok((
            Tensor::from_f64s(&shape, &tokens)?,
            Tensor::from_f64s(&shape, &targets)?,
        ))
    }
}
