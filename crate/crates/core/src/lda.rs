//! Latent Dirichlet allocation by collapsed Gibbs sampling.
//!
//! Training runs one sequential chain, so a seed fixes every assignment.
//! Fold-in inference holds the topic-word distributions fixed and resamples
//! only the new documents; each document gets its own random stream, so the
//! documents can be processed in parallel without changing the result.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::serde_rows;
use crate::par;
use crate::sparse::SparseCountMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdaConfig {
    pub topics: usize,
    /// Document-topic prior. `None` means `50 / topics`.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iterations: usize,
    pub infer_iterations: usize,
    pub seed: u64,
}

impl Default for LdaConfig {
    fn default() -> Self {
        LdaConfig {
            topics: 5,
            alpha: None,
            beta: 0.01,
            iterations: 1000,
            infer_iterations: 200,
            seed: 0,
        }
    }
}

impl LdaConfig {
    pub fn with_topics(topics: usize) -> Self {
        LdaConfig {
            topics,
            ..Default::default()
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.topics.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.topics == 0 {
            return Err(Error::InvalidConfig("lda topics must be >= 1".into()));
        }
        let alpha = self.alpha();
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("lda alpha must be > 0, got {alpha}")));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("lda beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Trained topic model: `phi` is topics x vocabulary, `theta` is documents x topics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    #[serde(rename = "K")]
    pub topics: usize,
    pub alpha: f64,
    pub beta: f64,
    pub vocabulary: Vec<String>,
    #[serde(with = "serde_rows")]
    pub phi: Array2<f64>,
    pub seed: u64,
    /// Training-document proportions. Not part of the serialized model.
    #[serde(skip)]
    pub theta: Array2<f64>,
}

/// Chain state for collapsed Gibbs sampling over a fixed corpus.
pub struct GibbsSampler {
    topics: usize,
    vocab_size: usize,
    alpha: f64,
    beta: f64,
    doc_of: Vec<u32>,
    word_of: Vec<u32>,
    assignment: Vec<u32>,
    /// Word-major: `word_topic[w * topics + k]`.
    word_topic: Vec<u32>,
    topic_total: Vec<u64>,
    doc_topic: Vec<u32>,
    doc_len: Vec<u32>,
    weights: Vec<f64>,
    rng: ChaCha8Rng,
    sweeps: usize,
}

/// Samples an index proportional to `weights[..]`, given their sum.
fn draw(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut u = rng.gen::<f64>() * total;
    for (k, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return k;
        }
    }
    weights.len() - 1
}

/// Token order within a document follows the vocabulary strings, not their
/// indices, so relabeling the vocabulary yields the same chain.
fn word_order(corpus: &SparseCountMatrix, doc: usize, vocabulary: &[String]) -> Vec<(usize, u64)> {
    let mut entries = corpus.row(doc).to_vec();
    entries.sort_by(|a, b| vocabulary[a.0].cmp(&vocabulary[b.0]));
    entries
}

impl GibbsSampler {
    pub fn new(corpus: &SparseCountMatrix, vocabulary: &[String], config: &LdaConfig) -> Result<Self> {
        config.validate()?;
        if vocabulary.len() != corpus.n_cols() {
            return Err(Error::Shape(format!(
                "vocabulary has {} words, corpus has {} columns",
                vocabulary.len(),
                corpus.n_cols()
            )));
        }
        let total = corpus.total();
        if corpus.n_rows() == 0 || total == 0 {
            return Err(Error::Empty("lda corpus has no tokens".into()));
        }
        if config.topics as u64 > total {
            return Err(Error::InvalidConfig(format!(
                "{} topics exceed the {} corpus tokens",
                config.topics, total
            )));
        }
        let k = config.topics;
        let v = corpus.n_cols();
        let d = corpus.n_rows();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut doc_of = Vec::with_capacity(total as usize);
        let mut word_of = Vec::with_capacity(total as usize);
        let mut assignment = Vec::with_capacity(total as usize);
        let mut word_topic = vec![0u32; v * k];
        let mut topic_total = vec![0u64; k];
        let mut doc_topic = vec![0u32; d * k];
        let mut doc_len = vec![0u32; d];
        for doc in 0..d {
            for (w, count) in word_order(corpus, doc, vocabulary) {
                for _ in 0..count {
                    let z = rng.gen_range(0..k);
                    doc_of.push(doc as u32);
                    word_of.push(w as u32);
                    assignment.push(z as u32);
                    word_topic[w * k + z] += 1;
                    topic_total[z] += 1;
                    doc_topic[doc * k + z] += 1;
                    doc_len[doc] += 1;
                }
            }
        }
        Ok(GibbsSampler {
            topics: k,
            vocab_size: v,
            alpha: config.alpha(),
            beta: config.beta,
            doc_of,
            word_of,
            assignment,
            word_topic,
            topic_total,
            doc_topic,
            doc_len,
            weights: vec![0.0; k],
            rng,
            sweeps: 0,
        })
    }

    /// One full pass resampling every token's topic.
    pub fn sweep(&mut self) {
        let k = self.topics;
        let v_beta = self.vocab_size as f64 * self.beta;
        for t in 0..self.assignment.len() {
            let d = self.doc_of[t] as usize;
            let w = self.word_of[t] as usize;
            let old = self.assignment[t] as usize;
            self.word_topic[w * k + old] -= 1;
            self.topic_total[old] -= 1;
            self.doc_topic[d * k + old] -= 1;

            let mut total = 0.0;
            for z in 0..k {
                let p = (self.doc_topic[d * k + z] as f64 + self.alpha)
                    * (self.word_topic[w * k + z] as f64 + self.beta)
                    / (self.topic_total[z] as f64 + v_beta);
                self.weights[z] = p;
                total += p;
            }
            let new = draw(&self.weights, total, &mut self.rng);

            self.assignment[t] = new as u32;
            self.word_topic[w * k + new] += 1;
            self.topic_total[new] += 1;
            self.doc_topic[d * k + new] += 1;
        }
        self.sweeps += 1;
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    pub fn assignments(&self) -> &[u32] {
        &self.assignment
    }

    pub fn token_count(&self) -> usize {
        self.assignment.len()
    }

    /// Sum of the topic-word count table.
    pub fn counted_tokens(&self) -> u64 {
        self.word_topic.iter().map(|&c| c as u64).sum()
    }

    pub fn topic_totals(&self) -> &[u64] {
        &self.topic_total
    }

    /// `(n_kw + beta) / (n_k + V beta)`.
    pub fn phi(&self) -> Array2<f64> {
        let k = self.topics;
        let v_beta = self.vocab_size as f64 * self.beta;
        Array2::from_shape_fn((k, self.vocab_size), |(z, w)| {
            (self.word_topic[w * k + z] as f64 + self.beta) / (self.topic_total[z] as f64 + v_beta)
        })
    }

    /// `(n_dk + alpha) / (n_d + K alpha)`.
    pub fn theta(&self) -> Array2<f64> {
        let k = self.topics;
        let k_alpha = k as f64 * self.alpha;
        Array2::from_shape_fn((self.doc_len.len(), k), |(d, z)| {
            (self.doc_topic[d * k + z] as f64 + self.alpha) / (self.doc_len[d] as f64 + k_alpha)
        })
    }

    /// Per-token perplexity of the training corpus under the current state.
    pub fn training_perplexity(&self) -> f64 {
        let phi = self.phi();
        let theta = self.theta();
        let mut log_lik = 0.0;
        for t in 0..self.assignment.len() {
            let d = self.doc_of[t] as usize;
            let w = self.word_of[t] as usize;
            let p: f64 = (0..self.topics).map(|z| theta[[d, z]] * phi[[z, w]]).sum();
            log_lik += p.ln();
        }
        (-log_lik / self.assignment.len() as f64).exp()
    }

    pub fn into_model(self, vocabulary: &[String], seed: u64) -> TopicModel {
        TopicModel {
            topics: self.topics,
            alpha: self.alpha,
            beta: self.beta,
            vocabulary: vocabulary.to_vec(),
            phi: self.phi(),
            theta: self.theta(),
            seed,
        }
    }
}

/// Trains a topic model for `config.iterations` sweeps.
pub fn train(corpus: &SparseCountMatrix, vocabulary: &[String], config: &LdaConfig) -> Result<TopicModel> {
    let mut sampler = GibbsSampler::new(corpus, vocabulary, config)?;
    for _ in 0..config.iterations {
        sampler.sweep();
    }
    Ok(sampler.into_model(vocabulary, config.seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub theta: Array2<f64>,
    /// Tokens dropped because their word is not in the model vocabulary.
    pub oov_tokens: u64,
    /// Documents left with no tokens; their rows are uniform.
    pub uniform_rows: Vec<usize>,
}

impl TopicModel {
    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    /// Maps each column of `docs` (named by `doc_vocabulary`) to a model word.
    fn column_map(&self, doc_vocabulary: &[String]) -> Vec<Option<usize>> {
        let lookup: std::collections::HashMap<&str, usize> = self
            .vocabulary
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i))
            .collect();
        doc_vocabulary.iter().map(|w| lookup.get(w.as_str()).copied()).collect()
    }

    /// Fold-in inference. Returns proportions averaged over the second half of
    /// the sweeps.
    pub fn infer(
        &self,
        docs: &SparseCountMatrix,
        doc_vocabulary: &[String],
        iterations: usize,
        seed: u64,
    ) -> Result<Inference> {
        if doc_vocabulary.len() != docs.n_cols() {
            return Err(Error::Shape(format!(
                "vocabulary has {} words, documents have {} columns",
                doc_vocabulary.len(),
                docs.n_cols()
            )));
        }
        let map = self.column_map(doc_vocabulary);
        let k = self.topics;
        let per_doc = par::map_range(docs.n_rows(), |d| {
            let mut oov = 0u64;
            let mut words: Vec<(String, usize, u64)> = Vec::new();
            for &(c, count) in docs.row(d) {
                match map[c] {
                    Some(w) => words.push((self.vocabulary[w].clone(), w, count)),
                    None => oov += count,
                }
            }
            words.sort();
            let tokens: Vec<usize> = words
                .iter()
                .flat_map(|(_, w, count)| std::iter::repeat(*w).take(*count as usize))
                .collect();
            if tokens.is_empty() {
                return (Array1::from_elem(k, 1.0 / k as f64), oov, true);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d as u64);
            (self.fold_in(&tokens, iterations, &mut rng), oov, false)
        });

        let mut theta = Array2::zeros((docs.n_rows(), k));
        let mut oov_tokens = 0;
        let mut uniform_rows = Vec::new();
        for (d, (row, oov, uniform)) in per_doc.into_iter().enumerate() {
            theta.row_mut(d).assign(&row);
            oov_tokens += oov;
            if uniform {
                log::warn!("document {d} has no in-vocabulary tokens; uniform proportions");
                uniform_rows.push(d);
            }
        }
        Ok(Inference {
            theta,
            oov_tokens,
            uniform_rows,
        })
    }

    fn fold_in(&self, tokens: &[usize], iterations: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let k = self.topics;
        let n = tokens.len() as f64;
        let k_alpha = k as f64 * self.alpha;
        let mut counts = vec![0u32; k];
        let mut z: Vec<usize> = tokens.iter().map(|_| rng.gen_range(0..k)).collect();
        for &t in &z {
            counts[t] += 1;
        }
        let mut weights = vec![0.0; k];
        let estimate = |counts: &[u32]| {
            Array1::from_iter(counts.iter().map(|&c| (c as f64 + self.alpha) / (n + k_alpha)))
        };
        let burn_in = iterations / 2;
        let mut acc = Array1::<f64>::zeros(k);
        let mut kept = 0usize;
        for it in 0..iterations {
            for (i, &w) in tokens.iter().enumerate() {
                counts[z[i]] -= 1;
                let mut total = 0.0;
                for t in 0..k {
                    let p = (counts[t] as f64 + self.alpha) * self.phi[[t, w]];
                    weights[t] = p;
                    total += p;
                }
                let new = draw(&weights, total, rng);
                z[i] = new;
                counts[new] += 1;
            }
            if it >= burn_in {
                acc += &estimate(&counts);
                kept += 1;
            }
        }
        if kept == 0 {
            estimate(&counts)
        } else {
            acc / kept as f64
        }
    }

    /// The `k` most probable words of `topic`, ties broken by vocabulary order.
    pub fn top_words(&self, topic: usize, k: usize) -> Result<Vec<(String, f64)>> {
        if topic >= self.topics {
            return Err(Error::InvalidConfig(format!(
                "topic {topic} out of range for {} topics",
                self.topics
            )));
        }
        let row = self.phi.row(topic);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        Ok(order
            .into_iter()
            .take(k)
            .map(|w| (self.vocabulary[w].clone(), row[w]))
            .collect())
    }

    /// `exp(-sum log sum_k theta_dk phi_kw / N)` over held-out tokens, with
    /// `theta` from fold-in inference.
    pub fn perplexity(
        &self,
        heldout: &SparseCountMatrix,
        doc_vocabulary: &[String],
        iterations: usize,
        seed: u64,
    ) -> Result<f64> {
        let inference = self.infer(heldout, doc_vocabulary, iterations, seed)?;
        let map = self.column_map(doc_vocabulary);
        let mut log_lik = 0.0;
        let mut tokens = 0u64;
        for d in 0..heldout.n_rows() {
            for &(c, count) in heldout.row(d) {
                let Some(w) = map[c] else { continue };
                let p: f64 = (0..self.topics)
                    .map(|z| inference.theta[[d, z]] * self.phi[[z, w]])
                    .sum();
                log_lik += count as f64 * p.ln();
                tokens += count;
            }
        }
        if tokens == 0 {
            return Err(Error::Empty("held-out corpus has no in-vocabulary tokens".into()));
        }
        Ok((-log_lik / tokens as f64).exp())
    }
}
