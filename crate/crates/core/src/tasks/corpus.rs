use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::{TaskError, CONTENT_START};
use crate::rng::Stream;

/// Parameters of the synthetic language.
///
/// Text is an order-2 Markov chain over content tokens mixed with a
/// per-document topic distribution: each next token follows the chain's
/// successor table with probability `markov_weight` and is otherwise drawn
/// from the topic, whose own tokens are `topic_affinity` times likelier.
#[derive(Clone, Debug, PartialEq)]
pub struct GrammarParams {
    pub seed: u64,
    pub vocab_size: usize,
    pub n_topics: usize,
    pub markov_weight: f64,
    pub topic_affinity: f64,
    /// Inclusive sentence length range.
    pub sentence_len: (usize, usize),
    /// Inclusive sentences-per-document range; the minimum is at least 2.
    pub doc_sentences: (usize, usize),
}

impl GrammarParams {
    pub fn new(seed: u64, vocab_size: usize) -> Self {
        Self {
            seed,
            vocab_size,
            n_topics: 4,
            markov_weight: 0.5,
            topic_affinity: 8.0,
            sentence_len: (4, 8),
            doc_sentences: (2, 6),
        }
    }
}

const SUCCESSOR_WEIGHTS: [f64; 3] = [0.6, 0.3, 0.1];

#[derive(Clone, Debug)]
pub struct Grammar {
    params: GrammarParams,
    n_content: usize,
    home_topic: Vec<usize>,
    topic_weights: Vec<Vec<f64>>,
    successors: Vec<[usize; 3]>,
}

impl Grammar {
    pub fn new(params: GrammarParams) -> Result<Self, TaskError> {
        if params.vocab_size < CONTENT_START + 4 {
            return Err(TaskError::VocabTooSmall(params.vocab_size));
        }
        let n_content = params.vocab_size - CONTENT_START;
        let bad = |m: &str| Err(TaskError::InvalidSpec(m.to_string()));
        if params.n_topics == 0 || params.n_topics > n_content {
            return bad("n_topics must be in 1..=content tokens");
        }
        if !(0.0..=1.0).contains(&params.markov_weight) || params.topic_affinity < 1.0 {
            return bad("markov_weight must be in [0,1] and topic_affinity >= 1");
        }
        let (lo, hi) = params.sentence_len;
        let (dlo, dhi) = params.doc_sentences;
        if lo == 0 || lo > hi || dlo < 2 || dlo > dhi {
            return bad("length ranges must be non-empty; documents need >= 2 sentences");
        }

        let mut rng = Stream::new(params.seed).split("grammar");
        let mut order: Vec<usize> = (0..n_content).collect();
        rng.shuffle(&mut order);
        let mut home_topic = vec![0; n_content];
        for (i, &c) in order.iter().enumerate() {
            home_topic[c] = i % params.n_topics;
        }
        let topic_weights = (0..params.n_topics)
            .map(|t| {
                home_topic
                    .iter()
                    .map(|&h| if h == t { params.topic_affinity } else { 1.0 })
                    .collect()
            })
            .collect();
        let successors = (0..n_content * n_content)
            .map(|_| {
                let a = rng.below(n_content);
                let mut b = rng.below(n_content);
                while b == a {
                    b = rng.below(n_content);
                }
                let mut c = rng.below(n_content);
                while c == a || c == b {
                    c = rng.below(n_content);
                }
                [a, b, c]
            })
            .collect();
        Ok(Self {
            params,
            n_content,
            home_topic,
            topic_weights,
            successors,
        })
    }

    pub fn params(&self) -> &GrammarParams {
        &self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.params.vocab_size
    }

    pub fn n_topics(&self) -> usize {
        self.params.n_topics
    }

    pub fn n_content(&self) -> usize {
        self.n_content
    }

    /// Topic whose distribution favours content token `token`.
    pub fn home_topic(&self, token: usize) -> Option<usize> {
        token
            .checked_sub(CONTENT_START)
            .and_then(|c| self.home_topic.get(c).copied())
    }

    pub fn random_content(&self, rng: &mut Stream) -> usize {
        CONTENT_START + rng.below(self.n_content)
    }

    pub fn sentence_len(&self, rng: &mut Stream) -> usize {
        let (lo, hi) = self.params.sentence_len;
        lo + rng.below(hi - lo + 1)
    }

    fn next_token(&self, topic: usize, state: Option<(usize, usize)>, markov_weight: f64, rng: &mut Stream) -> usize {
        let c = match state {
            Some((a, b)) if rng.bernoulli(markov_weight) => {
                let row = &self.successors[a * self.n_content + b];
                row[rng.weighted(&SUCCESSOR_WEIGHTS)]
            }
            _ => rng.weighted(&self.topic_weights[topic]),
        };
        CONTENT_START + c
    }

    /// The most probable successor of two content tokens under the chain.
    pub fn likely_successor(&self, a: usize, b: usize) -> Option<usize> {
        let (a, b) = (a.checked_sub(CONTENT_START)?, b.checked_sub(CONTENT_START)?);
        (a < self.n_content && b < self.n_content).then(|| CONTENT_START + self.successors[a * self.n_content + b][0])
    }

    /// Continue the chain from `state` for `len` tokens under `topic`.
    pub fn continue_text(
        &self,
        topic: usize,
        len: usize,
        state: &mut Option<(usize, usize)>,
        markov_weight: f64,
        rng: &mut Stream,
    ) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut prev: Option<usize> = state.map(|(_, b)| b + CONTENT_START);
        for _ in 0..len {
            let t = self.next_token(topic, *state, markov_weight, rng);
            if let Some(p) = prev {
                *state = Some((p - CONTENT_START, t - CONTENT_START));
            }
            prev = Some(t);
            out.push(t);
        }
        out
    }

    /// A fresh sentence: no chain history, default Markov weight.
    pub fn sentence(&self, topic: usize, rng: &mut Stream) -> Vec<usize> {
        let len = self.sentence_len(rng);
        self.continue_text(topic, len, &mut None, self.params.markov_weight, rng)
    }

    pub fn document(&self, topic: usize, rng: &mut Stream) -> Vec<Vec<usize>> {
        let (lo, hi) = self.params.doc_sentences;
        let n = lo + rng.below(hi - lo + 1);
        let mut state = None;
        (0..n)
            .map(|_| {
                let len = self.sentence_len(rng);
                self.continue_text(topic, len, &mut state, self.params.markov_weight, rng)
            })
            .collect()
    }
}

/// Documents of sentences of token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Vec<Vec<usize>>>,
    pub vocab_size: usize,
    /// Generator that produced the corpus; absent for imported corpora.
    pub params: Option<GrammarParams>,
}

impl Corpus {
    pub fn n_sentences(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.documents.is_empty() {
            return Err(TaskError::InvalidSpec("corpus has no documents".into()));
        }
        for (i, doc) in self.documents.iter().enumerate() {
            if doc.len() < 2 {
                return Err(TaskError::InvalidSpec(format!(
                    "document {i} has fewer than 2 sentences"
                )));
            }
            for s in doc {
                if let Some(&t) = s.iter().find(|&&t| t >= self.vocab_size) {
                    return Err(TaskError::TokenOutOfRange {
                        token: t,
                        vocab_size: self.vocab_size,
                    });
                }
                if s.is_empty() {
                    return Err(TaskError::InvalidSpec(format!("document {i} has an empty sentence")));
                }
            }
        }
        Ok(())
    }

    /// One sentence per line, tokens separated by spaces, a blank line between documents.
    pub fn export(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut text = String::new();
        for (i, doc) in self.documents.iter().enumerate() {
            if i > 0 {
                text.push('\n');
            }
            for s in doc {
                let mut first = true;
                for t in s {
                    if !first {
                        text.push(' ');
                    }
                    first = false;
                    write!(text, "{t}").expect("write to String");
                }
                text.push('\n');
            }
        }
        w.write_all(text.as_bytes())
    }

    pub fn import(r: impl BufRead, vocab_size: usize) -> Result<Corpus, TaskError> {
        let mut documents = Vec::new();
        let mut current: Vec<Vec<usize>> = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                if !current.is_empty() {
                    documents.push(std::mem::take(&mut current));
                }
                continue;
            }
            let sentence = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|e| TaskError::Parse {
                        line: n + 1,
                        message: format!("{tok:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            current.push(sentence);
        }
        if !current.is_empty() {
            documents.push(current);
        }
        let corpus = Corpus {
            documents,
            vocab_size,
            params: None,
        };
        corpus.validate()?;
        Ok(corpus)
    }
}

/// Deterministic corpus of `n_docs` documents, each with a uniformly drawn topic.
pub fn generate_corpus(grammar: &Grammar, seed: u64, n_docs: usize) -> Corpus {
    let mut rng = Stream::new(seed).split("corpus");
    let documents = (0..n_docs)
        .map(|_| {
            let topic = rng.below(grammar.n_topics());
            grammar.document(topic, &mut rng)
        })
        .collect();
    Corpus {
        documents,
        vocab_size: grammar.vocab_size(),
        params: Some(grammar.params().clone()),
    }
}
