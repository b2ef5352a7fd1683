use super::{DownstreamBatch, DownstreamKind, DownstreamTask, FinetuneError, Result};
use crate::rng::Stream;
use crate::tasks::{pack_pair, pad_sequences, Grammar, CLS, MASK, SEP};

/// Example counts per split and examples per batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub batch_size: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self {
            train: 256,
            dev: 128,
            test: 256,
            batch_size: 16,
        }
    }
}

pub const CLOZE_CANDIDATES: usize = 4;
const MAX_MAJORITY: f64 = 0.55;
const MAX_ATTEMPTS: u64 = 10;

struct Example {
    tokens: Vec<usize>,
    segments: Vec<usize>,
    label: usize,
    blank: Option<(usize, [usize; CLOZE_CANDIDATES])>,
}

fn single_sentence(grammar: &Grammar, label: usize, rng: &mut Stream) -> Example {
    // Topics split into two classes by parity.
    let in_class: Vec<usize> = (0..grammar.n_topics()).filter(|t| t % 2 == label).collect();
    let topic = in_class[rng.below(in_class.len())];
    let s = grammar.sentence(topic, rng);
    let mut tokens = Vec::with_capacity(s.len() + 2);
    tokens.push(CLS);
    tokens.extend_from_slice(&s);
    tokens.push(SEP);
    let n = tokens.len();
    Example {
        tokens,
        segments: vec![0; n],
        label,
        blank: None,
    }
}

fn sentence_pair(grammar: &Grammar, label: usize, rng: &mut Stream) -> Example {
    let same = label == 1;
    let n_topics = grammar.n_topics();
    let ta = rng.below(n_topics);
    let tb = if same {
        ta
    } else {
        (ta + 1 + rng.below(n_topics - 1)) % n_topics
    };
    let a = grammar.sentence(ta, rng);
    let b = grammar.sentence(tb, rng);
    let (tokens, segments) = pack_pair(&a, &b);
    Example {
        tokens,
        segments,
        label,
        blank: None,
    }
}

fn cloze(grammar: &Grammar, label: usize, rng: &mut Stream) -> Example {
    // A context sentence, then a continuation with one blank after at least
    // two tokens of chain history.
    let topic = rng.below(grammar.n_topics());
    let markov = grammar.params().markov_weight;
    let mut state = None;
    let len_a = grammar.sentence_len(rng);
    let a = grammar.continue_text(topic, len_a, &mut state, markov, rng);
    let len_b = grammar.sentence_len(rng).max(3);
    let mut b = grammar.continue_text(topic, len_b, &mut state, markov, rng);
    let at = 2 + rng.below(len_b - 2);
    let answer = b[at];
    b[at] = MASK;
    let mut candidates = [answer; CLOZE_CANDIDATES];
    for i in 1..CLOZE_CANDIDATES {
        let mut c = grammar.random_content(rng);
        while candidates[..i].contains(&c) {
            c = grammar.random_content(rng);
        }
        candidates[i] = c;
    }
    candidates.swap(0, label);
    let (tokens, segments) = pack_pair(&a, &b);
    Example {
        tokens,
        segments,
        label,
        blank: Some((a.len() + 2 + at, candidates)),
    }
}

fn batches(examples: Vec<Example>, batch_size: usize) -> Vec<DownstreamBatch> {
    examples
        .chunks(batch_size)
        .map(|chunk| {
            let seqs: Vec<_> = chunk.iter().map(|e| (e.tokens.clone(), e.segments.clone())).collect();
            let blanks: Vec<_> = chunk.iter().filter_map(|e| e.blank).collect();
            DownstreamBatch {
                input: pad_sequences(&seqs),
                labels: chunk.iter().map(|e| e.label).collect(),
                blank_positions: blanks.iter().enumerate().map(|(i, b)| (i, b.0)).collect(),
                candidates: blanks.iter().map(|b| b.1).collect(),
            }
        })
        .collect()
}

fn majority_rate(examples: &[Example], n_classes: usize) -> f64 {
    let mut counts = vec![0usize; n_classes];
    for e in examples {
        counts[e.label] += 1;
    }
    *counts.iter().max().expect("n_classes > 0") as f64 / examples.len() as f64
}

/// Deterministic synthetic downstream task with labels balanced per split.
///
/// The majority-class rate of every split is still checked; a failing seed is
/// retried with the next one.
pub fn synth_downstream(kind: DownstreamKind, grammar: &Grammar, seed: u64, sizes: Sizes) -> Result<DownstreamTask> {
    if sizes.train < 32 || sizes.dev < 32 || sizes.test < 32 || sizes.batch_size == 0 {
        return Err(FinetuneError::InvalidTask(format!(
            "split sizes must be >= 32 and batch_size positive, got {sizes:?}"
        )));
    }
    if kind == DownstreamKind::Cloze && grammar.n_content() < CLOZE_CANDIDATES {
        return Err(FinetuneError::InvalidTask(
            "too few content tokens for cloze candidates".into(),
        ));
    }
    if kind != DownstreamKind::Cloze && grammar.n_topics() < 2 {
        return Err(FinetuneError::InvalidTask(
            "classification tasks need at least 2 topics".into(),
        ));
    }
    let n_classes = kind.n_classes();
    for attempt in 0..MAX_ATTEMPTS {
        let root = Stream::new(seed.wrapping_add(attempt)).split(kind.name());
        let make = |split: &str, n: usize| {
            let mut rng = root.split(split);
            let mut labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
            rng.shuffle(&mut labels);
            labels
                .into_iter()
                .map(|label| match kind {
                    DownstreamKind::SingleSentenceCls => single_sentence(grammar, label, &mut rng),
                    DownstreamKind::PairCls => sentence_pair(grammar, label, &mut rng),
                    DownstreamKind::Cloze => cloze(grammar, label, &mut rng),
                })
                .collect::<Vec<_>>()
        };
        let (train, dev, test) = (
            make("train", sizes.train),
            make("dev", sizes.dev),
            make("test", sizes.test),
        );
        if [&train, &dev, &test]
            .iter()
            .any(|s| majority_rate(s, n_classes) > MAX_MAJORITY)
        {
            continue;
        }
        return Ok(DownstreamTask {
            kind,
            n_classes,
            name: format!("{}-{seed}", kind.name()),
            train: batches(train, sizes.batch_size),
            dev: batches(dev, sizes.batch_size),
            test: batches(test, sizes.batch_size),
        });
    }
    Err(FinetuneError::DegenerateTask {
        seed,
        attempts: MAX_ATTEMPTS,
    })
}
