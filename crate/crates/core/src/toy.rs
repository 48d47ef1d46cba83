//! Synthetic two-class corpus for desk-scale experiments.
//!
//! Tokens are `t0000 .. t{V-1}`. The first `k = max(2, V/10)` tokens form
//! the class-0 cue set, the next `k` the class-1 cue set, and the rest are
//! distractors. A sentence intended for class `y` contains `m ∈ {1,2,3}`
//! cues of class `y`, strictly fewer cues of the other class, and
//! distractors up to a length in `6..=14`, in random order. Labels are
//! exactly balanced before a 3% label flip, so the Bayes-optimal
//! classifier (count cues) reaches 0.97 accuracy in expectation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Probability that a generated label is flipped.
pub const LABEL_NOISE: f64 = 0.03;
/// Expected accuracy of the cue-counting rule on generated data.
pub const BAYES_ACCURACY: f64 = 1.0 - LABEL_NOISE;
pub const MIN_EXAMPLES: usize = 10;
pub const MIN_VOCAB: usize = 10;

fn token(i: usize) -> String {
    format!("t{i:04}")
}

/// Number of cue tokens per class for a vocabulary of `vocab_size`.
pub fn cue_set_size(vocab_size: usize) -> usize {
    (vocab_size / 10).max(2)
}

/// Generates the corpus as TSV text (`<label>\t<text>`, labels `0`/`1`).
pub fn gen_toy_corpus(n_examples: usize, vocab_size: usize, seed: u64) -> Result<String> {
    if n_examples < MIN_EXAMPLES {
        return Err(Error::invalid("n", format!("need at least {MIN_EXAMPLES} examples")));
    }
    if vocab_size < MIN_VOCAB {
        return Err(Error::invalid("vocab_size", format!("need at least {MIN_VOCAB} tokens")));
    }
    let k = cue_set_size(vocab_size);
    let cues = [(0..k).collect::<Vec<_>>(), (k..2 * k).collect::<Vec<_>>()];
    let distractors: Vec<usize> = (2 * k..vocab_size).collect();

    let mut rng = rng_from_seed(seed);
    let mut labels: Vec<usize> = (0..n_examples).map(|i| usize::from(i >= n_examples / 2)).collect();
    labels.shuffle(&mut rng);

    let mut out = String::new();
    writeln!(
        out,
        "# toy corpus: n={n_examples} vocab={vocab_size} seed={seed} cues_per_class={k} label_noise={LABEL_NOISE}"
    )
    .expect("writing to a String");
    for intended in labels {
        let len = rng.random_range(6..=14usize);
        let own = rng.random_range(1..=3usize);
        let other = rng.random_range(0..own);
        let mut words: Vec<usize> = Vec::with_capacity(len.max(own + other));
        for _ in 0..own {
            words.push(*cues[intended].choose(&mut rng).expect("nonempty"));
        }
        for _ in 0..other {
            words.push(*cues[1 - intended].choose(&mut rng).expect("nonempty"));
        }
        while words.len() < len {
            words.push(*distractors.choose(&mut rng).expect("vocab >= 10"));
        }
        words.shuffle(&mut rng);
        let label = if rng.random::<f64>() < LABEL_NOISE {
            1 - intended
        } else {
            intended
        };
        let text: Vec<String> = words.into_iter().map(token).collect();
        writeln!(out, "{label}\t{}", text.join(" ")).expect("writing to a String");
    }
    Ok(out)
}

pub fn write_toy_corpus(n_examples: usize, vocab_size: usize, seed: u64, path: &Path) -> Result<()> {
    let text = gen_toy_corpus(n_examples, vocab_size, seed)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Vec<(usize, Vec<String>)> {
        text.lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| {
                let (label, words) = l.split_once('\t').unwrap();
                (
                    label.parse().unwrap(),
                    words.split(' ').map(str::to_owned).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            gen_toy_corpus(500, 200, 7).unwrap(),
            gen_toy_corpus(500, 200, 7).unwrap()
        );
        assert_ne!(
            gen_toy_corpus(500, 200, 7).unwrap(),
            gen_toy_corpus(500, 200, 8).unwrap()
        );
    }

    #[test]
    fn labels_are_binary_and_balanced() {
        let rows = parse(&gen_toy_corpus(500, 200, 1).unwrap());
        assert_eq!(rows.len(), 500);
        assert!(rows.iter().all(|(l, _)| *l <= 1));
        let ones = rows.iter().filter(|(l, _)| *l == 1).count();
        let majority = ones.max(500 - ones) as f64 / 500.0;
        assert!((majority - 0.5).abs() <= 0.05, "majority {majority}");
    }

    #[test]
    fn cue_rule_is_near_bayes() {
        let k = cue_set_size(200);
        let rows = parse(&gen_toy_corpus(2000, 200, 3).unwrap());
        let correct = rows
            .iter()
            .filter(|(label, words)| {
                let idx = |w: &String| w[1..].parse::<usize>().unwrap();
                let c0 = words.iter().filter(|w| idx(w) < k).count();
                let c1 = words.iter().filter(|w| (k..2 * k).contains(&idx(w))).count();
                assert_ne!(c0, c1);
                usize::from(c1 > c0) == *label
            })
            .count();
        let acc = correct as f64 / rows.len() as f64;
        assert!(acc >= 0.95, "cue accuracy {acc}");
    }

    #[test]
    fn rejects_tiny_inputs() {
        assert!(gen_toy_corpus(9, 200, 0).is_err());
        assert!(gen_toy_corpus(100, 5, 0).is_err());
    }
}
