//! Synthetic marker corpus for tests and demos: each class is defined by
//! three class-specific marker characters mixed with shared noise characters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Example, LoadedCorpus};

const CLASS_NAMES: [&str; 8] =
    ["sports", "finance", "science", "society", "game", "estate", "politics", "arts"];
const MARKERS: &str = "abcdefghijklmnopqrstuvwx"; // 3 per class, 8 classes max
const NOISE: &str = "0123456789+-*/=#@&%";

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub examples_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a position carries a class marker instead of noise.
    pub marker_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            examples_per_class: 140,
            min_len: 8,
            max_len: 20,
            marker_prob: 0.5,
            seed: 1,
        }
    }
}

/// Generate the corpus in class-major order, deterministically per seed.
pub fn marker_corpus(spec: &SyntheticSpec) -> LoadedCorpus {
    assert!(spec.classes >= 1 && spec.classes <= CLASS_NAMES.len());
    assert!(spec.min_len >= 1 && spec.min_len <= spec.max_len);
    let markers: Vec<char> = MARKERS.chars().collect();
    let noise: Vec<char> = NOISE.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut examples = Vec::with_capacity(spec.classes * spec.examples_per_class);
    for class in 0..spec.classes {
        let own = &markers[class * 3..class * 3 + 3];
        for _ in 0..spec.examples_per_class {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let text: String = (0..len)
                .map(|_| {
                    if rng.gen::<f64>() < spec.marker_prob {
                        own[rng.gen_range(0..3)]
                    } else {
                        noise[rng.gen_range(0..noise.len())]
                    }
                })
                .collect();
            examples.push(Example { text, label: class });
        }
    }
    LoadedCorpus {
        examples,
        labels: CLASS_NAMES[..spec.classes].iter().map(|s| s.to_string()).collect(),
    }
}
