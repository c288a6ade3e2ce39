//! Synthetic tasks for the mock backend.
//!
//! Class `c` examples have ids `<prefix>-c<c>-<i>` and carry the marker token
//! `<c{c}>` in their text, which is how the mock recovers the latent class.
//! Label words occupy token ids `0..n_classes`; the remaining coordinates are
//! split into one equal-size group per class, and a class's prototype puts
//! extra weight `signal` on its own group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{MockBackend, MockConfig};
use crate::error::Result;
use crate::prompting::{LabelWord, LabeledExample, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub vocab_size: usize,
    /// Extra weight on each coordinate of the class's own non-label group.
    pub signal: f64,
    /// Base weight of each label-word coordinate.
    pub label_weight: f64,
    /// Extra weight on the class's own label word.
    pub label_signal: f64,
    /// Probability mass added to the first class's label word for every prompt.
    pub label_bias: f64,
    pub noise: f64,
    pub prefix_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 2,
            vocab_size: 32,
            signal: 1.0,
            label_weight: 1.0,
            label_signal: 0.0,
            label_bias: 0.0,
            noise: 0.0,
            prefix_noise: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn labels(&self) -> Vec<String> {
        if self.n_classes == 2 {
            vec!["negative".into(), "positive".into()]
        } else {
            (0..self.n_classes).map(|c| format!("class{c}")).collect()
        }
    }

    pub fn marker(class: usize) -> String {
        format!("<c{class}>")
    }

    pub fn task(&self) -> TaskSpec {
        let labels = self.labels();
        let verbalizer: BTreeMap<String, LabelWord> = labels
            .iter()
            .map(|l| (l.clone(), LabelWord::Word(l.clone())))
            .collect();
        TaskSpec::new("synthetic", labels, "Review: {text}\nSentiment: {label_word}", verbalizer)
            .expect("synthetic task is valid")
    }

    pub fn mock_config(&self) -> MockConfig {
        let n = self.n_classes;
        let v = self.vocab_size;
        let group = (v - n) / n;
        let prototypes = (0..n)
            .map(|c| {
                (0..v)
                    .map(|i| {
                        if i < n {
                            self.label_weight + if i == c { self.label_signal } else { 0.0 }
                        } else {
                            let g = (i - n) / group.max(1);
                            1.0 + if g == c { self.signal } else { 0.0 }
                        }
                    })
                    .collect()
            })
            .collect();
        let mut bias = vec![0.0; v];
        bias[0] = self.label_bias;
        MockConfig {
            model_id: "mock-synthetic".into(),
            vocab_size: v,
            hidden_size: 16,
            context_limit: 1 << 16,
            prototypes,
            class_markers: (0..n).map(Self::marker).collect(),
            bias,
            noise: self.noise,
            prefix_noise: self.prefix_noise,
            seed: self.seed,
            vocab: self
                .labels()
                .into_iter()
                .enumerate()
                .map(|(i, l)| (l, i as u32))
                .collect(),
        }
    }

    pub fn backend(&self) -> Result<MockBackend> {
        MockBackend::new(self.mock_config())
    }

    /// `per_class` examples of every class, classes interleaved.
    pub fn pool(&self, prefix: &str, per_class: usize) -> Vec<LabeledExample> {
        let labels = self.labels();
        (0..per_class)
            .flat_map(|i| {
                let labels = &labels;
                (0..self.n_classes).map(move |c| {
                    LabeledExample::new(
                        format!("{prefix}-c{c}-{i}"),
                        format!("{prefix} item {i} {}", Self::marker(c)),
                        labels[c].clone(),
                    )
                })
            })
            .collect()
    }
}
