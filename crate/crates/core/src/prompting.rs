//! Task templates, verbalizers and prompt assembly.
//!
//! A task template is a pattern string with the literal placeholders
//! `{text}`, `{text_pair}` and `{label_word}`. Rendering a demonstration
//! substitutes the gold label word; rendering a query stops at the label cue
//! (`"Sentiment:"`) with no trailing space.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One classification instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_pair: Option<String>,
    pub label: String,
}

impl LabeledExample {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            text_pair: None,
            label: label.into(),
        }
    }

    pub fn with_pair(mut self, pair: impl Into<String>) -> Self {
        self.text_pair = Some(pair.into());
        self
    }
}

/// A label word, optionally with token ids pinned in the task file.
///
/// Pinned ids take precedence over the backend tokenizer, which is useful
/// when the model server does not expose a tokenize endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelWord {
    Word(String),
    Pinned { word: String, token_ids: Vec<u32> },
}

impl LabelWord {
    pub fn word(&self) -> &str {
        match self {
            LabelWord::Word(w) => w,
            LabelWord::Pinned { word, .. } => word,
        }
    }

    pub fn pinned_ids(&self) -> Option<&[u32]> {
        match self {
            LabelWord::Word(_) => None,
            LabelWord::Pinned { token_ids, .. } => Some(token_ids),
        }
    }
}

impl From<&str> for LabelWord {
    fn from(w: &str) -> Self {
        LabelWord::Word(w.to_string())
    }
}

fn default_separator() -> String {
    "\n".to_string()
}

/// Template, verbalizer and label space of a classification task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub label_space: Vec<String>,
    pub template: String,
    pub verbalizer: BTreeMap<String, LabelWord>,
    #[serde(default = "default_separator")]
    pub example_separator: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment<'a> {
    Literal(&'a str),
    Text,
    TextPair,
    LabelWord,
}

fn parse_template(template: &str) -> Vec<Segment<'_>> {
    const PLACEHOLDERS: [(&str, Segment<'static>); 3] = [
        ("{text_pair}", Segment::TextPair),
        ("{text}", Segment::Text),
        ("{label_word}", Segment::LabelWord),
    ];
    let mut segments = Vec::new();
    let mut rest = template;
    let mut literal_start = 0;
    let mut offset = 0;
    while let Some(pos) = rest.find('{') {
        let at = &rest[pos..];
        match PLACEHOLDERS.iter().find(|(p, _)| at.starts_with(p)) {
            Some((p, seg)) => {
                let abs = offset + pos;
                if abs > literal_start {
                    segments.push(Segment::Literal(&template[literal_start..abs]));
                }
                segments.push(*seg);
                literal_start = abs + p.len();
                offset = literal_start;
                rest = &template[literal_start..];
            }
            None => {
                offset += pos + 1;
                rest = &template[offset..];
            }
        }
    }
    if literal_start < template.len() {
        segments.push(Segment::Literal(&template[literal_start..]));
    }
    segments
}

impl TaskSpec {
    /// Build and validate a task.
    pub fn new(
        name: impl Into<String>,
        label_space: Vec<String>,
        template: impl Into<String>,
        verbalizer: BTreeMap<String, LabelWord>,
    ) -> Result<Self> {
        let task = Self {
            name: name.into(),
            label_space,
            template: template.into(),
            verbalizer,
            example_separator: default_separator(),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let task: TaskSpec = serde_json::from_str(s)?;
        task.validate()?;
        Ok(task)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path.as_ref())?;
        Self::from_json_str(&s).map_err(|e| e.context(path.as_ref().display().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_space.is_empty() {
            return Err(Error::InvalidTask("empty label space".into()));
        }
        let mut seen = HashSet::new();
        for label in &self.label_space {
            if !seen.insert(label.as_str()) {
                return Err(Error::InvalidTask(format!("duplicate label `{label}`")));
            }
        }
        let mut words = HashSet::new();
        for label in &self.label_space {
            let lw = self
                .verbalizer
                .get(label)
                .ok_or_else(|| Error::InvalidTask(format!("label `{label}` has no label word")))?;
            if lw.word().trim().is_empty() {
                return Err(Error::InvalidTask(format!("label `{label}` has an empty label word")));
            }
            if lw.pinned_ids().is_some_and(|ids| ids.is_empty()) {
                return Err(Error::InvalidTask(format!("label `{label}` pins zero token ids")));
            }
            if !words.insert(lw.word()) {
                return Err(Error::InvalidTask(format!(
                    "label word `{}` is used by more than one class",
                    lw.word()
                )));
            }
        }
        let segments = parse_template(&self.template);
        if !segments.contains(&Segment::Text) {
            return Err(Error::InvalidTask("template has no {text} placeholder".into()));
        }
        let n_label = segments.iter().filter(|s| **s == Segment::LabelWord).count();
        if n_label != 1 {
            return Err(Error::InvalidTask(format!(
                "template must contain exactly one {{label_word}}, found {n_label}"
            )));
        }
        Ok(())
    }

    /// Index of `label` in the label space.
    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.label_space
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn uses_text_pair(&self) -> bool {
        parse_template(&self.template).contains(&Segment::TextPair)
    }

    /// The literal text the template places directly before `{label_word}`,
    /// trimmed, e.g. `"Sentiment:"`.
    pub fn label_cue(&self) -> &str {
        let segments = parse_template(&self.template);
        let pos = segments
            .iter()
            .position(|s| *s == Segment::LabelWord)
            .unwrap_or(0);
        match pos.checked_sub(1).map(|i| segments[i]) {
            Some(Segment::Literal(lit)) => {
                let lit = lit.trim_end();
                let start = lit.rfind(char::is_whitespace).map_or(0, |i| i + 1);
                &lit[start..]
            }
            _ => "",
        }
    }
}

/// Token counting and ids under a backend tokenizer.
pub trait Tokenizer {
    fn count_tokens(&self, text: &str) -> Result<usize>;
    fn tokenize(&self, text: &str) -> Result<Vec<u32>>;
}

/// A rendered prompt with its size under the tokenizer that built it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub token_count: usize,
    pub demo_ids: Vec<String>,
}

/// Render one example through the task template.
///
/// With `with_label = false` the output ends exactly at the label cue.
pub fn render_example(task: &TaskSpec, ex: &LabeledExample, with_label: bool) -> Result<String> {
    if ex.text.is_empty() {
        return Err(Error::MissingField {
            id: ex.id.clone(),
            field: "text",
        });
    }
    let mut out = String::with_capacity(task.template.len() + ex.text.len() + 16);
    for seg in parse_template(&task.template) {
        match seg {
            Segment::Literal(lit) => out.push_str(lit),
            Segment::Text => out.push_str(&ex.text),
            Segment::TextPair => match ex.text_pair.as_deref() {
                Some(pair) if !pair.is_empty() => out.push_str(pair),
                _ => {
                    return Err(Error::MissingField {
                        id: ex.id.clone(),
                        field: "text_pair",
                    })
                }
            },
            Segment::LabelWord => {
                if !with_label {
                    let trimmed = out.trim_end_matches([' ', '\t']).len();
                    out.truncate(trimmed);
                    return Ok(out);
                }
                let word = task
                    .verbalizer
                    .get(&ex.label)
                    .ok_or_else(|| Error::UnknownLabel(ex.label.clone()))?;
                out.push_str(word.word());
            }
        }
    }
    Ok(out)
}

/// Concatenate labeled demonstrations and the unlabeled query.
pub fn build_prompt<T: Tokenizer + ?Sized>(
    task: &TaskSpec,
    demos: &[LabeledExample],
    query: &LabeledExample,
    tokenizer: &T,
) -> Result<Prompt> {
    let mut parts = Vec::with_capacity(demos.len() + 1);
    for d in demos {
        parts.push(render_example(task, d, true)?);
    }
    parts.push(render_example(task, query, false)?);
    let text = parts.join(&task.example_separator);
    let token_count = tokenizer.count_tokens(&text)?;
    Ok(Prompt {
        text,
        token_count,
        demo_ids: demos.iter().map(|d| d.id.clone()).collect(),
    })
}

/// First token id of each label word, in label-space order.
pub fn label_token_ids<T: Tokenizer + ?Sized>(task: &TaskSpec, tokenizer: &T) -> Result<Vec<u32>> {
    let mut ids = Vec::with_capacity(task.label_space.len());
    for label in &task.label_space {
        let lw = task
            .verbalizer
            .get(label)
            .ok_or_else(|| Error::UnknownLabel(label.clone()))?;
        let first = match lw.pinned_ids() {
            Some(pinned) => pinned.first().copied(),
            // Label words follow the cue after a space in rendered prompts.
            None => tokenizer.tokenize(&format!(" {}", lw.word()))?.first().copied(),
        };
        let first = first.ok_or_else(|| {
            Error::InvalidTask(format!("label word `{}` tokenizes to nothing", lw.word()))
        })?;
        if let Some(prev) = ids.iter().position(|&id| id == first) {
            return Err(Error::CollidingLabels {
                first: task.label_space[prev].clone(),
                second: label.clone(),
                token: first,
            });
        }
        ids.push(first);
    }
    Ok(ids)
}

/// Context-budget statistics for a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotBudget {
    pub context_limit: usize,
    pub truncation_budget: f64,
    /// Largest per-class shot count within the budget.
    pub max_shots: usize,
    /// Measured truncation probability at `max_shots`.
    pub truncation_probability: f64,
    /// `(m, truncation probability)` for every shot count evaluated.
    pub curve: Vec<(usize, f64)>,
}

/// Monte-Carlo estimate of the maximum shots per class that fit the context.
///
/// Each shot count `m` draws `trials` prompts of `m` examples per class in
/// random order plus one random query, from an RNG stream keyed by `(seed, m)`,
/// so a given `m` always sees the same compositions regardless of the limit.
#[allow(clippy::too_many_arguments)]
pub fn max_shots<T: Tokenizer + ?Sized>(
    task: &TaskSpec,
    pool: &[LabeledExample],
    tokenizer: &T,
    context_limit: usize,
    truncation_budget: f64,
    trials: usize,
    seed: u64,
) -> Result<ShotBudget> {
    if trials == 0 {
        return Err(Error::InsufficientData("trials must be at least 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); task.label_space.len()];
    for (i, ex) in pool.iter().enumerate() {
        by_class[task.class_index(&ex.label)?].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::InsufficientData(format!(
            "class `{}` has no examples in the pool",
            task.label_space[c]
        )));
    }
    let largest = by_class.iter().map(Vec::len).min().unwrap_or(0);

    let mut curve = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for m in 1..=largest {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(m as u64);
        let mut truncated = 0usize;
        for _ in 0..trials {
            let mut chosen: Vec<usize> = Vec::with_capacity(m * by_class.len());
            for members in &by_class {
                chosen.extend(index::sample(&mut rng, members.len(), m).iter().map(|j| members[j]));
            }
            chosen.shuffle(&mut rng);
            let used: HashSet<usize> = chosen.iter().copied().collect();
            let rest: Vec<usize> = (0..pool.len()).filter(|i| !used.contains(i)).collect();
            let query = if rest.is_empty() {
                rng.random_range(0..pool.len())
            } else {
                rest[rng.random_range(0..rest.len())]
            };
            let demos: Vec<LabeledExample> = chosen.iter().map(|&i| pool[i].clone()).collect();
            let prompt = build_prompt(task, &demos, &pool[query], tokenizer)?;
            if prompt.token_count > context_limit {
                truncated += 1;
            }
        }
        let tp = truncated as f64 / trials as f64;
        curve.push((m, tp));
        if tp <= truncation_budget {
            best = Some((m, tp));
        }
        if truncated == trials && truncation_budget < 1.0 {
            break;
        }
    }
    match best {
        Some((max_shots, truncation_probability)) => Ok(ShotBudget {
            context_limit,
            truncation_budget,
            max_shots,
            truncation_probability,
            curve,
        }),
        None => Err(Error::NoBudget {
            truncation_probability: curve.first().map_or(1.0, |c| c.1),
            budget: truncation_budget,
        }),
    }
}
