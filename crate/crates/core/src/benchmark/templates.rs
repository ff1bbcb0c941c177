//! Structured prompt templates, word lists and prompt generation.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scg::{BindingPair, BindingPrompt, PairKind, Task};
use crate::text::Vocab;

/// A prompt pattern. Slots are bracketed words: `[colorA]`, `[conceptA]`,
/// `[partA]`, `[styleA]` (and their `B` twins), `[object]` and `[place]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task: Task,
    pub pattern: String,
    pub question_count: usize,
}

impl PromptTemplate {
    /// Question count follows from the slots: one per bound pair plus one for
    /// a place.
    pub fn new(task: Task, pattern: &str) -> Result<Self> {
        let words: Vec<&str> = pattern.split_whitespace().collect();
        let slots = |prefix: &str| words.iter().filter(|w| w.starts_with(prefix)).count();
        let (bound, concept) = match task {
            Task::Coarse => (slots("[color"), slots("[concept")),
            Task::Fine => (slots("[color"), slots("[part")),
            Task::Style => (slots("[style"), slots("[concept")),
        };
        if bound != 2 || concept != 2 {
            return Err(Error::Config(format!(
                "{} template {pattern:?} needs two bound pairs",
                task.name()
            )));
        }
        if task == Task::Fine && slots("[object]") != 1 {
            return Err(Error::Config(format!(
                "fine template {pattern:?} needs an [object] slot"
            )));
        }
        let question_count = 2 + slots("[place]");
        Ok(Self {
            task,
            pattern: pattern.into(),
            question_count,
        })
    }

    fn words(&self) -> Vec<&str> {
        self.pattern.split_whitespace().collect()
    }

    /// Binds each slot to its word position. Returns `(pairs, object, place)`.
    fn structure(&self) -> (Vec<BindingPair>, Option<usize>, Option<usize>) {
        let words = self.words();
        let find = |slot: &str| words.iter().position(|w| *w == slot);
        let (bound, concept, kind) = match self.task {
            Task::Coarse => ("color", "concept", PairKind::Attribute),
            Task::Fine => ("color", "part", PairKind::Attribute),
            Task::Style => ("style", "concept", PairKind::Style),
        };
        let pairs = ["A", "B"]
            .iter()
            .map(|s| BindingPair {
                concept: find(&format!("[{concept}{s}]")).expect("validated template"),
                bound: find(&format!("[{bound}{s}]")).expect("validated template"),
                kind,
            })
            .collect();
        (pairs, find("[object]"), find("[place]"))
    }

    /// Slot-by-slot match of a prompt's words; literal words must agree.
    fn matches(&self, words: &[&str]) -> bool {
        let pattern = self.words();
        pattern.len() == words.len()
            && pattern
                .iter()
                .zip(words)
                .all(|(p, w)| (p.starts_with('[') && p.ends_with(']')) || p == w)
    }
}

/// "a [colorA] [conceptA] and a [colorB] [conceptB] in the [place]" and the
/// fine and style templates, as in the published benchmark.
pub fn paper_templates() -> Vec<PromptTemplate> {
    vec![
        PromptTemplate::new(
            Task::Coarse,
            "a [colorA] [conceptA] and a [colorB] [conceptB] in the [place]",
        )
        .unwrap(),
        PromptTemplate::new(Task::Fine, "a [object] with a [colorA] [partA] and a [colorB] [partB]").unwrap(),
        PromptTemplate::new(Task::Style, "a [styleA] [conceptA] and a [styleB] [conceptB]").unwrap(),
    ]
}

/// The two-object coarse template without a scene.
pub fn coarse_pair_template() -> PromptTemplate {
    PromptTemplate::new(Task::Coarse, "a [colorA] [conceptA] and a [colorB] [conceptB]").unwrap()
}

/// Every template `decompose_questions` recognizes.
pub fn known_templates() -> Vec<PromptTemplate> {
    let mut all = paper_templates();
    all.push(coarse_pair_template());
    all
}

/// Words that fill template slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordLists {
    pub colors: Vec<String>,
    pub concepts: Vec<String>,
    pub places: Vec<String>,
    /// Objects with their nameable parts.
    pub objects: Vec<(String, Vec<String>)>,
    pub styles: Vec<String>,
    pub style_concepts: Vec<String>,
}

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

impl WordLists {
    /// Repo-authored lists seeded with the benchmark's published example words.
    pub fn paper() -> Self {
        Self {
            colors: owned(&[
                "red", "blue", "green", "yellow", "black", "white", "pink", "orange", "purple", "brown",
            ]),
            concepts: owned(&[
                "backpack", "balloon", "rabbit", "bowl", "dog", "cat", "bench", "car", "bird", "chair", "clock",
                "bicycle",
            ]),
            places: owned(&[
                "kitchen", "street", "park", "beach", "forest", "garden", "desert", "bedroom",
            ]),
            objects: vec![
                ("apple".into(), owned(&["stem", "flesh"])),
                ("backpack".into(), owned(&["strap", "body"])),
                ("balloon".into(), owned(&["string", "body"])),
                ("rabbit".into(), owned(&["ears", "body"])),
                ("bowl".into(), owned(&["rim", "body"])),
                ("flower".into(), owned(&["stem", "petals"])),
                ("mushroom".into(), owned(&["cap", "stem"])),
                ("umbrella".into(), owned(&["canopy", "handle"])),
                ("lamp".into(), owned(&["shade", "base"])),
                ("house".into(), owned(&["roof", "door"])),
            ],
            styles: owned(&[
                "anime",
                "photorealistic",
                "cyberpunk",
                "watercolor",
                "impressionist",
                "cartoon",
                "sketch",
                "pixelated",
            ]),
            style_concepts: owned(&["cat", "kitchen", "dog", "castle", "car", "forest", "robot", "city"]),
        }
    }

    /// Every word any template can produce, fillers first.
    pub fn vocab(&self) -> Vocab {
        let mut words = owned(&["a", "and", "with", "in", "the"]);
        words.extend(self.colors.iter().cloned());
        words.extend(self.concepts.iter().cloned());
        words.extend(self.places.iter().cloned());
        for (object, parts) in &self.objects {
            words.push(object.clone());
            words.extend(parts.iter().cloned());
        }
        words.extend(self.styles.iter().cloned());
        words.extend(self.style_concepts.iter().cloned());
        Vocab::new(words)
    }
}

/// Prompts requested per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskCounts {
    pub coarse: usize,
    pub fine: usize,
    pub style: usize,
}

impl Default for TaskCounts {
    fn default() -> Self {
        Self::PAPER
    }
}

impl TaskCounts {
    pub const PAPER: TaskCounts = TaskCounts {
        coarse: 54,
        fine: 56,
        style: 48,
    };

    pub fn get(&self, task: Task) -> usize {
        match task {
            Task::Coarse => self.coarse,
            Task::Fine => self.fine,
            Task::Style => self.style,
        }
    }

    pub fn total(&self) -> usize {
        self.coarse + self.fine + self.style
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkPrompt {
    pub id: String,
    pub prompt: BindingPrompt,
}

const MAX_DRAWS: usize = 100_000;

/// Draws distinct prompts per task, in task order coarse, fine, style.
///
/// Within a prompt the two bound words differ, as do the two concepts (or
/// parts). Templates of a task are used round-robin. `vocab` must contain
/// every word the templates and lists can produce.
pub fn generate_prompts(
    templates: &[PromptTemplate],
    words: &WordLists,
    vocab: &Vocab,
    counts: &TaskCounts,
    seed: u64,
) -> Result<Vec<BenchmarkPrompt>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(counts.total());
    for task in Task::ALL {
        let wanted = counts.get(task);
        if wanted == 0 {
            continue;
        }
        let pool: Vec<&PromptTemplate> = templates.iter().filter(|t| t.task == task).collect();
        if pool.is_empty() {
            return Err(Error::Config(format!("no template for {} prompts", task.name())));
        }
        check_lists(task, words, pool.iter().any(|t| t.structure().2.is_some()))?;
        let mut seen = HashSet::new();
        let mut draws = 0;
        while seen.len() < wanted {
            draws += 1;
            if draws > MAX_DRAWS {
                return Err(Error::Config(format!(
                    "word lists too small for {wanted} distinct {} prompts",
                    task.name()
                )));
            }
            let template = pool[seen.len() % pool.len()];
            let text = fill(template, words, &mut rng);
            if seen.insert(text.clone()) {
                let (pairs, object, place) = template.structure();
                let prompt = BindingPrompt::new(text, vocab, pairs, task, object, place)?;
                out.push(BenchmarkPrompt {
                    id: format!("{}-{:03}", task.name(), seen.len() - 1),
                    prompt,
                });
            }
        }
    }
    Ok(out)
}

fn check_lists(task: Task, words: &WordLists, needs_place: bool) -> Result<()> {
    let short = |what: &str, have: usize, need: usize| {
        if have < need {
            Err(Error::Config(format!(
                "{} prompts need at least {need} distinct {what}, have {have}",
                task.name()
            )))
        } else {
            Ok(())
        }
    };
    match task {
        Task::Coarse => {
            short("colors", distinct(&words.colors), 2)?;
            short("concepts", distinct(&words.concepts), 2)?;
            if needs_place {
                short("places", distinct(&words.places), 1)?;
            }
        }
        Task::Fine => {
            short("colors", distinct(&words.colors), 2)?;
            let usable = words.objects.iter().filter(|(_, parts)| distinct(parts) >= 2).count();
            short("objects with two parts", usable, 1)?;
        }
        Task::Style => {
            short("styles", distinct(&words.styles), 2)?;
            short("style concepts", distinct(&words.style_concepts), 2)?;
        }
    }
    Ok(())
}

fn distinct(words: &[String]) -> usize {
    words.iter().collect::<HashSet<_>>().len()
}

/// Two different entries of `list`.
fn two<'a>(list: &'a [String], rng: &mut ChaCha8Rng) -> (&'a str, &'a str) {
    loop {
        let a = list.choose(rng).expect("checked non-empty");
        let b = list.choose(rng).expect("checked non-empty");
        if a != b {
            return (a, b);
        }
    }
}

fn fill(template: &PromptTemplate, words: &WordLists, rng: &mut ChaCha8Rng) -> String {
    let (bound, concept) = match template.task {
        Task::Coarse => (two(&words.colors, rng), two(&words.concepts, rng)),
        Task::Style => (two(&words.styles, rng), two(&words.style_concepts, rng)),
        Task::Fine => {
            let objects: Vec<&(String, Vec<String>)> = words.objects.iter().filter(|(_, p)| distinct(p) >= 2).collect();
            let (object, parts) = *objects.choose(rng).expect("checked non-empty");
            let colors = two(&words.colors, rng);
            let parts = two(parts, rng);
            return substitute(template, |slot| match slot {
                "object" => object.clone(),
                "colorA" => colors.0.into(),
                "colorB" => colors.1.into(),
                "partA" => parts.0.into(),
                "partB" => parts.1.into(),
                other => unreachable!("slot {other} in fine template"),
            });
        }
    };
    let place = words.places.choose(rng).cloned().unwrap_or_default();
    substitute(template, |slot| match slot {
        "colorA" | "styleA" => bound.0.into(),
        "colorB" | "styleB" => bound.1.into(),
        "conceptA" => concept.0.into(),
        "conceptB" => concept.1.into(),
        "place" => place.clone(),
        other => unreachable!("slot {other} in {} template", template.task.name()),
    })
}

fn substitute(template: &PromptTemplate, mut value: impl FnMut(&str) -> String) -> String {
    template
        .words()
        .iter()
        .map(|w| match w.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            Some(slot) => value(slot),
            None => w.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// One question per bound pair ("a blue dog?") plus one for the scene
/// ("the street?"), each the prompt fragment from the article to the noun.
pub fn decompose_questions(prompt: &BindingPrompt) -> Result<Vec<String>> {
    let words = prompt.words();
    let template = known_templates()
        .into_iter()
        .find(|t| t.task == prompt.task && t.matches(&words))
        .ok_or_else(|| Error::NoTemplate(prompt.raw_text.clone()))?;
    let (pairs, _, place) = template.structure();
    let fragment = |from: usize, to: usize| format!("{}?", words[from..=to].join(" "));
    let mut questions: Vec<String> = pairs.iter().map(|p| fragment(p.bound - 1, p.concept)).collect();
    if let Some(place) = place {
        questions.push(fragment(place - 1, place));
    }
    Ok(questions)
}

/// Coarse two-shape prompts over the toy dataset's colors and shapes.
/// Reads a free-text prompt by matching it against the known templates.
///
/// The pair-only coarse and style patterns share a shape, so `task` picks
/// between them; without it the first match wins, coarse before style.
pub fn parse_prompt(text: &str, vocab: &Vocab, task: Option<Task>) -> Result<BindingPrompt> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut templates = known_templates();
    templates.sort_by_key(|t| Task::ALL.iter().position(|k| *k == t.task));
    let template = templates
        .into_iter()
        .filter(|t| task.is_none_or(|k| k == t.task))
        .find(|t| t.matches(&words))
        .ok_or_else(|| Error::NoTemplate(text.to_string()))?;
    let (pairs, object, place) = template.structure();
    BindingPrompt::new(words.join(" "), vocab, pairs, template.task, object, place)
}

pub fn toy_prompts(dataset: &crate::toy_dit::DatasetConfig, count: usize, seed: u64) -> Result<Vec<BenchmarkPrompt>> {
    let words = WordLists {
        colors: dataset.colors.iter().map(|c| c.name.clone()).collect(),
        concepts: dataset.shapes.iter().map(|s| s.name().to_string()).collect(),
        places: Vec::new(),
        objects: Vec::new(),
        styles: Vec::new(),
        style_concepts: Vec::new(),
    };
    let counts = TaskCounts {
        coarse: count,
        fine: 0,
        style: 0,
    };
    generate_prompts(&[coarse_pair_template()], &words, &dataset.vocab(), &counts, seed)
}
