use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Vocab;

/// Which binding problem a prompt poses. Decides how concept masks are found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Whole objects bound to colors.
    Coarse,
    /// Parts of one object bound to colors.
    Fine,
    /// Objects bound to rendering styles.
    Style,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Coarse, Task::Fine, Task::Style];

    pub fn name(self) -> &'static str {
        match self {
            Task::Coarse => "coarse",
            Task::Fine => "fine",
            Task::Style => "style",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Task::Coarse),
            "fine" => Ok(Task::Fine),
            "style" => Ok(Task::Style),
            other => Err(Error::Invalid(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Attribute,
    Style,
}

/// A concept token and the attribute or style token bound to it, both as
/// positions in the prompt's token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingPair {
    pub concept: usize,
    pub bound: usize,
    pub kind: PairKind,
}

/// A tokenized prompt with its concept/attribute pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingPrompt {
    pub raw_text: String,
    pub tokens: Vec<usize>,
    pub pairs: Vec<BindingPair>,
    pub task: Task,
    /// Position of the whole-object word in fine-grained prompts
    /// ("apple" in "a apple with a orange stem and a blue flesh").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<usize>,
    /// Position of the scene word, when the prompt names one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub place: Option<usize>,
}

impl BindingPrompt {
    pub fn new(
        raw_text: impl Into<String>,
        vocab: &Vocab,
        pairs: Vec<BindingPair>,
        task: Task,
        object: Option<usize>,
        place: Option<usize>,
    ) -> Result<Self> {
        let raw_text = raw_text.into();
        let tokens = vocab.tokenize(&raw_text)?;
        let prompt = Self {
            raw_text,
            tokens,
            pairs,
            task,
            object,
            place,
        };
        prompt.validate()?;
        Ok(prompt)
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.tokens.len();
        if self.pairs.is_empty() {
            return Err(Error::Invalid("prompt has no binding pairs".into()));
        }
        let mut seen = Vec::new();
        for (i, p) in self.pairs.iter().enumerate() {
            if p.concept >= len || p.bound >= len {
                return Err(Error::Invalid(format!(
                    "pair {i} indexes ({}, {}) outside {len} tokens",
                    p.concept, p.bound
                )));
            }
            if p.concept == p.bound {
                return Err(Error::Invalid(format!("pair {i} binds token {} to itself", p.concept)));
            }
            for idx in [p.concept, p.bound] {
                if seen.contains(&idx) {
                    return Err(Error::Invalid(format!(
                        "token position {idx} appears in more than one pair"
                    )));
                }
                seen.push(idx);
            }
        }
        for idx in self.object.iter().chain(&self.place) {
            if *idx >= len {
                return Err(Error::Invalid(format!("position {idx} outside {len} tokens")));
            }
        }
        Ok(())
    }

    pub fn words(&self) -> Vec<&str> {
        self.raw_text.split_whitespace().collect()
    }

    pub fn word(&self, position: usize) -> &str {
        self.raw_text.split_whitespace().nth(position).unwrap_or("")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(["a", "and", "red", "blue", "square", "disc"])
    }

    fn pair(concept: usize, bound: usize) -> BindingPair {
        BindingPair {
            concept,
            bound,
            kind: PairKind::Attribute,
        }
    }

    #[test]
    fn valid_prompt() {
        let p = BindingPrompt::new(
            "a red square and a blue disc",
            &vocab(),
            vec![pair(2, 1), pair(6, 5)],
            Task::Coarse,
            None,
            None,
        )
        .unwrap();
        assert_eq!(p.tokens, vec![0, 2, 4, 1, 0, 3, 5]);
        assert_eq!(p.word(2), "square");
    }

    #[test]
    fn rejects_bad_pairs() {
        let text = "a red square and a blue disc";
        let v = vocab();
        assert!(BindingPrompt::new(text, &v, vec![], Task::Coarse, None, None).is_err());
        assert!(BindingPrompt::new(text, &v, vec![pair(2, 2)], Task::Coarse, None, None).is_err());
        assert!(BindingPrompt::new(text, &v, vec![pair(2, 9)], Task::Coarse, None, None).is_err());
        assert!(BindingPrompt::new(text, &v, vec![pair(2, 1), pair(6, 1)], Task::Coarse, None, None).is_err());
    }
}
