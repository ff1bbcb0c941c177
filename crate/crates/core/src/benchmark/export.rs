use std::path::Path;

use serde::{Deserialize, Serialize};

use super::templates::{decompose_questions, BenchmarkPrompt};
use crate::error::{Error, Result};
use crate::scg::{BindingPair, BindingPrompt, Task};

/// One JSON Lines record of the benchmark export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub id: String,
    pub task: Task,
    pub text: String,
    pub pairs: Vec<BindingPair>,
    pub questions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub place: Option<usize>,
}

impl BenchmarkRecord {
    pub fn new(item: &BenchmarkPrompt) -> Result<Self> {
        let p = &item.prompt;
        Ok(Self {
            id: item.id.clone(),
            task: p.task,
            text: p.raw_text.clone(),
            pairs: p.pairs.clone(),
            questions: decompose_questions(p)?,
            object: p.object,
            place: p.place,
        })
    }

    pub fn to_prompt(&self, vocab: &crate::text::Vocab) -> Result<BindingPrompt> {
        BindingPrompt::new(
            self.text.clone(),
            vocab,
            self.pairs.clone(),
            self.task,
            self.object,
            self.place,
        )
    }
}

pub fn benchmark_jsonl(items: &[BenchmarkPrompt]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        let line = serde_json::to_string(&BenchmarkRecord::new(item)?).map_err(|e| Error::Invalid(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, items: &[BenchmarkPrompt]) -> Result<()> {
    std::fs::write(path, benchmark_jsonl(items)?).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(text: &str) -> Result<Vec<BenchmarkRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Invalid(format!("line {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub prompt_id: String,
    pub seed: u64,
    pub accuracy: f64,
    pub flags: Vec<String>,
}

/// `prompt_id,seed,accuracy,flags` with flags joined by `;`.
pub fn report_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("prompt_id,seed,accuracy,flags\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.prompt_id,
            r.seed,
            r.accuracy,
            r.flags.join(";")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{generate_prompts, paper_templates, TaskCounts, WordLists};

    #[test]
    fn jsonl_round_trip() {
        let words = WordLists::paper();
        let vocab = words.vocab();
        let counts = TaskCounts {
            coarse: 2,
            fine: 2,
            style: 2,
        };
        let items = generate_prompts(&paper_templates(), &words, &vocab, &counts, 4).unwrap();
        let text = benchmark_jsonl(&items).unwrap();
        let records = read_jsonl(&text).unwrap();
        assert_eq!(records.len(), 6);
        for (r, item) in records.iter().zip(&items) {
            assert_eq!(r.to_prompt(&vocab).unwrap(), item.prompt);
        }
    }

    #[test]
    fn csv_layout() {
        let rows = vec![EvalRow {
            prompt_id: "coarse-000".into(),
            seed: 3,
            accuracy: 0.5,
            flags: vec!["no-region:disc".into()],
        }];
        assert_eq!(
            report_csv(&rows),
            "prompt_id,seed,accuracy,flags\ncoarse-000,3,0.5,no-region:disc\n"
        );
    }
}
