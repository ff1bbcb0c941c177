//! Structured binding prompts, their question decomposition, and an oracle
//! evaluator for toy images.

pub mod evaluate;
pub mod export;
pub mod templates;

pub use evaluate::{evaluate_binding, BindingScore, Detection, LayoutDetector, PairResult};
pub use export::{benchmark_jsonl, read_jsonl, report_csv, write_jsonl, BenchmarkRecord, EvalRow};
pub use templates::{
    coarse_pair_template, decompose_questions, generate_prompts, known_templates, paper_templates, parse_prompt,
    toy_prompts, BenchmarkPrompt, PromptTemplate, TaskCounts, WordLists,
};
