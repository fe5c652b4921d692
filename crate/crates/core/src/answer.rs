//! Prompting the working model with a question plus retrieved sessions.

use crate::backends::{ChatClient, ModelParams};
use crate::error::Result;
use crate::memory::{render_sessions, Session};

pub const QUESTION_PREFIX: &str = "Question: ";

const INSTRUCTION: &str =
    "Answer the question. Use the conversation memory below if it is relevant. Reply with the answer only.";

/// Working-model prompt. With no sessions the memory block is omitted,
/// which is the no-memory baseline.
pub fn answer_prompt(question: &str, memory: &[&Session]) -> String {
    let mut out = String::from(INSTRUCTION);
    out.push_str("\n\n");
    if !memory.is_empty() {
        out.push_str("Memory:\n");
        out.push_str(&render_sessions(memory.iter().copied()));
        out.push('\n');
    }
    out.push_str(QUESTION_PREFIX);
    out.push_str(question.trim());
    out.push_str("\nAnswer:");
    out
}

/// The question line of a prompt built by [`answer_prompt`].
pub fn extract_question(prompt: &str) -> Option<&str> {
    prompt.lines().rev().find_map(|l| l.strip_prefix(QUESTION_PREFIX)).map(str::trim)
}

pub fn answer(client: &ChatClient, params: &ModelParams, question: &str, memory: &[&Session]) -> Result<String> {
    let text = client.complete_text(&params.request(answer_prompt(question, memory)))?;
    Ok(strip_think(&text).trim().to_string())
}

/// Drop any reasoning block preceding the final answer.
pub fn strip_think(text: &str) -> &str {
    match text.rfind("</think>") {
        Some(i) => &text[i + "</think>".len()..],
        None => text,
    }
}
