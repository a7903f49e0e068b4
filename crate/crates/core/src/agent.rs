//! Thought / Action / Action Input / Observation tool loop.
//!
//! The model is prompted with a tool catalog and a fixed step format. Each
//! completion is parsed with [`parse_step`]; tool actions are executed and
//! their output is appended as an `Observation:` message until the model
//! gives a `Final Answer:`, the step budget runs out, or the same tool call
//! repeats three times in a row.

use std::fmt;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::llm::{ChatMessage, CompletionParams, Gateway};

pub const DEFAULT_STEP_BUDGET: usize = 8;
pub const OBSERVATION_LABEL: &str = "Observation:";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AgentError {
    #[error("invalid tool name {0:?}")]
    InvalidToolName(String),
    #[error("tool {0} has no description")]
    MissingDescription(String),
    #[error("tool {0} is already registered")]
    DuplicateTool(String),
}

type ToolFn = dyn Fn(&str) -> Result<String, String> + Send + Sync;

/// A named function the model may call with free-text input.
#[derive(Clone)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub input_hint: String,
    executor: Arc<ToolFn>,
}

impl fmt::Debug for ToolSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToolSpec").field("name", &self.name).finish_non_exhaustive()
    }
}

fn tool_name_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[a-z_][a-z0-9_]*$").expect("valid regex"))
}

impl ToolSpec {
    pub fn new<F>(
        name: impl Into<String>,
        description: impl Into<String>,
        input_hint: impl Into<String>,
        executor: F,
    ) -> Result<Self, AgentError>
    where
        F: Fn(&str) -> Result<String, String> + Send + Sync + 'static,
    {
        let name = name.into();
        let description = description.into();
        if !tool_name_re().is_match(&name) {
            return Err(AgentError::InvalidToolName(name));
        }
        if description.trim().is_empty() {
            return Err(AgentError::MissingDescription(name));
        }
        Ok(Self {
            name,
            description,
            input_hint: input_hint.into(),
            executor: Arc::new(executor),
        })
    }

    pub fn execute(&self, input: &str) -> Result<String, String> {
        (self.executor)(input)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    tools: Vec<ToolSpec>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tool: ToolSpec) -> Result<(), AgentError> {
        if self.get(&tool.name).is_some() {
            return Err(AgentError::DuplicateTool(tool.name));
        }
        self.tools.push(tool);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.tools.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    /// Tool section of the system prompt.
    pub fn catalog(&self) -> String {
        let mut out = String::from("You have access to the following tools:\n");
        for t in &self.tools {
            out.push_str(&format!(
                "- {}: {} Input: {}\n",
                t.name,
                t.description.trim(),
                t.input_hint.trim()
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentAction {
    Tool { name: String, input: String },
    FinalAnswer(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentStep {
    pub thought: String,
    pub action: AgentAction,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("could not parse agent step: {0}")]
pub struct ParseFailed(pub String);

#[derive(Clone, Copy, PartialEq, Eq)]
enum Label {
    Thought,
    Action,
    ActionInput,
    FinalAnswer,
    Observation,
}

/// Splits a line into a recognized label and the text after it.
fn label_of(line: &str) -> Option<(Label, &str)> {
    let trimmed = line.trim_start();
    const LABELS: [(&str, Label); 5] = [
        ("action input:", Label::ActionInput),
        ("action:", Label::Action),
        ("thought:", Label::Thought),
        ("final answer:", Label::FinalAnswer),
        ("observation:", Label::Observation),
    ];
    for (prefix, label) in LABELS {
        if trimmed.len() >= prefix.len()
            && trimmed.is_char_boundary(prefix.len())
            && trimmed[..prefix.len()].eq_ignore_ascii_case(prefix)
        {
            return Some((label, &trimmed[prefix.len()..]));
        }
    }
    None
}

fn clean_tool_name(raw: &str) -> String {
    raw.trim()
        .trim_matches(|c| matches!(c, '`' | '"' | '\'' | '*'))
        .trim()
        .to_string()
}

/// Parses one model completion.
///
/// Everything from the first `Observation:` line on is discarded. The first
/// of `Final Answer:` or `Action:` decides the step kind. A final answer runs
/// to the end of the text; so does an action input.
pub fn parse_step(raw: &str) -> Result<AgentStep, ParseFailed> {
    let lines: Vec<&str> = raw
        .lines()
        .take_while(|l| !matches!(label_of(l), Some((Label::Observation, _))))
        .collect();

    let mut thought: Vec<&str> = Vec::new();
    let mut in_thought = true;
    let mut action: Option<String> = None;
    let mut i = 0;
    while i < lines.len() {
        match label_of(lines[i]) {
            Some((Label::FinalAnswer, rest)) => {
                if action.is_some() {
                    return Err(ParseFailed("missing Action Input".into()));
                }
                let mut answer = vec![rest];
                answer.extend(&lines[i + 1..]);
                let answer = answer.join("\n").trim().to_string();
                if answer.is_empty() {
                    return Err(ParseFailed("empty Final Answer".into()));
                }
                return Ok(AgentStep {
                    thought: thought.join("\n").trim().to_string(),
                    action: AgentAction::FinalAnswer(answer),
                });
            }
            Some((Label::Action, rest)) => {
                let name = clean_tool_name(rest);
                if name.is_empty() {
                    return Err(ParseFailed("empty Action".into()));
                }
                action = Some(name);
                in_thought = false;
            }
            Some((Label::ActionInput, rest)) => {
                let Some(name) = action.take() else {
                    return Err(ParseFailed("Action Input without Action".into()));
                };
                let mut input = vec![rest];
                input.extend(&lines[i + 1..]);
                return Ok(AgentStep {
                    thought: thought.join("\n").trim().to_string(),
                    action: AgentAction::Tool {
                        name,
                        input: input.join("\n").trim().to_string(),
                    },
                });
            }
            Some((Label::Thought, rest)) => {
                in_thought = true;
                thought.push(rest);
            }
            Some((Label::Observation, _)) => unreachable!("truncated above"),
            None => {
                if in_thought && action.is_none() {
                    thought.push(lines[i]);
                }
            }
        }
        i += 1;
    }
    if action.is_some() {
        Err(ParseFailed("missing Action Input".into()))
    } else {
        Err(ParseFailed("no Action or Final Answer".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub thought: String,
    pub action: AgentAction,
    /// `None` for final answers and for the step that tripped loop detection.
    pub observation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum AgentOutcome {
    Answered(String),
    StepBudgetExceeded,
    LoopDetected,
    ParseFailed(String),
    GatewayFailed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub steps: Vec<TraceStep>,
    pub outcome: AgentOutcome,
    /// Model calls made, including one that failed to parse.
    pub step_count: usize,
}

impl AgentTrace {
    pub fn answer(&self) -> Option<&str> {
        match &self.outcome {
            AgentOutcome::Answered(a) => Some(a),
            _ => None,
        }
    }

    /// Names of the tools invoked, in order.
    pub fn tool_calls(&self) -> Vec<(&str, &str)> {
        self.steps
            .iter()
            .filter_map(|s| match &s.action {
                AgentAction::Tool { name, input } => Some((name.as_str(), input.as_str())),
                AgentAction::FinalAnswer(_) => None,
            })
            .collect()
    }

    /// One JSON object per line: each step, then the outcome.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for (i, step) in self.steps.iter().enumerate() {
            let record = match &step.action {
                AgentAction::Tool { name, input } => json!({
                    "step": i + 1,
                    "thought": step.thought,
                    "action": name,
                    "action_input": input,
                    "observation": step.observation,
                }),
                AgentAction::FinalAnswer(answer) => json!({
                    "step": i + 1,
                    "thought": step.thought,
                    "final_answer": answer,
                }),
            };
            out.push_str(&record.to_string());
            out.push('\n');
        }
        let outcome = json!({ "outcome": self.outcome, "step_count": self.step_count });
        out.push_str(&outcome.to_string());
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub budget: usize,
    pub params: CompletionParams,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_STEP_BUDGET,
            params: CompletionParams::strict().with_stop(OBSERVATION_LABEL),
        }
    }
}

impl AgentConfig {
    pub fn with_budget(budget: usize) -> Self {
        Self {
            budget,
            ..Self::default()
        }
    }
}

/// Output-format block appended after the tool catalog.
pub fn format_instructions(tools: &ToolRegistry) -> String {
    format!(
        "Use the following format:\n\
         Thought: think step by step about what you need to do next\n\
         Action: the tool to use, one of [{}]\n\
         Action Input: the input for the tool, described in plain language\n\
         Observation: the tool result (this is given to you; never write it yourself)\n\
         ... (Thought/Action/Action Input/Observation may repeat)\n\
         Thought: I now know the final answer\n\
         Final Answer: the final answer\n",
        tools.names().join(", ")
    )
}

/// Runs one agent episode. Never panics on model output; every way the
/// episode can end is an [`AgentOutcome`].
pub fn run_agent(
    task: &str,
    system_prompt: &str,
    tools: &ToolRegistry,
    gateway: &Gateway,
    config: &AgentConfig,
) -> AgentTrace {
    let system = format!(
        "{}\n\n{}\n{}",
        system_prompt.trim_end(),
        tools.catalog(),
        format_instructions(tools)
    );
    let mut messages = vec![ChatMessage::system(system), ChatMessage::user(task)];
    let mut steps: Vec<TraceStep> = Vec::new();
    let mut step_count = 0;
    let budget = config.budget.max(1);

    let outcome = loop {
        if step_count >= budget {
            break AgentOutcome::StepBudgetExceeded;
        }
        step_count += 1;
        let raw = match gateway.complete(&messages, &config.params) {
            Ok(r) => r.text,
            Err(e) => break AgentOutcome::GatewayFailed(e.to_string()),
        };
        let step = match parse_step(&raw) {
            Ok(s) => s,
            Err(_) => break AgentOutcome::ParseFailed(raw),
        };
        let AgentAction::Tool { name, input } = &step.action else {
            let AgentAction::FinalAnswer(answer) = step.action.clone() else {
                unreachable!()
            };
            steps.push(TraceStep {
                thought: step.thought,
                action: step.action,
                observation: None,
            });
            break AgentOutcome::Answered(answer);
        };

        let repeats = steps
            .iter()
            .rev()
            .take(2)
            .filter(|s| matches!(&s.action, AgentAction::Tool { name: n, input: i } if n == name && i == input))
            .count();
        if repeats == 2 {
            steps.push(TraceStep {
                thought: step.thought,
                action: step.action,
                observation: None,
            });
            break AgentOutcome::LoopDetected;
        }

        let observation = match tools.get(name) {
            Some(tool) => match tool.execute(input) {
                Ok(out) => out,
                Err(e) => format!("tool error: {e}"),
            },
            None => format!("unknown tool {name}; available: {}", tools.names().join(", ")),
        };
        // Keep only what was parsed, so hallucinated observations never
        // reach the transcript.
        messages.push(ChatMessage::assistant(format!(
            "Thought: {}\nAction: {name}\nAction Input: {input}",
            step.thought
        )));
        messages.push(ChatMessage::tool(format!("{OBSERVATION_LABEL} {observation}")));
        steps.push(TraceStep {
            thought: step.thought,
            action: step.action,
            observation: Some(observation),
        });
    };

    AgentTrace {
        steps,
        outcome,
        step_count,
    }
}
