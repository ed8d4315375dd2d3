//! Prompt templates: the task instruction, section headers, and the two
//! admissible answer strings. One canonical template ships compiled in;
//! per-model variants live as plain-text files with named sections.

use crate::error::{Error, Result};
use std::path::Path;

pub const DEFAULT_TEMPLATE_TEXT: &str = include_str!("../../templates/default.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub task_instruction: String,
    pub history_header: String,
    pub input_header: String,
    pub answer_header: String,
    pub yes_text: String,
    pub no_text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::parse(DEFAULT_TEMPLATE_TEXT).expect("bundled template parses")
    }
}

impl PromptTemplate {
    /// Parses the `[section]` file format. Sections: task_instruction,
    /// history_header, input_header, answer_header, yes_text, no_text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: std::collections::BTreeMap<String, String> =
            std::collections::BTreeMap::new();
        let mut current: Option<String> = None;
        for line in text.lines() {
            if line.starts_with('[') && line.ends_with(']') {
                current = Some(line[1..line.len() - 1].to_string());
                sections.entry(current.clone().unwrap()).or_default();
            } else if let Some(name) = &current {
                let body = sections.get_mut(name).unwrap();
                if !body.is_empty() {
                    body.push('\n');
                }
                body.push_str(line);
            } else if !line.trim().is_empty() {
                return Err(Error::Template(format!(
                    "content before first [section] header: {line:?}"
                )));
            }
        }
        let take = |name: &str| -> Result<String> {
            sections
                .get(name)
                .map(|s| s.trim_end().to_string())
                .ok_or_else(|| Error::Template(format!("missing [{name}] section")))
        };
        let template = PromptTemplate {
            task_instruction: take("task_instruction")?,
            history_header: take("history_header")?,
            input_header: take("input_header")?,
            answer_header: take("answer_header")?,
            yes_text: take("yes_text")?,
            no_text: take("no_text")?,
        };
        template.validate()?;
        Ok(template)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// The answer alternatives are pinned to exactly "Yes." and "No.".
    pub fn validate(&self) -> Result<()> {
        if self.yes_text != "Yes." || self.no_text != "No." {
            return Err(Error::Template(format!(
                "answer alternatives must be \"Yes.\" and \"No.\", got {:?} / {:?}",
                self.yes_text, self.no_text
            )));
        }
        if self.answer_header.is_empty() {
            return Err(Error::Template("empty answer header".into()));
        }
        Ok(())
    }
}
