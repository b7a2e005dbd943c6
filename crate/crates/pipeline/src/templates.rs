//! Plain-text prompt templates with `{placeholder}` slots.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::PipelineError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub step1_scene: String,
    pub step2_ego: String,
    pub step3_nearby: String,
    pub step4_summary: String,
    pub segment_description: String,
    pub answer: String,
}

const FILES: [&str; 6] = [
    "step1_scene.txt",
    "step2_ego.txt",
    "step3_nearby.txt",
    "step4_summary.txt",
    "segment_description.txt",
    "answer.txt",
];

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            step1_scene: include_str!("../prompts/step1_scene.txt").to_string(),
            step2_ego: include_str!("../prompts/step2_ego.txt").to_string(),
            step3_nearby: include_str!("../prompts/step3_nearby.txt").to_string(),
            step4_summary: include_str!("../prompts/step4_summary.txt").to_string(),
            segment_description: include_str!("../prompts/segment_description.txt").to_string(),
            answer: include_str!("../prompts/answer.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Built-in templates, overridden by any same-named file in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PipelineError> {
        let mut t = Self::default();
        for name in FILES {
            let path = dir.join(name);
            if !path.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&path)
                .map_err(|e| PipelineError::Template(format!("{}: {e}", path.display())))?;
            *t.slot(name) = text;
        }
        Ok(t)
    }

    fn slot(&mut self, name: &str) -> &mut String {
        match name {
            "step1_scene.txt" => &mut self.step1_scene,
            "step2_ego.txt" => &mut self.step2_ego,
            "step3_nearby.txt" => &mut self.step3_nearby,
            "step4_summary.txt" => &mut self.step4_summary,
            "segment_description.txt" => &mut self.segment_description,
            _ => &mut self.answer,
        }
    }

    /// Short content hash; part of the trace-cache key.
    pub fn version(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            &self.step1_scene,
            &self.step2_ego,
            &self.step3_nearby,
            &self.step4_summary,
            &self.segment_description,
            &self.answer,
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// Substitutes every `{key}`; any placeholder left unfilled is an error.
pub fn render(template: &str, values: &[(&str, &str)]) -> Result<String, PipelineError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if after[..close].chars().all(|c| c.is_ascii_alphanumeric() || c == '_') && close > 0 => {
                let key = &after[..close];
                let value = values
                    .iter()
                    .find(|(k, _)| *k == key)
                    .ok_or_else(|| PipelineError::Template(format!("no value for placeholder {{{key}}}")))?;
                out.push_str(value.1);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out.trim_end().to_string())
}
