use std::path::PathBuf;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Part {
    Text { text: String },
    Image { path: PathBuf, label: String },
}

impl Part {
    pub fn text(s: impl Into<String>) -> Self {
        Part::Text { text: s.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn user(parts: Vec<Part>) -> Self {
        Self { role: Role::User, parts }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self { role: Role::System, parts: vec![Part::text(text)] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { max_tokens: 1024, temperature: 0.0 }
    }
}

/// An ordered chat prompt with text and labeled frame images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub messages: Vec<Message>,
    #[serde(default)]
    pub params: GenerationParams,
}

impl PromptBundle {
    pub fn new(messages: Vec<Message>) -> Self {
        Self { messages, params: GenerationParams::default() }
    }

    pub fn single_user(parts: Vec<Part>) -> Self {
        Self::new(vec![Message::user(parts)])
    }

    pub fn is_empty(&self) -> bool {
        self.messages.iter().all(|m| m.parts.is_empty())
    }

    pub fn image_count(&self) -> usize {
        self.parts().filter(|p| matches!(p, Part::Image { .. })).count()
    }

    pub fn parts(&self) -> impl Iterator<Item = &Part> {
        self.messages.iter().flat_map(|m| m.parts.iter())
    }

    /// All text parts in order, newline-joined. This is the view mock rules match on.
    pub fn text_view(&self) -> String {
        self.parts()
            .filter_map(|p| match p {
                Part::Text { text } => Some(text.as_str()),
                Part::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Every image must directly follow a text part that ends with its label.
    pub fn check_labels(&self) -> Result<(), String> {
        for m in &self.messages {
            let mut prev: Option<&Part> = None;
            for p in &m.parts {
                if let Part::Image { label, path } = p {
                    match prev {
                        Some(Part::Text { text }) if text.trim_end().ends_with(label.as_str()) => {}
                        _ => return Err(format!("image {} is not preceded by its label {label:?}", path.display())),
                    }
                }
                prev = Some(p);
            }
        }
        Ok(())
    }
}
