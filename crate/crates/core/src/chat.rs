//! Role-structured chat messages. Model-specific chat templates are applied by
//! each provider or backend adapter, never here.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Content of the first message with the given role, if any.
pub fn content_of(messages: &[ChatMessage], role: Role) -> Option<&str> {
    messages
        .iter()
        .find(|m| m.role == role)
        .map(|m| m.content.as_str())
}

/// Decoding settings shared by providers and activation backends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub max_tokens: usize,
    /// 0.0 selects greedy decoding.
    pub temperature: f32,
    pub seed: u64,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            max_tokens: 256,
            temperature: 0.0,
            seed: 0,
        }
    }
}
