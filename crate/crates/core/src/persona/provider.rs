use crate::chat::{ChatMessage, Decoding};
use crate::error::Result;

/// A text-completion service used to annotate characters.
pub trait CompletionProvider: Send + Sync {
    fn model_id(&self) -> &str;

    fn supports_system_role(&self) -> bool {
        true
    }

    fn generate(&self, messages: &[ChatMessage], decoding: &Decoding) -> Result<String>;
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for &P {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn supports_system_role(&self) -> bool {
        (**self).supports_system_role()
    }

    fn generate(&self, messages: &[ChatMessage], decoding: &Decoding) -> Result<String> {
        (**self).generate(messages, decoding)
    }
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for Box<P> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn supports_system_role(&self) -> bool {
        (**self).supports_system_role()
    }

    fn generate(&self, messages: &[ChatMessage], decoding: &Decoding) -> Result<String> {
        (**self).generate(messages, decoding)
    }
}

/// Folds system content into the first user turn for providers without a
/// system role.
pub fn flatten_system(messages: &[ChatMessage]) -> Vec<ChatMessage> {
    let system: Vec<&str> = messages
        .iter()
        .filter(|m| m.role == crate::chat::Role::System)
        .map(|m| m.content.as_str())
        .collect();
    if system.is_empty() {
        return messages.to_vec();
    }
    let prefix = system.join("\n\n");
    let mut out = Vec::with_capacity(messages.len());
    let mut merged = false;
    for m in messages.iter().filter(|m| m.role != crate::chat::Role::System) {
        if !merged && m.role == crate::chat::Role::User {
            out.push(ChatMessage::user(format!("{prefix}\n\n{}", m.content)));
            merged = true;
        } else {
            out.push(m.clone());
        }
    }
    if !merged {
        out.insert(0, ChatMessage::user(prefix));
    }
    out
}
