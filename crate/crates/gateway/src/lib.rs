//! Chat-completion client with image inputs, and a deterministic mock endpoint.

pub mod client;
pub mod mock;
pub mod prompt;

pub use client::{ChatModel, ChatResponse, EndpointConfig, GatewayError, HttpClient, Usage, WireQuery};
pub use mock::{serve_mock, Matcher, MockReply, MockScript, MockServer, ScriptedModel};
pub use prompt::{GenerationParams, Message, Part, PromptBundle, Role};
