//! Gesture understanding from hand landmarks.
//!
//! The crate turns 21-point hand-landmark streams into a gesture state
//! matrix using six geometric rules with three-way decisions, tunes the rule
//! thresholds by grid search, and grounds a described gesture to an interface
//! function through a dialogue between an inference agent and a context agent
//! backed by a context library.

pub mod agents;
pub mod context;
pub mod encoder;
pub mod eval;
pub mod geometry;
pub mod landmarks;
pub mod rules;
pub mod synth;
pub mod transport;
pub mod tuner;

pub use agents::{ContextSetting, Outcome, PromptSet, SessionConfig, Transcript};
pub use context::{CalculatorRegistry, ContextLibrary, ContextType};
pub use encoder::{GestureStateMatrix, GestureWindow, SegmentationConfig};
pub use landmarks::{Finger, Handedness, HandLandmarkFrame, Landmark, LandmarkStream, SourceView};
pub use rules::{FramePoseVector, PalmOrientation, RuleThresholds, ThreeWay, ThumbDirection};
pub use transport::{ChatBackend, ChatMessage, CompletionRequest, UsageRecord};
pub use tuner::{GridSpec, GroundTruthLabel, LossWeights, RuleId, RuleState};
