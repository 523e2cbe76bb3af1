//! Preference-pair construction and inference-time search for LLM-based
//! conversational recommenders, driven by simulated users.
//!
//! * [`dialogue`] runs score-judged simulated conversations.
//! * [`podcs`] turns repeated simulations into chosen/rejected pairs.
//! * [`ses`] picks a reply by rehearsing candidates against an internal,
//!   label-blind user simulator, optionally as a tree search.
//! * [`eval`] measures mean simulated score and Recall@1.
//!
//! All model access goes through [`backend::Client`]; the scripted backend
//! makes every pipeline reproducible offline.

pub mod backend;
pub mod config;
pub mod context;
pub mod datastore;
pub mod dialogue;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod manifest;
pub mod parallel;
pub mod podcs;
pub mod prompt;
pub mod rng;
pub mod ses;
pub mod types;

pub use config::RunConfig;
pub use context::{Agents, RunContext};
pub use error::{Error, Result};
pub use types::{Message, PreferencePair, Role, Score, SeedSample, Transcript, UserProfile};
