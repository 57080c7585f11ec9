//! Hierarchy-aware zero-shot classification toolkit.
//!
//! The pipeline runs in stages, each a module:
//!
//! * [`hierarchy`]: label tree parsing and LCA-height distances
//! * [`promptgen`]: language prompts built from the hierarchy
//! * [`llmgen`]: chat-completion client turning language prompts into image prompts
//! * [`embed`]: embedding interchange files and class-embedding aggregation
//! * [`zeroshot`]: embedding/logit ensembles and conditional risk re-ranking
//! * [`eval`]: top-1, mistake severity and HD@1
//! * [`synth`]: synthetic hierarchical embeddings for testing without models
//! * [`cli`]: the `hierprompt` command line

pub mod cli;
pub mod embed;
pub mod eval;
pub mod hierarchy;
pub mod llmgen;
pub mod promptgen;
pub mod synth;
pub mod zeroshot;

pub use embed::{aggregate_class_embedding, l2_normalize, EmbeddingFile, EmbeddingVector};
pub use eval::{evaluate, EvalReport};
pub use hierarchy::{DistanceMatrix, LabelHierarchy, NodeId};
pub use promptgen::{build_prompt_set, LanguagePrompt, PromptKind, PromptPlan};
pub use zeroshot::{crm_rerank, ClassifierBank, Prediction};
