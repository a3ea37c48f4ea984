// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic visual-reasoning dataset: scene sampling, rendering, question
//! templates, split generation and an independent validator.

pub mod question;
pub mod render;
pub mod scene;
pub mod split;
pub mod validate;
pub mod vocab;

pub use question::{instantiate_question, Metadata, Predicate, QAExample, Query};
pub use render::{render_scene, CANVAS, CELL};
pub use scene::{sample_scene, Difficulty, GeneratorConfig, PatternPanel, PatternRule, Scene, SceneObject, Size, TaskType};
pub use split::{generate_record, generate_records, generate_split, read_jsonl, DatasetSplit, SplitName};
pub use validate::{recompute_answer, validate_split, ValidationReport};
pub use vocab::{ColorSpec, ShapeSpec, Vocabulary};
