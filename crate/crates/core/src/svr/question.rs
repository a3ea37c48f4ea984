// SPDX-License-Identifier: MIT OR Apache-2.0

//! Question templates and the generator-side answer logic.
//!
//! Every question is backed by a structured [`Query`] stored in the record
//! metadata. The text is rendered from the query; the answer is computed
//! from the query and the symbolic scene. The validator in
//! [`super::validate`] recomputes answers from the serialized metadata
//! through its own code path.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

use super::scene::{
    unique_identities, weighted_index, Difficulty, GeneratorConfig, Scene, SceneObject, Size, TaskType, MAX_OBJECTS,
    RESAMPLE_BUDGET,
};
use super::vocab::{plural, Vocabulary};

/// Attribute filter over scene objects. All present fields must match.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<Size>,
    /// Object color must differ from this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub not_color: Option<String>,
}

impl Predicate {
    pub fn matches(&self, o: &SceneObject) -> bool {
        self.color.as_ref().is_none_or(|c| *c == o.color)
            && self.shape.as_ref().is_none_or(|s| *s == o.shape)
            && self.size.is_none_or(|s| s == o.size)
            && self.not_color.as_ref().is_none_or(|c| *c != o.color)
    }

    pub fn count(&self, scene: &Scene) -> usize {
        scene.objects.iter().filter(|o| self.matches(o)).count()
    }

    fn of_object(o: &SceneObject) -> Self {
        Self {
            color: Some(o.color.clone()),
            shape: Some(o.shape.clone()),
            ..Self::default()
        }
    }

    /// Noun phrase, e.g. "large red circles" or "circles that are not red".
    pub fn describe(&self, vocab: &Vocabulary, plural_form: bool) -> String {
        let mut words: Vec<String> = Vec::new();
        if let Some(s) = self.size {
            words.push(s.as_str().to_string());
        }
        if let Some(c) = &self.color {
            words.push(color_name(vocab, c));
        }
        let noun = match &self.shape {
            Some(s) => {
                let name = vocab.shape(s).map_or(s.clone(), |sh| sh.display_name.clone());
                if plural_form {
                    plural(&name)
                } else {
                    name
                }
            }
            None => (if plural_form { "objects" } else { "object" }).to_string(),
        };
        words.push(noun);
        let mut out = words.join(" ");
        if let Some(c) = &self.not_color {
            let verb = if plural_form { "are" } else { "is" };
            out.push_str(&format!(" that {verb} not {}", color_name(vocab, c)));
        }
        out
    }
}

fn color_name(vocab: &Vocabulary, id: &str) -> String {
    vocab.color(id).map_or(id.to_string(), |c| c.name.clone())
}

fn with_article(phrase: &str) -> String {
    let vowel = phrase.starts_with(['a', 'e', 'i', 'o', 'u']);
    format!("{} {phrase}", if vowel { "an" } else { "a" })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountRelation {
    More,
    Fewer,
    AtLeast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialRelation {
    LeftOf,
    RightOf,
    Above,
    Below,
    DirectlyAbove,
    DirectlyBelow,
}

impl SpatialRelation {
    /// Whether an object at `a` stands in this relation to one at `b`.
    pub fn holds(self, a: (u8, u8), b: (u8, u8)) -> bool {
        match self {
            SpatialRelation::LeftOf => a.0 < b.0,
            SpatialRelation::RightOf => a.0 > b.0,
            SpatialRelation::Above => a.1 < b.1,
            SpatialRelation::Below => a.1 > b.1,
            SpatialRelation::DirectlyAbove => a.0 == b.0 && a.1 < b.1,
            SpatialRelation::DirectlyBelow => a.0 == b.0 && a.1 > b.1,
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            SpatialRelation::LeftOf => "to the left of",
            SpatialRelation::RightOf => "to the right of",
            SpatialRelation::Above => "above",
            SpatialRelation::Below => "below",
            SpatialRelation::DirectlyAbove => "directly above",
            SpatialRelation::DirectlyBelow => "directly below",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantifier {
    /// Subject and objects each denote exactly one scene object.
    The,
    /// Some subject object relates to some object.
    Any,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationClause {
    pub relation: SpatialRelation,
    pub object: Predicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalProperty {
    SameColor,
    SameShape,
    TotalMoreThan,
    TotalAtMost,
}

/// Structured form of a question; enough to recompute the answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Query {
    Count {
        predicate: Predicate,
    },
    Compare {
        left: Predicate,
        right: Predicate,
        relation: CountRelation,
    },
    Spatial {
        quantifier: Quantifier,
        subject: Predicate,
        clauses: Vec<RelationClause>,
    },
    Pattern {
        position: String,
    },
    Exists {
        predicate: Predicate,
    },
    Global {
        property: GlobalProperty,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        threshold: Option<usize>,
    },
    AnyNot {
        predicate: Predicate,
        excluded_colors: Vec<String>,
    },
    Every {
        predicate: Predicate,
        allowed_colors: Vec<String>,
    },
}

/// Everything needed to recompute the answer without the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub scene: Scene,
    pub query: Query,
    pub template: String,
    /// Renderer parameters: color id → hex code for every color drawn.
    pub palette: BTreeMap<String, String>,
    pub canvas: u32,
}

/// One dataset record in the unified JSONL layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub image: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer: String,
    pub task_type: TaskType,
    pub difficulty: Difficulty,
    pub metadata: Metadata,
}

impl QAExample {
    /// Zero-based index of the answer letter.
    pub fn answer_index(&self) -> Option<usize> {
        letter_index(&self.answer)
    }
}

pub fn option_letter(i: usize) -> String {
    char::from(b'A' + i as u8).to_string()
}

pub fn letter_index(letter: &str) -> Option<usize> {
    let mut chars = letter.chars();
    let c = chars.next()?;
    if chars.next().is_some() || !c.is_ascii_uppercase() {
        return None;
    }
    Some((c as u8 - b'A') as usize)
}

pub const YES_NO: [&str; 2] = ["yes", "no"];

pub fn count_options() -> Vec<String> {
    (0..=MAX_OBJECTS).map(|i| i.to_string()).collect()
}

pub const PANEL_POSITIONS: [[&str; 3]; 3] = [
    ["top-left", "top-middle", "top-right"],
    ["middle-left", "center", "middle-right"],
    ["bottom-left", "bottom-middle", "bottom-right"],
];

const NUMBER_WORDS: [&str; 17] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen",
];

/// Template variants per task family, in the order `template_weights` uses.
pub fn templates(task: TaskType) -> &'static [&'static str] {
    match task {
        TaskType::Counting => &["counting/how_many", "counting/number_of"],
        TaskType::Comparison => &["comparison/more", "comparison/at_least", "comparison/fewer"],
        TaskType::Spatial => &["spatial/is_relation", "spatial/does_appear"],
        TaskType::Pattern => &["pattern/complete", "pattern/which_color"],
        TaskType::Existence => &["existence/is_there", "existence/do_you_see"],
        TaskType::Global => &["global/same_color", "global/same_shape", "global/more_than", "global/at_most"],
        TaskType::AttributeLogic => &["attribute_logic/any_not", "attribute_logic/every_either"],
    }
}

fn pick_template<R: Rng + ?Sized>(task: TaskType, config: &GeneratorConfig, rng: &mut R) -> &'static str {
    let names = templates(task);
    let idx = match config.template_weights.get(&task) {
        Some(w) if w.len() == names.len() => weighted_index(w, rng),
        _ => rng.gen_range(0..names.len()),
    };
    names[idx]
}

/// Draws a question for `scene` and computes its answer from the symbolic
/// state. Ill-posed draws are resampled internally.
pub fn instantiate_question(
    scene: &Scene,
    task: TaskType,
    difficulty: Difficulty,
    seed: u64,
    config: &GeneratorConfig,
) -> Result<QAExample> {
    if (task == TaskType::Pattern) != scene.panel.is_some() {
        return Err(Error::Invalid(format!(
            "scene {} a pattern panel but task is {task}",
            if scene.panel.is_some() { "has" } else { "lacks" }
        )));
    }
    let mut rng = seed::rng_str(seed, "question");
    let vocab = &config.vocab;
    let mut last = "none";
    for _ in 0..RESAMPLE_BUDGET {
        let template = pick_template(task, config, &mut rng);
        match draw(scene, task, difficulty, template, vocab, &mut rng) {
            Ok((query, question)) => {
                let (options, answer) = answer_for(scene, &query, vocab)?;
                return Ok(QAExample {
                    id: String::new(),
                    image: String::new(),
                    question,
                    options,
                    answer: option_letter(answer),
                    task_type: task,
                    difficulty,
                    metadata: Metadata {
                        scene: scene.clone(),
                        query,
                        template: template.to_string(),
                        palette: palette_of(scene, vocab),
                        canvas: super::render::CANVAS,
                    },
                });
            }
            Err(reason) => last = reason,
        }
    }
    Err(Error::Generation {
        constraint: last.to_string(),
        attempts: RESAMPLE_BUDGET,
    })
}

fn palette_of(scene: &Scene, vocab: &Vocabulary) -> BTreeMap<String, String> {
    let mut ids: Vec<&str> = scene.objects.iter().map(|o| o.color.as_str()).collect();
    if let Some(p) = &scene.panel {
        ids.extend(p.grid.iter().flatten().map(String::as_str));
    }
    ids.into_iter()
        .filter_map(|id| vocab.color(id).map(|c| (c.id.clone(), c.hex.clone())))
        .collect()
}

type Draw = std::result::Result<(Query, String), &'static str>;

fn random_predicate<R: Rng + ?Sized>(
    scene: &Scene,
    vocab: &Vocabulary,
    difficulty: Difficulty,
    prefer_present: bool,
    rng: &mut R,
) -> Predicate {
    // Anchor on a scene object half the time so counts are not almost always zero.
    let anchor = if prefer_present { scene.objects.choose(rng) } else { None };
    let color = anchor.map_or_else(|| vocab.colors.choose(rng).expect("palette").id.clone(), |o| o.color.clone());
    let shape = anchor.map_or_else(|| vocab.shapes.choose(rng).expect("shapes").id.clone(), |o| o.shape.clone());
    let size = anchor.map_or(if rng.gen_bool(0.5) { Size::Large } else { Size::Small }, |o| o.size);
    match difficulty {
        Difficulty::Easy => {
            if rng.gen_bool(0.5) {
                Predicate {
                    color: Some(color),
                    ..Predicate::default()
                }
            } else {
                Predicate {
                    shape: Some(shape),
                    ..Predicate::default()
                }
            }
        }
        Difficulty::Medium => Predicate {
            color: Some(color),
            shape: Some(shape),
            ..Predicate::default()
        },
        Difficulty::Hard => {
            if rng.gen_bool(0.5) {
                Predicate {
                    color: Some(color),
                    shape: Some(shape),
                    size: Some(size),
                    not_color: None,
                }
            } else {
                let other = vocab.colors.choose(rng).expect("palette").id.clone();
                Predicate {
                    shape: Some(shape),
                    not_color: Some(other),
                    ..Predicate::default()
                }
            }
        }
    }
}

fn draw<R: Rng + ?Sized>(
    scene: &Scene,
    task: TaskType,
    difficulty: Difficulty,
    template: &str,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Draw {
    match task {
        TaskType::Counting => {
            let predicate = random_predicate(scene, vocab, difficulty, rng.gen_bool(0.7), rng);
            let desc = predicate.describe(vocab, true);
            let q = if template.ends_with("how_many") {
                format!("How many {desc} are there?")
            } else {
                format!("What is the number of {desc} in the picture?")
            };
            Ok((Query::Count { predicate }, q))
        }
        TaskType::Comparison => {
            let left = random_predicate(scene, vocab, difficulty, rng.gen_bool(0.8), rng);
            let right = random_predicate(scene, vocab, difficulty, rng.gen_bool(0.8), rng);
            if left == right {
                return Err("comparison between distinct sets");
            }
            let (a, b) = (left.describe(vocab, true), right.describe(vocab, true));
            let (relation, q) = match template {
                "comparison/more" => (CountRelation::More, format!("Are there more {a} than {b}?")),
                "comparison/at_least" => (CountRelation::AtLeast, format!("Do we have at least as many {a} as {b}?")),
                _ => (CountRelation::Fewer, format!("Are there fewer {a} than {b}?")),
            };
            Ok((Query::Compare { left, right, relation }, q))
        }
        TaskType::Spatial => draw_spatial(scene, difficulty, template, vocab, rng),
        TaskType::Pattern => {
            let panel = scene.panel.as_ref().ok_or("pattern panel present")?;
            let (r, c) = panel.masked_cell;
            let position = PANEL_POSITIONS[r as usize][c as usize].to_string();
            let q = if template.ends_with("complete") {
                format!("To complete the pattern, what color should fill the {position} position?")
            } else {
                format!("Which color belongs in the {position} tile of the pattern?")
            };
            Ok((Query::Pattern { position }, q))
        }
        TaskType::Existence => {
            let predicate = random_predicate(scene, vocab, difficulty, rng.gen_bool(0.5), rng);
            let q = if template.ends_with("is_there") {
                format!("Is there {} in the scene?", with_article(&predicate.describe(vocab, false)))
            } else {
                format!("Do you see any {}?", predicate.describe(vocab, true))
            };
            Ok((Query::Exists { predicate }, q))
        }
        TaskType::Global => draw_global(scene, difficulty, template, rng),
        TaskType::AttributeLogic => draw_attribute_logic(scene, difficulty, template, vocab, rng),
    }
}

fn draw_spatial<R: Rng + ?Sized>(
    scene: &Scene,
    difficulty: Difficulty,
    template: &str,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Draw {
    let uniq = unique_identities(scene);
    let basic = [
        SpatialRelation::LeftOf,
        SpatialRelation::RightOf,
        SpatialRelation::Above,
        SpatialRelation::Below,
    ];
    let verb = |subject: &str| {
        if template.ends_with("does_appear") {
            format!("Does the {subject} appear")
        } else {
            format!("Is the {subject}")
        }
    };
    match difficulty {
        Difficulty::Easy => {
            let picks: Vec<usize> = uniq.choose_multiple(rng, 2).copied().collect();
            if picks.len() < 2 {
                return Err("two distinct referents");
            }
            let subject = Predicate::of_object(&scene.objects[picks[0]]);
            let object = Predicate::of_object(&scene.objects[picks[1]]);
            let relation = *basic.choose(rng).expect("relations");
            let q = format!(
                "{} {} the {}?",
                verb(&subject.describe(vocab, false)),
                relation.phrase(),
                object.describe(vocab, false)
            );
            Ok((
                Query::Spatial {
                    quantifier: Quantifier::The,
                    subject,
                    clauses: vec![RelationClause { relation, object }],
                },
                q,
            ))
        }
        Difficulty::Medium => {
            // Color-only or shape-only referents: several objects can match.
            let a = scene.objects.choose(rng).ok_or("objects present")?;
            let b = scene.objects.choose(rng).ok_or("objects present")?;
            let subject = Predicate {
                color: Some(a.color.clone()),
                shape: Some(a.shape.clone()),
                ..Predicate::default()
            };
            let object = Predicate {
                shape: Some(b.shape.clone()),
                ..Predicate::default()
            };
            if subject.matches(b) && object.matches(a) {
                return Err("subject and object sets differ");
            }
            let relation = *[SpatialRelation::DirectlyAbove, SpatialRelation::DirectlyBelow]
                .choose(rng)
                .expect("relations");
            let q = format!(
                "Is any {} {} {}?",
                subject.describe(vocab, false),
                relation.phrase(),
                with_article(&object.describe(vocab, false))
            );
            Ok((
                Query::Spatial {
                    quantifier: Quantifier::Any,
                    subject,
                    clauses: vec![RelationClause { relation, object }],
                },
                q,
            ))
        }
        Difficulty::Hard => {
            let picks: Vec<usize> = uniq.choose_multiple(rng, 3).copied().collect();
            if picks.len() < 3 {
                return Err("three distinct referents");
            }
            let subject = Predicate::of_object(&scene.objects[picks[0]]);
            let r1 = *basic.choose(rng).expect("relations");
            let r2 = *basic.choose(rng).expect("relations");
            let o1 = Predicate::of_object(&scene.objects[picks[1]]);
            let o2 = Predicate::of_object(&scene.objects[picks[2]]);
            let q = format!(
                "{} {} the {} and {} the {}?",
                verb(&subject.describe(vocab, false)),
                r1.phrase(),
                o1.describe(vocab, false),
                r2.phrase(),
                o2.describe(vocab, false)
            );
            Ok((
                Query::Spatial {
                    quantifier: Quantifier::The,
                    subject,
                    clauses: vec![
                        RelationClause {
                            relation: r1,
                            object: o1,
                        },
                        RelationClause {
                            relation: r2,
                            object: o2,
                        },
                    ],
                },
                q,
            ))
        }
    }
}

fn draw_global<R: Rng + ?Sized>(scene: &Scene, difficulty: Difficulty, template: &str, rng: &mut R) -> Draw {
    let n = scene.objects.len();
    let threshold = |rng: &mut R| -> usize {
        // Hard questions put the threshold right next to the true count.
        let spread: i64 = match difficulty {
            Difficulty::Easy => 3,
            Difficulty::Medium => 2,
            Difficulty::Hard => 1,
        };
        let offset = rng.gen_range(-spread..=spread);
        (n as i64 + offset).clamp(0, 16) as usize
    };
    match template {
        "global/same_color" => Ok((
            Query::Global {
                property: GlobalProperty::SameColor,
                threshold: None,
            },
            "Are all objects the same color?".to_string(),
        )),
        "global/same_shape" => Ok((
            Query::Global {
                property: GlobalProperty::SameShape,
                threshold: None,
            },
            "Are all objects the same shape?".to_string(),
        )),
        "global/more_than" => {
            let t = threshold(rng);
            Ok((
                Query::Global {
                    property: GlobalProperty::TotalMoreThan,
                    threshold: Some(t),
                },
                format!("Are there more than {} objects in total?", NUMBER_WORDS[t]),
            ))
        }
        _ => {
            let t = threshold(rng);
            Ok((
                Query::Global {
                    property: GlobalProperty::TotalAtMost,
                    threshold: Some(t),
                },
                format!("Is the total number of objects at most {}?", NUMBER_WORDS[t]),
            ))
        }
    }
}

fn draw_attribute_logic<R: Rng + ?Sized>(
    scene: &Scene,
    difficulty: Difficulty,
    template: &str,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Draw {
    let anchor = scene.objects.choose(rng).ok_or("objects present")?;
    let mut predicate = Predicate {
        shape: Some(anchor.shape.clone()),
        ..Predicate::default()
    };
    if difficulty == Difficulty::Hard {
        predicate.size = Some(anchor.size);
    }
    // Queried attributes must exist in the scene.
    if predicate.count(scene) == 0 {
        return Err("queried shape present in scene");
    }
    let pick_color = |rng: &mut R| -> String {
        // Bias toward colors in the scene so both answers occur.
        if rng.gen_bool(0.6) {
            scene.objects.choose(rng).expect("objects").color.clone()
        } else {
            vocab.colors.choose(rng).expect("palette").id.clone()
        }
    };
    let shape_pl = predicate.describe(vocab, true);
    let shape_sg = predicate.describe(vocab, false);
    if template.ends_with("any_not") {
        let c1 = pick_color(rng);
        let mut colors = vec![c1];
        if difficulty != Difficulty::Easy {
            let c2 = pick_color(rng);
            if c2 == colors[0] {
                return Err("distinct colors in disjunction");
            }
            colors.push(c2);
        }
        let q = if colors.len() == 1 {
            format!("Are there any {shape_pl} that are not {}?", color_name(vocab, &colors[0]))
        } else {
            format!(
                "Are there any {shape_pl} that are neither {} nor {}?",
                color_name(vocab, &colors[0]),
                color_name(vocab, &colors[1])
            )
        };
        Ok((
            Query::AnyNot {
                predicate,
                excluded_colors: colors,
            },
            q,
        ))
    } else {
        let c1 = pick_color(rng);
        let c2 = pick_color(rng);
        if c1 == c2 {
            return Err("distinct colors in disjunction");
        }
        let q = format!(
            "Is every {shape_sg} either {} or {}?",
            color_name(vocab, &c1),
            color_name(vocab, &c2)
        );
        Ok((
            Query::Every {
                predicate,
                allowed_colors: vec![c1, c2],
            },
            q,
        ))
    }
}

/// Option strings and zero-based answer index for a query.
pub fn answer_for(scene: &Scene, query: &Query, vocab: &Vocabulary) -> Result<(Vec<String>, usize)> {
    let yes_no = |b: bool| -> (Vec<String>, usize) { (YES_NO.iter().map(|s| s.to_string()).collect(), usize::from(!b)) };
    Ok(match query {
        Query::Count { predicate } => (count_options(), predicate.count(scene)),
        Query::Compare { left, right, relation } => {
            let (a, b) = (left.count(scene), right.count(scene));
            yes_no(match relation {
                CountRelation::More => a > b,
                CountRelation::Fewer => a < b,
                CountRelation::AtLeast => a >= b,
            })
        }
        Query::Spatial {
            quantifier,
            subject,
            clauses,
        } => {
            let subjects: Vec<&SceneObject> = scene.objects.iter().filter(|o| subject.matches(o)).collect();
            let holds = subjects.iter().any(|s| {
                clauses.iter().all(|cl| {
                    scene
                        .objects
                        .iter()
                        .filter(|o| cl.object.matches(o) && o.cell != s.cell)
                        .any(|o| cl.relation.holds(s.cell, o.cell))
                })
            });
            if *quantifier == Quantifier::The && subjects.len() != 1 {
                return Err(Error::Invalid("definite spatial subject is not unique".into()));
            }
            yes_no(holds)
        }
        Query::Pattern { .. } => {
            let panel = scene
                .panel
                .as_ref()
                .ok_or_else(|| Error::Invalid("pattern query without panel".into()))?;
            let options: Vec<String> = vocab.colors.iter().map(|c| c.name.clone()).collect();
            let idx = vocab
                .color_index(panel.answer())
                .ok_or_else(|| Error::Invalid(format!("panel color `{}` not in palette", panel.answer())))?;
            (options, idx)
        }
        Query::Exists { predicate } => yes_no(predicate.count(scene) > 0),
        Query::Global { property, threshold } => {
            let n = scene.objects.len();
            let t = threshold.unwrap_or(0);
            yes_no(match property {
                GlobalProperty::SameColor => scene.objects.windows(2).all(|w| w[0].color == w[1].color),
                GlobalProperty::SameShape => scene.objects.windows(2).all(|w| w[0].shape == w[1].shape),
                GlobalProperty::TotalMoreThan => n > t,
                GlobalProperty::TotalAtMost => n <= t,
            })
        }
        Query::AnyNot {
            predicate,
            excluded_colors,
        } => yes_no(
            scene
                .objects
                .iter()
                .any(|o| predicate.matches(o) && !excluded_colors.contains(&o.color)),
        ),
        Query::Every {
            predicate,
            allowed_colors,
        } => yes_no(
            scene
                .objects
                .iter()
                .filter(|o| predicate.matches(o))
                .all(|o| allowed_colors.contains(&o.color)),
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svr::scene::{sample_scene, PatternPanel, PatternRule};

    fn obj(shape: &str, color: &str, cell: (u8, u8)) -> SceneObject {
        SceneObject {
            shape: shape.into(),
            color: color.into(),
            size: Size::Large,
            cell,
        }
    }

    #[test]
    fn existence_of_absent_object_is_no() {
        let vocab = Vocabulary::default();
        let scene = Scene {
            objects: vec![obj("circle", "red", (0, 0))],
            panel: None,
            seed: 0,
        };
        let q = Query::Exists {
            predicate: Predicate {
                color: Some("orange".into()),
                shape: Some("triangle".into()),
                ..Predicate::default()
            },
        };
        let (opts, ans) = answer_for(&scene, &q, &vocab).unwrap();
        assert_eq!(opts[ans], "no");
    }

    #[test]
    fn counting_navy_triangles() {
        let vocab = Vocabulary::default();
        let scene = Scene {
            objects: vec![
                obj("triangle", "navy", (0, 0)),
                obj("triangle", "navy", (1, 0)),
                obj("circle", "red", (2, 0)),
            ],
            panel: None,
            seed: 0,
        };
        let predicate = Predicate {
            color: Some("navy".into()),
            shape: Some("triangle".into()),
            ..Predicate::default()
        };
        assert_eq!(predicate.describe(&vocab, true), "navy triangles");
        let (opts, ans) = answer_for(&scene, &Query::Count { predicate }, &vocab).unwrap();
        assert_eq!(opts[ans], "2");
    }

    #[test]
    fn row_repetition_answer() {
        let vocab = Vocabulary::default();
        let s = |x: &str| x.to_string();
        let panel = PatternPanel {
            grid: [
                [s("red"), s("red"), s("red")],
                [s("navy"), s("navy"), s("navy")],
                [s("teal"), s("teal"), s("teal")],
            ],
            masked_cell: (0, 2),
            rule: PatternRule::RowRepetition,
        };
        let scene = Scene {
            objects: vec![],
            panel: Some(panel),
            seed: 0,
        };
        let (opts, ans) = answer_for(&scene, &Query::Pattern { position: "top-right".into() }, &vocab).unwrap();
        assert_eq!(opts[ans], "red");
    }

    #[test]
    fn instantiate_every_task_and_difficulty() {
        let cfg = GeneratorConfig::default();
        for task in TaskType::ALL {
            for d in Difficulty::ALL {
                for s in 0..20u64 {
                    let scene = sample_scene(s, task, d, &cfg).unwrap();
                    let ex = instantiate_question(&scene, task, d, s, &cfg).unwrap();
                    let idx = ex.answer_index().unwrap();
                    assert!(idx < ex.options.len(), "{task} {d:?}: {}", ex.question);
                    if let Query::Compare { left, right, .. } = &ex.metadata.query {
                        assert_ne!(left, right);
                    }
                }
            }
        }
    }

    #[test]
    fn panel_mismatch_is_rejected() {
        let cfg = GeneratorConfig::default();
        let scene = Scene::empty(0);
        assert!(instantiate_question(&scene, TaskType::Pattern, Difficulty::Easy, 0, &cfg).is_err());
    }
}
