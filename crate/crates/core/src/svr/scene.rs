// SPDX-License-Identifier: MIT OR Apache-2.0

//! Symbolic scene state and the seeded scene sampler.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

use super::vocab::Vocabulary;

/// Scene grid is `GRID × GRID` cells.
pub const GRID: u8 = 4;
/// Upper bound on objects in any scene (also the largest count answer).
pub const MAX_OBJECTS: usize = 12;
/// Attempts allowed before a resample loop gives up.
pub const RESAMPLE_BUDGET: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Counting,
    Comparison,
    Spatial,
    Pattern,
    Existence,
    Global,
    AttributeLogic,
}

impl TaskType {
    pub const ALL: [TaskType; 7] = [
        TaskType::Counting,
        TaskType::Comparison,
        TaskType::Spatial,
        TaskType::Pattern,
        TaskType::Existence,
        TaskType::Global,
        TaskType::AttributeLogic,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap_or(0)
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Counting => "counting",
            TaskType::Comparison => "comparison",
            TaskType::Spatial => "spatial",
            TaskType::Pattern => "pattern",
            TaskType::Existence => "existence",
            TaskType::Global => "global",
            TaskType::AttributeLogic => "attribute_logic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|d| d.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn as_str(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: String,
    pub color: String,
    pub size: Size,
    /// `(x, y)`: column then row, `y = 0` is the top row.
    pub cell: (u8, u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternRule {
    /// Every row is a single color repeated three times.
    RowRepetition,
    /// Every row reads the same left-to-right and right-to-left.
    HorizontalSymmetry,
}

impl PatternRule {
    pub fn holds(self, grid: &[[String; 3]; 3]) -> bool {
        match self {
            PatternRule::RowRepetition => grid.iter().all(|row| row[0] == row[1] && row[1] == row[2]),
            PatternRule::HorizontalSymmetry => grid.iter().all(|row| row[0] == row[2]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternPanel {
    /// Row-major color ids; the masked cell holds its true color.
    pub grid: [[String; 3]; 3],
    /// `(row, col)` of the hidden tile.
    pub masked_cell: (u8, u8),
    pub rule: PatternRule,
}

impl PatternPanel {
    pub fn answer(&self) -> &str {
        let (r, c) = self.masked_cell;
        &self.grid[r as usize][c as usize]
    }

    /// Palette colors that satisfy the rule when placed in the masked cell.
    pub fn consistent_colors<'a>(&self, vocab: &'a Vocabulary) -> Vec<&'a str> {
        let (r, c) = self.masked_cell;
        vocab
            .colors
            .iter()
            .filter(|col| {
                let mut g = self.grid.clone();
                g[r as usize][c as usize] = col.id.clone();
                self.rule.holds(&g)
            })
            .map(|col| col.id.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panel: Option<PatternPanel>,
    pub seed: u64,
}

impl Scene {
    pub fn empty(seed: u64) -> Self {
        Self {
            objects: Vec::new(),
            panel: None,
            seed,
        }
    }

    pub fn cells_unique(&self) -> bool {
        let mut seen = HashSet::new();
        self.objects.iter().all(|o| seen.insert(o.cell))
    }
}

/// Cells covered by the pattern panel (bottom-right 3×3 block of the grid).
pub fn panel_covers(cell: (u8, u8)) -> bool {
    cell.0 >= 1 && cell.1 >= 1
}

/// Per-(task, difficulty) scene parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyLevel {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Number of palette colors objects are drawn from. Fewer colors mean
    /// more objects share attributes with the queried one.
    pub scene_colors: usize,
    pub scene_shapes: usize,
    /// Distinct colors used by the pattern panel.
    pub panel_colors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyTable {
    pub easy: DifficultyLevel,
    pub medium: DifficultyLevel,
    pub hard: DifficultyLevel,
    /// Overrides for specific task types (pattern scenes only have the
    /// seven cells outside the panel available).
    #[serde(default)]
    pub overrides: BTreeMap<TaskType, [DifficultyLevel; 3]>,
}

impl Default for DifficultyTable {
    fn default() -> Self {
        let level = |min, max, colors, shapes, panel| DifficultyLevel {
            min_objects: min,
            max_objects: max,
            scene_colors: colors,
            scene_shapes: shapes,
            panel_colors: panel,
        };
        let mut overrides = BTreeMap::new();
        overrides.insert(
            TaskType::Pattern,
            [level(2, 4, 12, 15, 2), level(4, 6, 6, 6, 3), level(5, 7, 4, 4, 4)],
        );
        Self {
            easy: level(2, 4, 12, 15, 2),
            medium: level(5, 8, 6, 6, 3),
            hard: level(9, 12, 4, 4, 4),
            overrides,
        }
    }
}

impl DifficultyTable {
    pub fn level(&self, task: TaskType, difficulty: Difficulty) -> &DifficultyLevel {
        if let Some(levels) = self.overrides.get(&task) {
            return &levels[difficulty.index()];
        }
        match difficulty {
            Difficulty::Easy => &self.easy,
            Difficulty::Medium => &self.medium,
            Difficulty::Hard => &self.hard,
        }
    }
}

/// Weights over the two panel rules for one difficulty level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleWeights {
    pub row_repetition: f64,
    pub horizontal_symmetry: f64,
}

/// Everything the scene sampler and question instantiator read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub vocab: Vocabulary,
    pub difficulty: DifficultyTable,
    /// `[easy, medium, hard]`.
    pub pattern_rules: [RuleWeights; 3],
    /// Sampling weights over the seven task types, in `TaskType::ALL` order.
    pub task_weights: [f64; 7],
    pub difficulty_weights: [f64; 3],
    /// Optional per-task weights over template variants (uniform if absent).
    #[serde(default)]
    pub template_weights: BTreeMap<TaskType, Vec<f64>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            vocab: Vocabulary::default(),
            difficulty: DifficultyTable::default(),
            pattern_rules: [
                RuleWeights {
                    row_repetition: 1.0,
                    horizontal_symmetry: 0.0,
                },
                RuleWeights {
                    row_repetition: 0.5,
                    horizontal_symmetry: 0.5,
                },
                RuleWeights {
                    row_repetition: 0.0,
                    horizontal_symmetry: 1.0,
                },
            ],
            task_weights: [1.0; 7],
            difficulty_weights: [1.0; 3],
            template_weights: BTreeMap::new(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        for task in TaskType::ALL {
            for diff in Difficulty::ALL {
                let lv = self.difficulty.level(task, diff);
                let cap = if task == TaskType::Pattern { 7 } else { 16 };
                if lv.min_objects > lv.max_objects || lv.max_objects > cap.min(MAX_OBJECTS) {
                    return Err(Error::Invalid(format!(
                        "object range {}..={} invalid for {task}/{}",
                        lv.min_objects,
                        lv.max_objects,
                        diff.as_str()
                    )));
                }
                if lv.scene_colors == 0
                    || lv.scene_colors > self.vocab.colors.len()
                    || lv.scene_shapes == 0
                    || lv.scene_shapes > self.vocab.shapes.len()
                    || lv.panel_colors < 2
                    || lv.panel_colors > self.vocab.colors.len()
                {
                    return Err(Error::Invalid(format!(
                        "palette sizes invalid for {task}/{}",
                        diff.as_str()
                    )));
                }
            }
        }
        let positive = |w: &[f64]| w.iter().all(|x| *x >= 0.0 && x.is_finite()) && w.iter().sum::<f64>() > 0.0;
        if !positive(&self.task_weights) || !positive(&self.difficulty_weights) {
            return Err(Error::Invalid("sampling weights must be non-negative with positive sum".into()));
        }
        for w in &self.pattern_rules {
            if !positive(&[w.row_repetition, w.horizontal_symmetry]) {
                return Err(Error::Invalid("pattern rule weights must have positive sum".into()));
            }
        }
        Ok(())
    }
}

/// Draws an index with probability proportional to `weights`.
pub(crate) fn weighted_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Minimum number of objects with a unique (color, shape) identity the
/// question family for `task` needs.
fn unique_referents_needed(task: TaskType, difficulty: Difficulty) -> usize {
    match (task, difficulty) {
        (TaskType::Spatial, Difficulty::Hard) => 3,
        (TaskType::Spatial, _) => 2,
        _ => 0,
    }
}

pub(crate) fn unique_identities(scene: &Scene) -> Vec<usize> {
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            scene
                .objects
                .iter()
                .filter(|p| p.color == o.color && p.shape == o.shape)
                .count()
                == 1
        })
        .map(|(i, _)| i)
        .collect()
}

/// Samples a scene whose later question will be well-posed.
pub fn sample_scene(seed: u64, task: TaskType, difficulty: Difficulty, config: &GeneratorConfig) -> Result<Scene> {
    let mut rng = seed::rng_str(seed, "scene");
    let level = *config.difficulty.level(task, difficulty);
    let vocab = &config.vocab;
    let mut last_failure = "none";
    for _ in 0..RESAMPLE_BUDGET {
        let n = rng.gen_range(level.min_objects..=level.max_objects);
        let mut cells: Vec<(u8, u8)> = (0..GRID)
            .flat_map(|y| (0..GRID).map(move |x| (x, y)))
            .filter(|&c| task != TaskType::Pattern || !panel_covers(c))
            .collect();
        if n > cells.len() {
            last_failure = "enough free cells";
            continue;
        }
        cells.shuffle(&mut rng);
        let mut color_pool: Vec<usize> = (0..vocab.colors.len()).collect();
        color_pool.shuffle(&mut rng);
        color_pool.truncate(level.scene_colors);
        let mut shape_pool: Vec<usize> = (0..vocab.shapes.len()).collect();
        shape_pool.shuffle(&mut rng);
        shape_pool.truncate(level.scene_shapes);

        let mut objects: Vec<SceneObject> = cells[..n]
            .iter()
            .map(|&cell| SceneObject {
                shape: vocab.shapes[*shape_pool.choose(&mut rng).expect("non-empty pool")].id.clone(),
                color: vocab.colors[*color_pool.choose(&mut rng).expect("non-empty pool")].id.clone(),
                size: if rng.gen_bool(0.5) { Size::Large } else { Size::Small },
                cell,
            })
            .collect();
        objects.sort_by_key(|o| (o.cell.1, o.cell.0));

        let panel = if task == TaskType::Pattern {
            Some(sample_panel(&mut rng, difficulty, &level, config))
        } else {
            None
        };
        let scene = Scene { objects, panel, seed };

        if unique_identities(&scene).len() < unique_referents_needed(task, difficulty) {
            last_failure = "distinct referents for relational question";
            continue;
        }
        if task == TaskType::AttributeLogic && scene.objects.is_empty() {
            last_failure = "at least one object for attribute logic";
            continue;
        }
        if let Some(p) = &scene.panel {
            if p.consistent_colors(vocab).len() != 1 {
                last_failure = "pattern panel uniquely solvable";
                continue;
            }
        }
        return Ok(scene);
    }
    Err(Error::Generation {
        constraint: last_failure.to_string(),
        attempts: RESAMPLE_BUDGET,
    })
}

fn sample_panel<R: Rng + ?Sized>(
    rng: &mut R,
    difficulty: Difficulty,
    level: &DifficultyLevel,
    config: &GeneratorConfig,
) -> PatternPanel {
    let w = config.pattern_rules[difficulty.index()];
    let rule = if weighted_index(&[w.row_repetition, w.horizontal_symmetry], rng) == 0 {
        PatternRule::RowRepetition
    } else {
        PatternRule::HorizontalSymmetry
    };
    let vocab = &config.vocab;
    let mut pool: Vec<&str> = vocab.colors.iter().map(|c| c.id.as_str()).collect();
    pool.shuffle(rng);
    pool.truncate(level.panel_colors);
    let pick = |rng: &mut R| pool.choose(rng).expect("panel palette").to_string();

    let grid: [[String; 3]; 3] = std::array::from_fn(|_| match rule {
        PatternRule::RowRepetition => {
            let c = pick(rng);
            [c.clone(), c.clone(), c]
        }
        PatternRule::HorizontalSymmetry => {
            let edge = pick(rng);
            let mut mid = pick(rng);
            while mid == edge && pool.len() > 1 {
                mid = pick(rng);
            }
            [edge.clone(), mid, edge]
        }
    });
    let row = rng.gen_range(0..3u8);
    let col = match rule {
        PatternRule::RowRepetition => rng.gen_range(0..3u8),
        // The middle column is unconstrained under mirror symmetry.
        PatternRule::HorizontalSymmetry => {
            if rng.gen_bool(0.5) {
                0
            } else {
                2
            }
        }
    };
    PatternPanel {
        grid,
        masked_cell: (row, col),
        rule,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let cfg = GeneratorConfig::default();
        let a = sample_scene(7, TaskType::Existence, Difficulty::Easy, &cfg).unwrap();
        let b = sample_scene(7, TaskType::Existence, Difficulty::Easy, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pattern_scene_has_single_masked_panel() {
        let cfg = GeneratorConfig::default();
        for s in 0..50 {
            for d in Difficulty::ALL {
                let sc = sample_scene(s, TaskType::Pattern, d, &cfg).unwrap();
                let p = sc.panel.as_ref().expect("panel present");
                assert_eq!(p.consistent_colors(&cfg.vocab), vec![p.answer()]);
                assert!(sc.objects.iter().all(|o| !panel_covers(o.cell)));
            }
        }
    }

    #[test]
    fn hard_counting_range() {
        let cfg = GeneratorConfig::default();
        let sc = sample_scene(42, TaskType::Counting, Difficulty::Hard, &cfg).unwrap();
        let lv = cfg.difficulty.level(TaskType::Counting, Difficulty::Hard);
        assert!((lv.min_objects..=lv.max_objects).contains(&sc.objects.len()));
        assert!(sc.panel.is_none());
    }

    #[test]
    fn unsatisfiable_constraint_reports_name() {
        let mut cfg = GeneratorConfig::default();
        // One color and one shape: no object can ever have a unique identity.
        let one = DifficultyLevel {
            min_objects: 2,
            max_objects: 2,
            scene_colors: 1,
            scene_shapes: 1,
            panel_colors: 2,
        };
        cfg.difficulty.easy = one;
        let err = sample_scene(1, TaskType::Spatial, Difficulty::Easy, &cfg).unwrap_err();
        match err {
            Error::Generation { constraint, attempts } => {
                assert_eq!(attempts, RESAMPLE_BUDGET);
                assert!(constraint.contains("referents"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn panel_rules() {
        let g = |rows: [[&str; 3]; 3]| rows.map(|r| r.map(String::from));
        assert!(PatternRule::RowRepetition.holds(&g([["a", "a", "a"], ["b", "b", "b"], ["a", "a", "a"]])));
        assert!(!PatternRule::RowRepetition.holds(&g([["a", "b", "a"], ["b", "b", "b"], ["a", "a", "a"]])));
        assert!(PatternRule::HorizontalSymmetry.holds(&g([["a", "b", "a"], ["c", "c", "c"], ["b", "a", "b"]])));
    }
}
