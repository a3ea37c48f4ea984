// SPDX-License-Identifier: MIT OR Apache-2.0

//! Visual vocabulary: the 12-color palette and the 15 shape IDs.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PALETTE_SIZE: usize = 12;
pub const SHAPE_COUNT: usize = 15;

const DEFAULT_VOCAB: &str = include_str!("../../assets/vocab.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorSpec {
    pub id: String,
    pub name: String,
    /// Six hex digits, no leading `#`.
    pub hex: String,
}

impl ColorSpec {
    pub fn rgb(&self) -> Result<[u8; 3]> {
        parse_hex(&self.hex).ok_or_else(|| Error::Invalid(format!("bad hex code `{}` for color `{}`", self.hex, self.id)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub id: String,
    pub display_name: String,
}

impl ShapeSpec {
    /// English plural of the display name.
    pub fn plural(&self) -> String {
        plural(&self.display_name)
    }
}

pub(crate) fn plural(word: &str) -> String {
    if word.ends_with('s') || word.ends_with('x') || word.ends_with("sh") || word.ends_with("ch") {
        format!("{word}es")
    } else {
        format!("{word}s")
    }
}

/// Geometric primitive a shape ID is drawn with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ellipse,
    Diamond,
    Star,
    Heart,
    Arrow,
    Moon,
    Pentagon,
    Hexagon,
    Cross,
    Ring,
    Semicircle,
    Trapezoid,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; SHAPE_COUNT] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ellipse,
        ShapeKind::Diamond,
        ShapeKind::Star,
        ShapeKind::Heart,
        ShapeKind::Arrow,
        ShapeKind::Moon,
        ShapeKind::Pentagon,
        ShapeKind::Hexagon,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Semicircle,
        ShapeKind::Trapezoid,
    ];

    pub fn from_id(id: &str) -> Option<Self> {
        Some(match id {
            "circle" => Self::Circle,
            "square" => Self::Square,
            "triangle" => Self::Triangle,
            "ellipse" => Self::Ellipse,
            "diamond" => Self::Diamond,
            "star" => Self::Star,
            "heart" => Self::Heart,
            "arrow" => Self::Arrow,
            "moon" => Self::Moon,
            "pentagon" => Self::Pentagon,
            "hexagon" => Self::Hexagon,
            "cross" => Self::Cross,
            "ring" => Self::Ring,
            "semicircle" => Self::Semicircle,
            "trapezoid" => Self::Trapezoid,
            _ => return None,
        })
    }
}

/// Palette plus shape vocabulary, normally loaded from a JSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub colors: Vec<ColorSpec>,
    pub shapes: Vec<ShapeSpec>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_json(DEFAULT_VOCAB).expect("bundled vocabulary is valid")
    }
}

impl Vocabulary {
    pub fn from_json(text: &str) -> Result<Self> {
        let vocab: Vocabulary = serde_json::from_str(text)?;
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.len() != PALETTE_SIZE {
            return Err(Error::Invalid(format!(
                "palette must hold {PALETTE_SIZE} colors, found {}",
                self.colors.len()
            )));
        }
        if self.shapes.len() != SHAPE_COUNT {
            return Err(Error::Invalid(format!(
                "shape vocabulary must hold {SHAPE_COUNT} shapes, found {}",
                self.shapes.len()
            )));
        }
        unique(self.colors.iter().map(|c| c.id.as_str()), "color id")?;
        unique(self.colors.iter().map(|c| c.name.as_str()), "color name")?;
        unique(self.shapes.iter().map(|s| s.id.as_str()), "shape id")?;
        for c in &self.colors {
            c.rgb()?;
        }
        for s in &self.shapes {
            if ShapeKind::from_id(&s.id).is_none() {
                return Err(Error::Invalid(format!("shape `{}` has no rasterizer", s.id)));
            }
        }
        Ok(())
    }

    pub fn color(&self, id: &str) -> Option<&ColorSpec> {
        self.colors.iter().find(|c| c.id == id)
    }

    pub fn shape(&self, id: &str) -> Option<&ShapeSpec> {
        self.shapes.iter().find(|s| s.id == id)
    }

    pub fn color_index(&self, id: &str) -> Option<usize> {
        self.colors.iter().position(|c| c.id == id)
    }

    pub fn shape_index(&self, id: &str) -> Option<usize> {
        self.shapes.iter().position(|s| s.id == id)
    }
}

fn unique<'a>(items: impl Iterator<Item = &'a str>, what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for it in items {
        if !seen.insert(it) {
            return Err(Error::Invalid(format!("duplicate {what} `{it}`")));
        }
    }
    Ok(())
}

fn parse_hex(hex: &str) -> Option<[u8; 3]> {
    let bytes = hex::decode(hex).ok()?;
    <[u8; 3]>::try_from(bytes.as_slice()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_vocabulary_contract() {
        let v = Vocabulary::default();
        assert_eq!(v.colors.len(), 12);
        assert_eq!(v.shapes.len(), 15);
        assert_eq!(v.color("navy").unwrap().rgb().unwrap(), [0x00, 0x30, 0x49]);
        assert_eq!(v.color("red").unwrap().rgb().unwrap(), [0xD6, 0x28, 0x28]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut v = Vocabulary::default();
        v.colors[1].id = v.colors[0].id.clone();
        assert!(v.validate().is_err());
    }

    #[test]
    fn unknown_shape_rejected() {
        let mut v = Vocabulary::default();
        v.shapes[0].id = "blob".into();
        assert!(v.validate().is_err());
    }

    #[test]
    fn plurals() {
        assert_eq!(plural("cross"), "crosses");
        assert_eq!(plural("ellipse"), "ellipses");
        assert_eq!(plural("star"), "stars");
    }
}
