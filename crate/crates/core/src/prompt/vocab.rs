use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

use super::text::{encode_text, TextEncoder, TextTable};
use super::{PromptKind, PromptSet};

pub const BUILTIN_VOCAB_SIZE: usize = 4585;

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];

const MODIFIERS: [&str; 70] = [
    "amber", "ash", "azure", "beige", "black", "bronze", "brown", "burgundy", "charcoal", "cherry",
    "cobalt", "copper", "coral", "cream", "crimson", "cyan", "dark", "dusty", "ebony", "emerald",
    "fawn", "gold", "golden", "gray", "hazel", "indigo", "ivory", "jade", "khaki", "lavender",
    "lemon", "light", "lilac", "lime", "magenta", "maroon", "mauve", "mint", "mustard", "navy",
    "ochre", "olive", "orange", "orchid", "pale", "peach", "pearl", "pink", "plum", "purple",
    "rose", "ruby", "rust", "saffron", "salmon", "sand", "scarlet", "silver", "sky", "slate",
    "steel", "tan", "teal", "tawny", "turquoise", "umber", "violet", "white", "wine", "striped",
];

const NOUNS: [&str; 70] = [
    "apple", "bag", "ball", "banana", "basket", "bell", "bench", "bicycle", "bird", "boat",
    "book", "bottle", "bowl", "box", "bucket", "button", "cake", "candle", "cap", "car",
    "carpet", "cat", "chair", "clock", "cloud", "coat", "cone", "cup", "curtain", "diamond",
    "dog", "door", "drum", "fan", "feather", "flag", "flower", "fork", "glove", "hat",
    "heart", "hexagon", "kettle", "key", "kite", "ladder", "lamp", "leaf", "mug", "oval",
    "pen", "pencil", "pentagon", "pillow", "plate", "rectangle", "ribbon", "ring", "rock", "rope",
    "scarf", "shirt", "shoe", "sock", "spoon", "star", "table", "tile", "towel", "umbrella",
];

/// The built-in category list: the sixteen color-shape names first, then
/// modifier-noun fillers up to [`BUILTIN_VOCAB_SIZE`].
pub fn builtin_vocabulary_names() -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(BUILTIN_VOCAB_SIZE);
    for c in COLORS {
        for s in SHAPES {
            out.push(format!("{c} {s}"));
        }
    }
    'fill: for n in NOUNS {
        for m in MODIFIERS {
            if out.len() == BUILTIN_VOCAB_SIZE {
                break 'fill;
            }
            out.push(format!("{m} {n}"));
        }
    }
    out
}

/// Names from a vocabulary file body: one per line, blank lines and `#`
/// comments skipped, surrounding whitespace trimmed.
pub fn parse_names(text: &str) -> Result<Vec<String>> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut names = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let name = line.trim();
        if name.is_empty() || name.starts_with('#') {
            continue;
        }
        if let Some(first) = seen.insert(name, i + 1) {
            return Err(Error::Vocabulary(format!(
                "duplicate name {name:?} on lines {first} and {}",
                i + 1
            )));
        }
        names.push(name.to_string());
    }
    if names.is_empty() {
        return Err(Error::Vocabulary("vocabulary has no names".into()));
    }
    Ok(names)
}

/// The specialized prompt `P_s`: a unit vector on the reserved embedding
/// slot `D`, so `[o, z]·P_sᵀ` is the objectness logit `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectnessPrompt {
    direction: Vec<f32>,
}

impl ObjectnessPrompt {
    pub fn new(dim: usize) -> Self {
        let mut direction = vec![0.0; dim + 1];
        direction[dim] = 1.0;
        Self { direction }
    }

    pub fn direction(&self) -> &[f32] {
        &self.direction
    }

    /// `[o, z] · P_sᵀ`.
    pub fn score(&self, o: &[f32], z: f32) -> f32 {
        let d = self.direction.len() - 1;
        dot(o, &self.direction[..d]) + z * self.direction[d]
    }

    pub fn as_prompt_set(&self) -> Result<PromptSet> {
        let d = self.direction.len();
        PromptSet::new(
            Tensor::new(vec![1, d], self.direction.clone())?,
            vec!["object".into()],
            PromptKind::Objectness,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub prompts: PromptSet,
    pub objectness: ObjectnessPrompt,
}

impl Vocabulary {
    pub fn from_names(names: &[String], table: Option<&TextTable>, encoder: &TextEncoder) -> Result<Self> {
        let mut prompts = encode_text(names, table, encoder)?;
        prompts.kind = PromptKind::Vocabulary;
        Ok(Self {
            objectness: ObjectnessPrompt::new(prompts.dim()),
            prompts,
        })
    }

    /// Rows passed through a trained aligner, as text prompts are during training.
    pub fn refined(mut self, aux: &super::AuxAligner) -> Result<Self> {
        self.prompts = super::reprta_refine(&self.prompts, aux)?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

pub fn build_vocabulary(path: &Path, table: Option<&TextTable>, encoder: &TextEncoder) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocabulary::from_names(&parse_names(&text)?, table, encoder)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_list_has_unique_names() {
        let names = builtin_vocabulary_names();
        assert_eq!(names.len(), BUILTIN_VOCAB_SIZE);
        assert_eq!(parse_names(&names.join("\n")).unwrap().len(), BUILTIN_VOCAB_SIZE);
        assert_eq!(names[0], "red circle");
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let n = parse_names("# colors\nred circle\n\n  blue square  \nyellow cross\n").unwrap();
        assert_eq!(n, ["red circle", "blue square", "yellow cross"]);
    }

    #[test]
    fn duplicates_name_both_lines() {
        let err = parse_names("a\nb\na\n").unwrap_err().to_string();
        assert!(err.contains("lines 1 and 3"), "{err}");
        assert!(parse_names("# only a comment\n").is_err());
    }

    #[test]
    fn objectness_prompt_reads_the_reserved_slot() {
        let p = ObjectnessPrompt::new(3);
        assert_eq!(p.score(&[0.5, -0.2, 0.1], 2.5), 2.5);
        assert_eq!(p.as_prompt_set().unwrap().dim(), 4);
    }
}
