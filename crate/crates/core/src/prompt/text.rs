use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Fnv, InitRng};
use crate::tensor::Tensor;

use super::{PromptKind, PromptSet};

pub const TEXT_BINS: usize = 512;
const TEXT_SEED: u64 = 0x7e47_0e5e_ed00_0001;

/// Deterministic toy text encoder: character trigrams of `<name>` hashed into
/// [`TEXT_BINS`] bins, then projected by a fixed random `D×512` matrix.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    projection: Tensor,
}

impl TextEncoder {
    pub fn new(dim: usize) -> Self {
        let mut rng = InitRng::new(TEXT_SEED);
        let data = (0..dim * TEXT_BINS).map(|_| rng.normal()).collect();
        Self {
            projection: Tensor::new(vec![dim, TEXT_BINS], data).expect("D×512"),
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.dim(0)
    }

    pub fn bag(name: &str) -> [u32; TEXT_BINS] {
        let chars: Vec<char> = std::iter::once('<')
            .chain(name.chars())
            .chain(std::iter::once('>'))
            .collect();
        let mut bag = [0u32; TEXT_BINS];
        let mut buf = [0u8; 12];
        for w in chars.windows(3) {
            let mut h = Fnv::new();
            for c in w {
                h.write(c.encode_utf8(&mut buf).as_bytes());
            }
            bag[(h.finish() % TEXT_BINS as u64) as usize] += 1;
        }
        bag
    }

    /// Un-normalized embedding of one name.
    pub fn embed(&self, name: &str) -> Vec<f32> {
        let bag = Self::bag(name);
        (0..self.dim())
            .map(|d| {
                let row = self.projection.row(d);
                let mut acc = 0.0f32;
                for (b, &count) in bag.iter().enumerate() {
                    if count > 0 {
                        acc += count as f32 * row[b];
                    }
                }
                acc
            })
            .collect()
    }
}

/// External name → embedding rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextTable {
    rows: HashMap<String, Vec<f32>>,
}

impl TextTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, row: Vec<f32>) {
        self.rows.insert(name.into(), row);
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.rows.get(name).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// Text prompts for `names`, looked up in `table` when given.
pub fn encode_text(names: &[String], table: Option<&TextTable>, encoder: &TextEncoder) -> Result<PromptSet> {
    if names.is_empty() {
        return Err(Error::Usage("no class names given".into()));
    }
    let dim = encoder.dim();
    let mut data = Vec::with_capacity(names.len() * dim);
    for name in names {
        if name.is_empty() {
            return Err(Error::Usage("empty class name".into()));
        }
        match table {
            Some(t) => {
                let row = t
                    .get(name)
                    .ok_or_else(|| Error::Lookup(format!("no embedding for {name:?} in table")))?;
                if row.len() != dim {
                    return Err(Error::Shape {
                        op: "text table row",
                        lhs: vec![row.len()],
                        rhs: vec![dim],
                    });
                }
                data.extend_from_slice(row);
            }
            None => data.extend(encoder.embed(name)),
        }
    }
    PromptSet::new(Tensor::new(vec![names.len(), dim], data)?, names.to_vec(), PromptKind::Text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn encoding_is_deterministic() {
        let e = TextEncoder::new(16);
        let a = encode_text(&names(&["person"]), None, &e).unwrap();
        let b = encode_text(&names(&["person"]), None, &TextEncoder::new(16)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn near_miss_spelling_differs() {
        let e = TextEncoder::new(16);
        let p = encode_text(&names(&["person", "persom"]), None, &e).unwrap();
        let cos = crate::tensor::dot(p.row(0), p.row(1));
        assert!(cos < 1.0 - 1e-4, "cos {cos}");
    }

    #[test]
    fn table_rows_are_normalized_and_missing_names_named() {
        let mut t = TextTable::new();
        t.insert("cat", vec![0.0, 3.0, 4.0, 0.0]);
        let e = TextEncoder::new(4);
        let p = encode_text(&names(&["cat"]), Some(&t), &e).unwrap();
        assert_eq!(p.row(0), &[0.0, 0.6, 0.8, 0.0]);
        let err = encode_text(&names(&["dog"]), Some(&t), &e).unwrap_err();
        assert!(err.to_string().contains("dog"));
    }
}
