// SPDX-License-Identifier: MIT OR Apache-2.0

//! Indirect-object-identification prompt generator.
//!
//! Every low-level template is written in BABA order; the ABBA form swaps the
//! two names of the opening clause only. Prompts stop right before the
//! indirect object, which is returned separately as the answer.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOW_LEVEL_TEMPLATES: [&str; 15] = [
    "Then, [B] and [A] went to the [PLACE]. [B] gave a [OBJECT] to",
    "Then, [B] and [A] had a lot of fun at the [PLACE]. [B] gave a [OBJECT] to",
    "Then, [B] and [A] were working at the [PLACE]. [B] decided to give a [OBJECT] to",
    "Then, [B] and [A] were thinking about going to the [PLACE]. [B] wanted to give a [OBJECT] to",
    "Then, [B] and [A] had a long argument, and afterwards [B] said to",
    "After [B] and [A] went to the [PLACE], [B] gave a [OBJECT] to",
    "When [B] and [A] got a [OBJECT] at the [PLACE], [B] decided to give it to",
    "When [B] and [A] got a [OBJECT] at the [PLACE], [B] decided to give the [OBJECT] to",
    "While [B] and [A] were working at the [PLACE], [B] gave a [OBJECT] to",
    "While [B] and [A] were commuting to the [PLACE], [B] gave a [OBJECT] to",
    "After the lunch, [B] and [A] went to the [PLACE]. [B] gave a [OBJECT] to",
    "Afterwards, [B] and [A] went to the [PLACE]. [B] gave a [OBJECT] to",
    "Then, [B] and [A] had a long argument. Afterwards [B] said to",
    "The [PLACE] [B] and [A] went to had a [OBJECT]. [B] gave it to",
    "Friends [B] and [A] found a [OBJECT] at the [PLACE]. [B] gave it to",
];

pub const DEFAULT_NAMES: &[&str] = &[
    "Michael", "Jim", "Mary", "John", "Kelly", "Jack", "Sarah", "David", "Laura", "Marco",
    "Anna", "Paul", "Lisa", "Tom", "Emma", "James",
];
pub const DEFAULT_PLACES: &[&str] = &[
    "office", "garden", "store", "school", "hospital", "station", "park", "restaurant",
];
pub const DEFAULT_OBJECTS: &[&str] = &[
    "computer", "basketball", "snack", "book", "drink", "ring", "kiss", "bone",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HighLevel {
    #[serde(rename = "ABBA")]
    Abba,
    #[serde(rename = "BABA")]
    Baba,
}

impl std::fmt::Display for HighLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HighLevel::Abba => "ABBA",
            HighLevel::Baba => "BABA",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordLists {
    pub names: Vec<String>,
    pub places: Vec<String>,
    pub objects: Vec<String>,
}

impl Default for WordLists {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            names: own(DEFAULT_NAMES),
            places: own(DEFAULT_PLACES),
            objects: own(DEFAULT_OBJECTS),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoiPrompt {
    pub text: String,
    /// Indirect object; the expected next token is `" " + a`.
    pub a: String,
    pub b: String,
    pub place: String,
    pub object: String,
    pub high_level: HighLevel,
    /// 1-based low-level template id.
    pub template: usize,
}

impl IoiPrompt {
    pub fn answer(&self) -> String {
        format!(" {}", self.a)
    }
}

/// Fills one template. `template` is 1-based.
pub fn render_template(
    template: usize,
    high_level: HighLevel,
    a: &str,
    b: &str,
    place: &str,
    object: &str,
) -> Result<String> {
    let t = LOW_LEVEL_TEMPLATES
        .get(template.wrapping_sub(1))
        .ok_or_else(|| Error::OutOfRange(format!("template {template} not in 1..=15")))?;
    let t = match high_level {
        HighLevel::Baba => t.to_string(),
        HighLevel::Abba => t.replacen("[B] and [A]", "[A] and [B]", 1),
    };
    Ok(t.replace("[A]", a)
        .replace("[B]", b)
        .replace("[PLACE]", place)
        .replace("[OBJECT]", object))
}

/// `n` prompts for every (template, high-level) cell, deterministic per seed.
pub fn gen_ioi_dataset(words: &WordLists, n: usize, seed: u64) -> Result<Vec<IoiPrompt>> {
    if words.names.len() < 2 {
        return Err(Error::EmptyInput("need at least two names".into()));
    }
    if words.places.is_empty() || words.objects.is_empty() {
        return Err(Error::EmptyInput("place and object lists must be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * 30);
    for template in 1..=LOW_LEVEL_TEMPLATES.len() {
        for high_level in [HighLevel::Abba, HighLevel::Baba] {
            for _ in 0..n {
                let pair: Vec<&String> = words.names.choose_multiple(&mut rng, 2).collect();
                let (a, b) = (pair[0].clone(), pair[1].clone());
                let place = words.places.choose(&mut rng).expect("nonempty").clone();
                let object = words.objects.choose(&mut rng).expect("nonempty").clone();
                let text = render_template(template, high_level, &a, &b, &place, &object)?;
                out.push(IoiPrompt {
                    text,
                    a,
                    b,
                    place,
                    object,
                    high_level,
                    template,
                });
            }
        }
    }
    Ok(out)
}
