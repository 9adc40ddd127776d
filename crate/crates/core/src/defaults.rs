//! Shipped taxonomies and the action → objects rule table.
//!
//! 36 fine actions grouped into 12 coarse actions, 15 object classes with
//! `person` as the single human class.

use std::collections::BTreeMap;

use crate::data_model::{ActionRule, ActionTaxonomy, ObjectTaxonomy, RuleTable};

pub const OBJECT_LABELS: [&str; 15] = [
    "person",
    "phone",
    "bottle",
    "cup",
    "food box",
    "cigarette",
    "tissue",
    "cosmetics",
    "comb",
    "bag",
    "headphones",
    "face mask",
    "glasses",
    "child seat",
    "toy",
];

pub const COARSE_LABELS: [&str; 12] = [
    "driving",
    "fatigue",
    "phone use",
    "drinking",
    "eating",
    "smoking",
    "grooming",
    "reaching",
    "entertainment",
    "face mask",
    "eyewear",
    "child care",
];

/// (fine label, coarse index, objects, motion pattern)
const FINE: [(&str, usize, &[&str], u32); 36] = [
    ("driving normally", 0, &[], 0),
    ("looking around", 0, &[], 5),
    ("talking to a passenger", 0, &[], 8),
    ("yawning", 1, &[], 9),
    ("rubbing eyes", 1, &[], 10),
    ("stretching", 1, &[], 6),
    ("holding a phone", 2, &["person", "phone"], 2),
    ("picking up a phone", 2, &["person", "phone"], 3),
    ("making a phone call", 2, &["person", "phone"], 1),
    ("drinking from a bottle", 3, &["person", "bottle"], 1),
    ("opening a bottle", 3, &["person", "bottle"], 2),
    ("drinking from a cup", 3, &["person", "cup"], 1),
    ("eating a snack", 4, &["person", "food box"], 1),
    ("opening a food box", 4, &["person", "food box"], 2),
    ("wiping mouth with a tissue", 4, &["person", "tissue"], 4),
    ("lighting a cigarette", 5, &["person", "cigarette"], 4),
    ("smoking", 5, &["person", "cigarette"], 1),
    ("putting out a cigarette", 5, &["person", "cigarette"], 3),
    ("applying makeup", 6, &["person", "cosmetics"], 4),
    ("combing hair", 6, &["person", "comb"], 4),
    ("wiping face with a tissue", 6, &["person", "tissue"], 1),
    ("picking up a bag", 7, &["person", "bag"], 3),
    ("putting down a bag", 7, &["person", "bag"], 7),
    ("searching in a bag", 7, &["person", "bag"], 2),
    ("putting on headphones", 8, &["person", "headphones"], 1),
    ("taking off headphones", 8, &["person", "headphones"], 7),
    ("playing with a phone", 8, &["person", "phone"], 4),
    ("putting on a face mask", 9, &["person", "face mask"], 1),
    ("taking off a face mask", 9, &["person", "face mask"], 7),
    ("adjusting a face mask", 9, &["person", "face mask"], 4),
    ("putting on glasses", 10, &["person", "glasses"], 1),
    ("taking off glasses", 10, &["person", "glasses"], 7),
    ("cleaning glasses", 10, &["person", "glasses", "tissue"], 2),
    ("handing a toy to the child", 11, &["person", "toy", "child seat"], 3),
    ("adjusting the child seat", 11, &["person", "child seat"], 2),
    ("checking on the child", 11, &["person", "child seat"], 8),
];

pub fn action_taxonomy() -> ActionTaxonomy {
    ActionTaxonomy::new(
        FINE.iter().map(|f| f.0.to_string()).collect(),
        COARSE_LABELS.iter().map(|s| s.to_string()).collect(),
        FINE.iter().map(|f| f.1).collect(),
    )
    .expect("shipped action taxonomy is valid")
}

pub fn object_taxonomy() -> ObjectTaxonomy {
    ObjectTaxonomy::new(OBJECT_LABELS.iter().map(|s| s.to_string()).collect(), vec![0])
        .expect("shipped object taxonomy is valid")
}

pub fn rule_table() -> RuleTable {
    RuleTable {
        rules: FINE
            .iter()
            .map(|(name, _, objs, motion)| {
                let rule = ActionRule { objects: objs.iter().map(|s| s.to_string()).collect(), motion: *motion };
                (name.to_string(), rule)
            })
            .collect::<BTreeMap<_, _>>(),
    }
}
