//! Benchmark fixtures shared by the criterion targets.

use cabin_core::bank::{BankBuildConfig, HashNgramEncoder, PrototypeBank, TemplateGenerator};
use cabin_core::defaults;

/// The shipped taxonomy encoded at width `dim` with template descriptions.
pub fn shipped_bank(dim: usize) -> PrototypeBank {
    PrototypeBank::build(
        &defaults::action_taxonomy(),
        &defaults::object_taxonomy(),
        &defaults::rule_table(),
        &mut TemplateGenerator,
        &HashNgramEncoder::new(dim),
        &BankBuildConfig::default(),
    )
    .expect("shipped bank builds")
}
