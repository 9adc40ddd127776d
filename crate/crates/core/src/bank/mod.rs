//! Textual prototype bank: generated, validated and encoded descriptions for
//! actions and human–object relations, plus encoded object labels.

mod encoder;
mod generate;

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use encoder::{encode_texts, fnv1a, HashNgramEncoder, TextEncoder};
pub use generate::{
    generate_action_descriptions, generate_relation_descriptions, DescriptionGenerator, DescriptionKind,
    DescriptionSet, ExternalGenerator, FlakyGenerator, Prompt, Provenance, Request, RuleFailure, ScriptedGenerator,
    TemplateGenerator, Validator, PROMPT_VERSION,
};

use crate::checkpoint::write_atomic;
use crate::data_model::{ActionTaxonomy, ObjectTaxonomy, RuleTable};
use crate::error::{Error, Result};
use crate::nn::device;

pub const BANK_SCHEMA_VERSION: u32 = 1;

/// Object classes of `action`, in object-taxonomy order.
pub fn get_objects(action: &str, tax_o: &ObjectTaxonomy, rules: &RuleTable) -> Result<Vec<String>> {
    let rule = rules.get(action).ok_or_else(|| Error::UnknownAction(action.to_string()))?;
    let mut idx = rule
        .objects
        .iter()
        .map(|o| {
            tax_o
                .index_of(o)
                .ok_or_else(|| Error::InvalidConfig(format!("rule for `{action}` names unknown object `{o}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    idx.sort_unstable();
    idx.dedup();
    Ok(idx.into_iter().map(|i| tax_o.labels()[i].clone()).collect())
}

/// Back-reference from a prototype row to its source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrototypeRef {
    pub text: String,
    /// Fine action index, for action and relation rows.
    pub action: Option<usize>,
    /// Object class indices, for object and relation rows.
    pub objects: Vec<usize>,
}

/// Row-major `n × dim` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub dim: usize,
    #[serde(skip)]
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, dim: usize) -> Self {
        Self { rows: rows.len(), dim, data: rows.into_iter().flatten().collect() }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (self.rows, self.dim), &device())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub encoder_id: String,
    pub t_a: Matrix,
    pub t_o: Matrix,
    pub t_r: Matrix,
    pub action_index: Vec<PrototypeRef>,
    pub object_index: Vec<PrototypeRef>,
    pub relation_index: Vec<PrototypeRef>,
    pub action_sets: Vec<DescriptionSet>,
    pub relation_sets: Vec<DescriptionSet>,
}

/// The three prototype matrices as `(rows, d)` tensors.
pub struct BankTensors {
    pub t_a: Tensor,
    pub t_o: Tensor,
    pub t_r: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankFile {
    schema_version: u32,
    encoder_id: String,
    dim: usize,
    shapes: [[usize; 2]; 3],
    sidecar: String,
    sidecar_sha256: String,
    action_index: Vec<PrototypeRef>,
    object_index: Vec<PrototypeRef>,
    relation_index: Vec<PrototypeRef>,
    action_sets: Vec<DescriptionSet>,
    relation_sets: Vec<DescriptionSet>,
}

#[derive(Debug, Clone)]
pub struct BankBuildConfig {
    pub validator: Validator,
    pub max_retries: usize,
}

impl Default for BankBuildConfig {
    fn default() -> Self {
        Self { validator: Validator::default(), max_retries: 3 }
    }
}

impl PrototypeBank {
    pub fn dim(&self) -> usize {
        self.t_a.dim
    }

    pub fn tensors(&self) -> Result<BankTensors> {
        Ok(BankTensors { t_a: self.t_a.to_tensor()?, t_o: self.t_o.to_tensor()?, t_r: self.t_r.to_tensor()? })
    }

    /// Generation stages for every action, then encoding and assembly.
    pub fn build(
        tax_a: &ActionTaxonomy,
        tax_o: &ObjectTaxonomy,
        rules: &RuleTable,
        generator: &mut dyn DescriptionGenerator,
        encoder: &dyn TextEncoder,
        cfg: &BankBuildConfig,
    ) -> Result<Self> {
        let mut action_sets = Vec::new();
        for label in tax_a.fine_labels() {
            action_sets.push(generate_action_descriptions(
                label,
                generator,
                Prompt::action(label),
                &cfg.validator,
                cfg.max_retries,
            )?);
        }
        let mut relation_sets = Vec::new();
        for set in &action_sets {
            let objects = get_objects(&set.label, tax_o, rules)?;
            let prompt = Prompt::relation(&set.texts, &objects);
            relation_sets.push(generate_relation_descriptions(
                set,
                &objects,
                generator,
                prompt,
                &cfg.validator,
                cfg.max_retries,
            )?);
        }
        Self::assemble(action_sets, relation_sets, tax_a, tax_o, encoder)
    }

    pub fn assemble(
        action_sets: Vec<DescriptionSet>,
        relation_sets: Vec<DescriptionSet>,
        tax_a: &ActionTaxonomy,
        tax_o: &ObjectTaxonomy,
        encoder: &dyn TextEncoder,
    ) -> Result<Self> {
        let d = encoder.dim();
        let action_of = |label: &str| tax_a.fine_index(label).ok_or_else(|| Error::UnknownAction(label.to_string()));
        let mut a_rows = Vec::new();
        let mut action_index = Vec::new();
        for s in &action_sets {
            let a = action_of(&s.label)?;
            a_rows.extend(encode_texts(&s.texts, encoder, d)?);
            action_index.extend(s.texts.iter().map(|t| PrototypeRef {
                text: t.clone(),
                action: Some(a),
                objects: vec![],
            }));
        }
        let labels = tax_o.labels().to_vec();
        let o_rows = encode_texts(&labels, encoder, d)?;
        let object_index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| PrototypeRef { text: l.clone(), action: None, objects: vec![i] })
            .collect();
        let mut r_rows = Vec::new();
        let mut relation_index = Vec::new();
        for s in &relation_sets {
            let a = action_of(&s.label)?;
            let objects = s
                .objects
                .iter()
                .map(|o| tax_o.index_of(o).ok_or_else(|| Error::InvalidConfig(format!("unknown object `{o}`"))))
                .collect::<Result<Vec<_>>>()?;
            r_rows.extend(encode_texts(&s.texts, encoder, d)?);
            relation_index.extend(s.texts.iter().map(|t| PrototypeRef {
                text: t.clone(),
                action: Some(a),
                objects: objects.clone(),
            }));
        }
        Ok(Self {
            encoder_id: encoder.id(),
            t_a: Matrix::from_rows(a_rows, d),
            t_o: Matrix::from_rows(o_rows, d),
            t_r: Matrix::from_rows(r_rows, d),
            action_index,
            object_index,
            relation_index,
            action_sets,
            relation_sets,
        })
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("bin")
    }

    /// Writes the JSON document and its `.bin` sidecar (both atomically).
    pub fn export(&self, path: &Path) -> Result<()> {
        let side = Self::sidecar_path(path);
        let mut bytes = Vec::with_capacity(8 * (self.t_a.data.len() + self.t_o.data.len() + self.t_r.data.len()));
        for v in self.t_a.data.iter().chain(&self.t_o.data).chain(&self.t_r.data) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let doc = BankFile {
            schema_version: BANK_SCHEMA_VERSION,
            encoder_id: self.encoder_id.clone(),
            dim: self.dim(),
            shapes: [[self.t_a.rows, self.t_a.dim], [self.t_o.rows, self.t_o.dim], [self.t_r.rows, self.t_r.dim]],
            sidecar: side.file_name().expect("file path").to_string_lossy().into_owned(),
            sidecar_sha256: hex::encode(Sha256::digest(&bytes)),
            action_index: self.action_index.clone(),
            object_index: self.object_index.clone(),
            relation_index: self.relation_index.clone(),
            action_sets: self.action_sets.clone(),
            relation_sets: self.relation_sets.clone(),
        };
        write_atomic(&side, &bytes)?;
        let json = serde_json::to_vec_pretty(&doc).map_err(|e| Error::json(path, e))?;
        write_atomic(path, &json)
    }

    pub fn import(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let doc: BankFile = serde_json::from_slice(&raw).map_err(|e| Error::json(path, e))?;
        if doc.schema_version != BANK_SCHEMA_VERSION {
            return Err(Error::BankIntegrity(format!(
                "schema version {} (expected {BANK_SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        let side = path.parent().unwrap_or(Path::new(".")).join(&doc.sidecar);
        let bytes = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        if hex::encode(Sha256::digest(&bytes)) != doc.sidecar_sha256 {
            return Err(Error::BankIntegrity(format!("{}: sidecar hash mismatch", side.display())));
        }
        let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let sizes: Vec<usize> = doc.shapes.iter().map(|[r, c]| r * c).collect();
        if values.len() != sizes.iter().sum::<usize>() || doc.shapes.iter().any(|s| s[1] != doc.dim) {
            return Err(Error::BankIntegrity(format!("{}: sidecar does not match declared shapes", side.display())));
        }
        if doc.action_index.len() != doc.shapes[0][0]
            || doc.object_index.len() != doc.shapes[1][0]
            || doc.relation_index.len() != doc.shapes[2][0]
        {
            return Err(Error::BankIntegrity("index lengths do not match matrix rows".into()));
        }
        let mut it = values.into_iter();
        let mut take = |[rows, dim]: [usize; 2]| Matrix { rows, dim, data: it.by_ref().take(rows * dim).collect() };
        Ok(Self {
            encoder_id: doc.encoder_id,
            t_a: take(doc.shapes[0]),
            t_o: take(doc.shapes[1]),
            t_r: take(doc.shapes[2]),
            action_index: doc.action_index,
            object_index: doc.object_index,
            relation_index: doc.relation_index,
            action_sets: doc.action_sets,
            relation_sets: doc.relation_sets,
        })
    }

    /// Checks row normalization and the relation back-reference rule.
    pub fn check(&self) -> Result<()> {
        for (name, m) in [("T_A", &self.t_a), ("T_O", &self.t_o), ("T_R", &self.t_r)] {
            for i in 0..m.rows {
                let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                if (n - 1.0).abs() > 1e-6 {
                    return Err(Error::BankIntegrity(format!("{name} row {i} has norm {n}")));
                }
            }
        }
        let want: usize = self.relation_sets.iter().map(|s| s.texts.len()).sum();
        if self.t_r.rows != want || self.relation_index.iter().any(|r| r.action.is_none() || r.objects.len() < 2) {
            return Err(Error::BankIntegrity("relation rows do not match their description sets".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defaults;

    fn shipped() -> PrototypeBank {
        PrototypeBank::build(
            &defaults::action_taxonomy(),
            &defaults::object_taxonomy(),
            &defaults::rule_table(),
            &mut TemplateGenerator,
            &HashNgramEncoder::new(16),
            &BankBuildConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn get_objects_examples() {
        let (o, r) = (defaults::object_taxonomy(), defaults::rule_table());
        assert_eq!(get_objects("drinking from a bottle", &o, &r).unwrap(), ["person", "bottle"]);
        assert!(get_objects("looking around", &o, &r).unwrap().is_empty());
        assert_eq!(get_objects("juggling", &o, &r).unwrap_err().code(), "UNKNOWN_ACTION");
    }

    #[test]
    fn shipped_bank_counts() {
        let bank = shipped();
        let rules = defaults::rule_table();
        let k = Validator::default().action_count;
        let m = Validator::default().relation_count;
        let with_objects = rules.rules.values().filter(|r| !r.objects.is_empty()).count();
        assert_eq!(bank.t_a.rows, 36 * k);
        assert_eq!(bank.t_o.rows, 15);
        assert_eq!(bank.t_r.rows, with_objects * m);
        assert_eq!(bank.t_r.rows, 60);
        bank.check().unwrap();
        // grouped by action in taxonomy order
        let acts: Vec<usize> = bank.action_index.iter().map(|r| r.action.unwrap()).collect();
        assert!(acts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn export_import_round_trip_and_tamper() {
        let bank = shipped();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        bank.export(&path).unwrap();
        assert_eq!(PrototypeBank::import(&path).unwrap(), bank);
        let side = dir.path().join("bank.bin");
        let mut b = std::fs::read(&side).unwrap();
        b[5] ^= 1;
        std::fs::write(&side, b).unwrap();
        assert_eq!(PrototypeBank::import(&path).unwrap_err().code(), "BANK_INTEGRITY");
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(shipped(), shipped());
    }
}
