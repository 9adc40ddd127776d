use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train, TrainConfig};
use crate::bank::PrototypeBank;
use crate::checkpoint::write_atomic;
use crate::coa::default_r_max;
use crate::data_model::Modality;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    OMax,
    Tau,
    RelationDepth,
    Modules,
    Modality,
}

impl Axis {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "o_max" | "omax" | "max_objects" => Some(Axis::OMax),
            "tau" | "τ" | "temperature" | "gumbel" => Some(Axis::Tau),
            "relation_depth" | "relation" => Some(Axis::RelationDepth),
            "modules" => Some(Axis::Modules),
            "modality" | "modalities" => Some(Axis::Modality),
            _ => None,
        }
    }

    fn column(self) -> &'static str {
        match self {
            Axis::OMax => "Max objects",
            Axis::Tau => "Gumbel setting",
            Axis::RelationDepth => "Relation encoder",
            Axis::Modules => "Modules",
            Axis::Modality => "Modality",
        }
    }
}

/// `base` with one axis set to `value`.
///
/// Value syntax: `o_max` an integer; `tau` a temperature, optionally
/// suffixed `:soft` (no straight-through) or `:nonoise`; `relation_depth`
/// `L` or `LxH`; `modules` `base|coa|full`; `modality` names joined by `+`.
pub fn apply_axis(base: &TrainConfig, axis: Axis, value: &str) -> Result<TrainConfig> {
    let bad = || Error::InvalidConfig(format!("bad {axis:?} value `{value}`"));
    let mut cfg = base.clone();
    let m = &mut cfg.model;
    match axis {
        Axis::OMax => {
            let o: usize = value.trim().parse().map_err(|_| bad())?;
            m.coa.o_max = o;
            m.coa.r_max = default_r_max(o);
        }
        Axis::Tau => {
            let mut parts = value.split(':');
            let tau: f64 = parts.next().unwrap_or("").trim().parse().map_err(|_| bad())?;
            m.mot.alignment.temperature = tau;
            for flag in parts {
                match flag.trim() {
                    "soft" => m.mot.alignment.straight_through = false,
                    "nonoise" => m.mot.alignment.gumbel_noise = false,
                    _ => return Err(bad()),
                }
            }
        }
        Axis::RelationDepth => {
            let (l, h) = match value.split_once('x') {
                Some((l, h)) => (l.trim().parse().map_err(|_| bad())?, Some(h.trim().parse().map_err(|_| bad())?)),
                None => (value.trim().parse().map_err(|_| bad())?, None),
            };
            m.coa.relation_layers = l;
            if let Some(h) = h {
                m.coa.relation_hidden = h;
            }
        }
        Axis::Modules => m.variant = Variant::parse(value).ok_or_else(bad)?,
        Axis::Modality => {
            m.modalities =
                value.split('+').map(|s| Modality::parse(s.trim()).ok_or_else(bad)).collect::<Result<_>>()?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    /// Means over seeds of the best-epoch val metrics.
    pub top1: f64,
    pub top5: f64,
    pub mean1: f64,
    pub per_seed_top1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} | Top-1 | Top-5 | Mean-1 |\n|---|---|---|---|\n", self.axis.column());
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {:.2} | {:.2} | {:.2} |", r.value, r.top1, r.top5, r.mean1);
        }
        s
    }

    pub fn best(&self) -> Option<&AblationRow> {
        self.rows.iter().fold(None, |b: Option<&AblationRow>, r| match b {
            Some(b) if b.top1 >= r.top1 => Some(b),
            _ => Some(r),
        })
    }

    pub fn row(&self, value: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.value == value)
    }
}

/// One training run per (value, seed); every value shares the same seeds.
/// With `out_dir`, each run gets its own subdirectory and the table is
/// written as `table.md` and `table.json`.
pub fn run_ablation(
    axis: Axis,
    values: &[String],
    base: &TrainConfig,
    seeds: &[u64],
    data: &Dataset,
    bank: Option<&PrototypeBank>,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one value and one seed".into()));
    }
    let configs = values.iter().map(|v| apply_axis(base, axis, v)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (value, cfg) in values.iter().zip(&configs) {
        let mut acc = [0.0; 3];
        let mut per_seed_top1 = Vec::new();
        for &seed in seeds {
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            let dir = out_dir.map(|d| d.join(format!("{}_seed{seed}", value.replace(['+', ' ', ':'], "_"))));
            let out = train(&run_cfg, data, bank, dir.as_deref())?;
            let rep = out.best_val.ok_or(Error::EmptySplit)?;
            acc[0] += rep.top1;
            acc[1] += rep.top5;
            acc[2] += rep.mean1;
            per_seed_top1.push(rep.top1);
        }
        let n = seeds.len() as f64;
        rows.push(AblationRow {
            value: value.clone(),
            top1: acc[0] / n,
            top5: acc[1] / n,
            mean1: acc[2] / n,
            per_seed_top1,
        });
    }
    let table = AblationTable { axis, seeds: seeds.to_vec(), rows };
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        write_atomic(&d.join("table.md"), table.to_markdown().as_bytes())?;
        let json = serde_json::to_vec_pretty(&table).map_err(|e| Error::json(d, e))?;
        write_atomic(&d.join("table.json"), &json)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_values_land_in_config() {
        let base = TrainConfig::toy(4);
        let c = apply_axis(&base, Axis::OMax, "8").unwrap();
        assert_eq!((c.model.coa.o_max, c.model.coa.r_max), (8, 14));
        let c = apply_axis(&base, Axis::Tau, "0.5:soft").unwrap();
        assert_eq!(c.model.mot.alignment.temperature, 0.5);
        assert!(!c.model.mot.alignment.straight_through);
        let c = apply_axis(&base, Axis::RelationDepth, "3x32").unwrap();
        assert_eq!((c.model.coa.relation_layers, c.model.coa.relation_hidden), (3, 32));
        let c = apply_axis(&base, Axis::Modules, "+CoA").unwrap();
        assert_eq!(c.model.variant, Variant::Coa);
        let c = apply_axis(&base, Axis::Modality, "RGB+IR+Depth").unwrap();
        assert_eq!(c.model.modalities, Modality::ALL.to_vec());
        assert!(apply_axis(&base, Axis::Modality, "sonar").is_err());
        assert!(apply_axis(&base, Axis::OMax, "0").is_err());
    }

    #[test]
    fn markdown_has_one_row_per_value() {
        let row = |v: &str, t| AblationRow { value: v.into(), top1: t, top5: 100.0, mean1: t, per_seed_top1: vec![t] };
        let t = AblationTable {
            axis: Axis::OMax,
            seeds: vec![0],
            rows: vec![row("4", 50.0), row("6", 75.0), row("8", 75.0)],
        };
        assert_eq!(t.to_markdown().lines().count(), 5);
        assert_eq!(t.best().unwrap().value, "6");
    }
}
