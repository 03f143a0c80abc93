//! Split-gain feature importance.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use super::train::Ensemble;
use crate::error::{Error, Result};
use crate::features::{Family, FeatureRegistry};

/// Total realized split gain per model feature index.
pub fn feature_gains(ensemble: &Ensemble) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for t in &ensemble.trees {
        for (f, g) in t.split_gains() {
            *out.entry(f).or_insert(0.0) += g;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainRow {
    /// Id in the full feature registry.
    pub id: usize,
    pub name: String,
    pub family: Family,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyShare {
    pub family: Family,
    pub count: usize,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainReport {
    /// All features with non-zero gain, by decreasing gain (ties by id).
    pub rows: Vec<GainRow>,
    pub total_gain: f64,
    pub top_n: usize,
    /// Family counts among the top `top_n` rows, in first-appearance order.
    pub top_families: Vec<FamilyShare>,
}

/// Join gains with registry names, mapping masked indices back to registry
/// ids through the model's mask (identity when there is none).
pub fn gain_report(ensemble: &Ensemble, registry: &FeatureRegistry, top_n: usize) -> Result<GainReport> {
    if let Some(h) = ensemble.registry_hash.filter(|&h| h != registry.hash()) {
        return Err(Error::RegistryMismatch { vector: registry.hash(), mask: h });
    }
    let to_registry = |f: usize| ensemble.mask.as_ref().map_or(f, |m| m.included[f]);
    let mut rows: Vec<GainRow> = feature_gains(ensemble)
        .into_iter()
        .map(|(f, gain)| {
            let id = to_registry(f);
            if id >= registry.len() {
                return Err(Error::invalid(format!("feature {id} not in registry")));
            }
            let e = registry.entry(id);
            Ok(GainRow { id, name: e.name, family: e.family, gain })
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| b.gain.total_cmp(&a.gain).then(a.id.cmp(&b.id)));
    let total_gain = rows.iter().map(|r| r.gain).sum();
    let mut top_families: Vec<FamilyShare> = Vec::new();
    for r in rows.iter().take(top_n) {
        match top_families.iter_mut().find(|s| s.family == r.family) {
            Some(s) => {
                s.count += 1;
                s.gain += r.gain;
            }
            None => top_families.push(FamilyShare { family: r.family, count: 1, gain: r.gain }),
        }
    }
    Ok(GainReport { rows, total_gain, top_n, top_families })
}

impl fmt::Display for GainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5}  {:<24} {:<12} {:>14} {:>7}", "id", "feature", "family", "gain", "share")?;
        for r in self.rows.iter().take(self.top_n) {
            let share = if self.total_gain > 0.0 { 100.0 * r.gain / self.total_gain } else { 0.0 };
            writeln!(f, "{:>5}  {:<24} {:<12} {:>14.4} {:>6.2}%", r.id, r.name, r.family.as_str(), r.gain, share)?;
        }
        writeln!(f)?;
        writeln!(f, "top {} by family:", self.top_n.min(self.rows.len()))?;
        for s in &self.top_families {
            writeln!(f, "  {:<12} {:>3} features  {:>14.4}", s.family.as_str(), s.count, s.gain)?;
        }
        Ok(())
    }
}
