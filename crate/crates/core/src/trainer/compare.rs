//! Side-by-side summary of finished runs: final smoothed −ELBO per run,
//! means per configuration and pairwise orderings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::RunRecord;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    /// Run label without the seed.
    pub group: String,
    pub seed: u64,
    pub step0_neg_elbo: Option<f64>,
    pub final_neg_elbo: Option<f64>,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub runs: usize,
    pub mean_step0_neg_elbo: Option<f64>,
    pub mean_final_neg_elbo: Option<f64>,
    pub per_seed_final: Vec<(u64, Option<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub a: String,
    pub b: String,
    /// `mean_final(a) - mean_final(b)`.
    pub difference: Option<f64>,
    pub a_lower: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub groups: Vec<GroupSummary>,
    pub orderings: Vec<Ordering>,
}

fn group_of(label: &str) -> String {
    match label.rsplit_once("/seed") {
        Some((g, rest)) => match rest.split_once('/') {
            Some((_, tail)) => format!("{g}/{tail}"),
            None => g.to_string(),
        },
        None => label.to_string(),
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    let v = v?;
    if v.is_empty() {
        return None;
    }
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

pub fn compare_runs(runs: &[RunRecord]) -> Result<Comparison> {
    let Some(first) = runs.first() else {
        return Err(Error::InvalidArgument("nothing to compare".into()));
    };
    for r in runs {
        if r.corpus_digest != first.corpus_digest {
            return Err(Error::Mismatch(format!(
                "runs {} and {} were trained on different corpora",
                first.label, r.label
            )));
        }
        let (a, b) = (&first.config.encoder, &r.config.encoder);
        if (a.input_dim, a.layers, a.model_dim, a.heads, a.ffn_dim)
            != (b.input_dim, b.layers, b.model_dim, b.heads, b.ffn_dim)
        {
            return Err(Error::Mismatch(format!(
                "runs {} and {} use different encoder shapes",
                first.label, r.label
            )));
        }
    }
    let rows: Vec<ComparisonRow> = runs
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            group: group_of(&r.label),
            seed: r.config.seed,
            step0_neg_elbo: r.step0_neg_elbo,
            final_neg_elbo: r.final_neg_elbo,
            steps: r.steps,
        })
        .collect();
    let mut by_group: BTreeMap<String, Vec<&ComparisonRow>> = BTreeMap::new();
    for row in &rows {
        by_group.entry(row.group.clone()).or_default().push(row);
    }
    let groups: Vec<GroupSummary> = by_group
        .into_iter()
        .map(|(group, rs)| GroupSummary {
            runs: rs.len(),
            mean_step0_neg_elbo: mean(rs.iter().map(|r| r.step0_neg_elbo)),
            mean_final_neg_elbo: mean(rs.iter().map(|r| r.final_neg_elbo)),
            per_seed_final: rs.iter().map(|r| (r.seed, r.final_neg_elbo)).collect(),
            group,
        })
        .collect();
    let mut orderings = Vec::new();
    for (i, a) in groups.iter().enumerate() {
        for b in &groups[i + 1..] {
            let difference = match (a.mean_final_neg_elbo, b.mean_final_neg_elbo) {
                (Some(x), Some(y)) => Some(x - y),
                _ => None,
            };
            orderings.push(Ordering {
                a: a.group.clone(),
                b: b.group.clone(),
                difference,
                a_lower: difference.map(|d| d < 0.0),
            });
        }
    }
    Ok(Comparison {
        rows,
        groups,
        orderings,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl Comparison {
    /// One line per run.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,group,seed,steps,step0_neg_elbo,final_neg_elbo\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.label,
                r.group,
                r.seed,
                r.steps,
                opt(r.step0_neg_elbo),
                opt(r.final_neg_elbo)
            ));
        }
        s
    }

    pub fn group(&self, name: &str) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.group == name)
    }
}
