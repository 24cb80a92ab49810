//! A/B/Tie vote aggregation and inter-rater agreement.
//!
//! Votes arrive as CSV rows `item_id,rater_id,choice`. Each item needs at
//! least three raters; a fourth vote may be present to resolve items the
//! first three raters split three ways. The per-item outcome is the
//! unique plurality choice, and agreement is Fleiss kappa over the
//! three-category table, generalized to per-item rater counts.

use crate::error::{Error, Result};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Choice {
    A,
    B,
    Tie,
}

impl Choice {
    fn parse(s: &str) -> Option<Choice> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Some(Choice::A),
            "b" => Some(Choice::B),
            "tie" => Some(Choice::Tie),
            _ => None,
        }
    }

    fn index(self) -> usize {
        match self {
            Choice::A => 0,
            Choice::B => 1,
            Choice::Tie => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vote {
    pub item: String,
    pub rater: String,
    pub choice: Choice,
}

/// Majority outcomes and the agreement score over all items.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AbSummary {
    /// Items whose plurality choice is A.
    pub win: usize,
    /// Items whose plurality choice is B.
    pub lose: usize,
    /// Items whose plurality choice is Tie.
    pub tie: usize,
    pub fleiss_kappa: f64,
}

/// Parse `item_id,rater_id,choice` rows. An optional header line is
/// skipped; blank lines are ignored; errors carry 1-based line numbers.
pub fn parse_votes_csv(text: &str) -> Result<Vec<Vote>> {
    let mut votes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if i == 0 && line.eq_ignore_ascii_case("item_id,rater_id,choice") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse(format!(
                "line {}: expected 3 comma-separated fields, found {}",
                i + 1,
                fields.len()
            )));
        }
        let choice = Choice::parse(fields[2]).ok_or_else(|| {
            Error::Parse(format!(
                "line {}: choice must be A, B, or Tie, found '{}'",
                i + 1,
                fields[2]
            ))
        })?;
        votes.push(Vote {
            item: fields[0].to_string(),
            rater: fields[1].to_string(),
            choice,
        });
    }
    Ok(votes)
}

/// Fleiss kappa over an items × 3 count table with per-item rater counts.
/// Complete expected agreement (all mass on one category) returns 1.
pub fn fleiss_kappa(table: &[[usize; 3]]) -> Result<f64> {
    if table.is_empty() {
        return Err(Error::Usage("kappa over zero items".into()));
    }
    let mut p_sum = 0.0;
    let mut col_totals = [0usize; 3];
    let mut grand = 0usize;
    for (i, row) in table.iter().enumerate() {
        let n: usize = row.iter().sum();
        if n < 2 {
            return Err(Error::Usage(format!(
                "item {i} has {n} ratings; kappa needs at least 2"
            )));
        }
        let agree: usize = row.iter().map(|&c| c * c.saturating_sub(1)).sum();
        p_sum += agree as f64 / (n * (n - 1)) as f64;
        for (t, c) in col_totals.iter_mut().zip(row) {
            *t += c;
        }
        grand += n;
    }
    let p_bar = p_sum / table.len() as f64;
    let pe: f64 = col_totals
        .iter()
        .map(|&t| {
            let p = t as f64 / grand as f64;
            p * p
        })
        .sum();
    if 1.0 - pe == 0.0 {
        return Ok(1.0);
    }
    Ok((p_bar - pe) / (1.0 - pe))
}

/// Tally per-item plurality outcomes and compute Fleiss kappa.
pub fn aggregate_ab(votes: &[Vote]) -> Result<AbSummary> {
    if votes.is_empty() {
        return Err(Error::Usage("no votes to aggregate".into()));
    }
    // Group by item, preserving first-seen order for readable errors.
    let mut order: Vec<&str> = Vec::new();
    let mut by_item: HashMap<&str, Vec<&Vote>> = HashMap::new();
    for v in votes {
        let entry = by_item.entry(v.item.as_str()).or_default();
        if entry.is_empty() {
            order.push(v.item.as_str());
        }
        if entry.iter().any(|o| o.rater == v.rater) {
            return Err(Error::Schema(format!(
                "item {} has more than one vote from rater {}",
                v.item, v.rater
            )));
        }
        entry.push(v);
    }
    let mut counts = [0usize; 3];
    let mut table = Vec::with_capacity(order.len());
    for item in &order {
        let item_votes = &by_item[item];
        if item_votes.len() < 3 {
            return Err(Error::Schema(format!(
                "item {} has only {} votes; at least 3 raters are required",
                item,
                item_votes.len()
            )));
        }
        let mut row = [0usize; 3];
        for v in item_votes {
            row[v.choice.index()] += 1;
        }
        let top = *row.iter().max().expect("three categories");
        let leaders = row.iter().filter(|&&c| c == top).count();
        if leaders != 1 {
            return Err(Error::Schema(format!(
                "item {item} has no majority (counts A={}, B={}, Tie={}); \
                 a fourth rater's vote is needed",
                row[0], row[1], row[2]
            )));
        }
        let winner = row.iter().position(|&c| c == top).expect("unique leader");
        counts[winner] += 1;
        table.push(row);
    }
    Ok(AbSummary {
        win: counts[0],
        lose: counts[1],
        tie: counts[2],
        fleiss_kappa: fleiss_kappa(&table)?,
    })
}
