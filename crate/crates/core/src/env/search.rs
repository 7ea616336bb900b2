//! Conjunctive predicate search over a product table.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::task::ProductTable;
use super::EnvError;
use crate::ids::ProductId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompareOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<=")]
    Le,
}

impl fmt::Display for CompareOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompareOp::Eq => "=",
            CompareOp::Ge => ">=",
            CompareOp::Le => "<=",
        })
    }
}

/// `field op value`; ordered comparisons use the position of the value in
/// the field's domain.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub field: String,
    pub op: CompareOp,
    pub value: String,
}

impl Condition {
    pub fn new(field: impl Into<String>, op: CompareOp, value: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            op,
            value: value.into(),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.field, self.op, self.value)
    }
}

/// Conjunction of conditions. The empty predicate matches every row.
pub type Predicate = Vec<Condition>;

struct Resolved {
    field: usize,
    op: CompareOp,
    value: usize,
}

fn resolve(table: &ProductTable, predicate: &[Condition]) -> Result<Vec<Resolved>, EnvError> {
    predicate
        .iter()
        .map(|c| {
            let field = table
                .field_index(&c.field)
                .ok_or_else(|| EnvError::UnknownField(c.field.clone()))?;
            let value = table.schema[field]
                .value_index(&c.value)
                .ok_or_else(|| EnvError::UnknownValue {
                    field: c.field.clone(),
                    value: c.value.clone(),
                })?;
            Ok(Resolved {
                field,
                op: c.op,
                value,
            })
        })
        .collect()
}

/// Ids of rows satisfying every condition, in row order, at most `limit`.
pub fn search(
    table: &ProductTable,
    predicate: &[Condition],
    limit: usize,
) -> Result<Vec<ProductId>, EnvError> {
    let conds = resolve(table, predicate)?;
    Ok(table
        .rows
        .iter()
        .enumerate()
        .filter(|(_, row)| {
            conds.iter().all(|c| {
                let v = row[c.field];
                match c.op {
                    CompareOp::Eq => v == c.value,
                    CompareOp::Ge => v >= c.value,
                    CompareOp::Le => v <= c.value,
                }
            })
        })
        .map(|(i, _)| ProductId(i as u32))
        .take(limit)
        .collect())
}
