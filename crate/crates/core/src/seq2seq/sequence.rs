use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a spatial grid of cell features collapses into one item descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Sum,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "sum" => Ok(Pooling::Sum),
            other => Err(Error::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Sum => "sum",
        })
    }
}

/// Square g×g grid of pre-pool cell features, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    size: usize,
    cells: Vec<Vec<f64>>,
}

impl Grid {
    pub fn new(size: usize, cells: Vec<Vec<f64>>) -> Result<Self> {
        if size == 0 || cells.len() != size * size {
            return Err(Error::contract(format!(
                "grid of size {size} needs {} cells, got {}",
                size * size,
                cells.len()
            )));
        }
        let d = cells[0].len();
        if d == 0 || cells.iter().any(|c| c.len() != d) {
            return Err(Error::contract(
                "grid cells must share a non-zero dimension",
            ));
        }
        Ok(Grid { size, cells })
    }

    /// Builds a grid from nested rows, rejecting ragged or non-square input.
    pub fn from_rows(rows: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let g = rows.len();
        if rows.iter().any(|r| r.len() != g) {
            return Err(Error::contract("grid rows must form a square"));
        }
        Grid::new(g, rows.into_iter().flatten().collect())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn dim(&self) -> usize {
        self.cells[0].len()
    }

    pub fn cell(&self, a: usize, b: usize) -> &[f64] {
        &self.cells[a * self.size + b]
    }

    pub fn cells(&self) -> &[Vec<f64>] {
        &self.cells
    }

    pub fn pool(&self, pooling: Pooling) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for c in &self.cells {
            for (o, v) in out.iter_mut().zip(c) {
                *o += v;
            }
        }
        if pooling == Pooling::Mean {
            let n = self.cells.len() as f64;
            out.iter_mut().for_each(|o| *o /= n);
        }
        out
    }
}

/// Ordered item descriptors, optionally backed by their pre-pool grids.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSequence {
    items: Vec<Vec<f64>>,
    grids: Option<Vec<Grid>>,
}

impl DescriptorSequence {
    pub fn from_items(items: Vec<Vec<f64>>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::contract("descriptor sequence must be non-empty"));
        }
        let d = items[0].len();
        if d == 0 || items.iter().any(|v| v.len() != d) {
            return Err(Error::contract(
                "descriptor items must share a non-zero dimension",
            ));
        }
        Ok(DescriptorSequence { items, grids: None })
    }

    /// Pools each grid into its item descriptor and keeps the grids for probing.
    pub fn from_grids(grids: Vec<Grid>, pooling: Pooling) -> Result<Self> {
        if grids.is_empty() {
            return Err(Error::contract("descriptor sequence must be non-empty"));
        }
        let (g, d) = (grids[0].size(), grids[0].dim());
        if grids.iter().any(|x| x.size() != g || x.dim() != d) {
            return Err(Error::contract("all grids must share size and dimension"));
        }
        let items = grids.iter().map(|x| x.pool(pooling)).collect();
        Ok(DescriptorSequence {
            items,
            grids: Some(grids),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.items[0].len()
    }

    pub fn items(&self) -> &[Vec<f64>] {
        &self.items
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.items[i]
    }

    pub fn grids(&self) -> Option<&[Grid]> {
        self.grids.as_deref()
    }

    pub fn grid(&self, i: usize) -> Option<&Grid> {
        self.grids.as_ref().and_then(|g| g.get(i))
    }

    /// A copy with the items permuted by `order` (grids follow their items).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::contract("permutation length differs from sequence"));
        }
        Ok(DescriptorSequence {
            items: order.iter().map(|&i| self.items[i].clone()).collect(),
            grids: self
                .grids
                .as_ref()
                .map(|g| order.iter().map(|&i| g[i].clone()).collect()),
        })
    }

    /// The first `len` items.
    pub fn truncated(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.len() {
            return Err(Error::contract("truncation length out of range"));
        }
        Ok(DescriptorSequence {
            items: self.items[..len].to_vec(),
            grids: self.grids.as_ref().map(|g| g[..len].to_vec()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2() -> Grid {
        Grid::from_rows(vec![
            vec![vec![1.0, 0.0], vec![2.0, 4.0]],
            vec![vec![3.0, 8.0], vec![6.0, 0.0]],
        ])
        .unwrap()
    }

    #[test]
    fn pooled_item_matches_cell_average() {
        let seq = DescriptorSequence::from_grids(vec![grid2()], Pooling::Mean).unwrap();
        assert_eq!(seq.item(0), &[3.0, 3.0]);
        let seq = DescriptorSequence::from_grids(vec![grid2()], Pooling::Sum).unwrap();
        assert_eq!(seq.item(0), &[12.0, 12.0]);
    }

    #[test]
    fn invalid_shapes() {
        assert!(DescriptorSequence::from_items(vec![]).is_err());
        assert!(DescriptorSequence::from_items(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(Grid::from_rows(vec![vec![vec![1.0]], vec![]]).is_err());
        assert!(Grid::new(2, vec![vec![1.0]; 3]).is_err());
    }

    #[test]
    fn pooling_parses() {
        assert_eq!("sum".parse::<Pooling>().unwrap(), Pooling::Sum);
        assert!("max".parse::<Pooling>().is_err());
    }
}
