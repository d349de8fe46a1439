//! Binary attention masks.
//!
//! A mask gates which key positions each query row may attend to. Rows are
//! queries, columns are keys. Masked softmax normalizes each row over the
//! positions whose bit is set.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
    row_support: Vec<usize>,
}

impl AttentionMask {
    pub fn all_ones(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            bits: vec![true; rows * cols],
            row_support: vec![cols; rows],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut bits = vec![false; n * n];
        for i in 0..n {
            bits[i * n + i] = true;
        }
        AttentionMask {
            rows: n,
            cols: n,
            bits,
            row_support: vec![1; n],
        }
    }

    /// Builds a mask from row-major bits. Rows without support are accepted
    /// here; callers that need full support check [`AttentionMask::ensure_support`].
    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::dim("AttentionMask::from_bits", &[rows, cols], &[bits.len()]));
        }
        let row_support = bits
            .chunks(cols.max(1))
            .take(rows)
            .map(|row| row.iter().filter(|b| **b).count())
            .collect();
        Ok(AttentionMask {
            rows,
            cols,
            bits,
            row_support,
        })
    }

    /// Parses 0/1 values, anything else is rejected.
    pub fn from_values(rows: usize, cols: usize, values: &[u8]) -> Result<Self> {
        let bits = values
            .iter()
            .map(|v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format(format!("mask value {other} is not binary"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bits(rows, cols, bits)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn row_support(&self) -> &[usize] {
        &self.row_support
    }

    pub fn total_support(&self) -> usize {
        self.row_support.iter().sum()
    }

    pub fn density(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        self.total_support() as f64 / (self.rows * self.cols) as f64
    }

    pub fn is_all_ones(&self) -> bool {
        self.row_support.iter().all(|s| *s == self.cols)
    }

    pub fn ensure_support(&self) -> Result<()> {
        match self.row_support.iter().position(|s| *s == 0) {
            Some(row) => Err(Error::DegenerateRow { row }),
            None => Ok(()),
        }
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &AttentionMask) -> bool {
        self.shape() == other.shape()
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// An all-ones square mask of size `n` whose trailing block starting at
    /// `offset` is replaced by `block`.
    pub fn with_trailing_block(n: usize, offset: usize, block: &AttentionMask) -> Result<Self> {
        if block.rows != block.cols || offset + block.rows != n {
            return Err(Error::dim(
                "AttentionMask::with_trailing_block",
                &[n, offset],
                &block.shape(),
            ));
        }
        let mut bits = vec![true; n * n];
        for i in 0..block.rows {
            let dst = (offset + i) * n + offset;
            bits[dst..dst + block.cols].copy_from_slice(block.row(i));
        }
        Self::from_bits(n, n, bits)
    }

    /// Plain PBM (P1) rendering; set bits are written as 1 (black).
    pub fn to_pbm(&self, comment: Option<&str>) -> String {
        let mut out = String::from("P1\n");
        if let Some(c) = comment {
            for line in c.lines() {
                let _ = writeln!(out, "# {line}");
            }
        }
        let _ = writeln!(out, "{} {}", self.cols, self.rows);
        for i in 0..self.rows {
            let line: Vec<&str> = self.row(i).iter().map(|b| if *b { "1" } else { "0" }).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_pbm(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        if tokens.next() != Some("P1") {
            return Err(Error::Format("PBM: missing P1 magic".into()));
        }
        let mut dim = || -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Format("PBM: bad header".into()))
        };
        let cols = dim()?;
        let rows = dim()?;
        let values: Vec<u8> = tokens
            .flat_map(|t| t.bytes())
            .map(|b| b.wrapping_sub(b'0'))
            .collect();
        Self::from_values(rows, cols, &values)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.rows {
            let line: Vec<&str> = self.row(i).iter().map(|b| if *b { "1" } else { "0" }).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}
