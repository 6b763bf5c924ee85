//! Plain-text field files.
//!
//! A field file starts with one `#` header line of `key=value` pairs and
//! then holds one row `i,j,val_1,...,val_K` per node in row-major order.
//! Reals are written with Rust's shortest round-trip formatting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::grid::{Grid, MapField, NodeField, ScalarField};
use crate::{Error, Result};

fn push_rows<F: NodeField + ?Sized>(out: &mut String, f: &F) {
    let g = f.grid();
    let n = g.n();
    for i in 0..n {
        for j in 0..n {
            let _ = write!(out, "{i},{j}");
            for x in f.at(g.node(i, j)) {
                let _ = write!(out, ",{x:?}");
            }
            out.push('\n');
        }
    }
}

/// `# n=<n> K=<K> t=<t>` followed by the node rows.
pub fn field_to_csv<F: NodeField + ?Sized>(f: &F, t: f64) -> String {
    let mut s = format!("# n={} K={} t={t:?}\n", f.grid().n(), f.ncomp());
    push_rows(&mut s, f);
    s
}

/// Rescaled bubble field: `# bubble x_i=<x>,<y> r_i=<r> t_i=<t> n=<m> K=<K>`.
pub fn bubble_to_csv<F: NodeField + ?Sized>(f: &F, x_i: [f64; 2], r_i: f64, t_i: f64) -> String {
    let mut s = format!(
        "# bubble x_i={:?},{:?} r_i={r_i:?} t_i={t_i:?} n={} K={}\n",
        x_i[0],
        x_i[1],
        f.grid().n(),
        f.ncomp()
    );
    push_rows(&mut s, f);
    s
}

/// A parsed field file.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub header: BTreeMap<String, String>,
    pub grid: Grid,
    pub k: usize,
    pub values: Vec<f64>,
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

impl FieldFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| parse_err("empty field file"))?;
        let head = head
            .strip_prefix('#')
            .ok_or_else(|| parse_err("field file must start with a `#` header"))?;
        let header: BTreeMap<String, String> = head
            .split_whitespace()
            .filter_map(|tok| tok.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
            .collect();
        let num = |key: &str| -> Result<usize> {
            header
                .get(key)
                .ok_or_else(|| parse_err(format!("header lacks `{key}`")))?
                .parse()
                .map_err(|_| parse_err(format!("bad `{key}` in header")))
        };
        let (n, k) = (num("n")?, num("K")?);
        let grid = Grid::new(n)?;
        let mut values = vec![f64::NAN; grid.num_nodes() * k];
        let mut seen = vec![false; grid.num_nodes()];
        for (lineno, line) in lines.enumerate().map(|(l, s)| (l + 2, s.trim())) {
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let mut idx = || -> Result<usize> {
                cols.next()
                    .and_then(|c| c.trim().parse().ok())
                    .ok_or_else(|| parse_err(format!("line {lineno}: bad node index")))
            };
            let (i, j) = (idx()?, idx()?);
            if i >= n || j >= n {
                return Err(parse_err(format!("line {lineno}: node ({i}, {j}) outside an {n}x{n} grid")));
            }
            let node = grid.node(i, j);
            if std::mem::replace(&mut seen[node], true) {
                return Err(parse_err(format!("line {lineno}: node ({i}, {j}) repeated")));
            }
            let vals: Vec<f64> = cols
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(format!("line {lineno}: {e}")))?;
            if vals.len() != k {
                return Err(parse_err(format!("line {lineno}: expected {k} values, got {}", vals.len())));
            }
            values[node * k..(node + 1) * k].copy_from_slice(&vals);
        }
        if let Some(node) = seen.iter().position(|s| !s) {
            let (i, j) = grid.node_ij(node);
            return Err(parse_err(format!("node ({i}, {j}) missing")));
        }
        Ok(Self { header, grid, k, values })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Header value parsed as a real, if present.
    pub fn header_f64(&self, key: &str) -> Option<f64> {
        self.header.get(key).and_then(|s| s.parse().ok())
    }

    pub fn into_map(self) -> Result<MapField> {
        MapField::from_values(self.grid, self.k, self.values)
    }

    pub fn into_scalar(self) -> Result<ScalarField> {
        if self.k != 1 {
            return Err(parse_err(format!("expected a scalar field, file has K = {}", self.k)));
        }
        ScalarField::from_values(self.grid, self.values)
    }
}

/// Write `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
