//! Uniform node grid on the unit square and the discrete calculus used by
//! every other module.
//!
//! Nodes are indexed `(i, j)` with `x = i h`, `y = j h`, stored row-major as
//! `i * n + j`. Cell `(ci, cj)` has corners `(ci, cj)`, `(ci + 1, cj)`,
//! `(ci, cj + 1)`, `(ci + 1, cj + 1)` and is stored at `ci * (n - 1) + cj`.
//!
//! The cell gradient density averages the squared forward differences over
//! the two parallel edges in each direction. Summed over cells with weight
//! `h^2 / 2` it gives `1/2 * sum_e w_e d_e^2`, where interior edges carry
//! `w_e = 1` and edges lying on the boundary carry `w_e = 1/2`. Its gradient
//! with respect to an interior node is exactly `-h^2` times the 5-point
//! Laplacian, which is what makes the energy accounting downstream exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    n: usize,
}

impl Grid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::GridTooSmall(n));
        }
        Ok(Self { n })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn h(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    /// Coordinate of grid line `k`; the last line sits at exactly 1.0.
    #[inline]
    pub fn coord(&self, k: usize) -> f64 {
        k as f64 / (self.n - 1) as f64
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> usize {
        i * self.n + j
    }

    #[inline]
    pub fn node_ij(&self, node: usize) -> (usize, usize) {
        (node / self.n, node % self.n)
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        [self.coord(i), self.coord(j)]
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.n * self.n
    }

    #[inline]
    pub fn cells_per_side(&self) -> usize {
        self.n - 1
    }

    #[inline]
    pub fn num_cells(&self) -> usize {
        (self.n - 1) * (self.n - 1)
    }

    #[inline]
    pub fn cell(&self, ci: usize, cj: usize) -> usize {
        ci * (self.n - 1) + cj
    }

    #[inline]
    pub fn cell_center(&self, ci: usize, cj: usize) -> [f64; 2] {
        let h = self.h();
        [(ci as f64 + 0.5) * h, (cj as f64 + 0.5) * h]
    }

    #[inline]
    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.n - 1 || j == self.n - 1
    }

    pub fn boundary_mask(&self) -> Vec<bool> {
        (0..self.num_nodes())
            .map(|k| {
                let (i, j) = self.node_ij(k);
                self.is_boundary(i, j)
            })
            .collect()
    }

    /// Boundary nodes in counterclockwise order starting at the origin.
    pub fn boundary_loop(&self) -> Vec<(usize, usize)> {
        let m = self.n - 1;
        let mut out = Vec::with_capacity(4 * m);
        out.extend((0..m).map(|i| (i, 0)));
        out.extend((0..m).map(|j| (m, j)));
        out.extend((0..m).map(|k| (m - k, m)));
        out.extend((0..m).map(|k| (0, m - k)));
        out
    }

    /// Euclidean distance from `p` to the boundary of the square.
    pub fn dist_to_boundary(p: [f64; 2]) -> f64 {
        p[0].min(1.0 - p[0]).min(p[1]).min(1.0 - p[1])
    }
}

/// Shared view over node-based fields with `ncomp` reals per node.
pub trait NodeField {
    fn grid(&self) -> Grid;
    fn ncomp(&self) -> usize;
    fn data(&self) -> &[f64];

    #[inline]
    fn at(&self, node: usize) -> &[f64] {
        let k = self.ncomp();
        &self.data()[node * k..(node + 1) * k]
    }
}

fn check_values(expected: usize, values: &[f64]) -> Result<()> {
    if values.len() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            got: values.len(),
        });
    }
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { node: pos });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.num_nodes()],
        }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        check_values(grid.num_nodes(), &values)?;
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.num_nodes());
        for i in 0..grid.n() {
            for j in 0..grid.n() {
                let [x, y] = grid.point(i, j);
                values.push(f(x, y));
            }
        }
        Self { grid, values }
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.node(i, j)]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Copy boundary values from `other`, keeping the interior.
    pub fn set_boundary_from(&mut self, other: &ScalarField) {
        let g = self.grid;
        for (i, j) in g.boundary_loop() {
            let k = g.node(i, j);
            self.values[k] = other.values[k];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl NodeField for ScalarField {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn ncomp(&self) -> usize {
        1
    }
    fn data(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapField {
    grid: Grid,
    k: usize,
    values: Vec<f64>,
}

impl MapField {
    pub fn from_values(grid: Grid, k: usize, values: Vec<f64>) -> Result<Self> {
        check_values(k * grid.num_nodes(), &values)?;
        Ok(Self { grid, k, values })
    }

    pub fn constant(grid: Grid, point: &[f64]) -> Self {
        let mut values = Vec::with_capacity(point.len() * grid.num_nodes());
        for _ in 0..grid.num_nodes() {
            values.extend_from_slice(point);
        }
        Self {
            grid,
            k: point.len(),
            values,
        }
    }

    pub fn from_fn(grid: Grid, k: usize, f: impl Fn(f64, f64, &mut [f64])) -> Self {
        let mut values = vec![0.0; k * grid.num_nodes()];
        for i in 0..grid.n() {
            for j in 0..grid.n() {
                let [x, y] = grid.point(i, j);
                let node = grid.node(i, j);
                f(x, y, &mut values[node * k..(node + 1) * k]);
            }
        }
        Self { grid, k, values }
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn node_value(&self, node: usize) -> &[f64] {
        &self.values[node * self.k..(node + 1) * self.k]
    }

    #[inline]
    pub fn node_value_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.values[node * self.k..(node + 1) * self.k]
    }

    pub fn component(&self, c: usize) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.values.iter().skip(c).step_by(self.k).copied().collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest nodewise Euclidean distance between two maps.
    pub fn sup_distance(&self, other: &MapField) -> f64 {
        self.values
            .chunks(self.k)
            .zip(other.values.chunks(other.k))
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
}

impl NodeField for MapField {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn ncomp(&self) -> usize {
        self.k
    }
    fn data(&self) -> &[f64] {
        &self.values
    }
}

/// Cell-centred scalar data, one value per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField {
    grid: Grid,
    values: Vec<f64>,
}

impl CellField {
    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, ci: usize, cj: usize) -> f64 {
        self.values[self.grid.cell(ci, cj)]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// `1/2 * sum(density) * h^2`, summed in cell order.
    pub fn half_integral(&self) -> f64 {
        let h = self.grid.h();
        0.5 * self.values.iter().sum::<f64>() * h * h
    }

    /// `(sum density^(p/2) h^2)^(1/p)`: the discrete L^p norm of the gradient.
    pub fn gradient_lp_norm(&self, p: f64) -> f64 {
        let h = self.grid.h();
        let s: f64 = if p == 2.0 {
            self.values.iter().sum()
        } else if p == 4.0 {
            self.values.iter().map(|d| d * d).sum()
        } else {
            self.values.iter().map(|d| d.powf(0.5 * p)).sum()
        };
        (s * h * h).powf(1.0 / p)
    }
}

/// Squared differences along x-edges (`(i, j)-(i+1, j)` at `i * n + j`) and
/// y-edges (`(i, j)-(i, j+1)` at `i * (n - 1) + j`).
pub(crate) fn edge_sq(grid: Grid, k: usize, data: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match k {
        1 => edge_sq_k::<1>(grid, data),
        2 => edge_sq_k::<2>(grid, data),
        3 => edge_sq_k::<3>(grid, data),
        4 => edge_sq_k::<4>(grid, data),
        _ => edge_sq_dyn(grid, k, data),
    }
}

#[inline(always)]
fn sqd<const K: usize>(a: &[f64], b: &[f64]) -> f64 {
    let (a, b): (&[f64; K], &[f64; K]) = (a.try_into().unwrap(), b.try_into().unwrap());
    let mut s = 0.0;
    for m in 0..K {
        let d = b[m] - a[m];
        s += d * d;
    }
    s
}

fn edge_sq_k<const K: usize>(grid: Grid, data: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = grid.n();
    let mut ex = vec![0.0; (n - 1) * n];
    let mut ey = vec![0.0; n * (n - 1)];
    for i in 0..n - 1 {
        let row = &data[i * n * K..(i + 1) * n * K];
        let next = &data[(i + 1) * n * K..(i + 2) * n * K];
        for ((e, a), b) in ex[i * n..(i + 1) * n].iter_mut().zip(row.chunks_exact(K)).zip(next.chunks_exact(K)) {
            *e = sqd::<K>(a, b);
        }
    }
    for i in 0..n {
        let row = &data[i * n * K..(i + 1) * n * K];
        for (j, e) in ey[i * (n - 1)..(i + 1) * (n - 1)].iter_mut().enumerate() {
            *e = sqd::<K>(&row[j * K..(j + 1) * K], &row[(j + 1) * K..(j + 2) * K]);
        }
    }
    (ex, ey)
}

fn edge_sq_dyn(grid: Grid, k: usize, data: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = grid.n();
    let d2 = |a: usize, b: usize| -> f64 {
        (0..k).map(|m| (data[b * k + m] - data[a * k + m]).powi(2)).sum()
    };
    let mut ex = vec![0.0; (n - 1) * n];
    let mut ey = vec![0.0; n * (n - 1)];
    for i in 0..n - 1 {
        for j in 0..n {
            ex[i * n + j] = d2(i * n + j, (i + 1) * n + j);
        }
    }
    for i in 0..n {
        for j in 0..n - 1 {
            ey[i * (n - 1) + j] = d2(i * n + j, i * n + j + 1);
        }
    }
    (ex, ey)
}

/// Cell-based `|grad f|^2` density.
pub fn gradient_sq<F: NodeField + ?Sized>(f: &F) -> CellField {
    let g = f.grid();
    let (ex, ey) = edge_sq(g, f.ncomp(), f.data());
    density_from_edges(g, &ex, &ey)
}

pub(crate) fn density_from_edges(g: Grid, ex: &[f64], ey: &[f64]) -> CellField {
    let n = g.n();
    let inv_h2 = 1.0 / (g.h() * g.h());
    let mut values = Vec::with_capacity(g.num_cells());
    for ci in 0..n - 1 {
        for cj in 0..n - 1 {
            let sx = ex[ci * n + cj] + ex[ci * n + cj + 1];
            let sy = ey[ci * (n - 1) + cj] + ey[(ci + 1) * (n - 1) + cj];
            values.push(0.5 * (sx + sy) * inv_h2);
        }
    }
    CellField { grid: g, values }
}

/// Discrete Dirichlet energy `1/2 * integral |grad f|^2`.
pub fn dirichlet_energy<F: NodeField + ?Sized>(f: &F) -> f64 {
    gradient_sq(f).half_integral()
}

/// Discrete `integral grad a . grad b`, the bilinear form whose diagonal is
/// `2 * dirichlet_energy`.
pub fn grad_inner(a: &ScalarField, b: &ScalarField) -> f64 {
    let g = a.grid;
    let n = g.n();
    let (av, bv) = (&a.values, &b.values);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = g.node(i, j);
            if i + 1 < n {
                let q = p + n;
                let w = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                total += w * (av[q] - av[p]) * (bv[q] - bv[p]);
            }
            if j + 1 < n {
                let q = p + 1;
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                total += w * (av[q] - av[p]) * (bv[q] - bv[p]);
            }
        }
    }
    total
}

/// Node quadrature `h^2 * sum a b`.
pub fn node_inner(a: &[f64], b: &[f64], grid: Grid) -> f64 {
    let h = grid.h();
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * h * h
}

/// 5-point Laplacian applied componentwise; boundary entries are zero.
pub(crate) fn laplacian_into(grid: Grid, k: usize, src: &[f64], dst: &mut [f64]) {
    let n = grid.n();
    let w = n * k;
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    dst.fill(0.0);
    for i in 1..n - 1 {
        let up = &src[(i - 1) * w..i * w];
        let mid = &src[i * w..(i + 1) * w];
        let down = &src[(i + 1) * w..(i + 2) * w];
        let out = &mut dst[i * w..(i + 1) * w];
        for q in k..w - k {
            out[q] = (down[q] + up[q] + mid[q + k] + mid[q - k] - 4.0 * mid[q]) * inv_h2;
        }
    }
}

/// 5-point Laplacian on interior nodes; boundary nodes carry 0.
pub fn laplacian(f: &ScalarField) -> ScalarField {
    let mut out = ScalarField::zeros(f.grid);
    laplacian_into(f.grid, 1, &f.values, &mut out.values);
    out
}

/// Componentwise 5-point Laplacian of a map.
pub fn laplacian_map(f: &MapField) -> MapField {
    let mut values = vec![0.0; f.values.len()];
    laplacian_into(f.grid, f.k, &f.values, &mut values);
    MapField {
        grid: f.grid,
        k: f.k,
        values,
    }
}

#[inline]
fn in_ball(g: &Grid, ci: usize, cj: usize, center: [f64; 2], r2: f64) -> bool {
    let [x, y] = g.cell_center(ci, cj);
    let (dx, dy) = (x - center[0], y - center[1]);
    dx * dx + dy * dy <= r2
}

/// `1/2 * sum of density * h^2` over cells whose centres lie within `r` of
/// `center`. Reference implementation; [`BallEnergyTable`] is the fast path.
pub fn ball_energy_density(density: &CellField, center: [f64; 2], r: f64) -> f64 {
    let g = density.grid;
    let h = g.h();
    let m = g.cells_per_side();
    let r2 = r * r;
    let lo = |c: f64| (((c - r) / h - 1.0).floor().max(0.0)) as usize;
    let hi = |c: f64| ((((c + r) / h).ceil() + 1.0).max(0.0) as usize).min(m);
    let mut total = 0.0;
    for ci in lo(center[0])..hi(center[0]) {
        for cj in lo(center[1])..hi(center[1]) {
            if in_ball(&g, ci, cj, center, r2) {
                total += density.get(ci, cj);
            }
        }
    }
    0.5 * total * h * h
}

pub fn ball_energy<F: NodeField + ?Sized>(f: &F, center: [f64; 2], r: f64) -> f64 {
    ball_energy_density(&gradient_sq(f), center, r)
}

/// Prefix sums over a density for fast ball and box energies.
#[derive(Debug, Clone)]
pub struct BallEnergyTable {
    density: CellField,
    /// Per cell row `ci`: `row[ci * (m + 1) + cj]` = sum of the first `cj` cells.
    row: Vec<f64>,
    /// Summed-area table of size `(m + 1)^2`.
    sat: Vec<f64>,
}

impl BallEnergyTable {
    pub fn new(density: CellField) -> Self {
        let m = density.grid.cells_per_side();
        let w = m + 1;
        let mut row = vec![0.0; m * w];
        let mut sat = vec![0.0; w * w];
        for ci in 0..m {
            let mut acc = 0.0;
            for cj in 0..m {
                acc += density.get(ci, cj);
                row[ci * w + cj + 1] = acc;
                sat[(ci + 1) * w + cj + 1] = sat[ci * w + cj + 1] + acc;
            }
        }
        Self { density, row, sat }
    }

    pub fn from_field<F: NodeField + ?Sized>(f: &F) -> Self {
        Self::new(gradient_sq(f))
    }

    pub fn density(&self) -> &CellField {
        &self.density
    }

    pub fn grid(&self) -> Grid {
        self.density.grid
    }

    pub fn total_energy(&self) -> f64 {
        let m = self.grid().cells_per_side();
        let w = m + 1;
        let h = self.grid().h();
        0.5 * self.sat[w * w - 1] * h * h
    }

    /// Ball energy with the same cell membership rule as
    /// [`ball_energy_density`].
    pub fn ball_energy(&self, center: [f64; 2], r: f64) -> f64 {
        let g = self.grid();
        let h = g.h();
        let m = g.cells_per_side();
        let w = m + 1;
        let r2 = r * r;
        let ci_lo = (((center[0] - r) / h - 1.0).floor().max(0.0)) as usize;
        let ci_hi = ((((center[0] + r) / h).ceil() + 1.0).max(0.0) as usize).min(m);
        let mut total = 0.0;
        for ci in ci_lo..ci_hi {
            let dx = (ci as f64 + 0.5) * h - center[0];
            let rem = r2 - dx * dx;
            if rem < 0.0 {
                continue;
            }
            let half = rem.sqrt();
            let guess_lo = ((center[1] - half) / h - 0.5).ceil();
            let guess_hi = ((center[1] + half) / h - 0.5).floor();
            if guess_hi < -1.0 || guess_lo > m as f64 {
                continue;
            }
            let mut lo = guess_lo.clamp(0.0, m as f64) as usize;
            let mut hi = (guess_hi + 1.0).clamp(0.0, m as f64) as usize; // exclusive
            // settle the endpoints with the exact membership test
            while lo > 0 && in_ball(&g, ci, lo - 1, center, r2) {
                lo -= 1;
            }
            while lo < hi && !in_ball(&g, ci, lo, center, r2) {
                lo += 1;
            }
            while hi < m && in_ball(&g, ci, hi, center, r2) {
                hi += 1;
            }
            while hi > lo && !in_ball(&g, ci, hi - 1, center, r2) {
                hi -= 1;
            }
            if hi > lo {
                total += self.row[ci * w + hi] - self.row[ci * w + lo];
            }
        }
        0.5 * total * h * h
    }

    /// Energy of all cells whose centres lie in the axis-aligned box of
    /// half-width `r` around `center`; an upper bound for the ball energy.
    pub fn box_energy(&self, center: [f64; 2], r: f64) -> f64 {
        let g = self.grid();
        let h = g.h();
        let m = g.cells_per_side();
        let w = m + 1;
        let range = |c: f64| {
            let lo = ((c - r) / h - 0.5).ceil().clamp(0.0, m as f64) as usize;
            let hi = (((c + r) / h - 0.5).floor() + 1.0).clamp(0.0, m as f64) as usize;
            // widen by one cell each way to absorb rounding; still an upper bound
            (lo.saturating_sub(1), (hi + 1).min(m))
        };
        let (a0, a1) = range(center[0]);
        let (b0, b1) = range(center[1]);
        if a1 <= a0 || b1 <= b0 {
            return 0.0;
        }
        let s = self.sat[a1 * w + b1] - self.sat[a0 * w + b1] - self.sat[a1 * w + b0]
            + self.sat[a0 * w + b0];
        0.5 * s * h * h
    }

    /// Largest ball energy over node centres at radius `r`, returning the
    /// lowest node index among ties.
    pub fn max_over_nodes(&self, r: f64) -> (usize, f64) {
        let g = self.grid();
        // seed with the corner node of the densest cell to prune the sort
        let m = g.cells_per_side();
        let dense = (0..g.num_cells())
            .fold(0, |b, c| if self.density.values()[c] > self.density.values()[b] { c } else { b });
        let seed_pt = g.point(dense / m, dense % m);
        let seed = self.ball_energy(seed_pt, r);
        let mut bounds: Vec<(f64, usize)> = (0..g.num_nodes())
            .filter_map(|node| {
                let (i, j) = g.node_ij(node);
                let b = self.box_energy(g.point(i, j), r);
                (b >= seed).then_some((b, node))
            })
            .collect();
        bounds.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut best = (0usize, f64::NEG_INFINITY);
        for (bound, node) in bounds {
            if bound < best.1 {
                break;
            }
            let (i, j) = g.node_ij(node);
            let e = self.ball_energy(g.point(i, j), r);
            if e > best.1 || (e == best.1 && node < best.0) {
                best = (node, e);
            }
        }
        best
    }

    /// All nodes whose ball energy at radius `r` exceeds `level`, in node order.
    pub fn nodes_exceeding(&self, r: f64, level: f64) -> Vec<(usize, f64)> {
        let g = self.grid();
        (0..g.num_nodes())
            .filter_map(|node| {
                let (i, j) = g.node_ij(node);
                let p = g.point(i, j);
                if self.box_energy(p, r) <= level {
                    return None;
                }
                let e = self.ball_energy(p, r);
                (e > level).then_some((node, e))
            })
            .collect()
    }
}

/// Bilinear interpolation of node values at `p`.
pub fn interpolate<F: NodeField + ?Sized>(f: &F, p: [f64; 2]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; f.ncomp()];
    interpolate_into(f, p, &mut out)?;
    Ok(out)
}

pub fn interpolate_into<F: NodeField + ?Sized>(f: &F, p: [f64; 2], out: &mut [f64]) -> Result<()> {
    if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
        return Err(Error::OutsideDomain(p[0], p[1]));
    }
    let g = f.grid();
    let m = (g.n() - 1) as f64;
    let locate = |c: f64| -> (usize, f64) {
        let mut s = c * m;
        let r = s.round();
        if (s - r).abs() < 1e-12 {
            s = r;
        }
        let i0 = (s.floor() as usize).min(g.n() - 2);
        (i0, s - i0 as f64)
    };
    let (i0, fx) = locate(p[0]);
    let (j0, fy) = locate(p[1]);
    let k = f.ncomp();
    let data = f.data();
    let a = g.node(i0, j0);
    let (b, c, d) = (a + g.n(), a + 1, a + g.n() + 1);
    let w = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
    for (m, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (node, wt) in [a, b, c, d].into_iter().zip(w) {
            if wt != 0.0 {
                acc += wt * data[node * k + m];
            }
        }
        *o = acc;
    }
    Ok(())
}
