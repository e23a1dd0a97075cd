//! Masked 3D voxel lattice and its 6-neighbour graph Laplacians.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

const OUTSIDE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// In-mask voxels of a regular 3D grid, linearly ordered x-fastest.
#[derive(Debug, Clone)]
pub struct MaskedLattice {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    index_of: Vec<u32>,
    coord_of: Vec<[usize; 3]>,
}

impl MaskedLattice {
    /// `mask` is indexed x-fastest, i.e. `x + nx*(y + ny*z)`.
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], mask: &[bool]) -> Result<Self> {
        let cells = dims.iter().product::<usize>();
        if mask.len() != cells {
            return Err(Error::Dimension(format!(
                "mask has {} cells but dims {:?} need {}",
                mask.len(),
                dims,
                cells
            )));
        }
        if voxel_size.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("voxel size {voxel_size:?} must be positive")));
        }
        let mut index_of = vec![OUTSIDE; cells];
        let mut coord_of = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let g = x + dims[0] * (y + dims[1] * z);
                    if mask[g] {
                        index_of[g] = coord_of.len() as u32;
                        coord_of.push([x, y, z]);
                    }
                }
            }
        }
        if coord_of.is_empty() {
            return Err(Error::Domain("mask contains no voxels".into()));
        }
        Ok(MaskedLattice {
            dims,
            voxel_size,
            index_of,
            coord_of,
        })
    }

    pub fn full(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        Self::new(dims, voxel_size, &vec![true; dims.iter().product()])
    }

    pub fn from_fn(
        dims: [usize; 3],
        voxel_size: [f64; 3],
        inside: impl Fn(usize, usize, usize) -> bool,
    ) -> Result<Self> {
        let mut mask = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    mask.push(inside(x, y, z));
                }
            }
        }
        Self::new(dims, voxel_size, &mask)
    }

    pub fn n_voxels(&self) -> usize {
        self.coord_of.len()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    /// Geometric mean voxel edge, used to convert ranges to mm.
    pub fn voxel_edge(&self) -> f64 {
        self.voxel_size.iter().product::<f64>().cbrt()
    }

    pub fn coord(&self, i: usize) -> [usize; 3] {
        self.coord_of[i]
    }

    pub fn grid_index(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    pub fn index_at(&self, c: [usize; 3]) -> Option<usize> {
        if c.iter().zip(&self.dims).any(|(a, d)| a >= d) {
            return None;
        }
        match self.index_of[self.grid_index(c)] {
            OUTSIDE => None,
            i => Some(i as usize),
        }
    }

    pub fn mask(&self) -> Vec<bool> {
        self.index_of.iter().map(|&i| i != OUTSIDE).collect()
    }

    /// In-mask neighbour of voxel `i` one step along `axis` (`forward` = +1).
    pub fn neighbor(&self, i: usize, axis: Axis, forward: bool) -> Option<usize> {
        let mut c = self.coord_of[i];
        let a = axis.index();
        if forward {
            c[a] += 1;
        } else {
            if c[a] == 0 {
                return None;
            }
            c[a] -= 1;
        }
        self.index_at(c)
    }

    /// Unordered neighbour pairs `(i, j)` with `i < j`, tagged by axis.
    pub fn edges(&self) -> Vec<(usize, usize, Axis)> {
        let mut out = Vec::new();
        for i in 0..self.n_voxels() {
            for axis in Axis::ALL {
                if let Some(j) = self.neighbor(i, axis, true) {
                    out.push((i.min(j), i.max(j), axis));
                }
            }
        }
        out
    }

    pub fn neighbor_count(&self, i: usize) -> usize {
        Axis::ALL
            .iter()
            .map(|&a| {
                self.neighbor(i, a, true).is_some() as usize
                    + self.neighbor(i, a, false).is_some() as usize
            })
            .sum()
    }
}

/// Graph Laplacian restricted to the given axes (`None` = all three).
///
/// Stored on the full 7-point pattern so that G, Gx, Gy, Gz can be combined
/// value-wise; entries outside the selected axes are explicit zeros.
pub fn graph_laplacian(lattice: &MaskedLattice, axis: Option<Axis>) -> CsrMatrix {
    let n = lattice.n_voxels();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(7);
        let mut diag = 0.0;
        for a in Axis::ALL {
            let on = axis.is_none_or(|sel| sel == a);
            for forward in [false, true] {
                if let Some(j) = lattice.neighbor(i, a, forward) {
                    row.push((j, if on { -1.0 } else { 0.0 }));
                    if on {
                        diag += 1.0;
                    }
                }
            }
        }
        row.push((i, diag));
        rows.push(row);
    }
    CsrMatrix::from_rows(rows)
}

/// Component label per voxel (labels are 0.. in order of first appearance).
pub fn connected_components(lattice: &MaskedLattice) -> Vec<usize> {
    let n = lattice.n_voxels();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for a in Axis::ALL {
                for forward in [false, true] {
                    if let Some(j) = lattice.neighbor(i, a, forward) {
                        if label[j] == usize::MAX {
                            label[j] = next;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        next += 1;
    }
    label
}

/// Everything the prior operators need from the lattice, built once.
#[derive(Debug, Clone)]
pub struct LatticeOperators {
    pub g: CsrMatrix,
    pub g_axis: [CsrMatrix; 3],
    /// Neighbour pairs; rows of the incidence matrix D with DᵀD = G.
    pub edges: Vec<(usize, usize)>,
    pub components: Vec<usize>,
    pub n_components: usize,
}

impl LatticeOperators {
    pub fn new(lattice: &MaskedLattice) -> Self {
        let components = connected_components(lattice);
        let n_components = components.iter().max().map_or(0, |m| m + 1);
        LatticeOperators {
            g: graph_laplacian(lattice, None),
            g_axis: Axis::ALL.map(|a| graph_laplacian(lattice, Some(a))),
            edges: lattice.edges().into_iter().map(|(i, j, _)| (i, j)).collect(),
            components,
            n_components,
        }
    }

    pub fn n(&self) -> usize {
        self.g.dim()
    }

    /// y = Dᵀ z for edge weights z.
    pub fn incidence_t(&self, z: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (&(i, j), &w) in self.edges.iter().zip(z) {
            y[i] += w;
            y[j] -= w;
        }
    }

    /// Subtracts the per-component mean.
    pub fn project_out_nullspace(&self, v: &mut [f64]) {
        let mut sum = vec![0.0; self.n_components];
        let mut count = vec![0usize; self.n_components];
        for (x, &c) in v.iter().zip(&self.components) {
            sum[c] += x;
            count[c] += 1;
        }
        for (x, &c) in v.iter_mut().zip(&self.components) {
            *x -= sum[c] / count[c] as f64;
        }
    }
}
