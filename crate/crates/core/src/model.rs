//! Grid CRF instances and their decomposition into chain sub-problems.
//!
//! Vertices are indexed row-major (`i = row * width + col`). Edges connect a
//! vertex to the vertex `stride` steps to its right or below it, and are
//! enumerated in a canonical order: vertex-major by source, then for each stride
//! in ascending order the right edge followed by the down edge. Targets outside
//! the grid are skipped.

use crate::error::{Error, Result, Violation};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

impl Orientation {
    pub fn key_prefix(self) -> char {
        match self {
            Orientation::Horizontal => 'h',
            Orientation::Vertical => 'v',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub num_labels: usize,
    pub strides: Vec<usize>,
}

/// A directed grid edge from `source` to `target` (target has the larger coordinate).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub orientation: Orientation,
    pub stride: usize,
    /// Index of the shared `(orientation, stride)` table in tied mode.
    pub slot: usize,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, num_labels: usize, strides: &[usize]) -> Self {
        Self {
            height,
            width,
            num_labels,
            strides: strides.to_vec(),
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn vertex(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.width, i % self.width)
    }

    /// Number of tied `(orientation, stride)` tables.
    pub fn num_slots(&self) -> usize {
        2 * self.strides.len()
    }

    pub fn slot(&self, stride_index: usize, orientation: Orientation) -> usize {
        2 * stride_index
            + match orientation {
                Orientation::Horizontal => 0,
                Orientation::Vertical => 1,
            }
    }

    /// Key of a tied table in the text format, e.g. `"h1"` or `"v2"`.
    pub fn slot_key(&self, slot: usize) -> String {
        let o = if slot.is_multiple_of(2) { 'h' } else { 'v' };
        format!("{o}{}", self.strides[slot / 2])
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.height == 0 || self.width == 0 {
            out.push(Violation::EmptyGrid {
                height: self.height,
                width: self.width,
            });
        }
        if self.num_labels == 0 {
            out.push(Violation::NoLabels);
        }
        let extent = self.height.max(self.width);
        for &s in &self.strides {
            if s == 0 {
                out.push(Violation::ZeroStride);
            } else if s >= extent {
                out.push(Violation::StrideExceedsExtent { stride: s, extent });
            }
        }
        if self.strides.windows(2).any(|w| w[0] >= w[1]) {
            out.push(Violation::StridesNotSortedUnique);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(v))
        }
    }

    /// All edges in canonical order.
    pub fn edges(&self) -> Vec<Edge> {
        let mut edges = Vec::new();
        for row in 0..self.height {
            for col in 0..self.width {
                let source = self.vertex(row, col);
                for (k, &s) in self.strides.iter().enumerate() {
                    if col + s < self.width {
                        edges.push(Edge {
                            source,
                            target: self.vertex(row, col + s),
                            orientation: Orientation::Horizontal,
                            stride: s,
                            slot: self.slot(k, Orientation::Horizontal),
                        });
                    }
                    if row + s < self.height {
                        edges.push(Edge {
                            source,
                            target: self.vertex(row + s, col),
                            orientation: Orientation::Vertical,
                            stride: s,
                            slot: self.slot(k, Orientation::Vertical),
                        });
                    }
                }
            }
        }
        edges
    }

    pub fn num_edges(&self) -> usize {
        let (m, n) = (self.height, self.width);
        self.strides
            .iter()
            .map(|&s| m * n.saturating_sub(s) + n * m.saturating_sub(s))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Pairwise<T> {
    /// One `L x L` table per edge, in canonical edge order.
    Dense(Vec<T>),
    /// One `L x L` table per `(orientation, stride)` slot, ordered `h1, v1, h2, v2, ...`.
    Tied(Vec<T>),
}

impl<T> Pairwise<T> {
    pub fn is_tied(&self) -> bool {
        matches!(self, Pairwise::Tied(_))
    }

    pub fn data(&self) -> &[T] {
        match self {
            Pairwise::Dense(v) | Pairwise::Tied(v) => v,
        }
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        match self {
            Pairwise::Dense(v) | Pairwise::Tied(v) => v,
        }
    }
}

/// A pairwise grid CRF: unary scores `(vertices, labels)` and pairwise tables
/// indexed `[source label][target label]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Potentials<T> {
    pub grid: GridSpec,
    pub unary: Vec<T>,
    pub pairwise: Pairwise<T>,
}

impl<T: Scalar> Potentials<T> {
    pub fn zeros(grid: GridSpec, tied: bool) -> Self {
        let l = grid.num_labels;
        let unary = vec![T::zero(); grid.num_vertices() * l];
        let pairwise = if tied {
            Pairwise::Tied(vec![T::zero(); grid.num_slots() * l * l])
        } else {
            Pairwise::Dense(vec![T::zero(); grid.num_edges() * l * l])
        };
        Self {
            grid,
            unary,
            pairwise,
        }
    }

    #[inline]
    pub fn unary_row(&self, i: usize) -> &[T] {
        let l = self.grid.num_labels;
        &self.unary[i * l..(i + 1) * l]
    }

    /// The `L x L` table of edge `edge_index`, expanding tied tables on demand.
    #[inline]
    pub fn edge_table(&self, edge_index: usize, slot: usize) -> &[T] {
        let ll = self.grid.num_labels * self.grid.num_labels;
        let k = match self.pairwise {
            Pairwise::Dense(_) => edge_index,
            Pairwise::Tied(_) => slot,
        };
        &self.pairwise.data()[k * ll..(k + 1) * ll]
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Potentials<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        Potentials {
            grid: self.grid.clone(),
            unary: conv(&self.unary),
            pairwise: match &self.pairwise {
                Pairwise::Dense(v) => Pairwise::Dense(conv(v)),
                Pairwise::Tied(v) => Pairwise::Tied(conv(v)),
            },
        }
    }

    /// Dense copy of the pairwise tables.
    pub fn to_dense(&self) -> Self {
        match &self.pairwise {
            Pairwise::Dense(_) => self.clone(),
            Pairwise::Tied(_) => {
                let mut data = Vec::new();
                for (e, edge) in self.grid.edges().iter().enumerate() {
                    data.extend_from_slice(self.edge_table(e, edge.slot));
                }
                Potentials {
                    grid: self.grid.clone(),
                    unary: self.unary.clone(),
                    pairwise: Pairwise::Dense(data),
                }
            }
        }
    }
}

/// Collects every violation of the instance; never stops at the first one.
pub fn validate_potentials<T: Scalar>(p: &Potentials<T>) -> Vec<Violation> {
    let g = &p.grid;
    let mut out = g.violations();
    let l = g.num_labels;
    let expected = g.num_vertices() * l;
    if p.unary.len() != expected {
        out.push(Violation::UnaryLength {
            expected,
            found: p.unary.len(),
        });
    }
    for (k, v) in p.unary.iter().enumerate() {
        if !v.is_finite() && l > 0 {
            out.push(Violation::NonFiniteUnary {
                vertex: k / l,
                label: k % l,
            });
        }
    }
    let tables = match p.pairwise {
        Pairwise::Dense(_) => g.num_edges(),
        Pairwise::Tied(_) => g.num_slots(),
    };
    let data = p.pairwise.data();
    if data.len() != tables * l * l {
        out.push(Violation::PairwiseLength {
            expected: tables * l * l,
            found: data.len(),
        });
    }
    if l > 0 {
        for (k, v) in data.iter().enumerate() {
            if !v.is_finite() {
                out.push(Violation::NonFinitePairwise {
                    table: k / (l * l),
                    from: (k / l) % l,
                    to: k % l,
                });
            }
        }
    }
    out
}

pub fn check_potentials<T: Scalar>(p: &Potentials<T>) -> Result<()> {
    let v = validate_potentials(p);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    pub labels: Vec<usize>,
}

impl Labeling {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels }
    }

    pub fn check(&self, grid: &GridSpec) -> Result<()> {
        if self.labels.len() != grid.num_vertices() {
            return Err(Error::LabelingLength {
                expected: grid.num_vertices(),
                found: self.labels.len(),
            });
        }
        for (vertex, &label) in self.labels.iter().enumerate() {
            if label >= grid.num_labels {
                return Err(Error::LabelOutOfRange {
                    vertex,
                    label,
                    num_labels: grid.num_labels,
                });
            }
        }
        Ok(())
    }
}

/// Total score `Σ ψ_i(x_i) + Σ φ_ij(x_i, x_j)` of a labeling.
pub fn energy<T: Scalar>(p: &Potentials<T>, x: &Labeling) -> Result<T> {
    x.check(&p.grid)?;
    let l = p.grid.num_labels;
    let mut total = T::zero();
    for (i, &xi) in x.labels.iter().enumerate() {
        total += p.unary[i * l + xi];
    }
    for (e, edge) in p.grid.edges().iter().enumerate() {
        let table = p.edge_table(e, edge.slot);
        total += table[x.labels[edge.source] * l + x.labels[edge.target]];
    }
    Ok(total)
}

/// A path-structured sub-problem. Vertices are listed root (smallest coordinate) first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub id: usize,
    pub orientation: Orientation,
    pub stride: usize,
    pub slot: usize,
    pub vertices: Vec<usize>,
    /// Canonical index of the edge between `vertices[k]` and `vertices[k + 1]`.
    pub edges: Vec<usize>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cover {
    pub chain: usize,
    pub position: usize,
}

/// Chains covering every grid edge exactly once and every vertex at least once.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub grid: GridSpec,
    pub chains: Vec<Chain>,
    /// `coverage[i]` lists the chains containing vertex `i` in ascending chain id.
    pub coverage: Vec<Vec<Cover>>,
    pub max_chain_len: usize,
    /// Start of each chain in a flat per-position buffer; `offsets[chains.len()]` is the total.
    pub offsets: Vec<usize>,
    /// Grid vertex at each flat position.
    pub position_vertex: Vec<usize>,
}

impl Decomposition {
    pub fn num_positions(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// `1 / max_t |V^t|`, the monotone step size for simultaneous updates.
    pub fn step_size<T: Scalar>(&self) -> T {
        T::one() / T::of_usize(self.max_chain_len)
    }

    pub fn position_index(&self, cover: Cover) -> usize {
        self.offsets[cover.chain] + cover.position
    }
}

/// Splits the grid into horizontal and vertical chains, one family per stride.
///
/// For stride `s` along an axis of extent `n > s` there are `s` chains per line,
/// starting at offsets `0..s`; the chain at offset `o` has `ceil((n - o) / s)`
/// vertices. Axes with extent `<= s` contribute nothing for that stride. A vertex
/// reached by no chain (only possible without strides) gets a singleton chain.
pub fn build_decomposition(grid: &GridSpec) -> Result<Decomposition> {
    grid.validate()?;
    let edges = grid.edges();
    let nslots = grid.num_slots();
    let mut lookup = vec![usize::MAX; grid.num_vertices() * nslots.max(1)];
    for (e, edge) in edges.iter().enumerate() {
        lookup[edge.source * nslots + edge.slot] = e;
    }

    let mut chains: Vec<Chain> = Vec::new();
    let mut push = |orientation: Orientation, stride: usize, slot: usize, vertices: Vec<usize>| {
        let edges = vertices
            .windows(2)
            .map(|w| lookup[w[0] * nslots + slot])
            .collect();
        chains.push(Chain {
            id: chains.len(),
            orientation,
            stride,
            slot,
            vertices,
            edges,
        });
    };

    for (k, &s) in grid.strides.iter().enumerate() {
        if grid.width > s {
            let slot = grid.slot(k, Orientation::Horizontal);
            for row in 0..grid.height {
                for o in 0..s {
                    let vs = (o..grid.width).step_by(s).map(|c| grid.vertex(row, c)).collect();
                    push(Orientation::Horizontal, s, slot, vs);
                }
            }
        }
        if grid.height > s {
            let slot = grid.slot(k, Orientation::Vertical);
            for col in 0..grid.width {
                for o in 0..s {
                    let vs = (o..grid.height).step_by(s).map(|r| grid.vertex(r, col)).collect();
                    push(Orientation::Vertical, s, slot, vs);
                }
            }
        }
    }

    let mut coverage = vec![Vec::new(); grid.num_vertices()];
    for chain in &chains {
        for (position, &v) in chain.vertices.iter().enumerate() {
            coverage[v].push(Cover {
                chain: chain.id,
                position,
            });
        }
    }
    for v in 0..grid.num_vertices() {
        if coverage[v].is_empty() {
            let id = chains.len();
            chains.push(Chain {
                id,
                orientation: Orientation::Horizontal,
                stride: 1,
                slot: 0,
                vertices: vec![v],
                edges: Vec::new(),
            });
            coverage[v].push(Cover {
                chain: id,
                position: 0,
            });
        }
    }

    let mut offsets = Vec::with_capacity(chains.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for c in &chains {
        acc += c.len();
        offsets.push(acc);
    }
    let max_chain_len = chains.iter().map(Chain::len).max().unwrap_or(1);
    let position_vertex = chains.iter().flat_map(|c| c.vertices.iter().copied()).collect();

    Ok(Decomposition {
        grid: grid.clone(),
        chains,
        coverage,
        max_chain_len,
        offsets,
        position_vertex,
    })
}

/// Per-chain, per-position, per-label table laid out by [`Decomposition::offsets`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChainField<T> {
    pub num_labels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ChainField<T> {
    pub fn zeros(d: &Decomposition) -> Self {
        let l = d.grid.num_labels;
        Self {
            num_labels: l,
            data: vec![T::zero(); d.num_positions() * l],
        }
    }

    #[inline]
    pub fn row(&self, position_index: usize) -> &[T] {
        let l = self.num_labels;
        &self.data[position_index * l..(position_index + 1) * l]
    }

    #[inline]
    pub fn row_mut(&mut self, position_index: usize) -> &mut [T] {
        let l = self.num_labels;
        &mut self.data[position_index * l..(position_index + 1) * l]
    }

    /// Rows of one chain, `chain.len() * L` entries.
    pub fn chain<'a>(&'a self, d: &Decomposition, chain: usize) -> &'a [T] {
        let l = self.num_labels;
        &self.data[d.offsets[chain] * l..d.offsets[chain + 1] * l]
    }

    /// Splits the buffer into one mutable slice per chain.
    pub fn chains_mut<'a>(&'a mut self, d: &Decomposition) -> Vec<&'a mut [T]> {
        let l = self.num_labels;
        let mut out = Vec::with_capacity(d.chains.len());
        let mut rest = self.data.as_mut_slice();
        for c in &d.chains {
            let (head, tail) = rest.split_at_mut(c.len() * l);
            out.push(head);
            rest = tail;
        }
        out
    }

    /// `Σ_{t ∈ T(i)} row(t, i)` for vertex `i`, accumulated in ascending chain id.
    pub fn vertex_sum(&self, d: &Decomposition, vertex: usize, out: &mut [T]) {
        out.iter_mut().for_each(|x| *x = T::zero());
        for &cov in &d.coverage[vertex] {
            for (o, &v) in out.iter_mut().zip(self.row(d.position_index(cov))) {
                *o += v;
            }
        }
    }
}

/// Splits each unary vector uniformly over its covering chains: `ψ_i^t = ψ_i / |T(i)|`.
pub fn replicate_unaries<T: Scalar>(p: &Potentials<T>, d: &Decomposition) -> ChainField<T> {
    let mut field = ChainField::zeros(d);
    for (i, covers) in d.coverage.iter().enumerate() {
        let share = T::of_usize(covers.len());
        let src = p.unary_row(i);
        for &cov in covers {
            let row = field.row_mut(d.position_index(cov));
            for (r, &s) in row.iter_mut().zip(src) {
                *r = s / share;
            }
        }
    }
    field
}
