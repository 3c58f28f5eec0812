//! Structured triangulations of rectangles of square cells, the coarse block
//! partition laid over them, and oversampled regions of coarse blocks.
//!
//! Every square cell `(ci, cj)` is split along its bottom-left to top-right
//! diagonal into a lower triangle (element `2c`) and an upper triangle
//! (element `2c + 1`), where `c = cj * nx + ci`. Nodes are numbered row-major
//! with x running fastest.

use crate::error::{Error, Result};

/// Uniform triangulation of a rectangle of `nx * ny` square cells.
///
/// Node coordinates are `(offset + index) / resolution` per axis, so meshes
/// cut out of a larger grid can use coordinates relative to any lattice
/// point and stay bitwise translation invariant.
#[derive(Debug, Clone)]
pub struct StructuredMesh {
    nx: usize,
    ny: usize,
    resolution: [usize; 2],
    nodes: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<usize>,
}

impl StructuredMesh {
    fn with_lattice(nx: usize, ny: usize, offset: [i64; 2], resolution: [usize; 2]) -> Self {
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([
                    (offset[0] + i as i64) as f64 / resolution[0] as f64,
                    (offset[1] + j as i64) as f64 / resolution[1] as f64,
                ]);
            }
        }
        let node = |i: usize, j: usize| j * (nx + 1) + i;
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        for cj in 0..ny {
            for ci in 0..nx {
                let (n00, n10) = (node(ci, cj), node(ci + 1, cj));
                let (n01, n11) = (node(ci, cj + 1), node(ci + 1, cj + 1));
                triangles.push([n00, n10, n11]);
                triangles.push([n00, n11, n01]);
            }
        }
        let mut boundary = Vec::with_capacity(2 * (nx + ny));
        for j in 0..=ny {
            for i in 0..=nx {
                if i == 0 || j == 0 || i == nx || j == ny {
                    boundary.push(node(i, j));
                }
            }
        }
        Self {
            nx,
            ny,
            resolution,
            nodes,
            triangles,
            boundary,
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Cell width along each axis.
    pub fn cell_size(&self) -> [f64; 2] {
        [
            1.0 / self.resolution[0] as f64,
            1.0 / self.resolution[1] as f64,
        ]
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Nodes on the outer edge of the rectangle, in increasing order.
    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn element_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    /// Cell `(ci, cj)` that contains element `e`.
    pub fn cell_of_element(&self, e: usize) -> (usize, usize) {
        let c = e / 2;
        (c % self.nx, c / self.nx)
    }

    /// Signed area of element `e` (positive for every element).
    pub fn element_area(&self, e: usize) -> f64 {
        let [a, b, c] = self.triangles[e].map(|n| self.nodes[n]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    pub fn barycenter(&self, e: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[e].map(|n| self.nodes[n]);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    /// Elements of a rectangle of cells `[x0, x0 + w) x [y0, y0 + h)`, in
    /// the numbering a mesh of that rectangle would use.
    pub fn elements_in_cells(&self, x0: usize, y0: usize, w: usize, h: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(2 * w * h);
        for cj in y0..y0 + h {
            for ci in x0..x0 + w {
                let c = cj * self.nx + ci;
                out.push(2 * c);
                out.push(2 * c + 1);
            }
        }
        out
    }

    /// Nodes of a rectangle of cells, row-major.
    pub fn nodes_in_cells(&self, x0: usize, y0: usize, w: usize, h: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity((w + 1) * (h + 1));
        for j in y0..=y0 + h {
            for i in x0..=x0 + w {
                out.push(self.node_index(i, j));
            }
        }
        out
    }

    /// Mesh of a rectangle of cells of `self`, with coordinates shifted so
    /// that cell `origin_cell` of `self` sits at the origin.
    pub fn submesh(
        &self,
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
        origin_cell: (usize, usize),
    ) -> StructuredMesh {
        StructuredMesh::with_lattice(
            w,
            h,
            [
                x0 as i64 - origin_cell.0 as i64,
                y0 as i64 - origin_cell.1 as i64,
            ],
            self.resolution,
        )
    }
}

/// Fine triangulation of the unit square with `nx * ny` cells.
pub fn build_fine_mesh(nx: usize, ny: usize) -> Result<StructuredMesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::invalid(format!(
            "mesh cell counts must be positive, got {nx}x{ny}"
        )));
    }
    Ok(StructuredMesh::with_lattice(nx, ny, [0, 0], [nx, ny]))
}

/// `M x M` coarse blocks laid over a fine mesh of the unit square.
#[derive(Debug, Clone)]
pub struct CoarsePartition {
    blocks_per_side: usize,
    cells_per_block: [usize; 2],
    fine_cells: [usize; 2],
    block_elements: Vec<Vec<usize>>,
    block_nodes: Vec<Vec<usize>>,
    coarse: StructuredMesh,
}

impl CoarsePartition {
    pub fn blocks_per_side(&self) -> usize {
        self.blocks_per_side
    }

    /// Coarse size `H = 1/M`.
    pub fn coarse_size(&self) -> f64 {
        1.0 / self.blocks_per_side as f64
    }

    pub fn block_count(&self) -> usize {
        self.blocks_per_side * self.blocks_per_side
    }

    /// Fine cells per block along x and y.
    pub fn cells_per_block(&self) -> [usize; 2] {
        self.cells_per_block
    }

    pub fn fine_cells(&self) -> [usize; 2] {
        self.fine_cells
    }

    pub fn block_id(&self, bx: usize, by: usize) -> usize {
        by * self.blocks_per_side + bx
    }

    pub fn block_position(&self, block: usize) -> (usize, usize) {
        (block % self.blocks_per_side, block / self.blocks_per_side)
    }

    /// First fine cell of a block.
    pub fn block_origin_cell(&self, block: usize) -> (usize, usize) {
        let (bx, by) = self.block_position(block);
        (bx * self.cells_per_block[0], by * self.cells_per_block[1])
    }

    /// Lower-left corner of a block.
    pub fn block_origin(&self, block: usize) -> [f64; 2] {
        let (bx, by) = self.block_position(block);
        [
            bx as f64 / self.blocks_per_side as f64,
            by as f64 / self.blocks_per_side as f64,
        ]
    }

    pub fn block_area(&self) -> f64 {
        let h = self.coarse_size();
        h * h
    }

    pub fn block_elements(&self, block: usize) -> &[usize] {
        &self.block_elements[block]
    }

    pub fn block_nodes(&self, block: usize) -> &[usize] {
        &self.block_nodes[block]
    }

    pub fn block_of_element(&self, fine: &StructuredMesh, e: usize) -> usize {
        let (ci, cj) = fine.cell_of_element(e);
        self.block_id(ci / self.cells_per_block[0], cj / self.cells_per_block[1])
    }

    /// Coarse triangulation: each block split into two triangles with the
    /// same diagonal orientation as the fine grid. Coarse triangles
    /// `2b, 2b + 1` belong to block `b`.
    pub fn coarse_mesh(&self) -> &StructuredMesh {
        &self.coarse
    }
}

pub fn build_coarse_partition(mesh: &StructuredMesh, blocks_per_side: usize) -> Result<CoarsePartition> {
    let m = blocks_per_side;
    if m == 0 || mesh.nx() % m != 0 || mesh.ny() % m != 0 {
        return Err(Error::invalid(format!(
            "coarse block count {m} must divide the fine cell counts {}x{}",
            mesh.nx(),
            mesh.ny()
        )));
    }
    let cpb = [mesh.nx() / m, mesh.ny() / m];
    let mut block_elements = Vec::with_capacity(m * m);
    let mut block_nodes = Vec::with_capacity(m * m);
    for by in 0..m {
        for bx in 0..m {
            let (x0, y0) = (bx * cpb[0], by * cpb[1]);
            block_elements.push(mesh.elements_in_cells(x0, y0, cpb[0], cpb[1]));
            block_nodes.push(mesh.nodes_in_cells(x0, y0, cpb[0], cpb[1]));
        }
    }
    Ok(CoarsePartition {
        blocks_per_side: m,
        cells_per_block: cpb,
        fine_cells: [mesh.nx(), mesh.ny()],
        block_elements,
        block_nodes,
        coarse: build_fine_mesh(m, m)?,
    })
}

/// Number of oversampling layers `ceil(-2 ln H)`.
pub fn oversampling_layers(coarse_size: f64) -> Result<usize> {
    if !(coarse_size > 0.0 && coarse_size < 1.0) {
        return Err(Error::invalid(format!(
            "coarse size must lie in (0, 1), got {coarse_size}"
        )));
    }
    let raw = -2.0 * coarse_size.ln();
    // ln rounding must not push exact integers to the next ceiling
    Ok((raw - 1e-9).ceil() as usize)
}

/// How oversampled regions of blocks near the domain boundary are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionBoundary {
    /// Full `(2l + 1)^2` regions; cells outside the domain take the medium
    /// of their mirror image across the boundary.
    #[default]
    Mirror,
    /// Regions cut off at the domain boundary.
    Clip,
}

/// A coarse block extended by `layers` rings of neighbouring blocks.
#[derive(Debug, Clone)]
pub struct OversampledRegion {
    center: usize,
    layers: usize,
    block_range: [(i64, i64); 2],
    members: Vec<usize>,
    center_member: usize,
    mesh: StructuredMesh,
    node_map: Vec<usize>,
    element_map: Vec<usize>,
    element_member: Vec<usize>,
    center_nodes: Vec<usize>,
    center_elements: Vec<usize>,
    center_offset_cells: (usize, usize),
}

impl OversampledRegion {
    pub fn center_block(&self) -> usize {
        self.center
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Inclusive block index ranges along x and y; negative or too large
    /// indices denote mirrored blocks.
    pub fn block_range(&self) -> [(i64, i64); 2] {
        self.block_range
    }

    /// Member blocks `R^p`, row-major; mirrored members repeat the id of
    /// their image.
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    /// Index `p0` of the center block in [`Self::members`].
    pub fn center_member(&self) -> usize {
        self.center_member
    }

    /// Local mesh of the region; coordinates are relative to the lower-left
    /// corner of the center block.
    pub fn mesh(&self) -> &StructuredMesh {
        &self.mesh
    }

    pub fn node_map(&self) -> &[usize] {
        &self.node_map
    }

    pub fn element_map(&self) -> &[usize] {
        &self.element_map
    }

    /// Member index `p` of each local element.
    pub fn element_member(&self) -> &[usize] {
        &self.element_member
    }

    /// Local nodes of the center block, row-major.
    pub fn center_nodes(&self) -> &[usize] {
        &self.center_nodes
    }

    /// Local elements of the center block, in block-mesh order.
    pub fn center_elements(&self) -> &[usize] {
        &self.center_elements
    }

    /// Position of the center block inside the region, in fine cells.
    pub fn center_offset_cells(&self) -> (usize, usize) {
        self.center_offset_cells
    }
}

/// Index `i` of a lattice of `n` intervals reflected into `[0, n)` (cells)
/// or `[0, n]` (nodes).
fn fold(i: i64, n: usize, nodes: bool) -> usize {
    let n = n as i64;
    if nodes {
        let r = i.rem_euclid(2 * n);
        (if r <= n { r } else { 2 * n - r }) as usize
    } else {
        let r = i.rem_euclid(2 * n);
        (if r < n { r } else { 2 * n - 1 - r }) as usize
    }
}

pub fn build_region(
    fine: &StructuredMesh,
    part: &CoarsePartition,
    block: usize,
    layers: usize,
    boundary: RegionBoundary,
) -> Result<OversampledRegion> {
    match boundary {
        RegionBoundary::Clip => build_oversampled_region(fine, part, block, layers),
        RegionBoundary::Mirror => build_mirrored_region(fine, part, block, layers),
    }
}

/// Oversampled region with exactly `(2l + 1)^2` members; parts outside the
/// domain are reflected copies. Elements keep their half of the cell, so
/// media must be constant per fine cell to be reflected exactly.
pub fn build_mirrored_region(
    fine: &StructuredMesh,
    part: &CoarsePartition,
    block: usize,
    layers: usize,
) -> Result<OversampledRegion> {
    if block >= part.block_count() {
        return Err(Error::invalid(format!(
            "block {block} out of range (partition has {})",
            part.block_count()
        )));
    }
    let m = part.blocks_per_side();
    let (bx, by) = part.block_position(block);
    let l = layers as i64;
    let xr = (bx as i64 - l, bx as i64 + l);
    let yr = (by as i64 - l, by as i64 + l);
    let side = 2 * layers + 1;
    let mut members = Vec::with_capacity(side * side);
    for y in yr.0..=yr.1 {
        for x in xr.0..=xr.1 {
            members.push(part.block_id(fold(x, m, false), fold(y, m, false)));
        }
    }
    let center_member = layers * side + layers;

    let [cbx, cby] = part.cells_per_block();
    let [fx, fy] = part.fine_cells();
    let (x0, y0) = (xr.0 * cbx as i64, yr.0 * cby as i64);
    let (w, h) = (side * cbx, side * cby);
    let origin = part.block_origin_cell(block);
    let mesh = StructuredMesh::with_lattice(w, h, [x0 - origin.0 as i64, y0 - origin.1 as i64], fine.resolution);
    let mut node_map = Vec::with_capacity(mesh.node_count());
    for j in 0..=h as i64 {
        for i in 0..=w as i64 {
            node_map.push(fine.node_index(fold(x0 + i, fx, true), fold(y0 + j, fy, true)));
        }
    }
    let mut element_map = Vec::with_capacity(mesh.element_count());
    for cj in 0..h as i64 {
        for ci in 0..w as i64 {
            let c = fold(y0 + cj, fy, false) * fx + fold(x0 + ci, fx, false);
            element_map.push(2 * c);
            element_map.push(2 * c + 1);
        }
    }
    let element_member = (0..mesh.element_count())
        .map(|e| {
            let (ci, cj) = mesh.cell_of_element(e);
            (cj / cby) * side + ci / cbx
        })
        .collect();
    let off = (layers * cbx, layers * cby);
    let center_nodes = mesh.nodes_in_cells(off.0, off.1, cbx, cby);
    let center_elements = mesh.elements_in_cells(off.0, off.1, cbx, cby);

    Ok(OversampledRegion {
        center: block,
        layers,
        block_range: [xr, yr],
        members,
        center_member,
        mesh,
        node_map,
        element_map,
        element_member,
        center_nodes,
        center_elements,
        center_offset_cells: off,
    })
}

/// Oversampled region clipped to the domain.
pub fn build_oversampled_region(
    fine: &StructuredMesh,
    part: &CoarsePartition,
    block: usize,
    layers: usize,
) -> Result<OversampledRegion> {
    if block >= part.block_count() {
        return Err(Error::invalid(format!(
            "block {block} out of range (partition has {})",
            part.block_count()
        )));
    }
    let m = part.blocks_per_side();
    let (bx, by) = part.block_position(block);
    let xr = (bx.saturating_sub(layers), (bx + layers).min(m - 1));
    let yr = (by.saturating_sub(layers), (by + layers).min(m - 1));
    let mut members = Vec::new();
    let mut center_member = 0;
    for y in yr.0..=yr.1 {
        for x in xr.0..=xr.1 {
            let id = part.block_id(x, y);
            if id == block {
                center_member = members.len();
            }
            members.push(id);
        }
    }

    let [cbx, cby] = part.cells_per_block();
    let (x0, y0) = (xr.0 * cbx, yr.0 * cby);
    let w = (xr.1 - xr.0 + 1) * cbx;
    let h = (yr.1 - yr.0 + 1) * cby;
    let origin = part.block_origin_cell(block);
    let mesh = fine.submesh(x0, y0, w, h, origin);
    let node_map = fine.nodes_in_cells(x0, y0, w, h);
    let element_map = fine.elements_in_cells(x0, y0, w, h);
    let blocks_w = xr.1 - xr.0 + 1;
    let element_member = (0..mesh.element_count())
        .map(|e| {
            let (ci, cj) = mesh.cell_of_element(e);
            (cj / cby) * blocks_w + ci / cbx
        })
        .collect();
    let off = (origin.0 - x0, origin.1 - y0);
    let center_nodes = mesh.nodes_in_cells(off.0, off.1, cbx, cby);
    let center_elements = mesh.elements_in_cells(off.0, off.1, cbx, cby);

    Ok(OversampledRegion {
        center: block,
        layers,
        block_range: [(xr.0 as i64, xr.1 as i64), (yr.0 as i64, yr.1 as i64)],
        members,
        center_member,
        mesh,
        node_map,
        element_map,
        element_member,
        center_nodes,
        center_elements,
        center_offset_cells: off,
    })
}
