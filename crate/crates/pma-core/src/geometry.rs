//! Point-set algorithms: farthest point sampling, k-nearest neighbors, axis
//! orderings, Morton and Hilbert curve orderings, and permutation utilities.
//! Everything here is exact, deterministic, and O(N²) at worst; desk-scale
//! clouds never justify spatial indices.

use crate::error::{Error, Result};
use crate::graph::validate_permutation;
use crate::tensor::Tensor;

/// A raw point cloud, N×3 finite coordinates.
#[derive(Debug, Clone)]
pub struct PointSet {
    points: Tensor,
}

impl PointSet {
    pub fn new(points: Tensor) -> Result<PointSet> {
        if points.shape().len() != 2 || points.cols() != 3 || points.rows() == 0 {
            return Err(Error::InvalidArgument {
                op: "PointSet::new",
                reason: format!("expected non-empty N×3 tensor, got {:?}", points.shape()),
            });
        }
        if !points.all_finite() {
            return Err(Error::NonFinite("PointSet::new".into()));
        }
        Ok(PointSet { points })
    }

    pub fn from_coords(coords: &[[f64; 3]]) -> Result<PointSet> {
        let mut data = Vec::with_capacity(coords.len() * 3);
        for c in coords {
            data.extend_from_slice(c);
        }
        PointSet::new(Tensor::new(vec![coords.len(), 3], data)?)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty clouds
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let r = self.points.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.points
    }

    fn dist2(&self, i: usize, j: usize) -> f64 {
        let a = self.points.row(i);
        let b = self.points.row(j);
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        let dz = a[2] - b[2];
        dx * dx + dy * dy + dz * dz
    }
}

/// Greedy max-min Euclidean selection of `m` points starting at `seed_index`.
/// Ties break toward the lowest index.
pub fn farthest_point_sample(ps: &PointSet, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = ps.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument {
            op: "farthest_point_sample",
            reason: format!("m = {} outside 1..={}", m, n),
        });
    }
    if seed_index >= n {
        return Err(Error::IndexOutOfRange {
            op: "farthest_point_sample",
            index: seed_index,
            len: n,
        });
    }
    let mut chosen = Vec::with_capacity(m);
    let mut selected = vec![false; n];
    // min squared distance of each point to the chosen set so far
    let mut min_d2 = vec![f64::INFINITY; n];
    chosen.push(seed_index);
    selected[seed_index] = true;
    while chosen.len() < m {
        let last = *chosen.last().unwrap();
        let mut best = f64::NEG_INFINITY;
        let mut best_i = usize::MAX;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = ps.dist2(i, last);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if min_d2[i] > best {
                best = min_d2[i];
                best_i = i;
            }
        }
        chosen.push(best_i);
        selected[best_i] = true;
    }
    Ok(chosen)
}

/// Indices of the `k` nearest points to `query_index` (self included),
/// ascending by (distance, index).
pub fn knn(ps: &PointSet, query_index: usize, k: usize) -> Result<Vec<usize>> {
    let n = ps.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument {
            op: "knn",
            reason: format!("k = {} outside 1..={}", k, n),
        });
    }
    if query_index >= n {
        return Err(Error::IndexOutOfRange {
            op: "knn",
            index: query_index,
            len: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let di = ps.dist2(query_index, i);
        let dj = ps.dist2(query_index, j);
        di.partial_cmp(&dj).unwrap().then(i.cmp(&j))
    });
    order.truncate(k);
    Ok(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// Stable ascending sort of point indices by one coordinate.
pub fn axis_order(ps: &PointSet, axis: Axis) -> Vec<usize> {
    let a = axis.index();
    let mut order: Vec<usize> = (0..ps.len()).collect();
    order.sort_by(|&i, &j| {
        ps.point(i)[a]
            .partial_cmp(&ps.point(j)[a])
            .unwrap()
            .then(i.cmp(&j))
    });
    order
}

pub const MAX_CURVE_BITS: u32 = 21;

fn check_cell(cell: [u64; 3], b: u32, op: &'static str) -> Result<()> {
    if b == 0 || b > MAX_CURVE_BITS {
        return Err(Error::InvalidArgument {
            op,
            reason: format!("bits_per_axis {} outside 1..={}", b, MAX_CURVE_BITS),
        });
    }
    for (i, &c) in cell.iter().enumerate() {
        if c >= 1u64 << b {
            return Err(Error::InvalidArgument {
                op,
                reason: format!("cell axis {} value {} exceeds 2^{}", i, c, b),
            });
        }
    }
    Ok(())
}

/// Bit-interleaved Z-order code: bit j of x lands at 3j, of y at 3j+1, of z
/// at 3j+2.
pub fn morton_code(cell: [u64; 3], b: u32) -> Result<u64> {
    check_cell(cell, b, "morton_code")?;
    let mut code = 0u64;
    for j in 0..b {
        code |= ((cell[0] >> j) & 1) << (3 * j);
        code |= ((cell[1] >> j) & 1) << (3 * j + 1);
        code |= ((cell[2] >> j) & 1) << (3 * j + 2);
    }
    Ok(code)
}

pub fn morton_decode(code: u64, b: u32) -> Result<[u64; 3]> {
    if b == 0 || b > MAX_CURVE_BITS {
        return Err(Error::InvalidArgument {
            op: "morton_decode",
            reason: format!("bits_per_axis {} outside 1..={}", b, MAX_CURVE_BITS),
        });
    }
    if code >= 1u64 << (3 * b) {
        return Err(Error::InvalidArgument {
            op: "morton_decode",
            reason: format!("code {} exceeds 2^{}", code, 3 * b),
        });
    }
    let mut cell = [0u64; 3];
    for j in 0..b {
        cell[0] |= ((code >> (3 * j)) & 1) << j;
        cell[1] |= ((code >> (3 * j + 1)) & 1) << j;
        cell[2] |= ((code >> (3 * j + 2)) & 1) << j;
    }
    Ok(cell)
}

// Hilbert mapping via the transpose representation (iterative Gray-code and
// rotation construction). The transpose stores index bits column-wise across
// the three coordinate words, most significant triple first.

fn axes_to_transpose(mut x: [u64; 3], b: u32) -> [u64; 3] {
    let m = 1u64 << (b - 1);
    // Inverse undo excess work
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    // Gray encode
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for xi in &mut x {
        *xi ^= t;
    }
    x
}

fn transpose_to_axes(mut x: [u64; 3], b: u32) -> [u64; 3] {
    let n = 1u64 << b;
    // Gray decode
    let t = x[2] >> 1;
    for i in (1..3).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;
    // Undo excess work
    let mut q = 2u64;
    while q != n {
        let p = q - 1;
        for i in (0..3).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
    x
}

/// Position of the cell along the 3D Hilbert curve of order `b`.
pub fn hilbert_code(cell: [u64; 3], b: u32) -> Result<u64> {
    check_cell(cell, b, "hilbert_code")?;
    let x = axes_to_transpose(cell, b);
    let mut code = 0u64;
    for j in (0..b).rev() {
        for xi in &x {
            code = (code << 1) | ((xi >> j) & 1);
        }
    }
    Ok(code)
}

pub fn hilbert_decode(code: u64, b: u32) -> Result<[u64; 3]> {
    if b == 0 || b > MAX_CURVE_BITS {
        return Err(Error::InvalidArgument {
            op: "hilbert_decode",
            reason: format!("bits_per_axis {} outside 1..={}", b, MAX_CURVE_BITS),
        });
    }
    if code >= 1u64 << (3 * b) {
        return Err(Error::InvalidArgument {
            op: "hilbert_decode",
            reason: format!("code {} exceeds 2^{}", code, 3 * b),
        });
    }
    let mut x = [0u64; 3];
    let mut bits = 3 * b;
    for j in (0..b).rev() {
        for xi in &mut x {
            bits -= 1;
            *xi |= ((code >> bits) & 1) << j;
        }
    }
    Ok(transpose_to_axes(x, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curve {
    Morton,
    Hilbert,
}

/// Normalize to the bounding box, quantize each axis to 2^b cells (clamping
/// at the top cell; a zero-extent axis maps everything to cell 0), then sort
/// by curve code with ties on the original index.
pub fn curve_order(ps: &PointSet, curve: Curve, b: u32) -> Result<Vec<usize>> {
    let n = ps.len();
    let mut mins = [f64::INFINITY; 3];
    let mut maxs = [f64::NEG_INFINITY; 3];
    for i in 0..n {
        let p = ps.point(i);
        for a in 0..3 {
            mins[a] = mins[a].min(p[a]);
            maxs[a] = maxs[a].max(p[a]);
        }
    }
    let cells_per_axis = (1u64 << b) as f64;
    let max_cell = (1u64 << b) - 1;
    let mut codes = Vec::with_capacity(n);
    for i in 0..n {
        let p = ps.point(i);
        let mut cell = [0u64; 3];
        for a in 0..3 {
            let extent = maxs[a] - mins[a];
            cell[a] = if extent > 0.0 {
                let q = ((p[a] - mins[a]) / extent * cells_per_axis).floor() as u64;
                q.min(max_cell)
            } else {
                0
            };
        }
        codes.push(match curve {
            Curve::Morton => morton_code(cell, b)?,
            Curve::Hilbert => hilbert_code(cell, b)?,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| codes[i].cmp(&codes[j]).then(i.cmp(&j)));
    Ok(order)
}

/// inverse[perm[i]] = i.
pub fn invert(perm: &[usize]) -> Result<Vec<usize>> {
    validate_permutation(perm, perm.len())?;
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    Ok(inv)
}
