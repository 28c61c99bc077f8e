//! Lattice tile geometry behind the skeleton retraction.
//!
//! The k-skeleton S of the unit cubical lattice and the dual
//! (n−k−1)-skeleton T decompose space into congruent convex tiles: one
//! tile per pair of a k-face A of S and a linked face B of T, equal to
//! the convex hull of A ∪ B. Each tile is congruent, by a signed axis
//! permutation and a translation, to the canonical model
//!
//! ```text
//!   0 ≤ x_last ≤ 1/2
//!   −x_last ≤ x_q ≤ x_last          (dual-block axes)
//!   |1/2 − x_p| ≤ |1/2 − x_last|    (skeleton-block axes)
//! ```
//!
//! so everything — the split into a retracted part (x_last ≤ 1/2 − ε)
//! and a stretched part, the flag triangulation of both, and the
//! per-vertex image table of the retraction — is built once here in
//! canonical coordinates and instanced into world coordinates by a
//! [`TileFrame`].

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Position of a sub-face of an axis-aligned cube along one axis.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Side {
    Lo,
    Hi,
    Span,
}

/// Sub-face of an axis-aligned cube: one [`Side`] per cube axis.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CubeFace(pub Vec<Side>);

impl CubeFace {
    fn all(d: usize) -> Vec<CubeFace> {
        let mut out = Vec::with_capacity(3usize.pow(d as u32));
        let mut digits = vec![0u8; d];
        loop {
            out.push(CubeFace(
                digits
                    .iter()
                    .map(|&t| match t {
                        0 => Side::Lo,
                        1 => Side::Hi,
                        _ => Side::Span,
                    })
                    .collect(),
            ));
            let mut i = 0;
            loop {
                if i == d {
                    return out;
                }
                digits[i] += 1;
                if digits[i] < 3 {
                    break;
                }
                digits[i] = 0;
                i += 1;
            }
        }
    }

    fn full(d: usize) -> CubeFace {
        CubeFace(vec![Side::Span; d])
    }

    fn dim(&self) -> usize {
        self.0.iter().filter(|s| **s == Side::Span).count()
    }

    /// True when `other` is a sub-face of `self`.
    fn contains(&self, other: &CubeFace) -> bool {
        self.0
            .iter()
            .zip(&other.0)
            .all(|(big, small)| *big == Side::Span || big == small)
    }
}

/// Which slice of the A-to-B join a face lives on.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum JoinPiece {
    /// x_last ≤ 1/2 − ε (part of the retracted half).
    Below,
    /// x_last ≥ 1/2 − ε (part of the stretched half).
    Above,
    /// x_last = 1/2 − ε exactly (the shared split wall).
    Wall,
}

/// Face of one half-tile, named by the skeleton/dual faces spanning it.
/// The pair (a, b) is intrinsic to the geometry — b is the largest dual
/// face near the set, a the smallest skeleton face joining onto it — so
/// two half-tiles sharing a face derive identical image assignments.
#[derive(Clone, Debug)]
enum PartFace {
    OnA(CubeFace),
    OnB(CubeFace),
    Join {
        a: CubeFace,
        b: CubeFace,
        piece: JoinPiece,
    },
}

impl PartFace {
    fn dim(&self) -> usize {
        match self {
            PartFace::OnA(a) => a.dim(),
            PartFace::OnB(b) => b.dim(),
            PartFace::Join { a, b, piece } => {
                a.dim() + b.dim() + usize::from(*piece != JoinPiece::Wall)
            }
        }
    }

    fn contains(&self, other: &PartFace) -> bool {
        use JoinPiece::*;
        match (self, other) {
            (PartFace::OnA(a), PartFace::OnA(a2)) => a.contains(a2),
            (PartFace::OnB(b), PartFace::OnB(b2)) => b.contains(b2),
            (PartFace::Join { a, piece: Below, .. }, PartFace::OnA(a2)) => a.contains(a2),
            (PartFace::Join { b, piece: Above, .. }, PartFace::OnB(b2)) => b.contains(b2),
            (
                PartFace::Join { a, b, piece },
                PartFace::Join {
                    a: a2,
                    b: b2,
                    piece: p2,
                },
            ) => {
                let slice_ok = matches!(
                    (piece, p2),
                    (Below, Below) | (Below, Wall) | (Above, Above) | (Above, Wall) | (Wall, Wall)
                );
                slice_ok && a.contains(a2) && b.contains(b2)
            }
            _ => false,
        }
    }
}

/// Axis layout of canonical coordinates: the first k axes span A, the
/// next n−1−k span B, and the last runs from A's plane to B's plane.
fn canon_point(n: usize, k: usize, a_coords: &[f64], b_coords: &[f64], last: f64) -> Vec<f64> {
    debug_assert_eq!(a_coords.len(), k);
    debug_assert_eq!(b_coords.len(), n - 1 - k);
    let mut p = Vec::with_capacity(n);
    p.extend_from_slice(a_coords);
    p.extend_from_slice(b_coords);
    p.push(last);
    p
}

fn box_vertices(per_axis: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for choices in per_axis {
        let mut next = Vec::with_capacity(out.len() * choices.len());
        for stem in &out {
            for &c in choices {
                let mut v = stem.clone();
                v.push(c);
                next.push(v);
            }
        }
        out = next;
    }
    out
}

fn side_values(side: Side, lo: f64, hi: f64) -> Vec<f64> {
    match side {
        Side::Lo => vec![lo],
        Side::Hi => vec![hi],
        Side::Span => vec![lo, hi],
    }
}

fn face_vertices(n: usize, k: usize, cut: f64, face: &PartFace) -> Vec<Vec<f64>> {
    let on_a = |a: &CubeFace| -> Vec<Vec<f64>> {
        let per: Vec<Vec<f64>> = a.0.iter().map(|&s| side_values(s, 0.0, 1.0)).collect();
        box_vertices(&per)
            .into_iter()
            .map(|av| canon_point(n, k, &av, &vec![0.0; n - 1 - k], 0.0))
            .collect()
    };
    let on_b = |b: &CubeFace| -> Vec<Vec<f64>> {
        let per: Vec<Vec<f64>> = b.0.iter().map(|&s| side_values(s, -0.5, 0.5)).collect();
        box_vertices(&per)
            .into_iter()
            .map(|bv| canon_point(n, k, &vec![0.5; k], &bv, 0.5))
            .collect()
    };
    // The split wall of the join of a and b is the scaled box
    // (1−2ε)·join-section: skeleton axes pulled toward 1/2 by the cut
    // height, dual axes scaled down to ±cut.
    let wall = |a: &CubeFace, b: &CubeFace| -> Vec<Vec<f64>> {
        let pa: Vec<Vec<f64>> = a.0.iter().map(|&s| side_values(s, cut, 1.0 - cut)).collect();
        let pb: Vec<Vec<f64>> = b.0.iter().map(|&s| side_values(s, -cut, cut)).collect();
        let mut out = Vec::new();
        for av in box_vertices(&pa) {
            for bv in box_vertices(&pb) {
                out.push(canon_point(n, k, &av, &bv, cut));
            }
        }
        out
    };
    match face {
        PartFace::OnA(a) => on_a(a),
        PartFace::OnB(b) => on_b(b),
        PartFace::Join { a, b, piece } => match piece {
            JoinPiece::Wall => wall(a, b),
            JoinPiece::Below => {
                let mut v = on_a(a);
                v.extend(wall(a, b));
                v
            }
            JoinPiece::Above => {
                let mut v = on_b(b);
                v.extend(wall(a, b));
                v
            }
        },
    }
}

fn centroid(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points[0].len();
    let mut c = vec![0.0; n];
    for p in points {
        for i in 0..n {
            c[i] += p[i];
        }
    }
    for v in &mut c {
        *v /= points.len() as f64;
    }
    c
}

fn center_of_a(n: usize, k: usize, a: &CubeFace) -> Vec<f64> {
    let av: Vec<f64> = a
        .0
        .iter()
        .map(|s| match s {
            Side::Lo => 0.0,
            Side::Hi => 1.0,
            Side::Span => 0.5,
        })
        .collect();
    canon_point(n, k, &av, &vec![0.0; n - 1 - k], 0.0)
}

fn center_of_b(n: usize, k: usize, b: &CubeFace) -> Vec<f64> {
    let bv: Vec<f64> = b
        .0
        .iter()
        .map(|s| match s {
            Side::Lo => -0.5,
            Side::Hi => 0.5,
            Side::Span => 0.0,
        })
        .collect();
    canon_point(n, k, &vec![0.5; k], &bv, 0.5)
}

/// Image of a face center under the retraction: faces on the dual
/// skeleton stay put, every other face collapses to the center of its
/// skeleton face a.
fn face_image(n: usize, k: usize, face: &PartFace) -> Vec<f64> {
    match face {
        PartFace::OnA(a) => center_of_a(n, k, a),
        PartFace::OnB(b) => center_of_b(n, k, b),
        PartFace::Join { a, .. } => center_of_a(n, k, a),
    }
}

/// One linear cell of the tile triangulation, with its vertex images.
#[derive(Clone, Debug)]
pub struct CanonSimplex {
    pub verts: Vec<Vec<f64>>,
    pub images: Vec<Vec<f64>>,
    /// True when the cell lies in the retracted half (image inside S).
    pub good: bool,
    /// Inverse of the vertex edge matrix [v₁−v₀ … v_n−v₀].
    vert_inv: Mat,
    /// Inverse of the image edge matrix, when the image is full-rank.
    img_inv: Option<Mat>,
    /// Sign of det(DΨ) on this cell; 0 when the image is degenerate.
    pub jac_sign: i32,
    pub volume: f64,
}

impl CanonSimplex {
    /// Barycentric coordinates of `x` (length n+1, sums to 1).
    pub fn barycentric(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let d: Vec<f64> = (0..n).map(|i| x[i] - self.verts[0][i]).collect();
        let rest = self.vert_inv.matvec(&d);
        let mut lam = Vec::with_capacity(n + 1);
        lam.push(1.0 - rest.iter().sum::<f64>());
        lam.extend(rest);
        lam
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let lam = self.barycentric(x);
        let n = x.len();
        let mut y = vec![0.0; n];
        for (l, img) in lam.iter().zip(&self.images) {
            for i in 0..n {
                y[i] += l * img[i];
            }
        }
        y
    }

    /// Jacobian of the cell's linear map (image edges times vertex-edge
    /// inverse).
    pub fn jacobian(&self) -> Mat {
        let n = self.verts[0].len();
        let mut img_edges = Mat::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                img_edges.set(i, j, self.images[j + 1][i] - self.images[0][i]);
            }
        }
        img_edges.matmul(&self.vert_inv)
    }

    /// Solves Ψ|Δ(x) = y; returns barycentric coordinates of the unique
    /// preimage when the cell's image map is invertible.
    pub fn preimage_barycentric(&self, y: &[f64]) -> Option<Vec<f64>> {
        let inv = self.img_inv.as_ref()?;
        let n = y.len();
        let d: Vec<f64> = (0..n).map(|i| y[i] - self.images[0][i]).collect();
        let rest = inv.matvec(&d);
        let mut lam = Vec::with_capacity(n + 1);
        lam.push(1.0 - rest.iter().sum::<f64>());
        lam.extend(rest);
        Some(lam)
    }

    pub fn point_from_barycentric(&self, lam: &[f64]) -> Vec<f64> {
        let n = self.verts[0].len();
        let mut x = vec![0.0; n];
        for (l, v) in lam.iter().zip(&self.verts) {
            for i in 0..n {
                x[i] += l * v[i];
            }
        }
        x
    }
}

fn invert(m: &Mat) -> Option<Mat> {
    let n = m.rows;
    let mut out = Mat::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = linalg::solve(m, &e)?;
        for i in 0..n {
            out.set(i, j, col[i]);
        }
    }
    Some(out)
}

/// Exact volume of one tile: the join of a k-face and its linked dual
/// face has volume k!(n−1−k)!/(2·n!).
pub fn tile_volume(n: usize, k: usize) -> f64 {
    let fact = |m: usize| (1..=m).map(|i| i as f64).product::<f64>();
    0.5 * fact(k) * fact(n - 1 - k) / fact(n)
}

/// Number of tiles per unit cell of the lattice.
pub fn tiles_per_cell(n: usize, k: usize) -> usize {
    let binom = |n: usize, k: usize| -> usize {
        (1..=k).fold(1usize, |acc, i| acc * (n - k + i) / i)
    };
    binom(n, k) * 2 * (n - k)
}

/// The triangulated canonical tile with its retraction tables. Built
/// once per (n, k, ε); every world tile is an isometric instance.
#[derive(Clone, Debug)]
pub struct CanonicalTile {
    pub n: usize,
    pub k: usize,
    pub epsilon: f64,
    pub simplices: Vec<CanonSimplex>,
    pub good_count: usize,
    pub bad_count: usize,
    /// Largest |Ψ(v) − v| over triangulation vertices.
    pub max_displacement: f64,
    /// Circumscribing radius of the tile about its bounding-box center.
    pub radius: f64,
}

impl CanonicalTile {
    pub fn build(n: usize, k: usize, epsilon: f64) -> Result<CanonicalTile> {
        if !(2..=4).contains(&n) || k == 0 || k >= n {
            return Err(Error::precondition(format!(
                "tile geometry needs 2 ≤ n ≤ 4 and 1 ≤ k ≤ n−1; got n={n} k={k}"
            )));
        }
        if !(epsilon > 0.0 && epsilon <= 0.1) {
            return Err(Error::precondition(format!(
                "split parameter must lie in (0, 0.1], got {epsilon}"
            )));
        }
        let cut = 0.5 - epsilon;
        let a_faces = CubeFace::all(k);
        let b_faces = CubeFace::all(n - 1 - k);

        let mut simplices = Vec::new();
        for good in [true, false] {
            let mut faces: Vec<PartFace> = Vec::new();
            if good {
                faces.extend(a_faces.iter().cloned().map(PartFace::OnA));
            } else {
                faces.extend(b_faces.iter().cloned().map(PartFace::OnB));
            }
            for a in &a_faces {
                for b in &b_faces {
                    faces.push(PartFace::Join {
                        a: a.clone(),
                        b: b.clone(),
                        piece: if good { JoinPiece::Below } else { JoinPiece::Above },
                    });
                    faces.push(PartFace::Join {
                        a: a.clone(),
                        b: b.clone(),
                        piece: JoinPiece::Wall,
                    });
                }
            }
            let top = PartFace::Join {
                a: CubeFace::full(k),
                b: CubeFace::full(n - 1 - k),
                piece: if good { JoinPiece::Below } else { JoinPiece::Above },
            };
            for flag in flags(&faces, &top, n) {
                simplices.push(build_simplex(n, k, cut, &flag, good)?);
            }
        }

        let good_count = simplices.iter().filter(|s| s.good).count();
        let bad_count = simplices.len() - good_count;

        // The flag enumeration must triangulate the tile exactly; the
        // closed-form volume is the sharpest whole-structure check.
        let vol: f64 = simplices.iter().map(|s| s.volume).sum();
        let want = tile_volume(n, k);
        if ((vol - want) / want).abs() > 1e-9 {
            return Err(Error::verification(format!(
                "tile triangulation volume {vol} misses closed form {want}"
            )));
        }

        let mut max_displacement = 0.0f64;
        for s in &simplices {
            for (v, img) in s.verts.iter().zip(&s.images) {
                let d: f64 = v
                    .iter()
                    .zip(img)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                max_displacement = max_displacement.max(d);
            }
        }
        if max_displacement > (n as f64).sqrt() + 1e-12 {
            return Err(Error::verification(format!(
                "retraction displacement {max_displacement} exceeds sqrt(n)"
            )));
        }

        let mut radius = 0.0f64;
        let center = tile_bbox_center(n, k);
        for s in &simplices {
            for v in &s.verts {
                let d: f64 = v
                    .iter()
                    .zip(&center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                radius = radius.max(d);
            }
        }

        Ok(CanonicalTile {
            n,
            k,
            epsilon,
            simplices,
            good_count,
            bad_count,
            max_displacement,
            radius,
        })
    }

    /// Index of the simplex best containing `x` (largest minimal
    /// barycentric coordinate), with that minimum.
    pub fn locate_simplex(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, s) in self.simplices.iter().enumerate() {
            let lam = s.barycentric(x);
            let m = lam.iter().cloned().fold(f64::INFINITY, f64::min);
            if m > best.1 {
                best = (i, m);
                if m >= 0.0 {
                    // Interior hit: no other simplex can do better than
                    // containing the point.
                    if m > 1e-12 {
                        break;
                    }
                }
            }
        }
        best
    }
}

/// Bounding-box center of the canonical tile.
fn tile_bbox_center(n: usize, k: usize) -> Vec<f64> {
    canon_point(n, k, &vec![0.5; k], &vec![0.0; n - 1 - k], 0.25)
}

/// All maximal chains of the face poset, one face per dimension 0..n.
fn flags<'a>(faces: &'a [PartFace], top: &'a PartFace, n: usize) -> Vec<Vec<&'a PartFace>> {
    let mut out = Vec::new();
    let mut chain = vec![top];
    descend(faces, top, n, &mut chain, &mut out);
    out
}

fn descend<'a>(
    faces: &'a [PartFace],
    current: &'a PartFace,
    dim: usize,
    chain: &mut Vec<&'a PartFace>,
    out: &mut Vec<Vec<&'a PartFace>>,
) {
    if dim == 0 {
        let mut flag = chain.clone();
        flag.reverse();
        out.push(flag);
        return;
    }
    for f in faces {
        if f.dim() == dim - 1 && current.contains(f) {
            chain.push(f);
            descend(faces, f, dim - 1, chain, out);
            chain.pop();
        }
    }
}

fn build_simplex(
    n: usize,
    k: usize,
    cut: f64,
    flag: &[&PartFace],
    good: bool,
) -> Result<CanonSimplex> {
    let verts: Vec<Vec<f64>> = flag
        .iter()
        .map(|f| centroid(&face_vertices(n, k, cut, f)))
        .collect();
    let images: Vec<Vec<f64>> = flag.iter().map(|f| face_image(n, k, f)).collect();

    let mut edges = Mat::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            edges.set(i, j, verts[j + 1][i] - verts[0][i]);
        }
    }
    let vdet = linalg::det(&edges);
    if vdet.abs() < 1e-14 {
        return Err(Error::verification(
            "tile flag produced a degenerate simplex".to_string(),
        ));
    }
    let vert_inv = invert(&edges)
        .ok_or_else(|| Error::verification("vertex edge matrix not invertible".to_string()))?;

    let mut img_edges = Mat::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            img_edges.set(i, j, images[j + 1][i] - images[0][i]);
        }
    }
    let idet = linalg::det(&img_edges);
    let (img_inv, jac_sign) = if idet.abs() > 1e-12 {
        (
            invert(&img_edges),
            (idet.signum() * vdet.signum()) as i32,
        )
    } else {
        (None, 0)
    };

    let fact: f64 = (1..=n).map(|i| i as f64).product();
    Ok(CanonSimplex {
        verts,
        images,
        good,
        vert_inv,
        img_inv,
        jac_sign,
        volume: vdet.abs() / fact,
    })
}

/// Whether canonical coordinates satisfy the tile inequalities.
pub fn in_canonical_tile(n: usize, k: usize, x: &[f64], tol: f64) -> bool {
    let last = x[n - 1];
    if !(-tol..=0.5 + tol).contains(&last) {
        return false;
    }
    for q in k..n - 1 {
        if x[q].abs() > last + tol {
            return false;
        }
    }
    for p in 0..k {
        if (0.5 - x[p]).abs() > (0.5 - last).abs() + tol {
            return false;
        }
    }
    true
}

// ---------------------------------------------------------------------------
// World instancing
// ---------------------------------------------------------------------------

/// Placement of one tile: which world axes span the skeleton face A and
/// the dual face B, where A's corner sits, and on which side of A the
/// dual face lies. `to_world`/`to_canonical` are inverse isometries
/// (signed axis permutation plus translation).
#[derive(Clone, Debug, PartialEq)]
pub struct TileFrame {
    pub a_axes: Vec<usize>,
    pub b_axes: Vec<usize>,
    pub jstar: usize,
    pub sign: f64,
    pub base: Vec<f64>,
}

impl TileFrame {
    pub fn n(&self) -> usize {
        self.base.len()
    }

    pub fn to_world(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.base.clone();
        for (p, &axis) in self.a_axes.iter().enumerate() {
            y[axis] += x[p];
        }
        for (q, &axis) in self.b_axes.iter().enumerate() {
            y[axis] += x[self.a_axes.len() + q];
        }
        y[self.jstar] += self.sign * x[self.n() - 1];
        y
    }

    pub fn to_canonical(&self, y: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut x = vec![0.0; n];
        for (p, &axis) in self.a_axes.iter().enumerate() {
            x[p] = y[axis] - self.base[axis];
        }
        for (q, &axis) in self.b_axes.iter().enumerate() {
            x[self.a_axes.len() + q] = y[axis] - self.base[axis];
        }
        x[n - 1] = self.sign * (y[self.jstar] - self.base[self.jstar]);
        x
    }

    /// Transforms a direction vector (no translation) into canonical
    /// coordinates.
    pub fn dir_to_canonical(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut x = vec![0.0; n];
        for (p, &axis) in self.a_axes.iter().enumerate() {
            x[p] = v[axis];
        }
        for (q, &axis) in self.b_axes.iter().enumerate() {
            x[self.a_axes.len() + q] = v[axis];
        }
        x[n - 1] = self.sign * v[self.jstar];
        x
    }

    pub fn dir_to_world(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut v = vec![0.0; n];
        for (p, &axis) in self.a_axes.iter().enumerate() {
            v[axis] = x[p];
        }
        for (q, &axis) in self.b_axes.iter().enumerate() {
            v[axis] = x[self.a_axes.len() + q];
        }
        v[self.jstar] = self.sign * x[n - 1];
        v
    }

    /// Axis-aligned bounding box of the tile (independent of ε).
    pub fn bbox(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let mut lo = self.base.clone();
        let mut hi = self.base.clone();
        for i in 0..n {
            if self.a_axes.contains(&i) {
                hi[i] += 1.0;
            } else {
                lo[i] -= 0.5;
                hi[i] += 0.5;
            }
        }
        (lo, hi)
    }

    /// Conjugates a canonical-frame matrix into world coordinates.
    pub fn conjugate(&self, m: &Mat) -> Mat {
        let n = self.n();
        let mut perm = Mat::zeros(n, n);
        // Column p of the frame matrix is the world direction of
        // canonical axis p.
        for (p, &axis) in self.a_axes.iter().enumerate() {
            perm.set(axis, p, 1.0);
        }
        for (q, &axis) in self.b_axes.iter().enumerate() {
            perm.set(axis, self.a_axes.len() + q, 1.0);
        }
        perm.set(self.jstar, n - 1, self.sign);
        perm.matmul(m).matmul(&perm.transpose())
    }
}

/// Finds the tile containing a point of lattice coordinates, by the
/// order statistics of per-axis distances to the integer grid: the k
/// axes farthest from the grid span A, the next-farthest is the height
/// axis, and the remaining axes span B.
pub fn locate_tile(n: usize, k: usize, z: &[f64]) -> TileFrame {
    let mut order: Vec<usize> = (0..n).collect();
    let d: Vec<f64> = z.iter().map(|zi| (zi - zi.round()).abs()).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).unwrap().then(i.cmp(&j)));
    let a_axes: Vec<usize> = {
        let mut a = order[..k].to_vec();
        a.sort_unstable();
        a
    };
    let jstar = order[k];
    let b_axes: Vec<usize> = {
        let mut b = order[k + 1..].to_vec();
        b.sort_unstable();
        b
    };
    let mut base = vec![0.0; n];
    for i in 0..n {
        base[i] = if a_axes.contains(&i) {
            z[i].floor()
        } else {
            z[i].round()
        };
    }
    let sign = if z[jstar] >= base[jstar] { 1.0 } else { -1.0 };
    TileFrame {
        a_axes,
        b_axes,
        jstar,
        sign,
        base,
    }
}

/// Calls `f` for every tile whose bounding box meets the lattice box
/// [lo, hi]. Tiles are generated, not stored; region-scale complexes
/// stay at constant memory.
pub fn for_each_tile_in(
    n: usize,
    k: usize,
    lo: &[f64],
    hi: &[f64],
    mut f: impl FnMut(TileFrame),
) {
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let a_axes: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let ranges: Vec<(i64, i64)> = (0..n)
            .map(|i| {
                if mask >> i & 1 == 1 {
                    ((lo[i] - 1.0).ceil() as i64, hi[i].floor() as i64)
                } else {
                    ((lo[i] - 0.5).ceil() as i64, (hi[i] + 0.5).floor() as i64)
                }
            })
            .collect();
        if ranges.iter().any(|(a, b)| a > b) {
            continue;
        }
        let mut m: Vec<i64> = ranges.iter().map(|r| r.0).collect();
        'cells: loop {
            let base: Vec<f64> = m.iter().map(|&v| v as f64).collect();
            for jstar in (0..n).filter(|i| mask >> i & 1 == 0) {
                let b_axes: Vec<usize> = (0..n)
                    .filter(|&i| mask >> i & 1 == 0 && i != jstar)
                    .collect();
                for sign in [1.0, -1.0] {
                    f(TileFrame {
                        a_axes: a_axes.clone(),
                        b_axes: b_axes.clone(),
                        jstar,
                        sign,
                        base: base.clone(),
                    });
                }
            }
            for i in (0..n).rev() {
                m[i] += 1;
                if m[i] <= ranges[i].1 {
                    continue 'cells;
                }
                m[i] = ranges[i].0;
                if i == 0 {
                    break 'cells;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn flag_counts_match_hand_enumeration() {
        // Triangle tile in the plane: 8 + 6 cells; tetrahedral tile for
        // lines in space: 36 + 36; pyramid tile for surfaces: 48 + 32.
        for (n, k, good, bad) in [(2usize, 1usize, 8, 6), (3, 1, 36, 36), (3, 2, 48, 32)] {
            let t = CanonicalTile::build(n, k, 0.02).unwrap();
            assert_eq!((t.good_count, t.bad_count), (good, bad), "n={n} k={k}");
        }
    }

    #[test]
    fn simplex_volumes_fill_the_tile_exactly() {
        for (n, k) in [(2, 1), (3, 1), (3, 2), (4, 1), (4, 2), (4, 3)] {
            let t = CanonicalTile::build(n, k, 0.05).unwrap();
            let vol: f64 = t.simplices.iter().map(|s| s.volume).sum();
            assert!(
                (vol - tile_volume(n, k)).abs() < 1e-12,
                "n={n} k={k}: {vol}"
            );
        }
    }

    #[test]
    fn cell_counts_do_not_depend_on_the_split_parameter() {
        for (n, k) in [(2, 1), (3, 1), (3, 2)] {
            let coarse = CanonicalTile::build(n, k, 0.05).unwrap();
            let fine = CanonicalTile::build(n, k, 0.005).unwrap();
            assert_eq!(coarse.simplices.len(), fine.simplices.len());
            assert_eq!(coarse.good_count, fine.good_count);
        }
    }

    #[test]
    fn all_vertices_satisfy_the_tile_inequalities() {
        for (n, k) in [(2, 1), (3, 1), (3, 2), (4, 2)] {
            let t = CanonicalTile::build(n, k, 0.03).unwrap();
            for s in &t.simplices {
                for v in &s.verts {
                    assert!(in_canonical_tile(n, k, v, 1e-12), "n={n} k={k} v={v:?}");
                }
            }
        }
    }

    #[test]
    fn good_cell_images_lie_on_the_skeleton_face() {
        for (n, k) in [(2, 1), (3, 1), (3, 2)] {
            let t = CanonicalTile::build(n, k, 0.02).unwrap();
            for s in t.simplices.iter().filter(|s| s.good) {
                for img in &s.images {
                    for q in k..n {
                        assert_eq!(img[q], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn displacement_stays_under_the_dimension_bound() {
        for (n, k) in [(2, 1), (3, 1), (3, 2)] {
            let t = CanonicalTile::build(n, k, 0.02).unwrap();
            assert!(t.max_displacement <= (n as f64).sqrt() + 1e-12);
            if n == 3 {
                assert!(t.max_displacement <= 2.2);
            }
        }
    }

    #[test]
    fn located_tiles_contain_their_points() {
        let mut rng = crate::qmc::rng_for(7, "tile-locate");
        for &(n, k) in &[(2usize, 1usize), (3, 1), (3, 2), (4, 2)] {
            for _ in 0..500 {
                let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let frame = locate_tile(n, k, &z);
                let x = frame.to_canonical(&z);
                assert!(in_canonical_tile(n, k, &x, 1e-9), "n={n} k={k} z={z:?}");
                // Round trip through the frame is exact.
                let back = frame.to_world(&x);
                for (a, b) in back.iter().zip(&z) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn random_points_lie_in_exactly_one_tile() {
        let mut rng = crate::qmc::rng_for(11, "tile-cover");
        for &(n, k) in &[(2usize, 1usize), (3, 1), (3, 2)] {
            for _ in 0..200 {
                let z: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
                let lo: Vec<f64> = z.iter().map(|v| v - 1.1).collect();
                let hi: Vec<f64> = z.iter().map(|v| v + 1.1).collect();
                let mut hits = 0;
                for_each_tile_in(n, k, &lo, &hi, |frame| {
                    if in_canonical_tile(n, k, &frame.to_canonical(&z), -1e-9) {
                        hits += 1;
                    }
                });
                assert_eq!(hits, 1, "n={n} k={k} z={z:?}");
            }
        }
    }

    #[test]
    fn tile_enumeration_matches_the_per_cell_count() {
        // Exactly one unit cell: every tile whose A-corner sits in the
        // cell appears once per (height axis, side) choice.
        let mut count = 0;
        for_each_tile_in(3, 1, &[0.25, 0.25, 0.25], &[0.75, 0.75, 0.75], |_| {
            count += 1;
        });
        // The [0.25, 0.75]³ box meets tiles from neighboring cells too;
        // just check the per-cell constant through tiles_per_cell.
        assert!(count >= tiles_per_cell(3, 1));
        assert_eq!(tiles_per_cell(3, 1), 12);
        assert_eq!(tiles_per_cell(3, 2), 6);
        assert_eq!(tiles_per_cell(2, 1), 4);
    }

    #[test]
    fn cell_maps_are_continuous_across_shared_facets() {
        // Adjacent simplices inside one tile must agree on their shared
        // facet: evaluate both linear maps at facet points directly.
        let t = CanonicalTile::build(3, 1, 0.04).unwrap();
        let mut rng = crate::qmc::rng_for(3, "tile-facets");
        let mut checked = 0;
        for (i, s) in t.simplices.iter().enumerate() {
            for (j, s2) in t.simplices.iter().enumerate().skip(i + 1) {
                let shared: Vec<&Vec<f64>> = s
                    .verts
                    .iter()
                    .filter(|v| {
                        s2.verts.iter().any(|w| {
                            v.iter().zip(w.iter()).all(|(a, b)| (a - b).abs() < 1e-12)
                        })
                    })
                    .collect();
                if shared.len() != 3 {
                    continue;
                }
                let mut w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
                let tot: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= tot);
                let p: Vec<f64> = (0..3)
                    .map(|c| (0..3).map(|v| w[v] * shared[v][c]).sum())
                    .collect();
                let ya = s.apply(&p);
                let yb = s2.apply(&p);
                for (a, b) in ya.iter().zip(&yb) {
                    assert!((a - b).abs() < 1e-9, "cells {i},{j}: {ya:?} vs {yb:?}");
                }
                checked += 1;
            }
        }
        assert!(checked > 50, "too few shared facets exercised: {checked}");
    }
}
