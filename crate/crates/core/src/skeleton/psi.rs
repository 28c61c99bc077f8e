//! The piecewise-linear skeleton retraction Ψ.
//!
//! Ψ is linear on each cell of the tile triangulation: cells of the
//! retracted tile halves map onto their skeleton face (so their images
//! lie in the k-skeleton S), cells of the stretched halves fan out from
//! the dual skeleton to fill the rest of each tile. Ψ moves no point
//! farther than a tile diameter, is continuous across shared cell faces
//! by the intrinsic face-labeling rule, and has degree one — the three
//! facts the fiber-bending width certificates rest on.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::map::{EvaluableMap, MapKernel, PieceId};
use crate::rect::Rectangle;

use super::tile::{self, CanonicalTile, TileFrame};

/// A built skeleton complex: lattice placement plus the shared
/// canonical tile. Tiles are instanced on demand from the translate and
/// the canonical tables, so region size costs nothing in memory.
#[derive(Clone, Debug)]
pub struct SkeletonComplex {
    pub n: usize,
    pub k: usize,
    pub epsilon: f64,
    /// Lattice translate, reduced to [0,1)ⁿ.
    pub translate: Vec<f64>,
    /// World-coordinate region the complex is meant to cover.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    canon: CanonicalTile,
}

/// Builds the retraction complex for the k-skeleton of the unit lattice
/// translated by `translate`, covering the world box [lo, hi].
pub fn build_psi(
    n: usize,
    k: usize,
    epsilon: f64,
    lo: &[f64],
    hi: &[f64],
    translate: &[f64],
) -> Result<SkeletonComplex> {
    if lo.len() != n || hi.len() != n || translate.len() != n {
        return Err(Error::precondition(
            "region and translate must match the dimension",
        ));
    }
    if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
        return Err(Error::precondition("region box must be nonempty"));
    }
    let canon = CanonicalTile::build(n, k, epsilon)?;
    Ok(SkeletonComplex {
        n,
        k,
        epsilon,
        translate: translate.iter().map(|t| t.rem_euclid(1.0)).collect(),
        lo: lo.to_vec(),
        hi: hi.to_vec(),
        canon,
    })
}

impl SkeletonComplex {
    pub(crate) fn canon(&self) -> &CanonicalTile {
        &self.canon
    }

    fn to_lattice(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.translate).map(|(a, t)| a - t).collect()
    }

    fn to_world(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.translate).map(|(a, t)| a + t).collect()
    }

    /// Tile containing the world point `y`.
    pub fn locate(&self, y: &[f64]) -> TileFrame {
        tile::locate_tile(self.n, self.k, &self.to_lattice(y))
    }

    /// Evaluates Ψ at a world point.
    pub fn psi(&self, y: &[f64]) -> Vec<f64> {
        let z = self.to_lattice(y);
        let frame = tile::locate_tile(self.n, self.k, &z);
        let x = frame.to_canonical(&z);
        let (idx, _) = self.canon.locate_simplex(&x);
        let img = self.canon.simplices[idx].apply(&x);
        self.to_world(&frame.to_world(&img))
    }

    /// Evaluates Ψ at `y` through a specific tile, or None when `y`
    /// misses the tile by more than a hair. Used by the continuity and
    /// consistency checks to compare both sides of a shared face.
    pub fn eval_in_tile(&self, frame: &TileFrame, y: &[f64]) -> Option<Vec<f64>> {
        let x = frame.to_canonical(&self.to_lattice(y));
        let (idx, margin) = self.canon.locate_simplex(&x);
        if margin < -1e-9 {
            return None;
        }
        let img = self.canon.simplices[idx].apply(&x);
        Some(self.to_world(&frame.to_world(&img)))
    }

    /// Whether a world point lies on the k-skeleton (at least n−k
    /// lattice coordinates integral).
    pub fn on_skeleton(&self, y: &[f64], tol: f64) -> bool {
        let z = self.to_lattice(y);
        let integral = z
            .iter()
            .filter(|v| (*v - v.round()).abs() <= tol)
            .count();
        integral >= self.n - self.k
    }

    /// Number of triangulation cells on tiles meeting the given ball.
    /// Counted per tile (cells are confined to their tile and tile
    /// geometry does not move with ε), so equal ε gives equal counts
    /// exactly.
    pub fn simplices_near(&self, center: &[f64], radius: f64) -> usize {
        let z = self.to_lattice(center);
        let lo: Vec<f64> = z.iter().map(|v| v - radius).collect();
        let hi: Vec<f64> = z.iter().map(|v| v + radius).collect();
        let per = self.canon.simplices.len();
        let mut count = 0usize;
        tile::for_each_tile_in(self.n, self.k, &lo, &hi, |frame| {
            let (blo, bhi) = frame.bbox();
            let mut dist2 = 0.0;
            for i in 0..self.n {
                let d = (blo[i] - z[i]).max(z[i] - bhi[i]).max(0.0);
                dist2 += d * d;
            }
            if dist2 <= radius * radius {
                count += per;
            }
        });
        count
    }

    /// Tiles whose bounding boxes meet the region.
    pub fn tiles_in_region(&self) -> Vec<TileFrame> {
        let lo = self.to_lattice(&self.lo);
        let hi = self.to_lattice(&self.hi);
        let mut out = Vec::new();
        tile::for_each_tile_in(self.n, self.k, &lo, &hi, |f| out.push(f));
        out
    }

    /// Largest |Ψ(x) − x| over triangulation vertices.
    pub fn max_displacement(&self) -> f64 {
        self.canon.max_displacement
    }

    /// Wraps Ψ as an evaluable map on the region for the degree
    /// protocol. The region must be a cube (the map box sorts its sides,
    /// which would scramble axes otherwise).
    pub fn psi_map(self: &Arc<Self>) -> Result<EvaluableMap> {
        let sides: Vec<f64> = self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).collect();
        let s0 = sides[0];
        if sides.iter().any(|s| (s - s0).abs() > 1e-9 * s0) {
            return Err(Error::precondition(format!(
                "degree wrapper needs a cubic region, got sides {sides:?}"
            )));
        }
        let domain = Rectangle::new(&sides)?;
        let mut m = EvaluableMap::exact(
            domain.clone(),
            domain,
            Arc::new(PsiKernel { sk: Arc::clone(self) }),
        );
        // Near the region boundary Ψ may overshoot the box by up to a
        // tile diameter; widen the codomain tolerance accordingly.
        m.codomain_slack = 1.0 + 2.0 * (self.n as f64).sqrt() / s0;
        Ok(m)
    }
}

struct PsiKernel {
    sk: Arc<SkeletonComplex>,
}

impl PsiKernel {
    fn to_domain(&self, w: &[f64]) -> Vec<f64> {
        w.iter().zip(&self.sk.lo).map(|(a, l)| a - l).collect()
    }

    fn to_world(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.sk.lo).map(|(a, l)| a + l).collect()
    }
}

impl MapKernel for PsiKernel {
    fn dim_in(&self) -> usize {
        self.sk.n
    }

    fn dim_out(&self) -> usize {
        self.sk.n
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.to_domain(&self.sk.psi(&self.to_world(x)))
    }

    fn piece_id(&self, x: &[f64]) -> Option<PieceId> {
        let sk = &self.sk;
        let z = sk.to_lattice(&self.to_world(x));
        let frame = tile::locate_tile(sk.n, sk.k, &z);
        let (idx, _) = sk.canon.locate_simplex(&frame.to_canonical(&z));
        let mut id = vec![
            frame.a_axes.iter().fold(0i64, |acc, a| acc | (1 << a)),
            frame.jstar as i64 * 2 + i64::from(frame.sign < 0.0),
            idx as i64,
        ];
        id.extend(frame.base.iter().map(|b| *b as i64));
        Some(PieceId(id))
    }

    fn jacobian(&self, x: &[f64]) -> Option<Mat> {
        let sk = &self.sk;
        let z = sk.to_lattice(&self.to_world(x));
        let frame = tile::locate_tile(sk.n, sk.k, &z);
        let (idx, _) = sk.canon.locate_simplex(&frame.to_canonical(&z));
        Some(frame.conjugate(&sk.canon.simplices[idx].jacobian()))
    }

    /// Preimages are local: stretched cells map inside their own tile,
    /// so a generic point's preimages all live in the tile containing
    /// it. Solve each invertible cell map and keep in-cell solutions.
    fn preimages(&self, y: &[f64], _tol: f64) -> Option<Vec<(Vec<f64>, i32)>> {
        let sk = &self.sk;
        let z = sk.to_lattice(&self.to_world(y));
        let frame = tile::locate_tile(sk.n, sk.k, &z);
        let x = frame.to_canonical(&z);
        let mut found: Vec<(Vec<f64>, i32)> = Vec::new();
        for s in &sk.canon.simplices {
            if s.jac_sign == 0 {
                continue;
            }
            let Some(lam) = s.preimage_barycentric(&x) else {
                continue;
            };
            if lam.iter().any(|l| *l < -1e-12) {
                continue;
            }
            let pre = s.point_from_barycentric(&lam);
            let world = sk.to_world(&frame.to_world(&pre));
            let dom = self.to_domain(&world);
            if found
                .iter()
                .all(|(p, _)| p.iter().zip(&dom).any(|(a, b)| (a - b).abs() > 1e-9))
            {
                found.push((dom, s.jac_sign));
            }
        }
        Some(found)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::check_degree;
    use rand::Rng;

    fn sample_complex(n: usize, k: usize, eps: f64) -> Arc<SkeletonComplex> {
        let lo = vec![0.0; n];
        let hi = vec![5.0; n];
        let tr: Vec<f64> = (0..n).map(|i| 0.17 + 0.23 * i as f64).collect();
        Arc::new(build_psi(n, k, eps, &lo, &hi, &tr).unwrap())
    }

    #[test]
    fn retracted_cell_images_lie_on_the_skeleton() {
        for (n, k) in [(2usize, 1usize), (3, 1), (3, 2)] {
            let sk = sample_complex(n, k, 0.02);
            let mut rng = crate::qmc::rng_for(5, "psi-images");
            for _ in 0..300 {
                let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..4.5)).collect();
                let z = sk.to_lattice(&y);
                let frame = tile::locate_tile(n, k, &z);
                for s in sk.canon().simplices.iter().filter(|s| s.good) {
                    for img in &s.images {
                        let w = sk.to_world(&frame.to_world(img));
                        assert!(sk.on_skeleton(&w, 1e-12), "n={n} k={k}: {w:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn psi_is_continuous_across_shared_faces() {
        // Points on random cell facets: the facet's own linear map must
        // agree with the globally located evaluation, whichever side the
        // locator picks — including across tile boundaries.
        for (n, k) in [(2usize, 1usize), (3, 1), (3, 2)] {
            let sk = sample_complex(n, k, 0.03);
            let mut rng = crate::qmc::rng_for(9, "psi-cont");
            let mut worst = 0.0f64;
            for _ in 0..2500 {
                let y: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..4.0)).collect();
                let z = sk.to_lattice(&y);
                let frame = tile::locate_tile(n, k, &z);
                let x = frame.to_canonical(&z);
                let (idx, _) = sk.canon().locate_simplex(&x);
                let s = &sk.canon().simplices[idx];
                // Random point on a random facet of this cell.
                let drop = rng.gen_range(0..=n);
                let mut w: Vec<f64> = (0..=n)
                    .map(|i| if i == drop { 0.0 } else { rng.gen_range(0.05..1.0) })
                    .collect();
                let tot: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= tot);
                let p = s.point_from_barycentric(&w);
                let via_cell = sk.to_world(&frame.to_world(&s.apply(&p)));
                let global = sk.psi(&sk.to_world(&frame.to_world(&p)));
                let d: f64 = via_cell
                    .iter()
                    .zip(&global)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max(d);
            }
            assert!(worst <= 1e-9, "n={n} k={k}: worst discrepancy {worst:.3e}");
        }
    }

    #[test]
    fn psi_has_degree_one() {
        for (n, k) in [(2usize, 1usize), (3, 1), (3, 2)] {
            let sk = sample_complex(n, k, 0.02);
            let m = sk.psi_map().unwrap();
            let report = check_degree(&m, 25, 0xD5EE).unwrap();
            assert!(report.pass, "n={n} k={k}: {:?}", report.probe_degrees);
        }
    }

    #[test]
    fn cell_counts_near_a_ball_ignore_the_split_parameter() {
        for (n, k) in [(2usize, 1usize), (3, 1), (3, 2)] {
            let coarse = sample_complex(n, k, 0.05);
            let fine = sample_complex(n, k, 0.01);
            let mut rng = crate::qmc::rng_for(13, "psi-eps");
            for _ in 0..50 {
                let c: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..4.0)).collect();
                assert_eq!(coarse.simplices_near(&c, 1.0), fine.simplices_near(&c, 1.0));
            }
        }
    }

    #[test]
    fn displacement_is_bounded_by_the_tile_diameter() {
        for (n, k) in [(2usize, 1usize), (3, 1), (3, 2)] {
            let sk = sample_complex(n, k, 0.02);
            assert!(sk.max_displacement() <= (n as f64).sqrt() + 1e-12);
            let mut rng = crate::qmc::rng_for(21, "psi-disp");
            for _ in 0..500 {
                let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
                let img = sk.psi(&y);
                let d: f64 = img
                    .iter()
                    .zip(&y)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(d <= (n as f64).sqrt() + 1e-9);
            }
        }
    }

    #[test]
    fn non_cubic_regions_are_rejected_by_the_degree_wrapper() {
        let sk = Arc::new(
            build_psi(2, 1, 0.02, &[0.0, 0.0], &[4.0, 6.0], &[0.3, 0.4]).unwrap(),
        );
        assert!(matches!(sk.psi_map(), Err(Error::Precondition(_))));
    }
}
