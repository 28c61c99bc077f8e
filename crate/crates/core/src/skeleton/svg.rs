//! SVG rendering of the planar skeleton retraction.
//!
//! Draws the translated grid (the 1-skeleton), the straight fiber, and
//! the bent fiber's pieces — on-skeleton pieces in blue, pieces from
//! stretched cells in red. Only the planar case renders; higher
//! dimensions have no faithful flat picture.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::fiber::{bend_fiber_pieces, FiberFrame, PieceGeom};
use super::psi::SkeletonComplex;

const SCALE: f64 = 80.0;

/// Renders the scene to an SVG string.
pub fn render_bent_fiber(
    sk: &SkeletonComplex,
    frame: &FiberFrame,
    offset: &[f64],
    seed: u64,
) -> Result<String> {
    if sk.n != 2 || sk.k != 1 {
        return Err(Error::Unsupported(format!(
            "SVG rendering covers n = 2, k = 1 only, got n = {}, k = {}",
            sk.n, sk.k
        )));
    }
    let (_, pieces) = bend_fiber_pieces(sk, frame, offset, None, seed)?;
    let (lo, hi) = (&sk.lo, &sk.hi);
    let w = (hi[0] - lo[0]) * SCALE;
    let h = (hi[1] - lo[1]) * SCALE;
    let px = |x: f64| (x - lo[0]) * SCALE;
    let py = |y: f64| (hi[1] - y) * SCALE;

    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w:.1} {h:.1}\">\n\
         <rect width=\"{w:.1}\" height=\"{h:.1}\" fill=\"white\"/>\n"
    );

    // Grid lines of the translated lattice.
    let t = &sk.translate;
    let mut v = (lo[0] - t[0]).ceil() + t[0];
    while v <= hi[0] {
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"0\" x2=\"{:.2}\" y2=\"{h:.1}\" stroke=\"#cccccc\" stroke-width=\"1\"/>",
            px(v),
            px(v)
        );
        v += 1.0;
    }
    let mut u = (lo[1] - t[1]).ceil() + t[1];
    while u <= hi[1] {
        let _ = writeln!(
            s,
            "<line x1=\"0\" y1=\"{:.2}\" x2=\"{w:.1}\" y2=\"{:.2}\" stroke=\"#cccccc\" stroke-width=\"1\"/>",
            py(u),
            py(u)
        );
        u += 1.0;
    }

    // The straight fiber, dashed.
    let dir = [frame.v.get(0, 0), frame.v.get(1, 0)];
    let span = (hi[0] - lo[0]) + (hi[1] - lo[1]);
    let a = [offset[0] - span * dir[0], offset[1] - span * dir[1]];
    let b = [offset[0] + span * dir[0], offset[1] + span * dir[1]];
    let _ = writeln!(
        s,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#999999\" stroke-width=\"1.5\" stroke-dasharray=\"6 4\"/>",
        px(a[0]),
        py(a[1]),
        px(b[0]),
        py(b[1])
    );

    // Bent pieces: image segments of the fiber under the retraction.
    for p in &pieces {
        let PieceGeom::Seg(t0, t1) = &p.geom else {
            continue;
        };
        let (t0, t1) = (*t0, *t1);
        let at = |t: f64| {
            [
                p.base[0] + t * p.dirs[0][0],
                p.base[1] + t * p.dirs[0][1],
            ]
        };
        let q0 = at(t0);
        let q1 = at(t1);
        let color = if p.good { "#1f77b4" } else { "#d62728" };
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"3\" stroke-linecap=\"round\"/>",
            px(q0[0]),
            py(q0[1]),
            px(q1[0]),
            py(q1[1])
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Renders the scene and writes it to `path`.
pub fn write_bent_fiber(
    sk: &SkeletonComplex,
    frame: &FiberFrame,
    offset: &[f64],
    seed: u64,
    path: &Path,
) -> Result<()> {
    let s = render_bent_fiber(sk, frame, offset, seed)?;
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::fiber::generic_fiber_frame;
    use crate::skeleton::psi::build_psi;

    #[test]
    fn scene_contains_grid_and_both_piece_kinds() {
        let sk = build_psi(2, 1, 0.05, &[0.0, 0.0], &[4.0, 4.0], &[0.3, 0.7]).unwrap();
        let f = generic_fiber_frame(2, 1, 5).unwrap();
        // Aim just off a dual vertex (cell center) so the fiber passes
        // through its stretched collar whatever the direction.
        let s = render_bent_fiber(&sk, &f, &[1.81, 2.21], 1).unwrap();
        assert!(s.starts_with("<svg"));
        assert!(s.contains("#1f77b4"), "no on-skeleton pieces drawn");
        assert!(s.contains("#d62728"), "no stretched pieces drawn");
        assert!(s.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn file_output_round_trips() {
        let sk = build_psi(2, 1, 0.05, &[0.0, 0.0], &[3.0, 3.0], &[0.0, 0.0]).unwrap();
        let f = generic_fiber_frame(2, 1, 6).unwrap();
        let path = std::env::temp_dir().join("widthforge-fiber-test.svg");
        write_bent_fiber(&sk, &f, &[1.4, 1.6], 2, &path).unwrap();
        let back = std::fs::read_to_string(&path).unwrap();
        assert!(back.starts_with("<svg"));
        let _ = std::fs::remove_file(&path);
    }

    #[test]
    fn higher_dimensions_are_refused() {
        let sk = build_psi(3, 1, 0.05, &[0.0; 3], &[3.0; 3], &[0.0; 3]).unwrap();
        let f = generic_fiber_frame(3, 1, 7).unwrap();
        let err = render_bent_fiber(&sk, &f, &[1.0, 1.0, 1.0], 3).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }
}
