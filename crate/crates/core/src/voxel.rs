//! Voxelized scalar fields on axis-parallel grids.
//!
//! A [`VoxelGrid`] stores a density with values in [0, 1] (an indicator or
//! a soft coverage field) on a row-major lattice with per-axis spacing.
//! Grids are the common currency of the skeleton-width and slice-energy
//! pipelines: shapes are rasterized here with exact or subsampled cell
//! coverage so that masses are trustworthy to a fraction of a percent,
//! and the file format is a small self-describing header over raw
//! little-endian doubles.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Scalar field sampled at voxel centers; `values[idx]` with the last
/// axis fastest. Spacing may differ per axis in memory; the file format
/// only carries isotropic grids.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub n: usize,
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(
        shape: Vec<usize>,
        spacing: Vec<f64>,
        origin: Vec<f64>,
        values: Vec<f64>,
    ) -> Result<VoxelGrid> {
        let n = shape.len();
        if !(2..=3).contains(&n) || spacing.len() != n || origin.len() != n {
            return Err(Error::precondition(format!(
                "grid needs matching shape/spacing/origin in dimension 2 or 3; \
                 got {n}/{}/{}",
                spacing.len(),
                origin.len()
            )));
        }
        if shape.iter().any(|&s| s == 0) || spacing.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(Error::precondition(
                "grid extents and spacing must be positive",
            ));
        }
        let count: usize = shape.iter().product();
        if values.len() != count {
            return Err(Error::precondition(format!(
                "expected {count} values for shape {shape:?}, got {}",
                values.len()
            )));
        }
        if values
            .iter()
            .any(|v| !v.is_finite() || *v < -1e-9 || *v > 1.0 + 1e-9)
        {
            return Err(Error::precondition(
                "values must lie in [0, 1] (1e-9 slack)",
            ));
        }
        let g = VoxelGrid {
            n,
            shape,
            spacing,
            origin,
            values,
        };
        if !(g.mass() > 0.0) {
            return Err(Error::precondition("grid carries no mass"));
        }
        Ok(g)
    }

    /// Builds a grid by evaluating `f` at every voxel center.
    pub fn from_fn(
        shape: &[usize],
        spacing: &[f64],
        origin: &[f64],
        f: impl Fn(&[f64]) -> f64,
    ) -> Result<VoxelGrid> {
        let count: usize = shape.iter().product();
        let n = shape.len();
        let mut values = Vec::with_capacity(count);
        let mut idx = vec![0usize; n];
        let mut p = vec![0.0; n];
        for _ in 0..count {
            for i in 0..n {
                p[i] = origin[i] + (idx[i] as f64 + 0.5) * spacing[i];
            }
            values.push(f(&p));
            for i in (0..n).rev() {
                idx[i] += 1;
                if idx[i] < shape[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
        VoxelGrid::new(shape.to_vec(), spacing.to_vec(), origin.to_vec(), values)
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Total mass sum(values) * cell volume.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    /// The geometric center of voxel `idx`.
    pub fn center(&self, idx: &[usize]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.origin[i] + (idx[i] as f64 + 0.5) * self.spacing[i])
            .collect()
    }

    fn flat(&self, idx: &[usize]) -> usize {
        let mut f = 0usize;
        for i in 0..self.n {
            f = f * self.shape[i] + idx[i];
        }
        f
    }

    pub fn value(&self, idx: &[usize]) -> f64 {
        self.values[self.flat(idx)]
    }

    /// Multilinear interpolation at a physical point; zero outside the
    /// grid (fields here are compactly supported).
    pub fn interp(&self, p: &[f64]) -> f64 {
        // Hot path (fiber quadrature, slice sweeps): stack buffers only.
        let n = self.n;
        let mut base = [0isize; 3];
        let mut frac = [0.0f64; 3];
        for i in 0..n {
            let u = (p[i] - self.origin[i]) / self.spacing[i] - 0.5;
            let fl = u.floor();
            base[i] = fl as isize;
            frac[i] = u - fl;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut flat = 0usize;
            let mut inside = true;
            for i in 0..n {
                let hi = (corner >> i) & 1 == 1;
                w *= if hi { frac[i] } else { 1.0 - frac[i] };
                let j = base[i] + if hi { 1 } else { 0 };
                if j < 0 || j as usize >= self.shape[i] {
                    inside = false;
                    break;
                }
                flat = flat * self.shape[i] + j as usize;
            }
            if inside && w > 0.0 {
                acc += w * self.values[flat];
            }
        }
        acc
    }

    /// Rescales the geometry (spacing and origin) so the total mass is
    /// exactly one; returns the linear factor applied.
    pub fn normalized(&self) -> (VoxelGrid, f64) {
        let lam = self.mass().powf(-1.0 / self.n as f64);
        let mut g = self.clone();
        for h in &mut g.spacing {
            *h *= lam;
        }
        for o in &mut g.origin {
            *o *= lam;
        }
        (g, lam)
    }

    /// Integrates out the first `l` axes and divides by `denom`,
    /// producing the marginal density on the remaining axes.
    pub fn marginal(&self, l: usize, denom: f64) -> Result<VoxelGrid> {
        if l == 0 {
            return Ok(self.clone());
        }
        if self.n - l < 2 {
            return Err(Error::Unsupported(format!(
                "marginal over {l} axes leaves dimension {}; need at least 2",
                self.n - l
            )));
        }
        if !(denom > 0.0) {
            return Err(Error::precondition("marginal denominator must be positive"));
        }
        let head_cells: usize = self.shape[..l].iter().product();
        let tail_cells: usize = self.shape[l..].iter().product();
        let head_vol: f64 = self.spacing[..l].iter().product();
        let mut values = vec![0.0f64; tail_cells];
        for (i, v) in self.values.iter().enumerate() {
            values[i % tail_cells] += v;
        }
        debug_assert_eq!(head_cells * tail_cells, self.values.len());
        for v in &mut values {
            *v = (*v * head_vol / denom).min(1.0);
        }
        VoxelGrid::new(
            self.shape[l..].to_vec(),
            self.spacing[l..].to_vec(),
            self.origin[l..].to_vec(),
            values,
        )
    }

    /// Resamples the field over the image of the grid under `rot`
    /// (an orthogonal matrix), with the same smallest spacing on every
    /// axis. Used to check rotation invariance of integral quantities.
    pub fn rotated(&self, rot: &Mat) -> Result<VoxelGrid> {
        let n = self.n;
        if rot.rows != n || rot.cols != n {
            return Err(Error::precondition("rotation dimension mismatch"));
        }
        // Rotate the bounding-box corners to find the new extents.
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for corner in 0..(1usize << n) {
            let p: Vec<f64> = (0..n)
                .map(|i| {
                    if (corner >> i) & 1 == 1 {
                        self.origin[i] + self.shape[i] as f64 * self.spacing[i]
                    } else {
                        self.origin[i]
                    }
                })
                .collect();
            let q = rot.matvec(&p);
            for i in 0..n {
                lo[i] = lo[i].min(q[i]);
                hi[i] = hi[i].max(q[i]);
            }
        }
        let h = self
            .spacing
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let inv = rot.transpose();
        let shape: Vec<usize> = (0..n)
            .map(|i| (((hi[i] - lo[i]) / h).ceil() as usize).max(1))
            .collect();
        let mut g = VoxelGrid::from_fn(&shape, &vec![h; n], &lo, |p| {
            self.interp(&inv.matvec(p)).clamp(0.0, 1.0)
        })?;
        // from_fn cannot produce out-of-range values here, but the clamp
        // above can shave interpolation overshoot; keep values tidy.
        for v in &mut g.values {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(g)
    }

    // -- file format --------------------------------------------------

    /// Writes the `WVG1` format: three ASCII header lines (magic,
    /// "n sx sy [sz]", "h ox oy [oz]") then raw little-endian doubles,
    /// row-major. Only isotropic grids can be written.
    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path)?;
        let mut w = BufWriter::new(f);
        self.to_writer(&mut w)
    }

    pub fn to_writer(&self, w: &mut impl Write) -> Result<()> {
        let h = self.spacing[0];
        if self
            .spacing
            .iter()
            .any(|&hi| (hi - h).abs() > 1e-12 * h.max(hi))
        {
            return Err(Error::Unsupported(format!(
                "file format carries a single spacing; grid has {:?}",
                self.spacing
            )));
        }
        writeln!(w, "WVG1")?;
        let dims: Vec<String> = self.shape.iter().map(|s| s.to_string()).collect();
        writeln!(w, "{} {}", self.n, dims.join(" "))?;
        let orig: Vec<String> = self.origin.iter().map(|o| format!("{o:.17e}")).collect();
        writeln!(w, "{h:.17e} {}", orig.join(" "))?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<VoxelGrid> {
        let f = File::open(path)?;
        let mut r = BufReader::new(f);
        VoxelGrid::from_reader(&mut r)
    }

    pub fn from_reader(r: &mut impl Read) -> Result<VoxelGrid> {
        let line1 = read_line(r, "line 1")?;
        if line1.trim() != "WVG1" {
            return Err(Error::Parse {
                location: "line 1".to_string(),
                message: format!("expected magic WVG1, got {:?}", line1.trim()),
            });
        }
        let line2 = read_line(r, "line 2")?;
        let mut it = line2.split_whitespace();
        let n: usize = parse_field(it.next(), "line 2", "dimension")?;
        if !(2..=3).contains(&n) {
            return Err(Error::Parse {
                location: "line 2".to_string(),
                message: format!("dimension must be 2 or 3, got {n}"),
            });
        }
        let mut shape = Vec::with_capacity(n);
        for i in 0..n {
            shape.push(parse_field(it.next(), "line 2", &format!("extent {i}"))?);
        }
        if it.next().is_some() {
            return Err(Error::Parse {
                location: "line 2".to_string(),
                message: "trailing fields after extents".to_string(),
            });
        }
        let line3 = read_line(r, "line 3")?;
        let mut it = line3.split_whitespace();
        let h: f64 = parse_field(it.next(), "line 3", "spacing")?;
        let mut origin = Vec::with_capacity(n);
        for i in 0..n {
            origin.push(parse_field(it.next(), "line 3", &format!("origin {i}"))?);
        }
        if it.next().is_some() {
            return Err(Error::Parse {
                location: "line 3".to_string(),
                message: "trailing fields after origin".to_string(),
            });
        }
        let count: usize = shape.iter().product();
        let mut values = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for i in 0..count {
            if let Err(e) = r.read_exact(&mut buf) {
                return Err(Error::Parse {
                    location: "data".to_string(),
                    message: format!("expected {count} doubles, failed at {i}: {e}"),
                });
            }
            values.push(f64::from_le_bytes(buf));
        }
        VoxelGrid::new(shape, vec![h; n], origin, values).map_err(|e| Error::Parse {
            location: "data".to_string(),
            message: e.to_string(),
        })
    }
}

fn read_line(r: &mut impl Read, location: &str) -> Result<String> {
    // Byte-at-a-time keeps the reader positioned exactly at the start of
    // the binary payload after the last header line.
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read_exact(&mut byte) {
            Ok(()) => {
                if byte[0] == b'\n' {
                    break;
                }
                if line.len() > 4096 {
                    return Err(Error::Parse {
                        location: location.to_string(),
                        message: "header line too long".to_string(),
                    });
                }
                line.push(byte[0]);
            }
            Err(e) => {
                return Err(Error::Parse {
                    location: location.to_string(),
                    message: format!("unexpected end of header: {e}"),
                });
            }
        }
    }
    String::from_utf8(line).map_err(|_| Error::Parse {
        location: location.to_string(),
        message: "header is not valid UTF-8".to_string(),
    })
}

fn parse_field<T: std::str::FromStr>(
    field: Option<&str>,
    location: &str,
    what: &str,
) -> Result<T> {
    let Some(s) = field else {
        return Err(Error::Parse {
            location: location.to_string(),
            message: format!("missing {what}"),
        });
    };
    s.parse().map_err(|_| Error::Parse {
        location: location.to_string(),
        message: format!("bad {what}: {s:?}"),
    })
}

// ---------------------------------------------------------------------------
// Shapes
// ---------------------------------------------------------------------------

/// Axis-aligned box [0, d_0] x ... at `res` cells per axis. The grid is
/// aligned to the box, so coverage and mass are exact; spacing follows
/// the box (anisotropic when the sides differ).
pub fn box_grid(dims: &[f64], res: usize) -> Result<VoxelGrid> {
    let n = dims.len();
    if dims.iter().any(|d| !(d > &0.0)) {
        return Err(Error::precondition("box sides must be positive"));
    }
    let spacing: Vec<f64> = dims.iter().map(|d| d / res as f64).collect();
    VoxelGrid::new(
        vec![res; n],
        spacing,
        vec![0.0; n],
        vec![1.0; res.pow(n as u32)],
    )
}

/// Ball of the given volume centered at the origin, rasterized at `res`
/// cells per axis with per-cell coverage: cells fully inside or outside
/// are exact, boundary cells are subsampled 4^n.
pub fn ball_grid(n: usize, res: usize, volume: f64) -> Result<VoxelGrid> {
    if !(2..=3).contains(&n) {
        return Err(Error::Unsupported(format!(
            "ball rasterization supports n in 2..=3, got {n}"
        )));
    }
    if !(volume > 0.0) {
        return Err(Error::precondition("ball volume must be positive"));
    }
    let r = match n {
        2 => (volume / std::f64::consts::PI).sqrt(),
        _ => (3.0 * volume / (4.0 * std::f64::consts::PI)).powf(1.0 / 3.0),
    };
    let pad = 1.0 + 3.0 / res as f64;
    let half = r * pad;
    let h = 2.0 * half / res as f64;
    let half_diag = 0.5 * h * (n as f64).sqrt();
    let sub = 4usize;
    let subs: Vec<f64> = (0..sub)
        .map(|i| ((i as f64 + 0.5) / sub as f64 - 0.5) * h)
        .collect();
    VoxelGrid::from_fn(&vec![res; n], &vec![h; n], &vec![-half; n], |p| {
        let d = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        if d <= r - half_diag {
            return 1.0;
        }
        if d >= r + half_diag {
            return 0.0;
        }
        let mut inside = 0usize;
        let mut idx = vec![0usize; n];
        loop {
            let mut dd = 0.0;
            for i in 0..n {
                let c = p[i] + subs[idx[i]];
                dd += c * c;
            }
            if dd.sqrt() <= r {
                inside += 1;
            }
            let mut carry = true;
            for i in (0..n).rev() {
                if carry {
                    idx[i] += 1;
                    if idx[i] < sub {
                        carry = false;
                    } else {
                        idx[i] = 0;
                    }
                }
            }
            if carry {
                break;
            }
        }
        inside as f64 / (sub.pow(n as u32)) as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_mass_is_exact() {
        let g = box_grid(&[1.0, 1.0, 1.0], 32).unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-12);
        let p = box_grid(&[0.1, 0.1, 100.0], 32).unwrap();
        assert!((p.mass() - 1.0).abs() < 1e-9);
        assert!(p.spacing[2] / p.spacing[0] > 100.0);
    }

    #[test]
    fn ball_mass_tracks_the_requested_volume() {
        for (n, vol) in [(2usize, 1.0f64), (3, 1.0), (3, 8.0)] {
            let g = ball_grid(n, 64, vol).unwrap();
            let err = (g.mass() - vol).abs() / vol;
            assert!(err < 5e-3, "n={n} vol={vol}: mass {} ({err})", g.mass());
        }
    }

    #[test]
    fn normalization_reports_the_linear_factor() {
        let g = ball_grid(3, 48, 8.0).unwrap();
        let (u, lam) = g.normalized();
        assert!((u.mass() - 1.0).abs() < 1e-12);
        assert!((lam - 8.0f64.powf(-1.0 / 3.0)).abs() < 0.01);
    }

    #[test]
    fn interpolation_is_exact_inside_and_zero_outside() {
        let g = box_grid(&[1.0, 1.0], 16).unwrap();
        assert!((g.interp(&[0.5, 0.5]) - 1.0).abs() < 1e-12);
        assert_eq!(g.interp(&[2.0, 0.5]), 0.0);
        assert_eq!(g.interp(&[-1.0, -1.0]), 0.0);
    }

    #[test]
    fn marginal_of_a_box_is_flat() {
        let g = box_grid(&[2.0, 1.0, 1.0], 24).unwrap();
        let m = g.marginal(1, 2.0).unwrap();
        assert_eq!(m.n, 2);
        assert!(m.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!((m.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let g = ball_grid(2, 24, 1.0).unwrap();
        let path = std::env::temp_dir().join("widthforge_voxel_roundtrip.wvg");
        g.write(&path).unwrap();
        let back = VoxelGrid::read(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(g.shape, back.shape);
        assert_eq!(g.values, back.values);
        assert_eq!(g.spacing, back.spacing);
        assert_eq!(g.origin, back.origin);
    }

    #[test]
    fn anisotropic_grids_refuse_to_serialize() {
        let g = box_grid(&[0.1, 0.1, 100.0], 8).unwrap();
        let mut sink = Vec::new();
        assert!(matches!(
            g.to_writer(&mut sink),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn parse_errors_carry_locations() {
        let mut bad_magic = std::io::Cursor::new(b"WVGX\n2 2 2\n1.0 0 0\n".to_vec());
        match VoxelGrid::from_reader(&mut bad_magic) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 1"),
            other => panic!("expected parse error, got {:?}", other.map(|g| g.shape)),
        }

        let mut bad_dim = std::io::Cursor::new(b"WVG1\n5 2 2 2 2 2\n1.0 0 0\n".to_vec());
        match VoxelGrid::from_reader(&mut bad_dim) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 2"),
            other => panic!("expected parse error, got {:?}", other.map(|g| g.shape)),
        }

        let mut truncated = {
            let g = box_grid(&[1.0, 1.0], 4).unwrap();
            let mut buf = Vec::new();
            g.to_writer(&mut buf).unwrap();
            buf.truncate(buf.len() - 9);
            std::io::Cursor::new(buf)
        };
        match VoxelGrid::from_reader(&mut truncated) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "data"),
            other => panic!("expected parse error, got {:?}", other.map(|g| g.shape)),
        }
    }

    #[test]
    fn rotation_preserves_mass_within_resampling_error() {
        let g = ball_grid(2, 48, 1.0).unwrap();
        let th = 0.7f64;
        let rot = Mat::from_rows(&[
            vec![th.cos(), -th.sin()],
            vec![th.sin(), th.cos()],
        ]);
        let r = g.rotated(&rot).unwrap();
        assert!((r.mass() - g.mass()).abs() / g.mass() < 0.02);
    }
}
