use crate::error::{Error, Result};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// An axis-parallel box `[0, R_1] x ... x [0, R_n]` with side lengths stored
/// sorted ascending. All bound formulas in this crate index sides in that
/// order, so sorting happens once at construction; the permutation that maps
/// input axes to sorted axes is kept for callers that care about the original
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Rectangle {
    dims: Vec<f64>,
    /// `input_perm[sorted_index] = original_index`.
    input_perm: Vec<usize>,
}

impl Rectangle {
    /// Builds a rectangle from side lengths in any order.
    ///
    /// Sides must be finite and strictly positive; dimension must be between
    /// 1 and 10 (the exhaustive searches elsewhere budget for 10).
    pub fn new(sides: &[f64]) -> Result<Self> {
        if sides.is_empty() || sides.len() > 10 {
            return Err(Error::precondition(format!(
                "rectangle dimension must be in 1..=10, got {}",
                sides.len()
            )));
        }
        for (i, &s) in sides.iter().enumerate() {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::precondition(format!(
                    "rectangle side {i} must be finite and positive, got {s}"
                )));
            }
        }
        let mut order: Vec<usize> = (0..sides.len()).collect();
        order.sort_by(|&a, &b| sides[a].partial_cmp(&sides[b]).unwrap().then(a.cmp(&b)));
        let dims = order.iter().map(|&i| sides[i]).collect();
        Ok(Rectangle {
            dims,
            input_perm: order,
        })
    }

    pub fn n(&self) -> usize {
        self.dims.len()
    }

    /// Sorted side lengths, ascending.
    pub fn dims(&self) -> &[f64] {
        &self.dims
    }

    /// `input_perm()[i]` is the original axis index of sorted side `i`.
    pub fn input_perm(&self) -> &[usize] {
        &self.input_perm
    }

    pub fn side(&self, i: usize) -> f64 {
        self.dims[i]
    }

    /// Product of sides `lo..hi` (half-open, sorted indexing). Empty range
    /// gives 1.
    pub fn side_product(&self, lo: usize, hi: usize) -> f64 {
        self.dims[lo..hi].iter().product()
    }

    pub fn volume(&self) -> f64 {
        self.side_product(0, self.n())
    }

    /// Uniformly scaled copy `t * R`.
    pub fn scaled(&self, t: f64) -> Result<Rectangle> {
        Rectangle::new(&self.dims.iter().map(|d| d * t).collect::<Vec<_>>())
    }

    /// True when the two rectangles agree side-by-side within `rel` relative
    /// tolerance (sorted order).
    pub fn approx_eq(&self, other: &Rectangle, rel: f64) -> bool {
        self.n() == other.n()
            && self
                .dims
                .iter()
                .zip(other.dims.iter())
                .all(|(&a, &b)| (a - b).abs() <= rel * a.abs().max(b.abs()))
    }
}

#[derive(Serialize, Deserialize)]
struct RectangleWire {
    dims: Vec<f64>,
}

impl Serialize for Rectangle {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        RectangleWire {
            dims: self.dims.clone(),
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Rectangle {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let wire = RectangleWire::deserialize(de)?;
        Rectangle::new(&wire.dims).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorts_and_records_permutation() {
        let r = Rectangle::new(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(r.dims(), &[1.0, 2.0, 3.0]);
        assert_eq!(r.input_perm(), &[1, 2, 0]);
    }

    #[test]
    fn rejects_bad_sides() {
        assert!(Rectangle::new(&[]).is_err());
        assert!(Rectangle::new(&[1.0, 0.0]).is_err());
        assert!(Rectangle::new(&[1.0, -2.0]).is_err());
        assert!(Rectangle::new(&[f64::NAN]).is_err());
        assert!(Rectangle::new(&[1.0; 11]).is_err());
    }

    #[test]
    fn json_round_trip_is_sorted() {
        let r: Rectangle = serde_json::from_str(r#"{"dims":[5.0,2.0,4.0]}"#).unwrap();
        assert_eq!(r.dims(), &[2.0, 4.0, 5.0]);
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"dims":[2.0,4.0,5.0]}"#);
    }
}
