//! Finite signal alphabets and their product enumerations.
//!
//! Point order inside every alphabet is fixed and Gray-mapped so that symbol
//! index `i` always denotes the same point:
//!
//! * BPSK: `[+1, -1]`
//! * QPSK: index bits `b1 b0`, in-phase `1 - 2*b1`, quadrature `1 - 2*b0`,
//!   scaled by `1/√2`.
//! * 16-QAM: index bits `i1 i0 q1 q0`; each two-bit pair maps
//!   `00 → -3, 01 → -1, 11 → +1, 10 → +3`, scaled by `1/√10`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::tol;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modulation {
    Bpsk,
    Qpsk,
    Qam16,
}

impl Modulation {
    pub fn cardinality(self) -> usize {
        match self {
            Modulation::Bpsk => 2,
            Modulation::Qpsk => 4,
            Modulation::Qam16 => 16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Bpsk => "bpsk",
            Modulation::Qpsk => "qpsk",
            Modulation::Qam16 => "qam16",
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "bpsk" => Ok(Modulation::Bpsk),
            "qpsk" => Ok(Modulation::Qpsk),
            "qam16" | "16qam" => Ok(Modulation::Qam16),
            _ => Err(Error::config(format!(
                "unsupported modulation '{s}' (expected bpsk, qpsk or qam16)"
            ))),
        }
    }
}

/// An equiprobable, zero-mean, unit-energy signal alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    modulation: Modulation,
    points: Vec<C64>,
}

impl Constellation {
    pub fn new(modulation: Modulation) -> Self {
        let points = match modulation {
            Modulation::Bpsk => vec![C64::new(1.0, 0.0), C64::new(-1.0, 0.0)],
            Modulation::Qpsk => {
                let a = std::f64::consts::FRAC_1_SQRT_2;
                (0..4)
                    .map(|i| {
                        let re = 1.0 - 2.0 * ((i >> 1) & 1) as f64;
                        let im = 1.0 - 2.0 * (i & 1) as f64;
                        C64::new(re * a, im * a)
                    })
                    .collect()
            }
            Modulation::Qam16 => {
                let level = |bits: usize| match bits {
                    0b00 => -3.0,
                    0b01 => -1.0,
                    0b11 => 1.0,
                    _ => 3.0,
                };
                let a = 1.0 / 10f64.sqrt();
                (0..16)
                    .map(|i| C64::new(level(i >> 2) * a, level(i & 3) * a))
                    .collect()
            }
        };
        Self { modulation, points }
    }

    pub fn modulation(&self) -> Modulation {
        self.modulation
    }

    pub fn points(&self) -> &[C64] {
        &self.points
    }

    pub fn cardinality(&self) -> usize {
        self.points.len()
    }

    pub fn bits_per_symbol(&self) -> f64 {
        (self.points.len() as f64).log2()
    }
}

/// Looks a constellation up by name.
pub fn make_constellation(name: &str) -> Result<Constellation> {
    Ok(Constellation::new(name.parse()?))
}

/// `base^exp`, or `None` on overflow past `i64::MAX`.
fn checked_pow(base: u64, exp: u64) -> Option<u64> {
    let exp = u32::try_from(exp).ok()?;
    base.checked_pow(exp).filter(|&v| v <= i64::MAX as u64)
}

/// `M^n` if it does not exceed `cap`.
pub fn product_size(m: usize, n: usize, cap: u64) -> Result<usize> {
    match checked_pow(m as u64, n as u64) {
        Some(total) if total <= cap => Ok(total as usize),
        Some(total) => Err(Error::Capacity(format!(
            "product constellation of size {m}^{n} = {total} exceeds the enumeration cap {cap}"
        ))),
        None => Err(Error::Capacity(format!(
            "product constellation of size {m}^{n} overflows and exceeds the enumeration cap {cap}"
        ))),
    }
}

/// Lexicographic stream over all `M^n` symbol vectors of a product
/// alphabet. The last coordinate varies fastest.
#[derive(Debug, Clone)]
pub struct ProductEnumeration<'a> {
    points: &'a [C64],
    dim: usize,
    total: usize,
    next: usize,
}

impl<'a> ProductEnumeration<'a> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Flattened table of all vectors, `total × dim`, row-major.
    pub fn to_table(&self) -> Vec<C64> {
        self.clone().flatten().collect()
    }
}

impl Iterator for ProductEnumeration<'_> {
    type Item = Vec<C64>;

    fn next(&mut self) -> Option<Vec<C64>> {
        if self.next >= self.total {
            return None;
        }
        let m = self.points.len();
        let mut idx = self.next;
        let mut v = vec![C64::new(0.0, 0.0); self.dim];
        for slot in v.iter_mut().rev() {
            *slot = self.points[idx % m];
            idx /= m;
        }
        self.next += 1;
        Some(v)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.total - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for ProductEnumeration<'_> {}

/// Enumerates the product alphabet `c^n` under the default cap.
pub fn enumerate_product(c: &Constellation, n: usize) -> Result<ProductEnumeration<'_>> {
    enumerate_product_capped(c, n, tol::ENUMERATION_CAP)
}

pub fn enumerate_product_capped(
    c: &Constellation,
    n: usize,
    cap: u64,
) -> Result<ProductEnumeration<'_>> {
    if n == 0 {
        return Err(Error::config("product dimension must be at least 1"));
    }
    let total = product_size(c.cardinality(), n, cap)?;
    Ok(ProductEnumeration {
        points: c.points(),
        dim: n,
        total,
        next: 0,
    })
}

/// Per-evaluation enumeration workload `S · M^(2·N_s)` of the decoupled design.
pub fn search_space_size(m: u64, n_s: u64, s: u64) -> Result<u64> {
    if m == 0 || n_s == 0 || s == 0 {
        return Err(Error::config("search_space_size arguments must be >= 1"));
    }
    n_s.checked_mul(2)
        .and_then(|e| checked_pow(m, e))
        .and_then(|p| p.checked_mul(s))
        .filter(|&v| v <= i64::MAX as u64)
        .ok_or_else(|| {
            Error::Capacity(format!(
                "search space {s} x {m}^(2x{n_s}) overflows 2^63"
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn moments(c: &Constellation) -> (C64, f64) {
        let m = c.cardinality() as f64;
        let mean = c.points().iter().sum::<C64>() / m;
        let energy = c.points().iter().map(|p| p.norm_sqr()).sum::<f64>() / m;
        (mean, energy)
    }

    #[test]
    fn alphabets_are_normalized() {
        for (m, card) in [
            (Modulation::Bpsk, 2),
            (Modulation::Qpsk, 4),
            (Modulation::Qam16, 16),
        ] {
            let c = Constellation::new(m);
            assert_eq!(c.cardinality(), card);
            let (mean, energy) = moments(&c);
            assert!(mean.norm() < 1e-12, "{m}");
            assert!((energy - 1.0).abs() < 1e-12, "{m}");
        }
    }

    #[test]
    fn point_sets() {
        let b = make_constellation("BPSK").unwrap();
        assert_eq!(b.points(), &[C64::new(1.0, 0.0), C64::new(-1.0, 0.0)]);

        let q = make_constellation("qpsk").unwrap();
        let a = 0.5f64.sqrt();
        for p in q.points() {
            assert!((p.re.abs() - a).abs() < 1e-15 && (p.im.abs() - a).abs() < 1e-15);
        }

        let x = make_constellation("16-QAM").unwrap();
        let s = 10f64.sqrt();
        for p in x.points() {
            let (re, im) = (p.re * s, p.im * s);
            assert!([-3.0, -1.0, 1.0, 3.0].iter().any(|l| (l - re).abs() < 1e-12));
            assert!([-3.0, -1.0, 1.0, 3.0].iter().any(|l| (l - im).abs() < 1e-12));
        }
        assert!(make_constellation("64qam").is_err());
    }

    #[test]
    fn qam16_gray_neighbours_differ_in_one_bit() {
        let c = Constellation::new(Modulation::Qam16);
        let s = 10f64.sqrt();
        for i in 0..16usize {
            for j in 0..16usize {
                let d = (c.points()[i] - c.points()[j]) * s;
                if (d.norm() - 2.0).abs() < 1e-9 {
                    assert_eq!((i ^ j).count_ones(), 1, "{i} {j}");
                }
            }
        }
    }

    #[test]
    fn bpsk_pairs_in_lexicographic_order() {
        let c = Constellation::new(Modulation::Bpsk);
        let v: Vec<Vec<f64>> = enumerate_product(&c, 2)
            .unwrap()
            .map(|x| x.iter().map(|z| z.re).collect())
            .collect();
        assert_eq!(
            v,
            vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]]
        );
    }

    #[test]
    fn product_counts_and_uniqueness() {
        let c = Constellation::new(Modulation::Qpsk);
        assert_eq!(enumerate_product(&c, 2).unwrap().count(), 16);
        let all: Vec<_> = enumerate_product(&c, 4).unwrap().collect();
        assert_eq!(all.len(), 256);
        let keys: HashSet<Vec<(i64, i64)>> = all
            .iter()
            .map(|v| {
                v.iter()
                    .map(|z| ((z.re * 1e6).round() as i64, (z.im * 1e6).round() as i64))
                    .collect()
            })
            .collect();
        assert_eq!(keys.len(), 256);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let c = Constellation::new(Modulation::Qam16);
        let err = enumerate_product(&c, 6).unwrap_err();
        assert!(matches!(err, Error::Capacity(ref m) if m.contains("16777216")), "{err}");
        assert!(enumerate_product(&c, 0).is_err());
    }

    #[test]
    fn search_space_examples() {
        assert_eq!(search_space_size(4, 2, 2).unwrap(), 512);
        assert_eq!(search_space_size(4, 4, 1).unwrap(), 65536);
        assert_eq!(search_space_size(2, 1, 1).unwrap(), 4);
        assert!(matches!(search_space_size(16, 16, 1), Err(Error::Capacity(_))));
        assert!(search_space_size(0, 1, 1).is_err());
    }

    #[test]
    fn complexity_ratio() {
        // complete search over N_t versus S groups of width N_s
        for (m, n_t, n_s) in [(2u64, 8u64, 2u64), (4, 4, 2), (4, 8, 4), (16, 4, 2)] {
            let s = n_t / n_s;
            let full = search_space_size(m, n_t, 1).unwrap() as f64;
            let split = search_space_size(m, n_s, s).unwrap() as f64;
            let expect = (m as f64).powi(2 * n_t as i32) / (s as f64 * (m as f64).powi(2 * n_s as i32));
            assert!((full / split - expect).abs() < 1e-9 * expect);
        }
    }
}
