//! Global normalized L_p pooling.
//!
//! Aggregates a whole activation map into a single non-negative score,
//! `((1/N) Σ |y_i|^p)^(1/p)`. At `p = 1` this is average pooling of the
//! magnitudes and at `p = ∞` it is max pooling of the magnitudes; every
//! value in between interpolates between the two.
//!
//! The forward pass factors out `m = max |y_i|` so that large exponents do
//! not overflow: `m · ((1/N) Σ (|y_i|/m)^p)^(1/p)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Guard applied to the pooled value in the backward pass.
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Pooling exponent: a finite real `>= 1` or infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Exponent {
    Finite(f64),
    Infinity,
}

impl Exponent {
    pub fn finite(p: f64) -> Result<Self> {
        if p.is_nan() || p < 1.0 {
            return Err(Error::InvalidExponent(format!("{p} (must be >= 1)")));
        }
        if p.is_infinite() {
            return Ok(Exponent::Infinity);
        }
        Ok(Exponent::Finite(p))
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Exponent::Infinity)
    }

    /// Numeric value, `f64::INFINITY` for the sentinel.
    pub fn value(&self) -> f64 {
        match *self {
            Exponent::Finite(p) => p,
            Exponent::Infinity => f64::INFINITY,
        }
    }

    /// Short label usable in file names: `1`, `2.5`, `inf`.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exponent::Finite(p) => write!(f, "{p}"),
            Exponent::Infinity => f.write_str("inf"),
        }
    }
}

impl FromStr for Exponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        match t.to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "+inf" | "∞" | "max" => return Ok(Exponent::Infinity),
            _ => {}
        }
        let t = t.strip_prefix(['L', 'l']).unwrap_or(t);
        let p: f64 = t
            .parse()
            .map_err(|_| Error::InvalidExponent(format!("`{s}` is not a number or `inf`")))?;
        Exponent::finite(p)
    }
}

impl Serialize for Exponent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Exponent::Finite(p) => s.serialize_f64(p),
            Exponent::Infinity => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Num(p) => Exponent::finite(p),
            Raw::Text(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Exponent plus the zero-map guard used when differentiating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolingSpec {
    pub p: Exponent,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl PoolingSpec {
    pub fn new(p: Exponent) -> Result<Self> {
        Self::with_epsilon(p, DEFAULT_EPSILON)
    }

    pub fn with_epsilon(p: Exponent, epsilon: f64) -> Result<Self> {
        let spec = PoolingSpec { p, epsilon };
        spec.validate()?;
        Ok(spec)
    }

    pub fn finite(p: f64) -> Result<Self> {
        Self::new(Exponent::finite(p)?)
    }

    pub fn infinity() -> Self {
        PoolingSpec {
            p: Exponent::Infinity,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Exponent::Finite(p) = self.p {
            if !(p >= 1.0) || !p.is_finite() {
                return Err(Error::InvalidExponent(format!("{p} (must be >= 1)")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1e-6) {
            return Err(Error::InvalidEpsilon(self.epsilon));
        }
        Ok(())
    }
}

fn check_map(map: &[f64]) -> Result<()> {
    if map.is_empty() {
        return Err(Error::EmptyMap);
    }
    if let Some((index, &value)) = map.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    Ok(())
}

fn max_abs(map: &[f64]) -> f64 {
    map.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Pools `map` into one non-negative score.
pub fn lp_pool_forward(map: &[f64], spec: &PoolingSpec) -> Result<f64> {
    spec.validate()?;
    check_map(map)?;
    Ok(pool_unchecked(map, spec.p))
}

fn pool_unchecked(map: &[f64], p: Exponent) -> f64 {
    let m = max_abs(map);
    let p = match p {
        Exponent::Infinity => return m,
        Exponent::Finite(p) => p,
    };
    if m == 0.0 {
        return 0.0;
    }
    let n = map.len() as f64;
    if p == 1.0 {
        return map.iter().map(|v| v.abs()).sum::<f64>() / n;
    }
    let s: f64 = map.iter().map(|v| (v.abs() / m).powf(p)).sum();
    m * (s / n).powf(1.0 / p)
}

/// Gradient of the pooled score with respect to every element of `map`,
/// scaled by `upstream`.
///
/// For finite `p`: `(1/N) · sign(y_i) · (|y_i| / max(L_p, ε))^(p-1)`.
/// For `p = ∞` the whole gradient goes to the first element of largest
/// magnitude, carrying its sign.
pub fn lp_pool_backward(map: &[f64], spec: &PoolingSpec, upstream: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    check_map(map)?;
    let n = map.len();
    let mut grad = vec![0.0; n];
    match spec.p {
        Exponent::Infinity => {
            let mut best = 0;
            for (i, v) in map.iter().enumerate() {
                if v.abs() > map[best].abs() {
                    best = i;
                }
            }
            grad[best] = upstream * sign(map[best]);
        }
        Exponent::Finite(p) if p == 1.0 => {
            let scale = upstream / n as f64;
            for (g, v) in grad.iter_mut().zip(map) {
                *g = scale * sign(*v);
            }
        }
        Exponent::Finite(p) => {
            let pooled = pool_unchecked(map, spec.p).max(spec.epsilon);
            let scale = upstream / n as f64;
            for (g, v) in grad.iter_mut().zip(map) {
                *g = scale * sign(*v) * (v.abs() / pooled).powf(p - 1.0);
            }
        }
    }
    Ok(grad)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Direct evaluation of the definition without stabilization; fine for
    // small magnitudes.
    fn naive(map: &[f64], p: f64) -> f64 {
        let s: f64 = map.iter().map(|v| v.abs().powf(p)).sum();
        (s / map.len() as f64).powf(1.0 / p)
    }

    fn central_difference(map: &[f64], spec: &PoolingSpec, h: f64) -> Vec<f64> {
        (0..map.len())
            .map(|i| {
                let mut plus = map.to_vec();
                let mut minus = map.to_vec();
                plus[i] += h;
                minus[i] -= h;
                (lp_pool_forward(&plus, spec).unwrap() - lp_pool_forward(&minus, spec).unwrap())
                    / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn l1_is_average_of_magnitudes() {
        let spec = PoolingSpec::finite(1.0).unwrap();
        assert_eq!(lp_pool_forward(&[1.0, 2.0, 3.0, 4.0], &spec).unwrap(), 2.5);
    }

    #[test]
    fn linf_is_max_magnitude() {
        let spec = PoolingSpec::infinity();
        assert_eq!(lp_pool_forward(&[1.0, -5.0, 3.0], &spec).unwrap(), 5.0);
    }

    #[test]
    fn l2_of_three_four() {
        let spec = PoolingSpec::finite(2.0).unwrap();
        let got = lp_pool_forward(&[3.0, 4.0], &spec).unwrap();
        assert!((got - naive(&[3.0, 4.0], 2.0)).abs() < 1e-12);
        assert!((got - 12.5_f64.sqrt()).abs() < 1e-12);
        assert!((got - 3.535534).abs() < 1e-6);
    }

    #[test]
    fn zero_map_pools_to_zero() {
        for p in ["1", "2", "3.5", "9", "inf"] {
            let spec = PoolingSpec::new(p.parse().unwrap()).unwrap();
            assert_eq!(lp_pool_forward(&[0.0, 0.0, 0.0], &spec).unwrap(), 0.0);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Exponent::finite(0.5).is_err());
        assert!(Exponent::finite(f64::NAN).is_err());
        assert!("0.99".parse::<Exponent>().is_err());
        assert!("abc".parse::<Exponent>().is_err());
        assert!(PoolingSpec::with_epsilon(Exponent::Finite(2.0), 0.0).is_err());
        assert!(PoolingSpec::with_epsilon(Exponent::Finite(2.0), 1e-3).is_err());
        let bad = PoolingSpec {
            p: Exponent::Finite(0.5),
            epsilon: DEFAULT_EPSILON,
        };
        assert!(matches!(
            lp_pool_forward(&[1.0], &bad),
            Err(Error::InvalidExponent(_))
        ));
        let spec = PoolingSpec::finite(2.0).unwrap();
        assert!(matches!(
            lp_pool_forward(&[1.0, f64::NAN], &spec),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            lp_pool_forward(&[f64::INFINITY], &spec),
            Err(Error::NonFinite { index: 0, .. })
        ));
        assert!(matches!(lp_pool_forward(&[], &spec), Err(Error::EmptyMap)));
    }

    #[test]
    fn exponent_parsing_and_display() {
        assert_eq!("inf".parse::<Exponent>().unwrap(), Exponent::Infinity);
        assert_eq!("∞".parse::<Exponent>().unwrap(), Exponent::Infinity);
        assert_eq!("L3".parse::<Exponent>().unwrap(), Exponent::Finite(3.0));
        assert_eq!(" 2.5 ".parse::<Exponent>().unwrap(), Exponent::Finite(2.5));
        assert_eq!(Exponent::Finite(9.0).to_string(), "9");
        assert_eq!(Exponent::Infinity.to_string(), "inf");
        let json = serde_json::to_string(&[Exponent::Finite(1.0), Exponent::Infinity]).unwrap();
        assert_eq!(json, r#"[1.0,"inf"]"#);
        let back: Vec<Exponent> = serde_json::from_str(r#"[1, 2.5, "inf", "9"]"#).unwrap();
        assert_eq!(
            back,
            vec![
                Exponent::Finite(1.0),
                Exponent::Finite(2.5),
                Exponent::Infinity,
                Exponent::Finite(9.0)
            ]
        );
        assert!(serde_json::from_str::<Exponent>("0.5").is_err());
    }

    #[test]
    fn backward_average_pooling() {
        let spec = PoolingSpec::finite(1.0).unwrap();
        let g = lp_pool_backward(&[1.0, 2.0, 3.0, 4.0], &spec, 1.0).unwrap();
        assert_eq!(g, vec![0.25; 4]);
    }

    #[test]
    fn backward_l2_matches_finite_differences() {
        let spec = PoolingSpec::finite(2.0).unwrap();
        for map in [[3.0, 4.0], [-3.0, 4.0]] {
            let g = lp_pool_backward(&map, &spec, 1.0).unwrap();
            let fd = central_difference(&map, &spec, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-8, "{g:?} vs {fd:?}");
            }
            // frozen from the finite-difference oracle
            let expected = [map[0].signum() * 0.424264, 0.565685];
            for (a, b) in g.iter().zip(expected) {
                assert!((a - b).abs() < 1e-6, "{g:?}");
            }
        }
    }

    #[test]
    fn backward_zero_map_is_finite() {
        for p in [1.0, 2.0, 5.0] {
            let spec = PoolingSpec::finite(p).unwrap();
            let g = lp_pool_backward(&[0.0; 5], &spec, 1.0).unwrap();
            assert!(g.iter().all(|v| *v == 0.0));
        }
        let g = lp_pool_backward(&[0.0; 3], &PoolingSpec::infinity(), 2.0).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backward_infinity_routes_to_first_argmax() {
        let spec = PoolingSpec::infinity();
        let g = lp_pool_backward(&[1.0, -5.0, 5.0, 2.0], &spec, 3.0).unwrap();
        assert_eq!(g, vec![0.0, -3.0, 0.0, 0.0]);
    }

    #[test]
    fn large_exponent_is_stable() {
        let map: Vec<f64> = (0..500).map(|i| (i as f64) * 2.0 - 400.0).collect();
        let spec = PoolingSpec::finite(64.0).unwrap();
        let got = lp_pool_forward(&map, &spec).unwrap();
        assert!(got.is_finite());
        assert!(got <= 598.0 && got > 0.5 * 598.0);
        // naive form overflows here
        assert!(!naive(&[1e3, 1e3], 200.0).is_finite());
        let spec = PoolingSpec::finite(200.0).unwrap();
        assert!((lp_pool_forward(&[1e3, 1e3], &spec).unwrap() - 1e3).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn matches_naive_reference(
            map in prop::collection::vec(-10.0f64..10.0, 1..64),
            p in 1.0f64..12.0,
        ) {
            let spec = PoolingSpec::finite(p).unwrap();
            let got = lp_pool_forward(&map, &spec).unwrap();
            let want = naive(&map, p);
            prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0));
        }

        #[test]
        fn positively_homogeneous(
            map in prop::collection::vec(-100.0f64..100.0, 1..64),
            p in 1.0f64..20.0,
            c in 1e-3f64..1e3,
        ) {
            let spec = PoolingSpec::finite(p).unwrap();
            let base = lp_pool_forward(&map, &spec).unwrap();
            let scaled: Vec<f64> = map.iter().map(|v| v * c).collect();
            let got = lp_pool_forward(&scaled, &spec).unwrap();
            prop_assert!((got - c * base).abs() <= 1e-7 * (c * base).max(f64::MIN_POSITIVE));
        }

        #[test]
        fn gradient_matches_central_differences(
            map in prop::collection::vec(-10.0f64..10.0, 1..40),
            pi in 0usize..6,
        ) {
            let p = [1.0, 2.0, 3.0, 4.0, 5.0, 9.0][pi];
            let spec = PoolingSpec::finite(p).unwrap();
            let g = lp_pool_backward(&map, &spec, 1.0).unwrap();
            let fd = central_difference(&map, &spec, 1e-5);
            let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt()
                .max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
            prop_assert!(diff <= 1e-4 * norm.max(1e-12), "rel err {}", diff / norm);
        }
    }
}
