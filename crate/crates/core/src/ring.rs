//! Unit-circle hashing and the weighted distance ordering used for placement.
//!
//! Servers and functions both map to points on `[0, 1)`. A function prefers the
//! server closest clockwise from it; the log-transformed gap `-ln(1 - g)` is divided
//! by a per-server weight so heavier servers claim a larger share of the circle.

use std::cmp::Ordering;

use thiserror::Error;

use crate::model::ServerState;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RingError {
    #[error("weight for server {id} must be positive and finite, got {weight}")]
    NonPositiveWeight { id: String, weight: f64 },
    #[error("cannot order an empty server list")]
    Empty,
}

/// A point on the unit circle, always in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RingPoint(f64);

impl RingPoint {
    pub fn new(position: f64) -> Option<RingPoint> {
        (0.0..1.0).contains(&position).then_some(RingPoint(position))
    }

    pub fn position(self) -> f64 {
        self.0
    }
}

pub fn fnv1a_64(key: &[u8]) -> u64 {
    key.iter().fold(FNV_OFFSET_BASIS, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

/// FNV-1a 64 digest scaled to `[0, 1)`.
///
/// Only the top 53 bits are kept so the quotient is exactly representable and can
/// never round up to 1.0.
pub fn hash_to_unit(key: &[u8]) -> RingPoint {
    let digest = fnv1a_64(key);
    RingPoint((digest >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
}

/// `-ln((1 - (server - function)) mod 1)`, with zero gap defined as 0.
///
/// Equivalent to `-ln(1 - g)` where `g` is the clockwise gap from the function to the
/// server. The two branches avoid forming `1 - d` when `d < 0`, which would lose the
/// low bits of tiny negative differences.
pub fn distance(server: RingPoint, function: RingPoint) -> f64 {
    let d = server.0 - function.0;
    if d > 0.0 {
        -(-d).ln_1p()
    } else if d < 0.0 {
        -(-d).ln()
    } else {
        0.0
    }
}

/// Orders servers ascending by `distance / weight`, ties broken by id.
pub fn sort_servers<'a>(
    servers: &[(&'a ServerState, f64)],
    function: RingPoint,
) -> Result<Vec<&'a ServerState>, RingError> {
    let order = weighted_order(
        servers.iter().map(|(s, w)| (s.id.as_str(), s.ring_position, *w)),
        function,
    )?;
    Ok(order.into_iter().map(|i| servers[i].0).collect())
}

/// Index form of [`sort_servers`]: takes `(id, ring position, weight)` triples and
/// returns input indices in placement order.
pub fn weighted_order<'a>(
    members: impl IntoIterator<Item = (&'a str, f64, f64)>,
    function: RingPoint,
) -> Result<Vec<usize>, RingError> {
    let mut keyed = Vec::new();
    for (idx, (id, pos, weight)) in members.into_iter().enumerate() {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(RingError::NonPositiveWeight {
                id: id.to_string(),
                weight,
            });
        }
        let point = RingPoint(pos.rem_euclid(1.0));
        keyed.push((distance(point, function) / weight, id, idx));
    }
    if keyed.is_empty() {
        return Err(RingError::Empty);
    }
    keyed.sort_by(|a, b| match a.0.total_cmp(&b.0) {
        Ordering::Equal => a.1.cmp(b.1),
        other => other,
    });
    Ok(keyed.into_iter().map(|(_, _, idx)| idx).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(x: f64) -> RingPoint {
        RingPoint::new(x).unwrap()
    }

    fn server(id: &str, pos: f64) -> ServerState {
        let mut s = ServerState::new(id, "loc", 3, 3.0, 7.0);
        s.ring_position = pos;
        s
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a_64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a_64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a_64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_key_maps_to_offset_basis() {
        let p = hash_to_unit(b"").position();
        assert!((p - 0.796_670_728_483_271_3).abs() < 1e-15, "{p}");
    }

    #[test]
    fn hashing_is_deterministic() {
        let a = hash_to_unit(b"server-0");
        let b = hash_to_unit(b"server-0");
        assert_eq!(a, b);
        assert!((a.position() - 0.373_979_839_340_361_5).abs() < 1e-15);
    }

    #[test]
    fn corpus_positions_do_not_collide() {
        let mut keys: Vec<String> = (0..500).map(|i| format!("fn-{i:04}")).collect();
        keys.extend((0..18).map(|i| format!("server-{i}")));
        let mut pos: Vec<f64> = keys.iter().map(|k| hash_to_unit(k.as_bytes()).position()).collect();
        pos.sort_by(f64::total_cmp);
        pos.dedup();
        assert_eq!(pos.len(), keys.len());
    }

    #[test]
    fn distance_hand_values() {
        assert!((distance(pt(0.30), pt(0.25)) - 0.051_293).abs() < 1e-6);
        assert!((distance(pt(0.20), pt(0.25)) - 2.995_732).abs() < 1e-6);
        assert_eq!(distance(pt(0.4), pt(0.4)), 0.0);
    }

    #[test]
    fn distance_matches_literal_formula_away_from_zero_gap() {
        for &(s, f) in &[(0.9, 0.1), (0.1, 0.9), (0.5, 0.25), (0.0, 0.75)] {
            let literal = -(1.0f64 - (s - f)).rem_euclid(1.0).ln();
            assert!((distance(pt(s), pt(f)) - literal).abs() < 1e-12);
        }
    }

    #[test]
    fn sort_hand_example() {
        let a = server("A", 0.30);
        let b = server("B", 0.20);
        let order = sort_servers(&[(&b, 0.25), (&a, 0.75)], pt(0.25)).unwrap();
        assert_eq!(order[0].id, "A");
        assert_eq!(order[1].id, "B");
        let ka = distance(pt(0.30), pt(0.25)) / 0.75;
        let kb = distance(pt(0.20), pt(0.25)) / 0.25;
        assert!((ka - 0.068_391).abs() < 1e-6);
        assert!((kb - 11.982_93).abs() < 1e-5);
    }

    #[test]
    fn ties_break_by_id() {
        let x = server("x", 0.5);
        let y = server("y", 0.5);
        let order = sort_servers(&[(&y, 1.0), (&x, 1.0)], pt(0.3)).unwrap();
        assert_eq!(order.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["x", "y"]);
    }

    #[test]
    fn singleton_and_errors() {
        let a = server("a", 0.1);
        assert_eq!(sort_servers(&[(&a, 2.0)], pt(0.5)).unwrap()[0].id, "a");
        assert!(matches!(
            sort_servers(&[(&a, 0.0)], pt(0.5)),
            Err(RingError::NonPositiveWeight { .. })
        ));
        assert!(matches!(
            sort_servers(&[(&a, -1.0)], pt(0.5)),
            Err(RingError::NonPositiveWeight { .. })
        ));
        assert_eq!(sort_servers(&[], pt(0.5)), Err(RingError::Empty));
    }

    proptest! {
        #[test]
        fn order_is_a_permutation(
            members in prop::collection::vec((0.0f64..1.0, 0.01f64..10.0), 1..12),
            f in 0.0f64..1.0,
        ) {
            let ids: Vec<String> = (0..members.len()).map(|i| format!("s{i}")).collect();
            let order = weighted_order(
                members.iter().zip(&ids).map(|((p, w), id)| (id.as_str(), *p, *w)),
                pt(f),
            ).unwrap();
            let mut seen = order.clone();
            seen.sort();
            prop_assert_eq!(seen, (0..members.len()).collect::<Vec<_>>());
        }

        #[test]
        fn hash_is_in_unit_interval(key in prop::collection::vec(any::<u8>(), 0..64)) {
            let p = hash_to_unit(&key).position();
            prop_assert!((0.0..1.0).contains(&p));
        }
    }
}
