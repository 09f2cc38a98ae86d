//! Query templates used by the experiments and the CLI.
//!
//! The numbered queries come in two flavours. The content versions use the
//! real pixel predicates. The analogs swap every predicate for a synthetic
//! one with fixed cost and selectivity, so energy and latency experiments do
//! not depend on what the photos look like. Both keep the face-texture-rgb
//! structure with costs decreasing in document order.

use sieve_core::predicates::names;
use sieve_core::query::{PredicateSpec, QuerySpec};

pub const CLOUDY_SKY_ID: u64 = 1001;
pub const QUERY_1_ID: u64 = 1101;
pub const QUERY_2_ID: u64 = 1102;
pub const QUERY_3_ID: u64 = 1103;
pub const ALL_ACCEPT_ID: u64 = 1100;

pub const NAMES: [&str; 6] = ["cloudy_sky", "all_accept", "query1", "query2", "query3", "query1_content"];

/// Blue photos with a cloud-like texture somewhere in them.
pub fn cloudy_sky() -> QuerySpec {
    QuerySpec::conjunction(
        CLOUDY_SKY_ID,
        vec![
            PredicateSpec::new(names::RGB_THRESHOLD).with_params(["B"]).with_threshold(180.0),
            PredicateSpec::new(names::TEXTURE).with_threshold(0.8),
        ],
    )
}

pub fn all_accept() -> QuerySpec {
    QuerySpec::conjunction(ALL_ACCEPT_ID, vec![PredicateSpec::new(names::ALL_ACCEPT)])
}

fn face() -> PredicateSpec {
    PredicateSpec::new(names::FACE_FRONT)
}

fn texture_analog() -> PredicateSpec {
    PredicateSpec::new(names::SYNTHETIC).with_params([0.6, 1.2, 2.0])
}

fn rgb_analog() -> PredicateSpec {
    PredicateSpec::new(names::SYNTHETIC).with_params([0.5, 0.2, 3.0])
}

/// Face, texture and blue threshold, most expensive first.
pub fn query1() -> QuerySpec {
    QuerySpec::conjunction(QUERY_1_ID, vec![face(), texture_analog(), rgb_analog()])
}

/// `query1` without the texture predicate.
pub fn query2() -> QuerySpec {
    QuerySpec::conjunction(QUERY_2_ID, vec![face(), rgb_analog()])
}

/// Face detection alone.
pub fn query3() -> QuerySpec {
    QuerySpec::conjunction(QUERY_3_ID, vec![face()])
}

pub fn query1_content() -> QuerySpec {
    QuerySpec::conjunction(
        QUERY_1_ID,
        vec![
            face(),
            PredicateSpec::new(names::TEXTURE).with_threshold(0.8),
            PredicateSpec::new(names::RGB_THRESHOLD).with_params(["B"]).with_threshold(180.0),
        ],
    )
}

pub fn by_name(name: &str) -> Option<QuerySpec> {
    Some(match name {
        "cloudy_sky" => cloudy_sky(),
        "all_accept" => all_accept(),
        "query1" => query1(),
        "query2" => query2(),
        "query3" => query3(),
        "query1_content" => query1_content(),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sieve_core::predicates::PredicateRegistry;
    use sieve_core::query::parse_query;

    #[test]
    fn every_template_validates_and_round_trips() {
        let reg = PredicateRegistry::builtin();
        for name in NAMES {
            let q = by_name(name).unwrap();
            assert!(q.validate(&reg).is_empty(), "{name}");
            assert_eq!(parse_query(&q.to_xml()).unwrap(), q, "{name}");
        }
        assert!(by_name("sunset").is_none());
    }

    #[test]
    fn derived_queries_drop_predicates_from_the_first() {
        let names = |q: QuerySpec| q.leaves().iter().map(|p| (p.name.clone(), p.parameters.clone())).collect::<Vec<_>>();
        let q1 = names(query1());
        assert_eq!(names(query2()), vec![q1[0].clone(), q1[2].clone()]);
        assert_eq!(names(query3()), vec![q1[0].clone()]);
    }
}
