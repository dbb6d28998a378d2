#![allow(dead_code)]

use amtpp_core::data::{Trip, UserSequence};
use amtpp_core::ModelConfig;

/// 2 heads, K = 2, r = 2, c = 8 over 5 stations.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        stations: 5,
        components: 2,
        od_rank: 2,
        origin_dim: 4,
        dest_dim: 4,
        hour_dim: 4,
        week_dim: 4,
        heads: 2,
        key_dim: 3,
        value_dim: 3,
        model_dim: 8,
        ..ModelConfig::default()
    }
}

pub fn seq(user: &str, trips: &[(i64, usize, usize)]) -> UserSequence {
    let trips = trips.iter().map(|&(t, o, d)| Trip { t, o, d }).collect();
    UserSequence::new(user, trips, 5, 0).unwrap()
}

const H: i64 = 3600;

/// Two users with three trips each.
pub fn micro_users() -> Vec<UserSequence> {
    vec![
        seq("a", &[(7 * H, 0, 1), (17 * H, 1, 0), (31 * H, 0, 2)]),
        seq("b", &[(5 * H + 900, 3, 4), (13 * H, 4, 2), (40 * H + 120, 2, 3)]),
    ]
}
