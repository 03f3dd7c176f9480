#![allow(dead_code)]

use bpre_core::env_model::DEFAULT_SUPPORT_LIMIT;
use bpre_core::EnvironmentModel;

pub fn gw_half() -> EnvironmentModel {
    EnvironmentModel::from_pmfs("GW-HALF", &[(1.0, vec![(1, 0.5), (2, 0.5)])], DEFAULT_SUPPORT_LIMIT).unwrap()
}

pub fn two_env() -> EnvironmentModel {
    EnvironmentModel::from_pmfs(
        "MODEL-2ENV",
        &[(0.5, vec![(1, 0.5), (2, 0.5)]), (0.5, vec![(1, 0.2), (2, 0.8)])],
        DEFAULT_SUPPORT_LIMIT,
    )
    .unwrap()
}

pub fn geo_half() -> EnvironmentModel {
    EnvironmentModel::geometric(&[(1.0, 0.5)], 1e-12, DEFAULT_SUPPORT_LIMIT).unwrap()
}

pub fn fixtures() -> Vec<EnvironmentModel> {
    vec![gw_half(), two_env(), geo_half()]
}

/// Root of `0.5 (1.5^{-r} + 1.8^{-r}) = 0.35` by plain bisection.
pub fn two_env_r1() -> f64 {
    let f = |r: f64| 0.5 * (1.5f64.powf(-r) + 1.8f64.powf(-r)) - 0.35;
    let (mut lo, mut hi) = (0.0f64, 10.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
