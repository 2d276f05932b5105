//! Decoding strategies with best-of selection.

use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddtm::{DdtmParams, DecodeMode};
use crate::env::trajectory_from_actions;
use crate::error::{CoreError, Result};
use crate::instance::{Instance, Transform};
use crate::oracle::Solution;
use crate::seeds::derive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    Sampling,
    Perm,
    PermAug,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Greedy, Strategy::Sampling, Strategy::Perm, Strategy::PermAug];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Greedy => "greedy",
            Self::Sampling => "sampling",
            Self::Perm => "perm",
            Self::PermAug => "perm-aug",
        })
    }
}

impl FromStr for Strategy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "sampling" => Ok(Self::Sampling),
            "perm" => Ok(Self::Perm),
            "perm-aug" => Ok(Self::PermAug),
            other => Err(CoreError::InvalidConfig(format!(
                "unknown strategy {other:?} (expected greedy, sampling, perm or perm-aug)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub strategy: Strategy,
    /// Sampled trajectories for [`Strategy::Sampling`].
    pub width: usize,
    pub seed: u64,
    /// Adds the greedy trajectory to the sampling pool.
    pub include_greedy: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            width: 1280,
            seed: 0,
            include_greedy: true,
        }
    }
}

impl InferConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy == Strategy::Sampling && self.width == 0 {
            return Err(CoreError::InvalidConfig("sampling width must be at least 1".into()));
        }
        Ok(())
    }
}

/// One decoding job: vehicle order, transform applied before decoding, mode.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    order_index: usize,
    transform: Transform,
    sample_seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferResult {
    pub solution: Solution,
    pub order: Vec<usize>,
    pub transform: &'static str,
    pub trajectories: usize,
}

/// Vehicle orders in lexicographic order, identity first.
pub fn vehicle_orders(k: usize) -> Vec<Vec<usize>> {
    (0..k).permutations(k).collect()
}

fn candidates(k: usize, cfg: &InferConfig) -> (Vec<Vec<usize>>, Vec<Candidate>) {
    let identity = Candidate {
        order_index: 0,
        transform: Transform::Identity,
        sample_seed: None,
    };
    match cfg.strategy {
        Strategy::Greedy => (vec![(0..k).collect()], vec![identity]),
        Strategy::Sampling => {
            let mut list = Vec::with_capacity(cfg.width + 1);
            if cfg.include_greedy {
                list.push(identity);
            }
            list.extend((0..cfg.width).map(|i| Candidate {
                sample_seed: Some(derive(cfg.seed, i as u64)),
                ..identity
            }));
            (vec![(0..k).collect()], list)
        }
        Strategy::Perm => {
            let orders = vehicle_orders(k);
            let list = (0..orders.len())
                .map(|order_index| Candidate { order_index, ..identity })
                .collect();
            (orders, list)
        }
        Strategy::PermAug => {
            let orders = vehicle_orders(k);
            let list = (0..orders.len())
                .flat_map(|order_index| {
                    Transform::ALL.into_iter().map(move |transform| Candidate {
                        order_index,
                        transform,
                        sample_seed: None,
                    })
                })
                .collect();
            (orders, list)
        }
    }
}

/// Decodes every candidate of the strategy and keeps the best objective;
/// ties go to the first in enumeration order. Actions decoded on a transformed
/// copy are replayed on `inst`.
pub fn infer(inst: &Instance, params: &DdtmParams, cfg: &InferConfig) -> Result<InferResult> {
    cfg.validate()?;
    let (orders, list) = candidates(inst.k(), cfg);
    let decoded: Vec<(f64, Vec<Vec<usize>>)> = list
        .par_iter()
        .map(|c| {
            let order = &orders[c.order_index];
            let mode = match c.sample_seed {
                Some(seed) => DecodeMode::Sample(seed),
                None => DecodeMode::Greedy,
            };
            let traj = if c.transform == Transform::Identity {
                params.rollout(inst, order, mode)?
            } else {
                let seen = c.transform.apply_instance(inst);
                let actions = params.rollout(&seen, order, mode)?.actions();
                trajectory_from_actions(inst, order, &actions, None)?
            };
            let routes = traj.routes;
            Ok((inst.objective_of(routes.iter().flatten().copied()), routes))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, (obj, _)) in decoded.iter().enumerate() {
        if *obj > decoded[best].0 {
            best = i;
        }
    }
    let winner = list[best];
    let routes = decoded.into_iter().nth(best).map(|(_, r)| r).unwrap_or_default();
    Ok(InferResult {
        solution: Solution::from_routes(inst, routes, false, 0),
        order: orders[winner.order_index].clone(),
        transform: winner.transform.label(),
        trajectories: list.len(),
    })
}

/// Best objectives of greedy, perm and perm-aug; errors if they are not
/// non-decreasing.
pub fn dominance_check(inst: &Instance, params: &DdtmParams) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (slot, s) in out.iter_mut().zip([Strategy::Greedy, Strategy::Perm, Strategy::PermAug]) {
        *slot = infer(inst, params, &InferConfig::with_strategy(s))?.solution.objective;
    }
    if out[0] > out[1] || out[1] > out[2] {
        return Err(CoreError::InvalidConfig(format!(
            "strategy rewards are not nested: greedy {}, perm {}, perm-aug {}",
            out[0], out[1], out[2]
        )));
    }
    Ok(out)
}
