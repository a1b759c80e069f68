//! Byzantine message crafting.
//!
//! Byzantine agents are omniscient: in round `k` they read every agent's
//! current model and the round's edge set before choosing what to send.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::model::ModelVec;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    /// Byzantine agents follow the protocol and send their true models.
    None,
    /// Each Byzantine neighbor of `i` sends `−(Σ_{l∈R_i} x_l)/|B_i|`.
    ZeroSum,
    /// Send `c·1`.
    SameValue { c: f64 },
    /// Send `γ` times the sender's true model, `γ < 0`.
    SignFlip { gamma: f64 },
    /// Send the model of one regular agent picked at setup.
    CopyRegular,
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AttackSpec::SameValue { c } if !c.is_finite() => Err(Error::Config(format!(
                "same-value constant {c} is not finite"
            ))),
            AttackSpec::SignFlip { gamma } if !(gamma < 0.0 && gamma.is_finite()) => Err(
                Error::Config(format!("sign-flip factor must be negative, got {gamma}")),
            ),
            _ => Ok(()),
        }
    }

    /// Whether Byzantine agents need a "true model" trained like a regular one.
    pub fn needs_true_model(&self) -> bool {
        matches!(self, AttackSpec::None | AttackSpec::SignFlip { .. })
    }
}

/// An attack with its setup-time choices fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Attack {
    Honest,
    ZeroSum,
    SameValue { c: f64 },
    SignFlip { gamma: f64 },
    CopyRegular { target: usize },
}

impl Attack {
    /// Fixes per-run choices (the copied agent) from `seed`.
    pub fn resolve(spec: AttackSpec, topology: &Topology, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(match spec {
            AttackSpec::None => Attack::Honest,
            AttackSpec::ZeroSum => Attack::ZeroSum,
            AttackSpec::SameValue { c } => Attack::SameValue { c },
            AttackSpec::SignFlip { gamma } => Attack::SignFlip { gamma },
            AttackSpec::CopyRegular => {
                let regular = topology.regular();
                let pick = stream_rng(seed, 0).random_range(0..regular.len());
                Attack::CopyRegular {
                    target: regular[pick],
                }
            }
        })
    }

    /// Messages do not depend on the receiver.
    pub fn is_broadcast(&self) -> bool {
        !matches!(self, Attack::ZeroSum)
    }
}

/// Read-only snapshot handed to a Byzantine sender in round `k`.
#[derive(Debug, Clone, Copy)]
pub struct OmniscientView<'a> {
    /// Current model of every agent, indexed by agent id. Entries of
    /// Byzantine agents are their true models (unused by most attacks).
    pub models: &'a [ModelVec],
    pub topology: &'a Topology,
    /// Round-`k` neighbor lists, indexed by agent id.
    pub neighbors: &'a [Vec<usize>],
    pub receiver: usize,
    pub sender: usize,
}

/// The vector `z_j^k` that Byzantine `view.sender` sends to `view.receiver`.
pub fn craft_message(attack: &Attack, view: &OmniscientView<'_>) -> Result<ModelVec> {
    let dim = view.models[view.receiver].dim();
    Ok(match *attack {
        Attack::Honest => view.models[view.sender].clone(),
        Attack::SameValue { c } => ModelVec::filled(dim, c),
        Attack::SignFlip { gamma } => {
            let mut z = view.models[view.sender].clone();
            z.scale(gamma);
            z
        }
        Attack::CopyRegular { target } => view.models[target].clone(),
        Attack::ZeroSum => {
            let mut sum = ModelVec::zeros(dim);
            let mut byzantine = 0usize;
            for &l in &view.neighbors[view.receiver] {
                if view.topology.is_byzantine(l) {
                    byzantine += 1;
                } else {
                    sum.axpy(1.0, &view.models[l]);
                }
            }
            if byzantine == 0 {
                return Err(Error::NoByzantineNeighbor {
                    receiver: view.receiver,
                });
            }
            sum.scale(-1.0 / byzantine as f64);
            sum
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Topology;

    fn neighbors(t: &Topology) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); t.n()];
        for &(i, j) in t.edges() {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    #[test]
    fn zero_sum_example() {
        // Receiver 0 with regular neighbors 1, 2 and Byzantine neighbors 3, 4.
        let t = Topology::new(5, [(0, 1), (0, 2), (0, 3), (0, 4)], [3, 4]).unwrap();
        let models: Vec<ModelVec> = vec![
            [0.0, 0.0].into(),
            [1.0, 2.0].into(),
            [3.0, 4.0].into(),
            [9.0, 9.0].into(),
            [9.0, 9.0].into(),
        ];
        let adj = neighbors(&t);
        let view = OmniscientView {
            models: &models,
            topology: &t,
            neighbors: &adj,
            receiver: 0,
            sender: 3,
        };
        let z = craft_message(&Attack::ZeroSum, &view).unwrap();
        assert_eq!(z.0, vec![-2.0, -3.0]);
        // Regular messages plus both Byzantine messages cancel.
        let total: Vec<f64> = (0..2)
            .map(|d| models[1][d] + models[2][d] + 2.0 * z[d])
            .collect();
        assert_eq!(total, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_sum_requires_byzantine_neighbor() {
        let t = Topology::new(3, [(0, 1)], [2]).unwrap();
        let models = vec![ModelVec::zeros(1); 3];
        let adj = neighbors(&t);
        let view = OmniscientView {
            models: &models,
            topology: &t,
            neighbors: &adj,
            receiver: 0,
            sender: 2,
        };
        assert!(matches!(
            craft_message(&Attack::ZeroSum, &view),
            Err(Error::NoByzantineNeighbor { receiver: 0 })
        ));
    }

    #[test]
    fn constant_and_scaled_messages() {
        let t = Topology::new(2, [(0, 1)], [1]).unwrap();
        let models: Vec<ModelVec> = vec![[0.0, 0.0, 0.0].into(), [0.5, -1.0, 0.0].into()];
        let adj = neighbors(&t);
        let view = OmniscientView {
            models: &models,
            topology: &t,
            neighbors: &adj,
            receiver: 0,
            sender: 1,
        };
        let same = craft_message(&Attack::SameValue { c: 100.0 }, &view).unwrap();
        assert_eq!(same.0, vec![100.0; 3]);
        let flip = craft_message(&Attack::SignFlip { gamma: -4.0 }, &view).unwrap();
        assert_eq!(flip.0, vec![-2.0, 4.0, 0.0]);
        let honest = craft_message(&Attack::Honest, &view).unwrap();
        assert_eq!(honest, models[1]);
    }

    #[test]
    fn copy_regular_target_is_regular_and_fixed() {
        let t = Topology::complete(6).with_byzantine([1, 4]).unwrap();
        for seed in 0..20 {
            let a = Attack::resolve(AttackSpec::CopyRegular, &t, seed).unwrap();
            let Attack::CopyRegular { target } = a else {
                panic!("wrong variant")
            };
            assert!(!t.is_byzantine(target));
            assert_eq!(
                a,
                Attack::resolve(AttackSpec::CopyRegular, &t, seed).unwrap()
            );
        }
    }

    #[test]
    fn spec_validation() {
        assert!(AttackSpec::SignFlip { gamma: 2.0 }.validate().is_err());
        assert!(AttackSpec::SignFlip { gamma: -4.0 }.validate().is_ok());
        assert!(AttackSpec::SameValue { c: f64::NAN }.validate().is_err());
        assert!(AttackSpec::SignFlip { gamma: -1.0 }.needs_true_model());
        assert!(!AttackSpec::ZeroSum.needs_true_model());
    }

    #[test]
    fn broadcast_attacks_ignore_receiver() {
        let t = Topology::complete(4).with_byzantine([3]).unwrap();
        let models: Vec<ModelVec> = (0..4).map(|i| ModelVec::filled(2, i as f64)).collect();
        let adj = neighbors(&t);
        for attack in [
            Attack::SameValue { c: 3.0 },
            Attack::CopyRegular { target: 1 },
            Attack::SignFlip { gamma: -2.0 },
        ] {
            assert!(attack.is_broadcast());
            let msgs: Vec<ModelVec> = (0..3)
                .map(|r| {
                    let view = OmniscientView {
                        models: &models,
                        topology: &t,
                        neighbors: &adj,
                        receiver: r,
                        sender: 3,
                    };
                    craft_message(&attack, &view).unwrap()
                })
                .collect();
            assert!(msgs.windows(2).all(|w| w[0] == w[1]));
        }
    }
}
