use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// How training samples are spread over agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Random permutation cut into near-equal shards.
    Iid { seed: u64 },
    /// Agents `3d, 3d+1, 3d+2` split the samples of class `d` evenly.
    PerDigitGroups,
}

/// Splits `items` into `parts` contiguous runs whose sizes differ by at most one.
fn even_chunks(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        out.push(items[at..at + size].to_vec());
        at += size;
    }
    out
}

/// Sample indices held by each agent.
pub fn partition(data: &Dataset, n_agents: usize, mode: PartitionMode) -> Result<Vec<Vec<usize>>> {
    if n_agents == 0 {
        return Err(Error::Config("cannot partition over zero agents".into()));
    }
    match mode {
        PartitionMode::Iid { seed } => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut stream_rng(seed, 0));
            Ok(even_chunks(&order, n_agents))
        }
        PartitionMode::PerDigitGroups => {
            let classes = data.classes();
            if n_agents != 3 * classes {
                return Err(Error::Config(format!(
                    "per-digit groups need {} agents for {classes} classes, got {n_agents}",
                    3 * classes
                )));
            }
            let mut shards = Vec::with_capacity(n_agents);
            for digit in 0..classes {
                let members: Vec<usize> = (0..data.len())
                    .filter(|&i| data.labels()[i] as usize == digit)
                    .collect();
                shards.extend(even_chunks(&members, 3));
            }
            Ok(shards)
        }
    }
}
