use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{train, Dataset, MetricsRecord};
use crate::error::{Error, Result};
use crate::numerics::Real;

/// One configuration of an ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    /// Decomposition branch only.
    NoComp,
    /// Both branches, composing from the detached bank.
    Comp,
    /// Both branches, composing from the live batch.
    Attached,
    /// Both branches with one temporal network per head.
    PerHeadTcn,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::NoComp, Arm::Comp, Arm::Attached, Arm::PerHeadTcn];

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        c.composition = self != Arm::NoComp;
        c.attached_composition = self == Arm::Attached;
        if self == Arm::PerHeadTcn {
            c.shared_tcn = false;
        }
        c
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-comp" => Ok(Arm::NoComp),
            "comp" => Ok(Arm::Comp),
            "attached" => Ok(Arm::Attached),
            "per-head-tcn" => Ok(Arm::PerHeadTcn),
            _ => Err(Error::Config(format!("unknown arm `{s}`"))),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::NoComp => "no-comp",
            Arm::Comp => "comp",
            Arm::Attached => "attached",
            Arm::PerHeadTcn => "per-head-tcn",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    /// Validation metrics after the last epoch.
    pub metrics: MetricsRecord,
}

/// Trains every arm once per seed on the same data.
pub fn ablate<F: Real>(cfg: &RunConfig, data: &Dataset, arms: &[Arm], seeds: &[u64]) -> Result<Vec<ArmResult>> {
    let mut out = Vec::with_capacity(arms.len() * seeds.len());
    for &seed in seeds {
        for &arm in arms {
            let mut c = arm.apply(cfg);
            c.seed = seed;
            let run = train::<F>(&c, data, None, None)?;
            let metrics = run
                .history
                .last()
                .cloned()
                .ok_or_else(|| Error::Config("ablation needs at least one epoch".into()))?;
            log::info!("arm {arm} seed {seed}: top1 {:.4} tail {:?}", metrics.top1, metrics.tail_mean);
            out.push(ArmResult { arm, seed, metrics });
        }
    }
    Ok(out)
}
