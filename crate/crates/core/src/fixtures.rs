//! Bundled test instances, embedded at compile time.
//!
//! Every generated kernel has a matching config under `fixtures/configs/` that
//! reproduces it byte for byte with `trackmdp gen-kernel`.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::grid::{Grid, RewardParams};
use crate::kernel::TransitionKernel;

const MANIFEST: &str = include_str!("../fixtures/manifest.json");

const KERNELS: &[(&str, &str)] = &[
    ("1x1", include_str!("../fixtures/kernels/1x1.json")),
    ("2x2_z2", include_str!("../fixtures/kernels/2x2_z2.json")),
    ("2x2_z3", include_str!("../fixtures/kernels/2x2_z3.json")),
    ("2x2_z4", include_str!("../fixtures/kernels/2x2_z4.json")),
    ("3x3_a", include_str!("../fixtures/kernels/3x3_a.json")),
    ("3x3_b", include_str!("../fixtures/kernels/3x3_b.json")),
    ("3x3_c", include_str!("../fixtures/kernels/3x3_c.json")),
    ("3x3_irregular", include_str!("../fixtures/kernels/3x3_irregular.json")),
    ("5x5_z3", include_str!("../fixtures/kernels/5x5_z3.json")),
];

/// Smallest suite an instance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureLevel {
    Fast,
    Full,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    kernel: String,
    c: f64,
    t_max: usize,
    level: FixtureLevel,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    instances: Vec<Entry>,
}

/// A kernel with reward parameters `r = 1`, `D = N²c`, `γ = 1`.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub kernel_name: String,
    pub kernel: TransitionKernel,
    pub params: RewardParams,
    pub level: FixtureLevel,
}

impl Fixture {
    pub fn grid(&self) -> Grid {
        self.kernel.grid()
    }
}

/// Raw JSON of a bundled kernel.
pub fn kernel_text(name: &str) -> Option<&'static str> {
    KERNELS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Every bundled instance, in manifest order.
pub fn all() -> Result<Vec<Fixture>> {
    let m: Manifest = serde_json::from_str(MANIFEST)?;
    if m.version != 1 {
        return Err(Error::Config(format!("unsupported manifest version {}", m.version)));
    }
    m.instances
        .into_iter()
        .map(|e| {
            let text = kernel_text(&e.kernel)
                .ok_or_else(|| Error::Config(format!("unknown fixture kernel {}", e.kernel)))?;
            let kernel = TransitionKernel::from_json(text)?;
            let params = RewardParams::experiment(kernel.grid(), e.c, e.t_max)?;
            Ok(Fixture {
                name: e.name,
                kernel_name: e.kernel,
                kernel,
                params,
                level: e.level,
            })
        })
        .collect()
}

/// Instances up to and including `level`.
pub fn up_to(level: FixtureLevel) -> Result<Vec<Fixture>> {
    Ok(all()?.into_iter().filter(|f| f.level <= level).collect())
}

pub fn by_name(name: &str) -> Result<Fixture> {
    all()?
        .into_iter()
        .find(|f| f.name == name)
        .ok_or_else(|| Error::Config(format!("no fixture named {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_loads() {
        let f = all().unwrap();
        assert_eq!(f.len(), 12);
        assert_eq!(up_to(FixtureLevel::Fast).unwrap().len(), 11);
        let a = by_name("3x3_a").unwrap();
        assert_eq!(a.grid().n, 3);
        assert!((a.params.d - 1.8).abs() < 1e-12);
    }
}
