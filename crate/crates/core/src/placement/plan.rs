//! Per-structure placement plans and the named presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{PlacementError, PlacementPolicy, Topology};

/// The shared lookup data structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Structure {
    UnionEnergies,
    IndexTable,
    NuclideGrids,
    Materials,
}

impl Structure {
    pub const ALL: [Structure; 4] = [
        Structure::UnionEnergies,
        Structure::IndexTable,
        Structure::NuclideGrids,
        Structure::Materials,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementPlan {
    pub union_energies: PlacementPolicy,
    pub index_table: PlacementPolicy,
    pub nuclide_grids: PlacementPolicy,
    pub materials: PlacementPolicy,
}

impl PlacementPlan {
    pub fn uniform(policy: PlacementPolicy) -> Self {
        Self {
            union_energies: policy.clone(),
            index_table: policy.clone(),
            nuclide_grids: policy.clone(),
            materials: policy,
        }
    }

    pub fn get(&self, s: Structure) -> &PlacementPolicy {
        match s {
            Structure::UnionEnergies => &self.union_energies,
            Structure::IndexTable => &self.index_table,
            Structure::NuclideGrids => &self.nuclide_grids,
            Structure::Materials => &self.materials,
        }
    }

    pub fn normalized(&self, topo: &Topology) -> Result<Self, PlacementError> {
        Ok(Self {
            union_energies: self.union_energies.normalized(topo)?,
            index_table: self.index_table.normalized(topo)?,
            nuclide_grids: self.nuclide_grids.normalized(topo)?,
            materials: self.materials.normalized(topo)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Everything first-touched by the master thread.
    Default,
    /// Every structure page-interleaved over all domains.
    InterleaveAll,
    /// Replicated nuclide grids, interleaved unionized grid, local material table.
    Numag,
    /// As `Numag`, with the nuclide grid replicas on huge pages.
    NumagHugetlb,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Default, Preset::InterleaveAll, Preset::Numag, Preset::NumagHugetlb];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Default => "default",
            Preset::InterleaveAll => "interleave-all",
            Preset::Numag => "numag",
            Preset::NumagHugetlb => "numag-hugetlb",
        }
    }

    pub fn plan(self, topo: &Topology) -> PlacementPlan {
        let il = PlacementPolicy::interleave_all(topo);
        let rep = PlacementPolicy::replicate_all(topo);
        match self {
            Preset::Default => PlacementPlan::uniform(PlacementPolicy::FirstTouch),
            Preset::InterleaveAll => PlacementPlan::uniform(il),
            Preset::Numag | Preset::NumagHugetlb => {
                // the material table is a few KB; a copy per domain keeps it local
                let grids = if self == Preset::NumagHugetlb {
                    PlacementPolicy::huge(rep.clone())
                } else {
                    rep.clone()
                };
                PlacementPlan {
                    union_energies: il.clone(),
                    index_table: il,
                    nuclide_grids: grids,
                    materials: rep,
                }
            }
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(Preset::Default),
            "interleave-all" | "numactl" => Ok(Preset::InterleaveAll),
            "numag" => Ok(Preset::Numag),
            "numag-hugetlb" | "numag+hugetlb" => Ok(Preset::NumagHugetlb),
            _ => Err(format!(
                "unknown policy '{s}' (expected default, interleave-all, numag, numag-hugetlb)"
            )),
        }
    }
}
