use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::diffusion::model::DenoiserGraph;

/// The time embedding together with every block's embedding layer, as one
/// unit for reconstruction and calibration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalInformationBlock {
    pub weight_sites: BTreeSet<String>,
    pub activation_sites: BTreeSet<String>,
    pub blocks: usize,
}

impl TemporalInformationBlock {
    pub fn contains_layer(&self, layer: &str) -> bool {
        self.weight_sites.contains(layer)
    }

    pub fn contains_site(&self, site: &str) -> bool {
        self.activation_sites.contains(site)
    }
}

pub fn build_tib(model: &DenoiserGraph) -> TemporalInformationBlock {
    TemporalInformationBlock {
        weight_sites: model.tib_layers().into_iter().collect(),
        activation_sites: model.tib_activation_sites().into_iter().collect(),
        blocks: model.config().blocks,
    }
}

/// Layers outside the time-information block, in forward order.
pub fn non_tib_layers(model: &DenoiserGraph, tib: &TemporalInformationBlock) -> Vec<String> {
    model.layers().into_iter().filter(|l| !tib.contains_layer(l)).collect()
}

pub fn non_tib_activation_sites(model: &DenoiserGraph, tib: &TemporalInformationBlock) -> Vec<String> {
    model
        .activation_sites()
        .into_iter()
        .filter(|s| !tib.contains_site(s))
        .collect()
}
