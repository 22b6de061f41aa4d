use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// The three disjoint parameter groups of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Encoder/decoder weights.
    Restoration,
    /// Degradation extractor, codebook and gate.
    Degradation,
    /// Domain adaptation module, only touched at test time.
    Adaptation,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::Restoration,
        ParamGroup::Degradation,
        ParamGroup::Adaptation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Restoration => "restoration",
            ParamGroup::Degradation => "degradation",
            ParamGroup::Adaptation => "adaptation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupMask([bool; 3]);

impl GroupMask {
    pub fn all() -> Self {
        GroupMask([true; 3])
    }

    pub fn none() -> Self {
        GroupMask([false; 3])
    }

    pub fn only(group: ParamGroup) -> Self {
        let mut m = [false; 3];
        m[group as usize] = true;
        GroupMask(m)
    }

    pub fn with(mut self, group: ParamGroup) -> Self {
        self.0[group as usize] = true;
        self
    }

    pub fn contains(self, group: ParamGroup) -> bool {
        self.0[group as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Registry of all named model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of scalar parameters, optionally restricted to one group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values of the selected
    /// groups, in registration order.
    pub fn digest(&self, groups: &[ParamGroup]) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
