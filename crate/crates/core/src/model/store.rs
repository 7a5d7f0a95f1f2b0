use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{argument, structural, Result};
use crate::tensor::{Tensor, TensorMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    /// A LoRA `(A, B)` pair.
    Lora,
    /// A fully trainable hidden linear layer (weight + bias).
    Dense,
    Classifier,
}

/// The unit of layer assignment: a named set of parameters trained together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub name: String,
    pub kind: GroupKind,
    pub members: Vec<String>,
}

/// Ordered named parameters with trainable flags and layer grouping.
///
/// Entry order is insertion order and is what every replica iterates, so
/// perturbations drawn in this order line up across clients and server.
/// Parameters outside every group (frozen base weights) can never be made
/// trainable; group membership is what `freeze_except` toggles.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    groups: Vec<LayerGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(argument!("duplicate parameter name `{}`", name));
        }
        if !tensor.is_finite() {
            return Err(argument!("parameter `{}` has non-finite values", name));
        }
        self.params.insert(name, Param { tensor, trainable });
        Ok(())
    }

    pub fn add_group(&mut self, name: impl Into<String>, kind: GroupKind, members: &[&str]) -> Result<()> {
        let name = name.into();
        if self.groups.iter().any(|g| g.name == name) {
            return Err(argument!("duplicate group name `{}`", name));
        }
        if kind == GroupKind::Lora && members.len() != 2 {
            return Err(argument!("LoRA group `{}` must hold exactly A and B", name));
        }
        for m in members {
            if !self.params.contains_key(*m) {
                return Err(argument!("group `{}` references unknown param `{}`", name, m));
            }
            if let Some(g) = self.group_of(m) {
                return Err(argument!("param `{}` already belongs to group `{}`", m, g));
            }
        }
        self.groups.push(LayerGroup {
            name,
            kind,
            members: members.iter().map(|s| s.to_string()).collect(),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    /// Replace a parameter's values; shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| structural!("unknown parameter `{}`", name))?;
        p.tensor.ensure_same_shape(&tensor, name)?;
        p.tensor = tensor;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn groups(&self) -> &[LayerGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&LayerGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_of(&self, param: &str) -> Option<&str> {
        self.groups
            .iter()
            .find(|g| g.members.iter().any(|m| m == param))
            .map(|g| g.name.as_str())
    }

    /// Trainable parameter names in entry order.
    pub fn trainable_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn trainable_tensors(&self) -> TensorMap {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k.clone(), p.tensor.clone()))
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Group names with at least one trainable member, in group order.
    pub fn list_trainable_layers(&self) -> Vec<String> {
        self.groups
            .iter()
            .filter(|g| g.members.iter().any(|m| self.is_trainable(m)))
            .map(|g| g.name.clone())
            .collect()
    }

    /// Member tensors of a group, in entry order.
    pub fn group_tensors(&self, group: &str) -> Result<TensorMap> {
        let g = self
            .group(group)
            .ok_or_else(|| argument!("unknown group `{}`", group))?;
        let mut out = TensorMap::new();
        for (name, p) in &self.params {
            if g.members.contains(name) {
                out.insert(name.clone(), p.tensor.clone());
            }
        }
        Ok(out)
    }

    /// A copy in which exactly the named groups are trainable.
    pub fn freeze_except<S: AsRef<str>>(&self, groups: &[S]) -> Result<ParamStore> {
        let mut out = self.clone();
        out.set_trainable_groups(groups)?;
        Ok(out)
    }

    pub fn set_trainable_groups<S: AsRef<str>>(&mut self, groups: &[S]) -> Result<()> {
        for g in groups {
            if self.group(g.as_ref()).is_none() {
                return Err(argument!("unknown group `{}`", g.as_ref()));
            }
        }
        for p in self.params.values_mut() {
            p.trainable = false;
        }
        for g in &self.groups {
            if groups.iter().any(|s| s.as_ref() == g.name) {
                for m in &g.members {
                    self.params[m].trainable = true;
                }
            }
        }
        Ok(())
    }

    /// Checks that every trainable parameter belongs to exactly one group.
    pub fn validate(&self) -> Result<()> {
        for (name, p) in &self.params {
            let owners = self
                .groups
                .iter()
                .filter(|g| g.members.contains(name))
                .count();
            if owners > 1 {
                return Err(structural!("param `{}` is in {} groups", name, owners));
            }
            if p.trainable && owners == 0 {
                return Err(structural!("trainable param `{}` has no group", name));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("base", Tensor::zeros(&[2, 2]), false).unwrap();
        s.insert("a", Tensor::zeros(&[1, 2]), true).unwrap();
        s.insert("b", Tensor::zeros(&[2, 1]), true).unwrap();
        s.insert("w", Tensor::zeros(&[2]), true).unwrap();
        s.add_group("lora.0", GroupKind::Lora, &["a", "b"]).unwrap();
        s.add_group("classifier", GroupKind::Classifier, &["w"]).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.insert("a", Tensor::zeros(&[1]), true).is_err());
        assert!(s.add_group("x", GroupKind::Dense, &["a"]).is_err());
        assert!(s.add_group("y", GroupKind::Lora, &["base"]).is_err());
    }

    #[test]
    fn freeze_except_round_trip() {
        let s = store();
        s.validate().unwrap();
        let only = s.freeze_except(&["lora.0"]).unwrap();
        assert_eq!(only.trainable_names(), vec!["a", "b"]);
        assert_eq!(only.list_trainable_layers(), vec!["lora.0"]);
        let none = s.freeze_except::<&str>(&[]).unwrap();
        assert!(none.list_trainable_layers().is_empty());
        let all = none.freeze_except(&["lora.0", "classifier"]).unwrap();
        assert_eq!(all, s);
        assert!(s.freeze_except(&["nope"]).is_err());
    }

    #[test]
    fn set_keeps_shape() {
        let mut s = store();
        assert!(s.set("w", Tensor::zeros(&[3])).is_err());
        s.set("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, 2.0]);
    }
}
