//! Training state in one tensor container: parameters, momentum buffers and
//! the next iteration index.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use vip_tensor::io::{read_container, write_container, DType};
use vip_tensor::{ParamStore, Tensor};

use crate::error::{CoreError, Result};

const PARAM: &str = "param/";
const MOMENTUM: &str = "momentum/";
const ITER: &str = "state/iter";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Index of the next iteration to run.
    pub iter: usize,
    pub params: ParamStore,
    pub momentum: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let iter = Tensor::scalar(self.iter as f64);
        let names: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|p| (format!("{PARAM}{}", p.name), &p.value))
            .chain(self.momentum.iter().map(|(n, t)| (format!("{MOMENTUM}{n}"), t)))
            .chain(std::iter::once((ITER.to_string(), &iter)))
            .collect();
        let mut out = Vec::new();
        write_container(&mut out, names.iter().map(|(n, t)| (n.as_str(), *t)), DType::F64)?;
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut momentum = BTreeMap::new();
        let mut iter = None;
        for (name, t) in read_container(&mut bytes)? {
            if let Some(n) = name.strip_prefix(PARAM) {
                params.insert(n, t)?;
            } else if let Some(n) = name.strip_prefix(MOMENTUM) {
                momentum.insert(n.to_string(), t);
            } else if name == ITER {
                iter = Some(t.item() as usize);
            } else {
                return Err(CoreError::Invalid(format!("unexpected checkpoint entry {name}")));
            }
        }
        let iter = iter.ok_or_else(|| CoreError::Invalid("checkpoint lacks the iteration counter".into()))?;
        if let Some(n) = momentum.keys().find(|n| !params.contains(n)) {
            return Err(CoreError::Invalid(format!("momentum buffer {n} has no parameter")));
        }
        Ok(Self { iter, params, momentum })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| CoreError::data(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CoreError::data(path, e.to_string()))?;
        Self::from_bytes(&bytes).map_err(|e| CoreError::data(path, e.to_string()))
    }
}
