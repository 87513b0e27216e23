use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// The four disjoint parameter groups of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    /// Convolution filters and the first dense layer, used by every branch.
    Shared,
    /// Classifier hidden layer and class weights.
    Supervised,
    /// Context-prediction hidden layer and per-node context vectors.
    Semisup,
    /// Domain discriminator.
    Domain,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Shared, Group::Supervised, Group::Semisup, Group::Domain];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Shared => "shared",
            Group::Supervised => "supervised",
            Group::Semisup => "semisup",
            Group::Domain => "domain",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Row-sparse parameters only receive gradient on rows that were read;
    /// the optimizer visits those rows only.
    pub sparse_rows: bool,
    pub(crate) touched: Vec<usize>,
}

impl Param {
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub(crate) fn mark_row(&mut self, row: usize) {
        if !self.touched.contains(&row) {
            self.touched.push(row);
        }
    }

    pub fn zero_grad(&mut self) {
        if self.sparse_rows {
            let (_, cols) = self.value.rows_cols();
            for &r in &self.touched {
                self.grad[r * cols..(r + 1) * cols].fill(0.0);
            }
        } else {
            self.grad.fill(0.0);
        }
        self.touched.clear();
    }
}

/// Owner of every trainable parameter. Each parameter carries exactly one
/// [`Group`] tag, so groups are disjoint by construction.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.push(name.into(), group, value, false)
    }

    pub fn add_row_sparse(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.push(name.into(), group, value, true)
    }

    fn push(&mut self, name: String, group: Group, value: Tensor, sparse_rows: bool) -> ParamId {
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name,
            group,
            value,
            grad,
            sparse_rows,
            touched: Vec::new(),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn group_ids(&self, group: Group) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Order-sensitive digest of the values of one group, used to check which
    /// groups a training step touched.
    pub fn group_checksum(&self, group: Group) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| p.group == group) {
            for v in p.value.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn grad_norm_sq(&self, group: Group) -> f64 {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum()
    }

    /// Copies parameter values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
    }
}
