//! Named parameter storage.

use std::collections::HashMap;

use crate::autograd::{Gradients, Tape, Var};
use crate::model::batch::Modality;
use crate::error::{EvoError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Role of a parameter array; stage masks and evolution select by kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Norm,
    Attention,
    DenseFfn,
    Expert { layer: usize, expert: usize },
    SharedExpert { layer: usize },
    LinearRouter { layer: usize },
    Hypernet { layer: usize, modality: Modality },
    RouterHead { layer: usize },
}

impl ParamKind {
    pub fn is_router(self) -> bool {
        matches!(
            self,
            ParamKind::LinearRouter { .. } | ParamKind::Hypernet { .. } | ParamKind::RouterHead { .. }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal,
    /// Normal with an explicit standard deviation.
    NormalStd(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub init: Init,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, init: Init, shape: &[usize]) -> ParamId {
        let name = name.into();
        let id = ParamId(self.params.len());
        assert!(
            self.index.insert(name.clone(), id).is_none(),
            "duplicate parameter {name}"
        );
        let tensor = match init {
            Init::Ones => Tensor::from_fn(shape.to_vec(), |_| 1.0),
            _ => Tensor::zeros(shape.to_vec()),
        };
        self.params.push(Param {
            name,
            kind,
            init,
            tensor,
        });
        id
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

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.tensor(id))
    }

    /// Fills every parameter selected by `filter` from its init rule, drawing
    /// normals from `rng` in registration order.
    pub fn initialize(&mut self, rng: &mut Rng, mut filter: impl FnMut(&Param) -> bool) {
        for p in self.params.iter_mut().filter(|p| filter(p)) {
            let n = p.tensor.numel();
            let values = match p.init {
                Init::Normal => rng.normal_vec(n, 0.0, INIT_STD),
                Init::NormalStd(std) => rng.normal_vec(n, 0.0, std),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            p.tensor.data_mut().copy_from_slice(&values);
        }
    }

    pub fn set_trainable(&mut self, mut mask: impl FnMut(&Param) -> bool) {
        for p in &mut self.params {
            let on = mask(p);
            p.tensor.set_requires_grad(on);
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].tensor.requires_grad()
    }

    /// Copies the values of `src` into `dst`; shapes must agree.
    pub fn copy_values(&mut self, src: ParamId, dst: ParamId) {
        if src == dst {
            return;
        }
        let values = self.params[src.0].tensor.data().to_vec();
        self.params[dst.0].tensor.data_mut().copy_from_slice(&values);
    }

    pub fn assign(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let t = &mut self.params[id.0].tensor;
        if t.numel() != data.len() {
            return Err(EvoError::dim("assign", t.shape(), &[data.len()]));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Registers every parameter as a tape leaf, in store order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(&p.tensor)).collect()
    }

    pub fn accumulate(&mut self, vars: &[Var], grads: &Gradients) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            grads.accumulate_into(*v, &mut p.tensor);
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}
