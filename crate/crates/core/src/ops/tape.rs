use crate::error::{Error, Result};
use crate::ops::pool::PoolIndices;
use crate::tensor::{Scalar, Tensor, TensorShape};

/// Identity of one layer invocation site. `slot` distinguishes sub-layers of a
/// compound block (the two convolutions of a residual block, for example).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerKey {
    pub layer: u32,
    pub slot: u8,
}

impl LayerKey {
    pub const fn new(layer: u32) -> Self {
        Self { layer, slot: 0 }
    }

    pub const fn slot(self, slot: u8) -> Self {
        Self { layer: self.layer, slot }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Record<T: Scalar> {
    Conv { input: Tensor<T> },
    Relu { output: Tensor<T> },
    Pool { indices: PoolIndices },
    Unpool { indices: PoolIndices },
    Upsample { input_shape: TensorShape },
}

impl<T: Scalar> Record<T> {
    fn kind(&self) -> &'static str {
        match self {
            Record::Conv { .. } => "conv",
            Record::Relu { .. } => "relu",
            Record::Pool { .. } => "maxpool",
            Record::Unpool { .. } => "maxunpool",
            Record::Upsample { .. } => "upsample",
        }
    }
}

/// Stack of cached forward state. Every taped forward pushes one record and
/// the matching backward pops it, so backward calls must arrive in exact
/// reverse order and each record is consumed once.
#[derive(Clone, Debug, Default)]
pub struct LayerTape<T: Scalar> {
    records: Vec<(LayerKey, Record<T>)>,
}

impl<T: Scalar> LayerTape<T> {
    pub fn new() -> Self {
        Self { records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub(crate) fn push(&mut self, key: LayerKey, record: Record<T>) {
        self.records.push((key, record));
    }

    pub(crate) fn pop(&mut self, key: LayerKey, kind: &'static str) -> Result<Record<T>> {
        match self.records.pop() {
            None => Err(Error::Tape(format!("no record left for {kind} {key:?}"))),
            Some((k, r)) if k == key && r.kind() == kind => Ok(r),
            Some((k, r)) => Err(Error::Tape(format!("expected {kind} {key:?}, found {} {k:?}", r.kind()))),
        }
    }
}
