use std::fmt;

use crate::error::{Error, Result};

/// Element type of a reduction buffer. Values are little-endian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    I32,
    I64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::I32 => 3,
            DType::I64 => 4,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I32 => "i32",
            DType::I64 => "i64",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Min,
    Max,
}

impl ReduceOp {
    pub(crate) fn code(self) -> u8 {
        match self {
            ReduceOp::Sum => 1,
            ReduceOp::Min => 2,
            ReduceOp::Max => 3,
        }
    }
}

impl fmt::Display for ReduceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Min => "min",
            ReduceOp::Max => "max",
        };
        f.write_str(s)
    }
}

/// Scalar types a reduction can run over.
pub trait Element: Copy + Send + Sync + 'static {
    const DTYPE: DType;
    fn read(bytes: &[u8]) -> Self;
    fn write(self, out: &mut [u8]);
    /// `incoming (op) own`, in that operand order.
    fn combine(op: ReduceOp, incoming: Self, own: Self) -> Self;
}

macro_rules! float_element {
    ($t:ty, $d:expr) => {
        impl Element for $t {
            const DTYPE: DType = $d;
            fn read(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().unwrap())
            }
            fn write(self, out: &mut [u8]) {
                out.copy_from_slice(&self.to_le_bytes());
            }
            fn combine(op: ReduceOp, incoming: Self, own: Self) -> Self {
                match op {
                    ReduceOp::Sum => incoming + own,
                    ReduceOp::Min => {
                        if own < incoming {
                            own
                        } else {
                            incoming
                        }
                    }
                    ReduceOp::Max => {
                        if own > incoming {
                            own
                        } else {
                            incoming
                        }
                    }
                }
            }
        }
    };
}

macro_rules! int_element {
    ($t:ty, $d:expr) => {
        impl Element for $t {
            const DTYPE: DType = $d;
            fn read(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().unwrap())
            }
            fn write(self, out: &mut [u8]) {
                out.copy_from_slice(&self.to_le_bytes());
            }
            fn combine(op: ReduceOp, incoming: Self, own: Self) -> Self {
                match op {
                    ReduceOp::Sum => incoming.wrapping_add(own),
                    ReduceOp::Min => incoming.min(own),
                    ReduceOp::Max => incoming.max(own),
                }
            }
        }
    };
}

float_element!(f32, DType::F32);
float_element!(f64, DType::F64);
int_element!(i32, DType::I32);
int_element!(i64, DType::I64);

fn combine_as<T: Element>(op: ReduceOp, incoming: &[u8], own: &mut [u8]) {
    let n = T::DTYPE.size();
    for (a, b) in incoming.chunks_exact(n).zip(own.chunks_exact_mut(n)) {
        T::combine(op, T::read(a), T::read(b)).write(b);
    }
}

/// `own[i] = incoming[i] (op) own[i]` elementwise over raw buffers.
pub fn combine_bytes(dtype: DType, op: ReduceOp, incoming: &[u8], own: &mut [u8]) -> Result<()> {
    if incoming.len() != own.len() || !own.len().is_multiple_of(dtype.size()) {
        return Err(Error::ShapeMismatch(format!(
            "cannot combine {} and {} bytes of {dtype}",
            incoming.len(),
            own.len()
        )));
    }
    match dtype {
        DType::F32 => combine_as::<f32>(op, incoming, own),
        DType::F64 => combine_as::<f64>(op, incoming, own),
        DType::I32 => combine_as::<i32>(op, incoming, own),
        DType::I64 => combine_as::<i64>(op, incoming, own),
    }
    Ok(())
}

/// Little-endian encoding of a slice of elements.
pub fn to_bytes<T: Element>(values: &[T]) -> Vec<u8> {
    let n = T::DTYPE.size();
    let mut out = vec![0u8; values.len() * n];
    for (v, slot) in values.iter().zip(out.chunks_exact_mut(n)) {
        v.write(slot);
    }
    out
}

pub fn from_bytes<T: Element>(bytes: &[u8]) -> Vec<T> {
    bytes.chunks_exact(T::DTYPE.size()).map(T::read).collect()
}
