use std::fmt;
use std::sync::Arc;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const DESCRIPTOR_LEN: usize = 128;

/// Unit-norm tolerance enforced at construction.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Non-negative, L2-normalized 128-component descriptor.
///
/// Storage is shared, so cloning a descriptor (e.g. when a frame keypoint is
/// promoted into a keyframe) does not copy the components.
#[derive(Clone, PartialEq)]
pub struct Descriptor(Arc<[f64; DESCRIPTOR_LEN]>);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DescriptorError {
    #[error("descriptor has a negative or non-finite component at {0}")]
    InvalidComponent(usize),
    #[error("descriptor norm {0} is not 1")]
    NotNormalized(f64),
    #[error("descriptor is all zeros")]
    Zero,
    #[error("expected {DESCRIPTOR_LEN} components, got {0}")]
    WrongLength(usize),
}

impl Descriptor {
    /// Validates non-negativity and unit norm.
    pub fn new(values: [f64; DESCRIPTOR_LEN]) -> Result<Self, DescriptorError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(DescriptorError::InvalidComponent(i));
        }
        let norm = norm(&values);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(DescriptorError::NotNormalized(norm));
        }
        Ok(Self(Arc::new(values)))
    }

    /// Clamps negative components to zero and rescales to unit norm.
    pub fn normalized(mut values: [f64; DESCRIPTOR_LEN]) -> Result<Self, DescriptorError> {
        for (i, v) in values.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(DescriptorError::InvalidComponent(i));
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let n = norm(&values);
        if n == 0.0 {
            return Err(DescriptorError::Zero);
        }
        values.iter_mut().for_each(|v| *v /= n);
        Ok(Self(Arc::new(values)))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self, DescriptorError> {
        let arr: [f64; DESCRIPTOR_LEN] = values
            .try_into()
            .map_err(|_| DescriptorError::WrongLength(values.len()))?;
        Self::new(arr)
    }

    /// Skips validation. Only for constructing deliberately invalid inputs.
    pub fn from_raw_unchecked(values: [f64; DESCRIPTOR_LEN]) -> Self {
        Self(Arc::new(values))
    }

    /// One-hot descriptor, handy for building orthogonal test sets.
    pub fn basis(index: usize) -> Self {
        let mut v = [0.0; DESCRIPTOR_LEN];
        v[index % DESCRIPTOR_LEN] = 1.0;
        Self(Arc::new(v))
    }

    pub fn values(&self) -> &[f64; DESCRIPTOR_LEN] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// Raw dot product, no validation.
    #[inline]
    pub fn dot(&self, other: &Descriptor) -> f64 {
        let a = &*self.0;
        let b = &*other.0;
        let mut acc = [0.0f64; 4];
        for i in (0..DESCRIPTOR_LEN).step_by(4) {
            acc[0] += a[i] * b[i];
            acc[1] += a[i + 1] * b[i + 1];
            acc[2] += a[i + 2] * b[i + 2];
            acc[3] += a[i + 3] * b[i + 3];
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3])
    }
}

fn norm(v: &[f64; DESCRIPTOR_LEN]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl AsRef<Descriptor> for Descriptor {
    fn as_ref(&self) -> &Descriptor {
        self
    }
}

impl fmt::Debug for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nz = self.0.iter().filter(|v| **v > 0.0).count();
        write!(f, "Descriptor(nnz={nz}, [{:.4}, {:.4}, ..])", self.0[0], self.0[1])
    }
}

impl Serialize for Descriptor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.as_slice().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Descriptor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Descriptor::from_slice(&v).map_err(D::Error::custom)
    }
}
