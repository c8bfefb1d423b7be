//! Parameter containers and the elementwise vector-space operations that
//! every averaging scheme is built from.
//!
//! A [`ParameterSet`] is an ordered list of named tensors sharing one element
//! type. Library-level operations return new sets; the training engine and
//! optimizers mutate through [`Tensor::update`] on sets they own.

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected = element_count(&shape).ok_or_else(|| Error::InvalidSet(format!("shape {shape:?} overflows")))?;
        if expected != data.len() {
            return Err(Error::InvalidSet(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, TensorData::F64(values))
    }

    pub fn from_f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, TensorData::F32(values))
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let n = element_count(&shape).expect("tensor shape overflows usize");
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::F64 => TensorData::F64(vec![0.0; n]),
        };
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => f64::from(v[i]),
            TensorData::F64(v) => v[i],
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Borrow the values when the tensor is already f64.
    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    pub fn as_f64_mut(&mut self) -> Option<&mut [f64]> {
        match &mut self.data {
            TensorData::F64(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    /// Rewrite every element as `f(index, old)`, computed in f64 and cast
    /// back to the tensor's element type.
    pub fn update(&mut self, mut f: impl FnMut(usize, f64) -> f64) {
        match &mut self.data {
            TensorData::F32(v) => {
                for (i, x) in v.iter_mut().enumerate() {
                    *x = f(i, f64::from(*x)) as f32;
                }
            }
            TensorData::F64(v) => {
                for (i, x) in v.iter_mut().enumerate() {
                    *x = f(i, *x);
                }
            }
        }
    }

    pub fn assign(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.len(), "assign length mismatch");
        self.update(|i, _| values[i]);
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        let data = match (dtype, &self.data) {
            (DType::F32, TensorData::F32(v)) => TensorData::F32(v.clone()),
            (DType::F64, TensorData::F64(v)) => TensorData::F64(v.clone()),
            (DType::F32, TensorData::F64(v)) => TensorData::F32(v.iter().map(|&x| x as f32).collect()),
            (DType::F64, TensorData::F32(v)) => TensorData::F64(v.iter().map(|&x| f64::from(x)).collect()),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        match &self.data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    /// Equality of the raw element bytes, so NaN payloads and signed zeros
    /// count as distinct.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (TensorData::F64(a), TensorData::F64(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            _ => false,
        }
    }
}

/// Ordered, uniquely named collection of tensors of one element type.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut seen = HashSet::new();
        let dtype = entries.first().map(|(_, t)| t.dtype());
        for (name, tensor) in &entries {
            if name.is_empty() {
                return Err(Error::InvalidSet("empty entry name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidSet(format!("duplicate entry name `{name}`")));
            }
            if Some(tensor.dtype()) != dtype {
                return Err(Error::InvalidSet(format!(
                    "entry `{name}` is {} but the set is {}",
                    tensor.dtype(),
                    dtype.expect("nonempty")
                )));
            }
        }
        Ok(ParameterSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Element type shared by all entries; `None` for the empty set.
    pub fn dtype(&self) -> Option<DType> {
        self.entries.first().map(|(_, t)| t.dtype())
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    /// Checks names, order, shapes and element types against `other`,
    /// reporting the first entry that differs.
    pub fn check_structure(&self, other: &ParameterSet) -> Result<()> {
        for (i, ((na, ta), (nb, tb))) in self.entries.iter().zip(&other.entries).enumerate() {
            if na != nb {
                return Err(Error::mismatch(
                    na.clone(),
                    format!("position {i} is `{nb}` in the other set"),
                ));
            }
            if ta.shape != tb.shape {
                return Err(Error::mismatch(
                    na.clone(),
                    format!("shape {:?} vs {:?}", ta.shape, tb.shape),
                ));
            }
            if ta.dtype() != tb.dtype() {
                return Err(Error::mismatch(
                    na.clone(),
                    format!("dtype {} vs {}", ta.dtype(), tb.dtype()),
                ));
            }
        }
        if self.len() != other.len() {
            let longer = if self.len() > other.len() { self } else { other };
            let extra = &longer.entries[self.len().min(other.len())].0;
            return Err(Error::mismatch(
                extra.clone(),
                format!("entry count {} vs {}", self.len(), other.len()),
            ));
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.entries.iter().find(|(_, t)| !t.is_finite()) {
            Some((name, _)) => Err(Error::NonFinite { entry: name.clone() }),
            None => Ok(()),
        }
    }

    /// `self + c * src`, elementwise.
    pub fn add_scaled(&self, src: &ParameterSet, c: f64) -> Result<ParameterSet> {
        self.check_structure(src)?;
        let mut out = self.clone();
        for ((_, dst), (_, s)) in out.entries.iter_mut().zip(&src.entries) {
            dst.update(|i, x| x + c * s.get(i));
        }
        Ok(out)
    }

    #[must_use]
    pub fn scale(&self, c: f64) -> ParameterSet {
        let mut out = self.clone();
        for (_, t) in out.entries.iter_mut() {
            t.update(|_, x| c * x);
        }
        out
    }

    /// Euclidean norm of the concatenated elementwise difference.
    pub fn l2_distance(&self, other: &ParameterSet) -> Result<f64> {
        self.check_structure(other)?;
        let mut acc = 0.0;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            for i in 0..a.len() {
                let d = a.get(i) - b.get(i);
                acc += d * d;
            }
        }
        Ok(acc.sqrt())
    }

    pub fn zeros_like(&self) -> ParameterSet {
        self.map_tensors(|t| Tensor::zeros(t.shape.clone(), t.dtype()))
    }

    pub fn cast(&self, dtype: DType) -> ParameterSet {
        self.map_tensors(|t| t.cast(dtype))
    }

    fn map_tensors(&self, f: impl Fn(&Tensor) -> Tensor) -> ParameterSet {
        ParameterSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), f(t))).collect(),
        }
    }

    pub fn bits_eq(&self, other: &ParameterSet) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bits_eq(tb))
    }

    /// All values concatenated in entry order, as f64.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_elements());
        for (_, t) in &self.entries {
            out.extend(t.to_f64_vec());
        }
        out
    }
}

/// A parameter snapshot tagged with where in training it was taken.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub epoch: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(params: ParameterSet, epoch: u64, step: u64) -> Self {
        Checkpoint { params, epoch, step }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(entries: &[(&str, &[f64])]) -> ParameterSet {
        ParameterSet::new(
            entries
                .iter()
                .map(|(n, v)| (n.to_string(), Tensor::from_f64(vec![v.len()], v.to_vec()).unwrap()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn add_scaled_adds_elementwise() {
        let out = set(&[("a", &[1.0, 2.0])])
            .add_scaled(&set(&[("a", &[3.0, 4.0])]), 1.0)
            .unwrap();
        assert_eq!(out, set(&[("a", &[4.0, 6.0])]));
    }

    #[test]
    fn add_scaled_self_cancels() {
        let p = set(&[("w", &[1.5, -2.0, 7.25]), ("b", &[0.5])]);
        let z = p.add_scaled(&p, -1.0).unwrap();
        assert_eq!(z, p.zeros_like());
    }

    #[test]
    fn add_scaled_rejects_name_mismatch() {
        let err = set(&[("a", &[1.0])])
            .add_scaled(&set(&[("b", &[1.0])]), 1.0)
            .unwrap_err();
        match err {
            Error::StructureMismatch { entry, .. } => assert_eq!(entry, "a"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn add_scaled_rejects_shape_and_count_mismatch() {
        let p = set(&[("a", &[1.0, 2.0])]);
        assert!(matches!(
            p.add_scaled(&set(&[("a", &[1.0])]), 1.0),
            Err(Error::StructureMismatch { .. })
        ));
        let err = p
            .add_scaled(&set(&[("a", &[1.0, 2.0]), ("b", &[0.0])]), 1.0)
            .unwrap_err();
        match err {
            Error::StructureMismatch { entry, .. } => assert_eq!(entry, "b"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn scale_examples() {
        let p = set(&[("a", &[2.0, 4.0])]);
        assert_eq!(p.scale(0.5), set(&[("a", &[1.0, 2.0])]));
        assert_eq!(p.scale(1.0), p);
        assert_eq!(p.scale(0.0), p.zeros_like());
    }

    #[test]
    fn l2_distance_examples() {
        let p = set(&[("a", &[0.0, 0.0])]);
        assert_eq!(p.l2_distance(&p).unwrap(), 0.0);
        assert_eq!(p.l2_distance(&set(&[("a", &[3.0, 4.0])])).unwrap(), 5.0);
    }

    #[test]
    fn l2_distance_single_coordinate_perturbation() {
        let p = set(&[("w", &[0.3, -1.2, 2.5]), ("b", &[0.7, 0.1])]);
        let eps = -3.0e-3;
        let mut q = p.clone();
        q.get_mut("b").unwrap().update(|i, x| if i == 1 { x + eps } else { x });
        let d = p.l2_distance(&q).unwrap();
        assert!((d - eps.abs()).abs() < 1e-15, "{d}");
    }

    #[test]
    fn construction_rejects_bad_sets() {
        let t = Tensor::from_f64(vec![1], vec![1.0]).unwrap();
        let t32 = Tensor::from_f32(vec![1], vec![1.0]).unwrap();
        assert!(ParameterSet::new(vec![("".into(), t.clone())]).is_err());
        assert!(ParameterSet::new(vec![("a".into(), t.clone()), ("a".into(), t.clone())]).is_err());
        assert!(ParameterSet::new(vec![("a".into(), t), ("b".into(), t32)]).is_err());
        assert!(Tensor::from_f64(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn f32_arithmetic_runs_in_f64() {
        let a = ParameterSet::new(vec![("x".into(), Tensor::from_f32(vec![1], vec![1.0]).unwrap())]).unwrap();
        let b = a.add_scaled(&a, 1e-8).unwrap();
        // 1 + 1e-8 rounds back to 1.0f32
        assert_eq!(b.tensor(0).get(0), 1.0);
        assert_eq!(b.dtype(), Some(DType::F32));
    }

    #[test]
    fn check_finite_names_entry() {
        let p = set(&[("ok", &[1.0]), ("bad", &[f64::NAN])]);
        match p.check_finite() {
            Err(Error::NonFinite { entry }) => assert_eq!(entry, "bad"),
            r => panic!("unexpected {r:?}"),
        }
    }
}
