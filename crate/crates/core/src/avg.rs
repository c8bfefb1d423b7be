//! Checkpoint averaging: the k-latest ring used during training, the
//! uniform mean over it, exponentially weighted coefficients, and the
//! running (Polyak) mean over every checkpoint seen.
//!
//! All accumulation happens in f64; results are cast back to the element
//! type of the incoming checkpoints.

use std::collections::VecDeque;
use std::fmt;

use crate::error::{Error, Result};
use crate::param::{Checkpoint, DType, ParameterSet};

pub const DEFAULT_K: usize = 6;
pub const DEFAULT_EMA_ALPHA: f64 = 0.9;
/// Windows wider than this tend to hurt; configuring one only warns.
pub const LARGE_K: usize = 16;

/// Fixed-capacity FIFO of the most recent checkpoints, oldest first.
#[derive(Clone, Debug)]
pub struct CheckpointRing {
    capacity: usize,
    slots: VecDeque<Checkpoint>,
}

impl CheckpointRing {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("ring capacity must be at least 1".into()));
        }
        Ok(CheckpointRing {
            capacity,
            slots: VecDeque::with_capacity(capacity + 1),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.capacity
    }

    pub fn newest(&self) -> Option<&Checkpoint> {
        self.slots.back()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Checkpoint> {
        self.slots.iter()
    }

    pub fn epochs(&self) -> Vec<u64> {
        self.slots.iter().map(|c| c.epoch).collect()
    }

    /// Appends `ckpt`, returning the evicted oldest checkpoint when the ring
    /// was already full.
    pub fn push(&mut self, ckpt: Checkpoint) -> Result<Option<Checkpoint>> {
        if let Some(newest) = self.slots.back() {
            if ckpt.epoch <= newest.epoch {
                return Err(Error::EpochOrder {
                    newest: newest.epoch,
                    got: ckpt.epoch,
                });
            }
        }
        self.slots.push_back(ckpt);
        if self.slots.len() > self.capacity {
            Ok(self.slots.pop_front())
        } else {
            Ok(None)
        }
    }
}

/// Elementwise arithmetic mean of one or more structurally matched sets.
pub fn uniform_average<'a, I>(sets: I) -> Result<ParameterSet>
where
    I: IntoIterator<Item = &'a ParameterSet>,
{
    let mut iter = sets.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InternalState("cannot average zero checkpoints".into()))?;
    first.check_finite()?;
    let mut sums: Vec<Vec<f64>> = first.iter().map(|(_, t)| t.to_f64_vec()).collect();
    let mut n = 1usize;
    for set in iter {
        first.check_structure(set)?;
        set.check_finite()?;
        for (acc, (_, t)) in sums.iter_mut().zip(set.iter()) {
            for (i, a) in acc.iter_mut().enumerate() {
                *a += t.get(i);
            }
        }
        n += 1;
    }
    let inv = n as f64;
    let mut out = first.clone();
    for (i, (_, t)) in out.iter_mut().enumerate() {
        let s = &sums[i];
        t.update(|j, _| s[j] / inv);
    }
    Ok(out)
}

pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<ParameterSet> {
    uniform_average(ckpts.iter().map(|c| &c.params))
}

/// The in-training hook: `None` until `epoch + 1 >= k`, then the uniform
/// mean of the ring's k checkpoints, which include `epoch` itself.
///
/// `epoch` is the index of the save slot just pushed; the ring must hold the
/// contiguous slots ending at it.
pub fn lawa_step(ring: &CheckpointRing, epoch: u64, k: usize) -> Result<Option<ParameterSet>> {
    if ring.capacity() != k {
        return Err(Error::InternalState(format!(
            "ring capacity {} does not match k = {k}",
            ring.capacity()
        )));
    }
    let expected = (epoch + 1).min(k as u64);
    let epochs = ring.epochs();
    let contiguous = epochs.len() as u64 == expected
        && epochs
            .iter()
            .zip(epoch + 1 - expected..=epoch)
            .all(|(&got, want)| got == want);
    if !contiguous {
        return Err(Error::InternalState(format!(
            "ring holds epochs {epochs:?}, expected the {expected} ending at {epoch}"
        )));
    }
    if epoch + 1 < k as u64 {
        return Ok(None);
    }
    uniform_average(ring.iter().map(|c| &c.params)).map(Some)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scheme {
    None,
    Uniform { k: usize },
    Ema { alpha: f64 },
    Polyak,
}

impl Default for Scheme {
    fn default() -> Self {
        Scheme::Uniform { k: DEFAULT_K }
    }
}

impl Scheme {
    /// Rejects invalid hyperparameters; returns advisory warnings otherwise.
    pub fn validate(&self) -> Result<Vec<String>> {
        match *self {
            Scheme::Uniform { k: 0 } => Err(Error::Config("uniform averaging needs k >= 1".into())),
            Scheme::Uniform { k } if k > LARGE_K => Ok(vec![format!(
                "k={k} exceeds {LARGE_K}; averaging this many checkpoints (k>16) tends to perform worse"
            )]),
            Scheme::Ema { alpha } if !(0.0..=1.0).contains(&alpha) => {
                Err(Error::Config(format!("ema alpha must lie in [0, 1], got {alpha}")))
            }
            _ => Ok(Vec::new()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Scheme::None => "none",
            Scheme::Uniform { .. } => "uniform",
            Scheme::Ema { .. } => "ema",
            Scheme::Polyak => "polyak",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::None => f.write_str("none"),
            Scheme::Uniform { k } => write!(f, "uniform:{k}"),
            Scheme::Ema { alpha } => write!(f, "ema:{alpha}"),
            Scheme::Polyak => f.write_str("polyak"),
        }
    }
}

/// Stateful driver for one [`Scheme`]: fed every saved checkpoint in order,
/// yields the averaged parameters whenever the scheme defines them.
#[derive(Clone, Debug)]
pub struct Averager {
    scheme: Scheme,
    ring: Option<CheckpointRing>,
    // f64 accumulator for ema/polyak
    state: Option<ParameterSet>,
    count: u64,
    last_epoch: Option<u64>,
}

impl Averager {
    pub fn new(scheme: Scheme) -> Result<Self> {
        scheme.validate()?;
        let ring = match scheme {
            Scheme::Uniform { k } => Some(CheckpointRing::new(k)?),
            _ => None,
        };
        Ok(Averager {
            scheme,
            ring,
            state: None,
            count: 0,
            last_epoch: None,
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Number of checkpoints absorbed so far.
    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn ring(&self) -> Option<&CheckpointRing> {
        self.ring.as_ref()
    }

    pub fn push(&mut self, ckpt: Checkpoint) -> Result<Option<ParameterSet>> {
        match self.scheme {
            Scheme::None => {
                self.check_order(&ckpt)?;
                self.count += 1;
                Ok(None)
            }
            Scheme::Uniform { k } => {
                let epoch = ckpt.epoch;
                let ring = self.ring.as_mut().expect("uniform scheme owns a ring");
                ring.push(ckpt)?;
                self.last_epoch = Some(epoch);
                self.count += 1;
                lawa_step(ring, epoch, k)
            }
            Scheme::Ema { .. } => self.ema_update(&ckpt).map(Some),
            Scheme::Polyak => self.polyak_update(&ckpt).map(Some),
        }
    }

    fn check_order(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if let Some(newest) = self.last_epoch {
            if ckpt.epoch <= newest {
                return Err(Error::EpochOrder {
                    newest,
                    got: ckpt.epoch,
                });
            }
        }
        self.last_epoch = Some(ckpt.epoch);
        Ok(())
    }

    fn absorb(&mut self, ckpt: &Checkpoint, combine: impl Fn(f64, f64) -> f64) -> Result<ParameterSet> {
        ckpt.params.check_finite()?;
        let dtype = ckpt.params.dtype().unwrap_or(DType::F64);
        let incoming = ckpt.params.cast(DType::F64);
        if let Some(state) = &self.state {
            state.check_structure(&incoming)?;
        }
        self.check_order(ckpt)?;
        match &mut self.state {
            None => self.state = Some(incoming),
            Some(state) => {
                for ((_, acc), (_, t)) in state.iter_mut().zip(incoming.iter()) {
                    acc.update(|i, prev| combine(prev, t.get(i)));
                }
            }
        }
        self.count += 1;
        Ok(self.state.as_ref().expect("state set above").cast(dtype))
    }

    /// θ_EXP ← α·θ + (1 − α)·θ_EXP, seeded with the first checkpoint.
    pub fn ema_update(&mut self, ckpt: &Checkpoint) -> Result<ParameterSet> {
        let Scheme::Ema { alpha } = self.scheme else {
            return Err(Error::InternalState(format!(
                "ema_update on a {} scheme",
                self.scheme.kind()
            )));
        };
        self.absorb(ckpt, |prev, x| alpha * x + (1.0 - alpha) * prev)
    }

    /// Incremental running mean: mean ← mean + (θ − mean) / t.
    pub fn polyak_update(&mut self, ckpt: &Checkpoint) -> Result<ParameterSet> {
        if self.scheme != Scheme::Polyak {
            return Err(Error::InternalState(format!(
                "polyak_update on a {} scheme",
                self.scheme.kind()
            )));
        }
        let t = (self.count + 1) as f64;
        self.absorb(ckpt, |mean, x| mean + (x - mean) / t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Tensor;
    use proptest::prelude::*;

    fn scalar(v: f64) -> ParameterSet {
        ParameterSet::new(vec![("w".into(), Tensor::from_f64(vec![1], vec![v]).unwrap())]).unwrap()
    }

    fn vec_set(v: &[f64]) -> ParameterSet {
        ParameterSet::new(vec![("a".into(), Tensor::from_f64(vec![v.len()], v.to_vec()).unwrap())]).unwrap()
    }

    fn ck(v: f64, epoch: u64) -> Checkpoint {
        Checkpoint::new(scalar(v), epoch, epoch * 10)
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut ring = CheckpointRing::new(2).unwrap();
        assert!(ring.push(ck(0.0, 0)).unwrap().is_none());
        assert!(ring.push(ck(1.0, 1)).unwrap().is_none());
        let evicted = ring.push(ck(2.0, 2)).unwrap().unwrap();
        assert_eq!(evicted.epoch, 0);
        assert_eq!(ring.epochs(), vec![1, 2]);
    }

    #[test]
    fn ring_single_push() {
        let mut ring = CheckpointRing::new(3).unwrap();
        ring.push(ck(0.0, 0)).unwrap();
        assert_eq!(ring.epochs(), vec![0]);
        assert!(!ring.is_full());
    }

    #[test]
    fn ring_rejects_repeated_epoch() {
        let mut ring = CheckpointRing::new(3).unwrap();
        ring.push(ck(0.0, 1)).unwrap();
        assert!(matches!(
            ring.push(ck(0.0, 1)),
            Err(Error::EpochOrder { newest: 1, got: 1 })
        ));
        assert!(CheckpointRing::new(0).is_err());
    }

    #[test]
    fn uniform_average_examples() {
        let out = uniform_average([&vec_set(&[1.0, 3.0]), &vec_set(&[3.0, 5.0])]).unwrap();
        assert_eq!(out, vec_set(&[2.0, 4.0]));
        let theta = vec_set(&[0.1, -7.3, 1e5]);
        let copies = vec![theta.clone(); 7];
        let avg = uniform_average(&copies).unwrap();
        assert!(avg.l2_distance(&theta).unwrap() <= 1e-12);
    }

    #[test]
    fn uniform_average_rejects_non_finite_and_mismatch() {
        assert!(matches!(
            uniform_average([&vec_set(&[1.0]), &vec_set(&[f64::INFINITY])]),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            uniform_average([&vec_set(&[1.0]), &scalar(1.0)]),
            Err(Error::StructureMismatch { .. })
        ));
    }

    #[test]
    fn lawa_gating_and_window() {
        let mut ring = CheckpointRing::new(6).unwrap();
        for e in 0..5 {
            ring.push(ck(e as f64, e)).unwrap();
        }
        assert!(lawa_step(&ring, 4, 6).unwrap().is_none());

        let mut ring = CheckpointRing::new(1).unwrap();
        ring.push(ck(0.625, 0)).unwrap();
        assert_eq!(lawa_step(&ring, 0, 1).unwrap().unwrap(), scalar(0.625));

        // mean of {2, 3, 4}
        let mut ring = CheckpointRing::new(3).unwrap();
        for e in 0..5 {
            ring.push(ck(e as f64, e)).unwrap();
        }
        assert_eq!(lawa_step(&ring, 4, 3).unwrap().unwrap(), scalar(3.0));
    }

    #[test]
    fn lawa_step_detects_inconsistent_ring() {
        let mut ring = CheckpointRing::new(3).unwrap();
        ring.push(ck(0.0, 0)).unwrap();
        ring.push(ck(0.0, 2)).unwrap();
        assert!(matches!(lawa_step(&ring, 2, 3), Err(Error::InternalState(_))));
        assert!(matches!(lawa_step(&ring, 1, 3), Err(Error::InternalState(_))));
        assert!(matches!(lawa_step(&ring, 2, 4), Err(Error::InternalState(_))));
    }

    #[test]
    fn ema_examples() {
        let mut ema = Averager::new(Scheme::Ema { alpha: 0.9 }).unwrap();
        assert_eq!(ema.push(ck(0.0, 0)).unwrap().unwrap(), scalar(0.0));
        assert_eq!(ema.push(ck(10.0, 1)).unwrap().unwrap(), scalar(9.0));

        let mut one = Averager::new(Scheme::Ema { alpha: 1.0 }).unwrap();
        let mut zero = Averager::new(Scheme::Ema { alpha: 0.0 }).unwrap();
        for (e, v) in [3.5, -1.0, 8.25, 0.1].into_iter().enumerate() {
            assert_eq!(one.push(ck(v, e as u64)).unwrap().unwrap(), scalar(v));
            assert_eq!(zero.push(ck(v, e as u64)).unwrap().unwrap(), scalar(3.5));
        }
    }

    #[test]
    fn ema_alpha_validated() {
        assert!(matches!(
            Averager::new(Scheme::Ema { alpha: 1.5 }),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Averager::new(Scheme::Ema { alpha: -0.1 }),
            Err(Error::Config(_))
        ));
        assert!(matches!(Averager::new(Scheme::Uniform { k: 0 }), Err(Error::Config(_))));
    }

    #[test]
    fn large_k_only_warns() {
        let warnings = Scheme::Uniform { k: 20 }.validate().unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("k>16"));
        assert!(Scheme::Uniform { k: 16 }.validate().unwrap().is_empty());
    }

    #[test]
    fn polyak_examples() {
        let mut p = Averager::new(Scheme::Polyak).unwrap();
        assert_eq!(p.push(ck(1.0, 0)).unwrap().unwrap(), scalar(1.0));
        assert_eq!(p.push(ck(3.0, 1)).unwrap().unwrap(), scalar(2.0));
        assert_eq!(p.count(), 2);
    }

    #[test]
    fn polyak_matches_naive_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let sets: Vec<ParameterSet> = (0..10)
            .map(|_| vec_set(&(0..5).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>()))
            .collect();
        let mut p = Averager::new(Scheme::Polyak).unwrap();
        let mut last = None;
        for (e, s) in sets.iter().enumerate() {
            last = p.push(Checkpoint::new(s.clone(), e as u64, 0)).unwrap();
        }
        let got = last.unwrap().flatten();
        for (j, g) in got.iter().enumerate() {
            let naive: f64 = sets.iter().map(|s| s.flatten()[j]).sum::<f64>() / 10.0;
            assert!((g - naive).abs() <= 1e-12 * naive.abs().max(1.0));
        }
    }

    #[test]
    fn schemes_reject_out_of_order_epochs() {
        for scheme in [
            Scheme::None,
            Scheme::Uniform { k: 2 },
            Scheme::Ema { alpha: 0.5 },
            Scheme::Polyak,
        ] {
            let mut a = Averager::new(scheme).unwrap();
            a.push(ck(1.0, 0)).unwrap();
            assert!(matches!(a.push(ck(1.0, 0)), Err(Error::EpochOrder { .. })), "{scheme}");
        }
    }

    #[test]
    fn f32_checkpoints_average_in_f64() {
        let f32set =
            |v: f32| ParameterSet::new(vec![("w".into(), Tensor::from_f32(vec![1], vec![v]).unwrap())]).unwrap();
        let sets: Vec<_> = [16_777_216.0f32, 1.0, 1.0, 1.0].into_iter().map(f32set).collect();
        let avg = uniform_average(&sets).unwrap();
        assert_eq!(avg.dtype(), Some(DType::F32));
        // f32 accumulation would lose the three ones entirely
        assert_eq!(avg.tensor(0).get(0), ((16_777_216.0f64 + 3.0) / 4.0) as f32 as f64);
    }

    fn arb_sets(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=max, 1usize..6)
            .prop_flat_map(|(n, dim)| prop::collection::vec(prop::collection::vec(-100.0f64..100.0, dim), n))
    }

    proptest! {
        #[test]
        fn permutation_invariance(vals in arb_sets(8), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let sets: Vec<_> = vals.iter().map(|v| vec_set(v)).collect();
            let mut shuffled = sets.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = uniform_average(&sets).unwrap().flatten();
            let b = uniform_average(&shuffled).unwrap().flatten();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn homogeneity(vals in arb_sets(8), c in -10.0f64..10.0) {
            let sets: Vec<_> = vals.iter().map(|v| vec_set(v)).collect();
            let scaled: Vec<_> = sets.iter().map(|s| s.scale(c)).collect();
            let a = uniform_average(&scaled).unwrap().flatten();
            let b = uniform_average(&sets).unwrap().scale(c).flatten();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }

        #[test]
        fn averages_stay_in_coordinate_hull(vals in arb_sets(10), alpha in 0.0f64..=1.0) {
            let dim = vals[0].len();
            let lo: Vec<f64> = (0..dim).map(|j| vals.iter().map(|v| v[j]).fold(f64::INFINITY, f64::min)).collect();
            let hi: Vec<f64> = (0..dim).map(|j| vals.iter().map(|v| v[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
            let mut outputs = vec![uniform_average(vals.iter().map(|v| vec_set(v)).collect::<Vec<_>>().iter()).unwrap()];
            for scheme in [Scheme::Polyak, Scheme::Ema { alpha }] {
                let mut a = Averager::new(scheme).unwrap();
                for (e, v) in vals.iter().enumerate() {
                    outputs.push(a.push(Checkpoint::new(vec_set(v), e as u64, 0)).unwrap().unwrap());
                }
            }
            for out in outputs {
                for (j, x) in out.flatten().into_iter().enumerate() {
                    let slack = 1e-12 * hi[j].abs().max(lo[j].abs()).max(1.0);
                    prop_assert!(x >= lo[j] - slack && x <= hi[j] + slack);
                }
            }
        }

        #[test]
        fn polyak_equals_uniform_over_all(vals in arb_sets(12)) {
            let sets: Vec<_> = vals.iter().map(|v| vec_set(v)).collect();
            let mut p = Averager::new(Scheme::Polyak).unwrap();
            let mut last = None;
            for (e, s) in sets.iter().enumerate() {
                last = p.push(Checkpoint::new(s.clone(), e as u64, 0)).unwrap();
            }
            let a = last.unwrap().flatten();
            let b = uniform_average(&sets).unwrap().flatten();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0));
            }
        }
    }
}
