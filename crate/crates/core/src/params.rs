//! Flat registry of named parameter tensors and matching gradient slots.

use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Buffers such as running statistics are stored but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>, trainable: bool) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            shape,
            data,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.data.len())
            .sum()
    }

    pub fn fill(&mut self, value: f64) {
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            e.data.fill(value);
        }
    }
}

/// Gradient accumulator aligned with a [`ParamStore`]. Slots that never
/// receive a gradient stay `None`, which the optimizer treats as "not in
/// this step's graph".
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn new(store: &ParamStore) -> Self {
        Grads {
            slots: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        match &mut self.slots[id.0] {
            Some(slot) => {
                for (a, b) in slot.iter_mut().zip(grad) {
                    *a += b;
                }
            }
            empty => *empty = Some(grad.to_vec()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots[id.0].as_deref()
    }

    pub fn slots(&self) -> &[Option<Vec<f64>>] {
        &self.slots
    }

    pub fn touched(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}

/// Uniform fan-in initialization with standard deviation `scale * sqrt(2 / fan_in)`.
pub fn kaiming_uniform<R: Rng>(rng: &mut R, len: usize, fan_in: usize, scale: f64) -> Vec<f64> {
    let std = scale * (2.0 / fan_in.max(1) as f64).sqrt();
    let bound = 3f64.sqrt() * std;
    (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
}
