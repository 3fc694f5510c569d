use rand::Rng;

/// One environment transition `(s, a, r, c, s', done)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub c: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

impl Transition {
    pub fn is_finite(&self) -> bool {
        self.r.is_finite()
            && self.c.is_finite()
            && self.s.iter().chain(&self.a).chain(&self.s_next).all(|v| v.is_finite())
    }

    /// The GP input `z = (s, a)`.
    pub fn state_action(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.s.len() + self.a.len());
        z.extend_from_slice(&self.s);
        z.extend_from_slice(&self.a);
        z
    }
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, idx: usize) -> Option<&Transition> {
        self.items.get(idx)
    }

    /// Uniform sample with replacement. `None` until the buffer holds at
    /// least `batch_size` transitions.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, batch_size: usize, rng: &mut R) -> Option<Vec<&'a Transition>> {
        if batch_size == 0 || self.items.len() < batch_size {
            return None;
        }
        let n = self.items.len();
        Some((0..batch_size).map(|_| &self.items[rng.random_range(0..n)]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(r: f64) -> Transition {
        Transition {
            s: vec![0.0],
            a: vec![0.0],
            r,
            c: r,
            s_next: vec![0.0],
            done: false,
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(t(i as f64));
        }
        assert_eq!(b.len(), 3);
        let rs: Vec<f64> = (0..3).map(|i| b.get(i).unwrap().r).collect();
        assert_eq!(rs, vec![3.0, 4.0, 2.0]);
    }

    #[test]
    fn sampling_requires_batch() {
        let mut b = ReplayBuffer::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.push(t(1.0));
        assert!(b.sample(2, &mut rng).is_none());
        b.push(t(2.0));
        assert_eq!(b.sample(2, &mut rng).unwrap().len(), 2);
    }
}
