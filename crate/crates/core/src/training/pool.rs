use rand::Rng;

/// History of generated images shown to the discriminators.
///
/// Until the buffer is full every pushed image is stored and returned. After
/// that, with probability ½ a uniformly chosen stored image is returned and
/// replaced by the new one; otherwise the new image is returned as is.
#[derive(Debug, Clone)]
pub struct HistoryBuffer<T> {
    capacity: usize,
    items: Vec<T>,
}

impl<T: Clone> HistoryBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
        }
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

    pub fn push_sample<R: Rng + ?Sized>(&mut self, item: T, rng: &mut R) -> T {
        if self.capacity == 0 {
            return item;
        }
        if self.items.len() < self.capacity {
            self.items.push(item.clone());
            return item;
        }
        if rng.random_bool(0.5) {
            let idx = rng.random_range(0..self.capacity);
            std::mem::replace(&mut self.items[idx], item)
        } else {
            item
        }
    }
}
