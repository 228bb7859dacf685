use std::collections::VecDeque;

/// Bounded FIFO ordered oldest to newest.
#[derive(Clone, Debug)]
pub struct HistoryQueue<E> {
    capacity: usize,
    items: VecDeque<E>,
}

impl<E> HistoryQueue<E> {
    pub fn new(capacity: usize) -> Self {
        HistoryQueue { capacity, items: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends `entry`, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, entry: E) {
        self.items.push_back(entry);
        while self.items.len() > self.capacity {
            self.items.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &E> + ExactSizeIterator {
        self.items.iter()
    }

    pub fn oldest(&self) -> Option<&E> {
        self.items.front()
    }

    pub fn newest(&self) -> Option<&E> {
        self.items.back()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eviction() {
        let mut q = HistoryQueue::new(3);
        q.push(1);
        assert_eq!(q.len(), 1);
        for i in 2..=4 {
            q.push(i);
        }
        assert_eq!(q.iter().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!((q.oldest(), q.newest()), (Some(&2), Some(&4)));
        let mut z = HistoryQueue::new(0);
        z.push(1);
        assert!(z.is_empty());
    }
}
