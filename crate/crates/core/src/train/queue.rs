use std::collections::VecDeque;

/// One detached query vector in the negative queue.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry<T> {
    pub vector: Vec<T>,
    pub source_id: String,
    /// Training step that produced the entry.
    pub step: u64,
}

/// FIFO of past anchor queries used as contrastive negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue<T> {
    capacity: usize,
    entries: VecDeque<QueueEntry<T>>,
}

impl<T: Clone> NegativeQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        NegativeQueue {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a copy of `v`, evicting the oldest entry when full.
    pub fn push_negative(&mut self, v: &[T], source_id: &str, step: u64) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(QueueEntry {
            vector: v.to_vec(),
            source_id: source_id.to_string(),
            step,
        });
    }

    /// Entries not produced from `source_id`, oldest first.
    pub fn negatives(&self, source_id: &str) -> Vec<&[T]> {
        self.entries
            .iter()
            .filter(|e| e.source_id != source_id)
            .map(|e| e.vector.as_slice())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry<T>> {
        self.entries.iter()
    }

    pub(crate) fn from_entries(capacity: usize, entries: Vec<QueueEntry<T>>) -> Self {
        let mut q = NegativeQueue::new(capacity);
        for e in entries {
            if q.entries.len() == capacity {
                q.entries.pop_front();
            }
            q.entries.push_back(e);
        }
        q
    }
}
