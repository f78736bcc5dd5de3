//! Process-shared aggregation buffer used by the PP scheme.
//!
//! Slots are claimed with a fetch-and-increment on `reserve` and made visible
//! with an increment of `publish` after the slot write. Whoever publishes the
//! last slot owns the full buffer: it copies the items out, then resets
//! `publish` and finally `reserve`, which reopens the buffer for the next
//! generation. Claims that land at or beyond capacity wait for that reset.

use std::cell::UnsafeCell;
use std::mem::MaybeUninit;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use crate::topology::Item;

const EMPTY: u64 = u64::MAX;

pub(crate) struct SharedBuffer {
    reserve: AtomicUsize,
    publish: AtomicUsize,
    generation: AtomicU64,
    opened_at: AtomicU64,
    slots: Box<[UnsafeCell<MaybeUninit<Item>>]>,
}

// Slot `i` is written only by the thread that claimed index `i` in the current
// generation and read only by the thread that sealed that generation.
unsafe impl Sync for SharedBuffer {}
unsafe impl Send for SharedBuffer {}

#[inline]
fn backoff(spins: &mut u32) {
    if *spins < 64 {
        std::hint::spin_loop();
        *spins += 1;
    } else {
        std::thread::yield_now();
    }
}

impl SharedBuffer {
    pub(crate) fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        let slots = (0..capacity)
            .map(|_| UnsafeCell::new(MaybeUninit::uninit()))
            .collect();
        SharedBuffer {
            reserve: AtomicUsize::new(0),
            publish: AtomicUsize::new(0),
            generation: AtomicU64::new(0),
            opened_at: AtomicU64::new(EMPTY),
            slots,
        }
    }

    pub(crate) fn capacity(&self) -> usize {
        self.slots.len()
    }

    /// Published items not yet sealed.
    pub(crate) fn fill(&self) -> usize {
        self.publish.load(Ordering::Acquire)
    }

    pub(crate) fn generation(&self) -> u64 {
        self.generation.load(Ordering::Acquire)
    }

    pub(crate) fn opened_at(&self) -> Option<u64> {
        match self.opened_at.load(Ordering::Acquire) {
            EMPTY => None,
            t => Some(t),
        }
    }

    /// Stores `item`; returns the full batch if this call published the last slot.
    pub(crate) fn insert(&self, item: Item, now: u64) -> Option<Vec<Item>> {
        let capacity = self.capacity();
        let mut spins = 0;
        loop {
            if self.reserve.load(Ordering::Acquire) >= capacity {
                backoff(&mut spins);
                continue;
            }
            let idx = self.reserve.fetch_add(1, Ordering::AcqRel);
            if idx >= capacity {
                backoff(&mut spins);
                continue;
            }
            if idx == 0 {
                self.opened_at.store(now, Ordering::Release);
            }
            // SAFETY: index `idx` was claimed exclusively for this generation.
            unsafe { (*self.slots[idx].get()).write(item) };
            let published = self.publish.fetch_add(1, Ordering::AcqRel) + 1;
            if published == capacity {
                return Some(self.drain(capacity));
            }
            return None;
        }
    }

    /// Seals a partially filled buffer and takes its items.
    ///
    /// Returns `None` when the buffer is empty or a full seal already owns it.
    pub(crate) fn seal_for_flush(&self) -> Option<Vec<Item>> {
        let capacity = self.capacity();
        let claimed = self.reserve.swap(capacity, Ordering::AcqRel);
        if claimed >= capacity {
            return None;
        }
        if claimed == 0 {
            self.reserve.store(0, Ordering::Release);
            return None;
        }
        let mut spins = 0;
        while self.publish.load(Ordering::Acquire) < claimed {
            backoff(&mut spins);
        }
        Some(self.drain(claimed))
    }

    fn drain(&self, n: usize) -> Vec<Item> {
        let items = (0..n)
            // SAFETY: slots 0..n were published in this generation and no
            // claim can be granted until `reserve` is reset below.
            .map(|i| unsafe { (*self.slots[i].get()).assume_init_read() })
            .collect();
        self.publish.store(0, Ordering::Release);
        self.opened_at.store(EMPTY, Ordering::Release);
        self.generation.fetch_add(1, Ordering::AcqRel);
        self.reserve.store(0, Ordering::Release);
        items
    }
}

impl Drop for SharedBuffer {
    fn drop(&mut self) {
        let n = (*self.publish.get_mut()).min(self.slots.len());
        for slot in &mut self.slots[..n] {
            // SAFETY: exclusive access; the first `n` slots are initialized.
            unsafe { slot.get_mut().assume_init_drop() };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{Payload, WorkerRef};
    use std::sync::{Arc, Barrier};

    fn item(src: usize, seq: u64) -> Item {
        Item {
            dest: WorkerRef(0),
            src: WorkerRef(src),
            seq,
            created_at: 0,
            payload: Payload::from_words(&[seq]),
        }
    }

    #[test]
    fn fills_then_seals() {
        let buf = SharedBuffer::new(3);
        assert!(buf.insert(item(0, 0), 5).is_none());
        assert_eq!(buf.opened_at(), Some(5));
        assert!(buf.insert(item(0, 1), 6).is_none());
        let batch = buf.insert(item(0, 2), 7).unwrap();
        assert_eq!(batch.iter().map(|i| i.seq).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(buf.generation(), 1);
        assert_eq!(buf.fill(), 0);
        assert_eq!(buf.opened_at(), None);
    }

    #[test]
    fn flush_takes_partial_batch() {
        let buf = SharedBuffer::new(4);
        assert!(buf.seal_for_flush().is_none());
        buf.insert(item(0, 0), 0);
        let batch = buf.seal_for_flush().unwrap();
        assert_eq!(batch.len(), 1);
        assert!(buf.seal_for_flush().is_none());
        // buffer reopened
        buf.insert(item(0, 1), 0);
        assert_eq!(buf.fill(), 1);
    }

    #[test]
    fn drop_releases_pending_items() {
        let buf = SharedBuffer::new(4);
        buf.insert(item(0, 0), 0);
        buf.insert(item(0, 1), 0);
        drop(buf);
    }

    #[test]
    fn concurrent_fill_and_flush_keeps_every_item_once() {
        for round in 0..200 {
            let threads = 4;
            let per_thread = 50;
            let buf = Arc::new(SharedBuffer::new(1 + round % 7));
            let barrier = Arc::new(Barrier::new(threads));
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let buf = Arc::clone(&buf);
                    let barrier = Arc::clone(&barrier);
                    std::thread::spawn(move || {
                        let mut got = Vec::new();
                        barrier.wait();
                        for s in 0..per_thread {
                            if let Some(batch) = buf.insert(item(t, s), 0) {
                                assert_eq!(batch.len(), buf.capacity());
                                got.extend(batch);
                            }
                            if s % 9 == t as u64 {
                                if let Some(batch) = buf.seal_for_flush() {
                                    assert!(!batch.is_empty() && batch.len() < buf.capacity());
                                    got.extend(batch);
                                }
                            }
                        }
                        got
                    })
                })
                .collect();
            let mut all: Vec<(usize, u64)> = handles
                .into_iter()
                .flat_map(|h| h.join().unwrap())
                .map(|i| (i.src.0, i.seq))
                .collect();
            if let Some(rest) = buf.seal_for_flush() {
                all.extend(rest.into_iter().map(|i| (i.src.0, i.seq)));
            }
            all.sort_unstable();
            let expected: Vec<(usize, u64)> = (0..threads)
                .flat_map(|t| (0..per_thread).map(move |s| (t, s)))
                .collect();
            assert_eq!(all, expected, "round {round}");
        }
    }
}
