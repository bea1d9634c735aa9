//! Confidence-gated template memory.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    /// Template crop, re-tokenized on every forward pass.
    pub image: Tensor,
    pub confidence: f32,
    pub frame: usize,
}

/// Up to `capacity` templates. Entry 0 is the initial frame and is never
/// evicted; the rest are in frame order and the oldest goes first.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateBank {
    capacity: usize,
    tau: f32,
    entries: Vec<BankEntry>,
}

impl TemplateBank {
    pub fn new(capacity: usize, tau: f32, initial: Tensor) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::arg("templates", "bank capacity must be positive"));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::arg("tau", format!("{tau} not in [0, 1]")));
        }
        Ok(TemplateBank { capacity, tau, entries: vec![BankEntry { image: initial, confidence: 1.0, frame: 0 }] })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    /// Admit the candidate when `confidence > τ`. Returns whether it was admitted.
    pub fn update(&mut self, image: Tensor, confidence: f32, frame: usize) -> bool {
        if !(confidence > self.tau) {
            return false;
        }
        if self.entries.len() == self.capacity {
            if self.capacity == 1 {
                return false;
            }
            self.entries.remove(1);
        }
        self.entries.push(BankEntry { image, confidence, frame });
        true
    }

    /// Exactly `capacity` template images; missing slots repeat the initial frame.
    pub fn templates(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.entries.iter().map(|e| e.image.clone()).collect();
        while out.len() < self.capacity {
            out.insert(1, self.entries[0].image.clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f32) -> Tensor {
        Tensor::filled([1], v)
    }

    #[test]
    fn below_threshold_unchanged() {
        let mut b = TemplateBank::new(5, 0.7, img(0.0)).unwrap();
        let before = b.clone();
        assert!(!b.update(img(1.0), 0.7, 1));
        assert_eq!(b, before);
    }

    #[test]
    fn full_bank_evicts_slot_one() {
        let mut b = TemplateBank::new(5, 0.7, img(0.0)).unwrap();
        for f in 1..=4 {
            assert!(b.update(img(f as f32), 0.9, f));
        }
        assert!(b.update(img(5.0), 0.9, 5));
        let frames: Vec<usize> = b.entries().iter().map(|e| e.frame).collect();
        assert_eq!(frames, vec![0, 2, 3, 4, 5]);
    }

    #[test]
    fn padding_repeats_initial() {
        let mut b = TemplateBank::new(4, 0.0, img(0.0)).unwrap();
        b.update(img(7.0), 0.5, 3);
        let t = b.templates();
        assert_eq!(t.len(), 4);
        assert_eq!(t[0], img(0.0));
        assert_eq!(t[3], img(7.0));
    }
}
