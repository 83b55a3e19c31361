//! Per-thread counters for gram factorizations and GP hyperparameter fits.

use std::cell::Cell;

thread_local! {
    static FACTORIZATIONS: Cell<u64> = const { Cell::new(0) };
    static FITS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub factorizations: u64,
    pub fits: u64,
}

impl Counters {
    pub fn since(self, earlier: Counters) -> Counters {
        Counters {
            factorizations: self.factorizations - earlier.factorizations,
            fits: self.fits - earlier.fits,
        }
    }
}

pub fn note_factorization() {
    FACTORIZATIONS.with(|c| c.set(c.get() + 1));
}

pub fn note_fit() {
    FITS.with(|c| c.set(c.get() + 1));
}

pub fn snapshot() -> Counters {
    Counters {
        factorizations: FACTORIZATIONS.with(Cell::get),
        fits: FITS.with(Cell::get),
    }
}
