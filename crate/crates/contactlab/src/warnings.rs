//! Thread-local log of recoverable numeric conditions (clamped probabilities,
//! empty masks, unreachable vertices). Loss and metric code records into it;
//! the harness drains it once per step.

use std::cell::RefCell;

thread_local! {
    static LOG: RefCell<Vec<String>> = const { RefCell::new(Vec::new()) };
}

pub fn record(msg: impl Into<String>) {
    LOG.with(|log| log.borrow_mut().push(msg.into()));
}

/// Drain all warnings recorded on this thread.
pub fn take() -> Vec<String> {
    LOG.with(|log| std::mem::take(&mut *log.borrow_mut()))
}

pub fn count() -> usize {
    LOG.with(|log| log.borrow().len())
}
