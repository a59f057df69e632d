//! Thread-local gradient tape.
//!
//! Forward ops append a backward closure per recorded operation; `backward`
//! drains the tape in reverse, so a recorded graph is replayed exactly once
//! and never reused. Each execution context (learner thread, actor thread,
//! test) owns its own tape.

use std::cell::RefCell;

struct Tape {
    entries: Vec<Box<dyn FnOnce()>>,
    enabled: bool,
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape { entries: Vec::new(), enabled: true });
}

/// True when operations on grad-requiring tensors are being recorded.
pub fn is_recording() -> bool {
    TAPE.with(|t| t.borrow().enabled)
}

pub(crate) fn record(entry: Box<dyn FnOnce()>) {
    TAPE.with(|t| t.borrow_mut().entries.push(entry));
}

/// Number of operations recorded since the last reset/backward.
pub fn len() -> usize {
    TAPE.with(|t| t.borrow().entries.len())
}

/// Drop everything recorded so far. Called by the learner before each step.
pub fn reset() {
    TAPE.with(|t| t.borrow_mut().entries.clear());
}

pub(crate) fn drain() -> Vec<Box<dyn FnOnce()>> {
    TAPE.with(|t| std::mem::take(&mut t.borrow_mut().entries))
}

/// Run `f` with gradient recording disabled. Actors wrap their forward
/// passes in this; it restores the previous state on exit, including on panic.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            TAPE.with(|t| t.borrow_mut().enabled = self.0);
        }
    }
    let prev = TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let prev = t.enabled;
        t.enabled = false;
        prev
    });
    let _restore = Restore(prev);
    f()
}
