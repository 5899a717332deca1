//! Deliberate defects that can be switched on for the current thread, used
//! to confirm the verification suite notices a broken group action.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Monomial action multiplies columns by `d_{i-1}` instead of dividing.
    MonomialDropInverse,
    /// GL action uses `U_i^T` on the key projection instead of `U_i^{-1}`.
    GlDropInverse,
}

thread_local! {
    static ACTIVE: Cell<Option<Fault>> = const { Cell::new(None) };
}

pub(crate) fn active() -> Option<Fault> {
    ACTIVE.with(Cell::get)
}

/// The fault injected into this thread, if any.
pub fn current_fault() -> Option<Fault> {
    active()
}

/// Runs `f` with `fault` injected into this thread's group actions.
pub fn with_fault<R>(fault: Fault, f: impl FnOnce() -> R) -> R {
    struct Restore(Option<Fault>);
    impl Drop for Restore {
        fn drop(&mut self) {
            ACTIVE.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(ACTIVE.with(|c| c.replace(Some(fault))));
    f()
}
