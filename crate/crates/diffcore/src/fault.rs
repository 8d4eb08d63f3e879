//! Mutation hooks used by verification fixtures to prove that gradient
//! checks detect broken backward rules. Never enabled in normal operation.

use std::cell::Cell;

thread_local! {
    static FLIP_CUMSUM_VJP: Cell<bool> = const { Cell::new(false) };
}

pub(crate) fn cumsum_vjp_flipped() -> bool {
    FLIP_CUMSUM_VJP.with(Cell::get)
}

/// Runs `f` with the sign of the cumulative-sum vector-Jacobian product
/// inverted on this thread.
pub fn with_flipped_cumsum_vjp<R>(f: impl FnOnce() -> R) -> R {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            FLIP_CUMSUM_VJP.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(FLIP_CUMSUM_VJP.with(|c| c.replace(true)));
    f()
}
