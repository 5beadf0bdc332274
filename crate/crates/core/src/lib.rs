//! Transparent handle-based memory management at desk scale: a compiler
//! pass over a small SSA IR that inserts and hoists handle translations, a
//! runtime with a single-level handle table and cooperative safepoint
//! barriers, a defragmenting allocator paced by a feedback controller, and
//! an interpreter that serves as the observational-equivalence oracle.

pub mod anchorage;
pub mod control;
pub mod handle;
pub mod harness;
pub mod interp;
pub mod ir;
pub mod pass;
pub mod pin;
pub mod runtime;

pub use anchorage::{AnchorageConfig, Heap, HeapStats, MoveReport};
pub use control::{Action, ControlParams, ControlState, Mode};
pub use handle::{classify, Classified, Handle, HandleTable};
pub use pin::{GlobalPinMap, MutatorContext, PinFrame};
pub use runtime::{BackingService, HandleWorld, PauseModel};
