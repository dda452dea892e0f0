//! Safety filters for input-constrained systems, built around control
//! barrier functions and the backup set method.
//!
//! The crate provides three controllers over a control-affine model:
//!
//! * a plain CBF quadratic program ([`safety::cbf_qp_controller`]),
//! * the discretized backup-set program, which stays feasible under input
//!   bounds by steering relative to an evasive backup policy
//!   ([`safety::backup_controller`]), and
//! * its input-to-state safe variant, which buys robustness to bounded model
//!   discrepancy through tightened, slack-relaxed constraints
//!   ([`safety::issf_backup_controller`]).
//!
//! Supporting pieces: joint state/sensitivity flow integration ([`flow`]), a
//! deterministic dense active-set QP solver ([`qp`]), a unicycle
//! obstacle-avoidance suite with a full-order tracking proxy ([`unicycle`]),
//! a closed-loop simulation harness with invariant reporting ([`sim`]), and a
//! small CLI ([`cli`]).
//!
//! Each major capability has a runnable demo under `examples/`.

pub mod cli;
pub mod flow;
pub mod qp;
pub mod safety;
pub mod sim;
pub mod unicycle;
