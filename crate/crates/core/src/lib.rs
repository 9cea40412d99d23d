//! Weighted logical key hierarchy (LKH) trees for secure multicast.
//!
//! Members carry a withdrawal probability; the tree is shaped so that likely
//! leavers sit close to the root. The crate provides the tree and its
//! mutations, four insertion policies, cost metrics and bounds, a rekey
//! history with forward/backward security audits, and a churn simulator.

pub mod analysis;
pub mod cli;
pub mod key_tree;
pub mod policies;
pub mod rekey;
pub mod simulator;

pub use analysis::{build_huffman, entropy, withdrawal_costs, BoundConstants, CostReport};
pub use key_tree::{KeyTree, Member, MemberId, NodeId, Shape, TreeError, TreeMutation};
pub use policies::{select, Policy, Selection};
pub use rekey::{AuditReport, KeyEpoch};
pub use simulator::{run, sweep, SimulationConfig, SimulationReport};
