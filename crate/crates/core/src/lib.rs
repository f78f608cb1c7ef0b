//! Task-aware channel gating for task-incremental learning.
//!
//! A gated network learns each task on a subset of its channels, freezes
//! those channels afterwards, and keeps per-task gates, heads and class
//! prototypes in a memory bank so earlier tasks can be replayed exactly.

pub mod correlation;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod gatednet;
pub mod harness;
pub mod lifecycle;
pub mod losses;
pub mod membank;

pub use error::{Error, Result};
