//! Syntax-guided attention masking for grounded instruction following.
//!
//! The crate bundles a small grid world with a command grammar, a
//! deterministic parser that turns commands into dependency or constituency
//! trees, an oracle planner that produces gold action sequences, a
//! reverse-mode autodiff engine, and a multimodal transformer whose text
//! self-attention is restricted to tokens connected in the parse.

pub mod cli;
pub mod dataset;
pub mod eval;
pub mod grammar;
pub mod model;
pub mod gridworld;
pub mod oracle;
pub mod presets;
pub mod syntax;
pub mod tensor;
pub mod train;

pub use dataset::{Episode, SplitName, SplitSpec};
pub use grammar::{parse_ast, parse_command, render, sample_command, CommandAst, TokenSeq};
pub use gridworld::{encode_cell, encode_world, step, Action, World};
pub use oracle::{oracle, plan, resolve, Plan, Referent};
pub use syntax::{mask_from_constituency, mask_from_dependency, parse_constituency, parse_dependency, AttentionMask, DependencyTree};
