//! A laboratory for collaborative question answering over disjoint
//! knowledge graphs.
//!
//! Three panelist agents each own one synthetic knowledge graph. A moderator
//! agent decomposes a multi-hop question into single-hop sub-questions,
//! broadcasts them, and learns which sub-question to ask by policy gradient.

pub mod arena;
pub mod kgsynth;
pub mod moderator;
pub mod numerics;
pub mod panelist;
pub mod taskgen;
