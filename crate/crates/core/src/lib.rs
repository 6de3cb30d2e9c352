pub mod compose;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod spatial;
pub mod synth;
pub mod temporal;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod book_introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/data.md")]
pub mod book_data {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/decomposition.md")]
pub mod book_decomposition {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/composition.md")]
pub mod book_composition {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
pub mod book_training {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/fewshot.md")]
pub mod book_fewshot {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/audit.md")]
pub mod book_audit {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
pub mod book_cli {}
