pub mod backend;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod layout;
pub mod orchestrator;
pub mod pipeline;
pub mod render;
pub mod store;
pub mod text;

pub use error::{Error, ErrorClass, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/layouts.md")]
    mod layouts {}
    #[doc = include_str!("../../../book/src/render.md")]
    mod render {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/datagen.md")]
    mod datagen {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
}
