//! Compiles the guide in `book/src` as doctests, one module per chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/dataset.md")]
pub mod dataset {}
#[doc = include_str!("../../../book/src/stylization.md")]
pub mod stylization {}
#[doc = include_str!("../../../book/src/avatar.md")]
pub mod avatar {}
#[doc = include_str!("../../../book/src/editor.md")]
pub mod editor {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
