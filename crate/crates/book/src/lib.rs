// mdbook cannot test listings that depend on workspace crates, so each
// chapter is pulled in as the docs of an empty module and rustdoc runs the
// listings as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/embedding.md")]
pub mod embedding {}
#[doc = include_str!("../../../book/src/subsetting.md")]
pub mod subsetting {}
#[doc = include_str!("../../../book/src/classifiers.md")]
pub mod classifiers {}
#[doc = include_str!("../../../book/src/protocol.md")]
pub mod protocol {}
#[doc = include_str!("../../../book/src/weights.md")]
pub mod weights {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
