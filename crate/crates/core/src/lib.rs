//! Building blocks for layout-grounded text-to-image pipelines.
//!
//! A planner turns a prompt into boxes, the boxes are serialized into an
//! interleaved text–coordinate instruction, and that instruction conditions a
//! generator. This crate implements everything around the generator itself:
//!
//! - [`geometry`]: quantized boxes on a 1000×1000 canvas.
//! - [`codec`]: the interleaved instruction format and the `<|bbox_N|>`
//!   placeholder format.
//! - [`constraints`]: spatial constraints, a checker and violation magnitudes.
//! - [`planner`]: scene specs, a propose/check/revise layout search and the
//!   planner JSON schema.
//! - [`mllm_client`]: runs the planner prompt against a chat-completion API.
//! - [`dataset`]: grounded record I/O and a synthetic generator.
//! - [`metrics`]: SR, I-SR and mIoU for layouts.
//! - [`flowmatch`]: a small conditional flow-matching model on 2-D points.
//! - [`render`]: SVG previews of layouts.

pub mod codec;
pub mod constraints;
pub mod dataset;
pub mod flowmatch;
pub mod geometry;
pub mod metrics;
pub mod mllm_client;
pub mod planner;
pub mod render;

pub use codec::{GroundedEntity, InterleavedInstruction, Span, Token, TokenKind};
pub use geometry::BBox;
