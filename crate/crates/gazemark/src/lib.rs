//! IO, endpoint, and pipeline layer over `gazemark-core`.
//!
//! The core crate holds the portable algorithms; this crate adds file
//! formats, PNG/JPEG codecs, the chat-completions client with its mock
//! server, the exchange cache, and the five pipeline stages the `gazemark`
//! binary exposes.

pub mod cache;
pub mod client;
pub mod config;
pub mod formats;
pub mod gaze_io;
pub mod imaging;
pub mod mock;
pub mod pipeline;
pub mod services;
