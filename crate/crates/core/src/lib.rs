//! Knowledge-based visual question answering with a jointly trained
//! retriever and reader.

pub mod encoder;
pub mod error;
pub mod harness;
pub mod knowledge;
pub mod params;
pub mod reader;
pub mod retriever;
pub mod synth;
pub mod tensor;
