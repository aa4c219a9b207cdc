//! 16-ary range coding driven by quantized model probabilities, plus the
//! adaptive binary contexts used for weight deltas.

mod binary;
mod pmf;
mod range;
mod varint;

pub use binary::{BinaryContext, ExpGolombCoder};
pub use pmf::{quantize_pmf, QuantizedPmf, ALPHABET, PMF_BITS, PMF_TOTAL};
pub use range::{RangeDecoder, RangeEncoder};
pub use varint::{read_varint, write_varint};
