//! Base64 payloads of little-endian `f32` values, used by the cohort file
//! and model checkpoints.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("invalid base64 payload: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("payload length {0} is not a multiple of 4 bytes")]
    Ragged(usize),
    #[error("expected {expected} values, payload holds {found}")]
    Count { expected: usize, found: usize },
}

pub fn encode_f32(values: impl IntoIterator<Item = f32>) -> String {
    let bytes: Vec<u8> = values.into_iter().flat_map(f32::to_le_bytes).collect();
    STANDARD.encode(bytes)
}

/// Encode `f64` values, rounding each to the nearest `f32`.
pub fn encode_f64_as_f32<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    encode_f32(values.into_iter().map(|&v| v as f32))
}

pub fn decode_f32(payload: &str, expected: Option<usize>) -> Result<Vec<f32>, CodecError> {
    let bytes = STANDARD.decode(payload.trim())?;
    if bytes.len() % 4 != 0 {
        return Err(CodecError::Ragged(bytes.len()));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(expected) = expected {
        if values.len() != expected {
            return Err(CodecError::Count { expected, found: values.len() });
        }
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn little_endian_layout() {
        // 1.0f32 = 0x3F800000 -> bytes 00 00 80 3F
        assert_eq!(encode_f32([1.0]), "AACAPw==");
        assert_eq!(decode_f32("AACAPw==", Some(1)).unwrap(), vec![1.0]);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(matches!(decode_f32("AACA", None), Err(CodecError::Ragged(3))));
        assert!(matches!(
            decode_f32("AACAPw==", Some(2)),
            Err(CodecError::Count { expected: 2, found: 1 })
        ));
    }
}
