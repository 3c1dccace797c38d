//! Serialization helpers for the artifact envelope: bulk `f64` data is stored
//! as base64 of little-endian IEEE-754 bytes so reloads are bit-exact.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

fn encode(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode(text: &str) -> Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!(
            "payload of {} bytes is not a whole number of f64 values",
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// `#[serde(with = "f64_b64")]` for `Vec<f64>`.
pub mod f64_b64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::encode(values))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        super::decode(&text).map_err(serde::de::Error::custom)
    }
}

/// `#[serde(with = "matrix_b64")]` for `ndarray::Array2<f64>`.
pub mod matrix_b64 {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Encoded {
        rows: usize,
        cols: usize,
        data: String,
    }

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let values: Vec<f64> = m.iter().copied().collect();
        Encoded {
            rows: m.nrows(),
            cols: m.ncols(),
            data: super::encode(&values),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let e = Encoded::deserialize(d)?;
        let values = super::decode(&e.data).map_err(serde::de::Error::custom)?;
        Array2::from_shape_vec((e.rows, e.cols), values).map_err(serde::de::Error::custom)
    }
}
