//! Tensor records: one JSON header line followed by the little-endian `f64`
//! payload.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

pub fn write_tensor_record<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<(), NumericsError> {
    let header = TensorHeader {
        name: name.to_string(),
        dtype: "f64".to_string(),
        shape: t.shape().to_vec(),
    };
    let line = serde_json::to_string(&header).map_err(|e| NumericsError::Format(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_tensor_record<R: BufRead>(r: &mut R) -> Result<Option<(String, Tensor)>, NumericsError> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    let header: TensorHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| NumericsError::Format(format!("bad header {:?}: {e}", line.trim_end())))?;
    if header.dtype != "f64" {
        return Err(NumericsError::Format(format!(
            "unsupported dtype {:?} for {}",
            header.dtype, header.name
        )));
    }
    let n: usize = header.shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| NumericsError::Format(format!("truncated payload for {}: {e}", header.name)))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Some((header.name, Tensor::new(header.shape, data)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn records_roundtrip_bit_exact() {
        let mut rng = RngStream::new(5);
        let a = Tensor::randn([3, 2], &mut rng);
        let b = Tensor::scalar(-0.0);
        let mut buf = Vec::new();
        write_tensor_record(&mut buf, "a", &a).unwrap();
        write_tensor_record(&mut buf, "b", &b).unwrap();
        let mut cur = std::io::Cursor::new(buf);
        let (na, ra) = read_tensor_record(&mut cur).unwrap().unwrap();
        let (nb, rb) = read_tensor_record(&mut cur).unwrap().unwrap();
        assert!(read_tensor_record(&mut cur).unwrap().is_none());
        assert_eq!((na.as_str(), nb.as_str()), ("a", "b"));
        assert_eq!(ra, a);
        assert_eq!(rb.item().to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn header_line_format() {
        let mut buf = Vec::new();
        write_tensor_record(&mut buf, "w", &Tensor::zeros([2])).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(
            std::str::from_utf8(&buf[..nl]).unwrap(),
            r#"{"name":"w","dtype":"f64","shape":[2]}"#
        );
        assert_eq!(buf.len(), nl + 1 + 16);
    }

    #[test]
    fn truncated_payload_errors() {
        let mut buf = Vec::new();
        write_tensor_record(&mut buf, "w", &Tensor::zeros([4])).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor_record(&mut std::io::Cursor::new(buf)).is_err());
    }
}
