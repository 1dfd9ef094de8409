//! Binary PGM (P5) reading and writing for single-channel maps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorgrad::Tensor;

/// Write `values` (`[H,W]` or `[1,H,W]`) as 8-bit P5, mapping `[0, scale]` to
/// `[0, 255]`. Values are clamped.
pub fn write_pgm(path: &Path, values: &Tensor, scale: f64) -> Result<()> {
    let (h, w) = hw(values)?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    let k = if scale > 0.0 { 255.0 / scale } else { 0.0 };
    bytes.extend(values.data().iter().map(|&v| (v * k).round().clamp(0.0, 255.0) as u8));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Max-normalized 8-bit export for visualization.
pub fn write_pgm_normalized(path: &Path, values: &Tensor) -> Result<()> {
    let m = values.max();
    write_pgm(path, values, if m > 0.0 { m } else { 1.0 })
}

/// Read a P5 image into `[1,H,W]` with values divided by maxval.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|m| Error::data(format!("{}: {m}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(format!("unsupported magic {:?}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("invalid header {w}x{h} max {maxval}"));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    let data: Vec<f64> = if maxval < 256 {
        if body.len() < w * h {
            return Err("truncated pixel data".into());
        }
        body[..w * h].iter().map(|&b| b as f64 / maxval as f64).collect()
    } else {
        if body.len() < 2 * w * h {
            return Err("truncated pixel data".into());
        }
        body[..2 * w * h]
            .chunks(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64)
            .collect()
    };
    Tensor::new(vec![1, h, w], data).map_err(|e| e.to_string())
}

fn hw(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((*h, *w)),
        s => Err(Error::usage(format!(
            "PGM export needs a single-channel map, got {s:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let t = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 0.25, 2.0, -1.0]).unwrap();
        write_pgm(&p, &t, 1.0).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!(back.shape(), &[1, 2, 3]);
        let expect = [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0, 1.0, 0.0];
        for (a, b) in back.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\x00").is_err());
    }
}
