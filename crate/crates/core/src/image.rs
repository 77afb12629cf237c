//! 8-bit binary PGM (P5) input and output.

use std::path::Path;

use crate::dwt::Grid;
use crate::error::{Error, Result};

/// Parses a binary 8-bit PGM into samples in `[0, 255]`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Grid<f32>> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::UnsupportedFormat("not a PGM file".into()));
    }
    match bytes[1] {
        b'5' => {}
        b'2' => return Err(Error::UnsupportedFormat("ASCII PGM (P2) is not supported".into())),
        m => return Err(Error::UnsupportedFormat(format!("netpbm variant P{}", m as char))),
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for f in &mut fields {
        *f = header_number(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval}")));
    }
    if maxval > 255 {
        return Err(Error::UnsupportedDepth(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Truncated("PGM header".into())),
    }
    let (w, h) = (width as usize, height as usize);
    if w == 0 || h == 0 {
        return Err(Error::UnsupportedFormat("empty image".into()));
    }
    let raster = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Truncated(format!("PGM raster needs {} bytes, {} present", w * h, bytes.len() - pos)))?;
    Ok(Grid {
        height: h,
        width: w,
        data: raster.iter().map(|&b| b as f32).collect(),
    })
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    loop {
        match bytes.get(*pos) {
            None => return Err(Error::Truncated("PGM header".into())),
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&c| c != b'\n') {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::UnsupportedFormat("malformed PGM header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("ascii digits")
        .parse()
        .map_err(|_| Error::UnsupportedFormat("PGM header value out of range".into()))
}

/// Rounds and clamps samples to 8 bits.
pub fn to_u8(g: &Grid<f32>) -> Vec<u8> {
    g.data.iter().map(|&v| if v.is_nan() { 0 } else { v.round().clamp(0.0, 255.0) as u8 }).collect()
}

/// Grid rounded and clamped to the 8-bit range.
pub fn quantize_8bit(g: &Grid<f32>) -> Grid<f32> {
    Grid {
        height: g.height,
        width: g.width,
        data: to_u8(g).into_iter().map(f32::from).collect(),
    }
}

pub fn encode_pgm(g: &Grid<f32>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", g.width, g.height).into_bytes();
    out.extend(to_u8(g));
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Grid<f32>> {
    parse_pgm(&std::fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, g: &Grid<f32>) -> Result<()> {
    std::fs::write(path, encode_pgm(g))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn round_trip_is_identical() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let g = Grid::from_fn(17, 33, |_, _| rng.gen_range(0..=255u8) as f32);
        assert_eq!(parse_pgm(&encode_pgm(&g)).unwrap(), g);
    }

    #[test]
    fn comments_are_skipped() {
        let mut b = b"P5\n# made by hand\n2 # width\n1\n255\n".to_vec();
        b.extend([7, 200]);
        assert_eq!(parse_pgm(&b).unwrap().data, vec![7.0, 200.0]);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(parse_pgm(b"P2\n2 1\n255\n1 2\n"), Err(Error::UnsupportedFormat(_))));
        let mut deep = b"P5\n2 1\n65535\n".to_vec();
        deep.extend([0, 1, 0, 2]);
        assert!(matches!(parse_pgm(&deep), Err(Error::UnsupportedDepth(65535))));
        assert!(matches!(parse_pgm(b"P5\n4 4\n255\n\x01\x02"), Err(Error::Truncated(_))));
        assert!(matches!(parse_pgm(b"P5\n4 4"), Err(Error::Truncated(_))));
        assert!(matches!(parse_pgm(b"GIF89a"), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn writing_clamps_and_rounds() {
        let g = Grid { height: 1, width: 4, data: vec![-3.0, 0.49, 254.6, 999.0] };
        assert_eq!(to_u8(&g), vec![0, 0, 255, 255]);
    }
}
