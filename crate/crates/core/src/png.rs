//! Minimal PNG codec: 8-bit truecolor (RGB), non-interlaced.

use crate::error::{GrafError, Result};
use crate::image::Image;

const SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
const CHANNELS: usize = 3;

fn err(offset: usize, reason: impl Into<String>) -> GrafError {
    GrafError::Png {
        offset,
        reason: reason.into(),
    }
}

fn write_chunk(out: &mut Vec<u8>, kind: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    let start = out.len();
    out.extend_from_slice(kind);
    out.extend_from_slice(body);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_be_bytes());
}

fn paeth(a: u8, b: u8, c: u8) -> u8 {
    let p = a as i16 + b as i16 - c as i16;
    let (pa, pb, pc) = ((p - a as i16).abs(), (p - b as i16).abs(), (p - c as i16).abs());
    if pa <= pb && pa <= pc {
        a
    } else if pb <= pc {
        b
    } else {
        c
    }
}

/// Filters one scanline with filter `kind` into `out`.
fn filter_row(kind: u8, row: &[u8], prev: &[u8], out: &mut Vec<u8>) {
    out.push(kind);
    for i in 0..row.len() {
        let a = if i >= CHANNELS { row[i - CHANNELS] } else { 0 };
        let b = prev[i];
        let c = if i >= CHANNELS { prev[i - CHANNELS] } else { 0 };
        let predicted = match kind {
            0 => 0,
            1 => a,
            2 => b,
            3 => ((a as u16 + b as u16) / 2) as u8,
            _ => paeth(a, b, c),
        };
        out.push(row[i].wrapping_sub(predicted));
    }
}

pub fn encode(img: &Image) -> Vec<u8> {
    let (w, h) = (img.width, img.height);
    let pixels = img.to_rgb8();
    let stride = w * CHANNELS;
    let zero = vec![0u8; stride];
    let mut raw = Vec::with_capacity(h * (stride + 1));
    let mut candidate = Vec::with_capacity(stride + 1);
    for y in 0..h {
        let row = &pixels[y * stride..(y + 1) * stride];
        let prev = if y == 0 {
            &zero[..]
        } else {
            &pixels[(y - 1) * stride..y * stride]
        };
        // Minimum sum of absolute residuals picks the filter per row.
        let mut best: Option<(u64, Vec<u8>)> = None;
        for kind in 0..5u8 {
            candidate.clear();
            filter_row(kind, row, prev, &mut candidate);
            let cost: u64 = candidate[1..].iter().map(|&v| (v as i8).unsigned_abs() as u64).sum();
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, candidate.clone()));
            }
        }
        raw.extend_from_slice(&best.expect("five candidates").1);
    }

    let mut out = SIGNATURE.to_vec();
    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&(w as u32).to_be_bytes());
    ihdr.extend_from_slice(&(h as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, 2, 0, 0, 0]);
    write_chunk(&mut out, b"IHDR", &ihdr);
    write_chunk(&mut out, b"IDAT", &miniz_oxide::deflate::compress_to_vec_zlib(&raw, 6));
    write_chunk(&mut out, b"IEND", &[]);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < SIGNATURE.len() || bytes[..8] != SIGNATURE {
        return Err(err(0, "missing PNG signature"));
    }
    let mut pos = 8;
    let mut header: Option<(usize, usize)> = None;
    let mut idat = Vec::new();
    let mut idat_at = None;
    let mut ended = false;
    while pos < bytes.len() {
        if bytes.len() - pos < 12 {
            return Err(err(pos, "truncated chunk header"));
        }
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let kind: [u8; 4] = bytes[pos + 4..pos + 8].try_into().unwrap();
        let body_at = pos + 8;
        if bytes.len() - body_at < len + 4 {
            return Err(err(pos, format!("truncated {} chunk", String::from_utf8_lossy(&kind))));
        }
        let body = &bytes[body_at..body_at + len];
        let stored = u32::from_be_bytes(bytes[body_at + len..body_at + len + 4].try_into().unwrap());
        if crc32fast::hash(&bytes[pos + 4..body_at + len]) != stored {
            return Err(err(body_at + len, "CRC mismatch"));
        }
        if header.is_none() && &kind != b"IHDR" {
            return Err(err(pos, "first chunk is not IHDR"));
        }
        match &kind {
            b"IHDR" => {
                if header.is_some() {
                    return Err(err(pos, "duplicate IHDR"));
                }
                if len != 13 {
                    return Err(err(pos, "IHDR length is not 13"));
                }
                let w = u32::from_be_bytes(body[0..4].try_into().unwrap()) as usize;
                let h = u32::from_be_bytes(body[4..8].try_into().unwrap()) as usize;
                let (depth, color, comp, filter, interlace) = (body[8], body[9], body[10], body[11], body[12]);
                if depth != 8 || color != 2 {
                    return Err(err(
                        body_at + 8,
                        format!("only 8-bit RGB is supported (bit depth {depth}, color type {color})"),
                    ));
                }
                if comp != 0 || filter != 0 || interlace != 0 {
                    return Err(err(body_at + 10, "unsupported compression, filter or interlace method"));
                }
                if w == 0 || h == 0 {
                    return Err(err(body_at, "zero image dimension"));
                }
                header = Some((w, h));
            }
            b"IDAT" => {
                idat_at.get_or_insert(body_at);
                idat.extend_from_slice(body);
            }
            b"IEND" => {
                ended = true;
                pos = body_at + len + 4;
                break;
            }
            _ => {
                if kind[0] & 0x20 == 0 {
                    return Err(err(
                        pos,
                        format!("unknown critical chunk {}", String::from_utf8_lossy(&kind)),
                    ));
                }
            }
        }
        pos = body_at + len + 4;
    }
    if !ended {
        return Err(err(pos, "missing IEND"));
    }
    let (w, h) = header.ok_or_else(|| err(8, "missing IHDR"))?;
    let idat_at = idat_at.ok_or_else(|| err(pos, "missing IDAT"))?;
    let raw = miniz_oxide::inflate::decompress_to_vec_zlib(&idat)
        .map_err(|e| err(idat_at, format!("zlib stream: {:?}", e.status)))?;
    let stride = w * CHANNELS;
    if raw.len() != h * (stride + 1) {
        return Err(err(
            idat_at,
            format!("image data is {} bytes, expected {}", raw.len(), h * (stride + 1)),
        ));
    }

    let mut pixels = vec![0u8; h * stride];
    for y in 0..h {
        let line = &raw[y * (stride + 1)..(y + 1) * (stride + 1)];
        let kind = line[0];
        if kind > 4 {
            return Err(err(idat_at, format!("scanline {y}: unknown filter type {kind}")));
        }
        let (done, rest) = pixels.split_at_mut(y * stride);
        let prev = if y == 0 { None } else { Some(&done[(y - 1) * stride..]) };
        let row = &mut rest[..stride];
        for i in 0..stride {
            let a = if i >= CHANNELS { row[i - CHANNELS] } else { 0 };
            let b = prev.map_or(0, |p| p[i]);
            let c = if i >= CHANNELS {
                prev.map_or(0, |p| p[i - CHANNELS])
            } else {
                0
            };
            let predicted = match kind {
                0 => 0,
                1 => a,
                2 => b,
                3 => ((a as u16 + b as u16) / 2) as u8,
                _ => paeth(a, b, c),
            };
            row[i] = line[1 + i].wrapping_add(predicted);
        }
    }
    Image::from_rgb8(w, h, &pixels)
}
