//! File formats: binary PPM input, binary PGM map dumps, proposal JSON,
//! dataset directories, weight files and `key = value` config files.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::dataset::LabeledImage;
use crate::error::{DidError, Result};
use crate::image::Image;
use crate::pipeline::PredictionResult;
use crate::semantic::HeadKernel;
use crate::tensor::Tensor;
use crate::vit::BackboneWeights;

pub const MANIFEST: &str = "labels.txt";

/// Splits a netpbm header into `count` numeric fields after the magic,
/// skipping `#` comments. Returns the fields and the payload offset.
fn parse_header(bytes: &[u8], magic: &[u8], count: usize, path: &Path) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(DidError::format(
            path,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(count);
    while fields.len() < count {
        match bytes.get(pos) {
            None => return Err(DidError::format(path, "truncated header")),
            Some(b'#') => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b) if b.is_ascii_digit() => {
                let start = pos;
                while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                    pos += 1;
                }
                let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
                fields.push(
                    text.parse()
                        .map_err(|_| DidError::format(path, format!("header value {text} out of range")))?,
                );
            }
            Some(&b) => {
                return Err(DidError::format(
                    path,
                    format!("unexpected byte 0x{b:02x} in header"),
                ))
            }
        }
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((fields, pos + 1)),
        _ => Err(DidError::format(path, "missing separator after header")),
    }
}

/// Reads a binary (`P6`, maxval 255) PPM, scaling bytes by 1/255.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let (fields, offset) = parse_header(&bytes, b"P6", 3, path)?;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(DidError::format(path, format!("maxval {maxval} is not supported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(DidError::format(path, "zero image extent"));
    }
    let needed = width * height * 3;
    let payload = &bytes[offset..];
    if payload.len() < needed {
        return Err(DidError::format(
            path,
            format!("truncated payload: {} of {needed} bytes", payload.len()),
        ));
    }
    let data = payload[..needed].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(height, width, data)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", image.width(), image.height())?;
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_byte(v)).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Min-max normalises a map to bytes; a constant map becomes mid-grey 128.
pub fn pgm_bytes(map: &Tensor) -> Result<Vec<u8>> {
    map.dims2()?;
    let min = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(if max > min {
        map.data()
            .iter()
            .map(|&v| ((v - min) / (max - min) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128; map.len()]
    })
}

pub fn write_pgm(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = map.dims2()?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.write_all(&pgm_bytes(map)?)?;
    out.flush()?;
    Ok(())
}

fn json_reals(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v:.6}");
    }
    out.push(']');
}

/// Serialises scores and proposals with a fixed key order and six decimals.
pub fn proposals_json(result: &PredictionResult) -> String {
    let mut out = String::from("{\"global_scores\":");
    json_reals(&mut out, &result.global_scores);
    out.push_str(",\"fused_scores\":");
    json_reals(&mut out, &result.fused_scores);
    out.push_str(",\"proposals\":[");
    for (i, p) in result.proposals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let [x0, y0, x1, y1] = p.bbox.as_array();
        let _ = write!(
            out,
            "{{\"class_id\":{},\"score\":{:.6},\"bbox\":[{x0},{y0},{x1},{y1}]}}",
            p.class_id, p.confidence
        );
    }
    out.push_str("]}\n");
    out
}

pub fn write_proposals_json(result: &PredictionResult, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, proposals_json(result))?;
    Ok(())
}

pub fn save_weights(weights: &BackboneWeights, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    weights.write_to(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<BackboneWeights> {
    let path = path.as_ref();
    BackboneWeights::read_from(BufReader::new(fs::File::open(path)?)).map_err(|e| with_path(e, path))
}

pub fn save_head(head: &HeadKernel, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    head.write_to(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_head(path: impl AsRef<Path>) -> Result<HeadKernel> {
    let path = path.as_ref();
    HeadKernel::read_from(BufReader::new(fs::File::open(path)?)).map_err(|e| with_path(e, path))
}

fn with_path(err: DidError, path: &Path) -> DidError {
    match err {
        DidError::Io(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            DidError::format(path, "file is truncated")
        }
        other => other,
    }
}

/// Writes `img_NNNNN.ppm` files plus a manifest with one line per image:
/// the file name followed by one `0`/`1` flag per class.
pub fn save_dataset(dataset: &[LabeledImage], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, item) in dataset.iter().enumerate() {
        let name = format!("img_{i:05}.ppm");
        write_ppm(&item.image, dir.join(&name))?;
        manifest.push_str(&name);
        for &l in &item.labels {
            manifest.push_str(if l { " 1" } else { " 0" });
        }
        manifest.push('\n');
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)?;
    let mut items = Vec::new();
    let mut classes = None;
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(name) = parts.next() else { continue };
        let labels = parts
            .map(|f| match f {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(DidError::format(
                    &manifest_path,
                    format!("line {}: label flag '{other}' is not 0 or 1", n + 1),
                )),
            })
            .collect::<Result<Vec<bool>>>()?;
        if *classes.get_or_insert(labels.len()) != labels.len() {
            return Err(DidError::format(
                &manifest_path,
                format!("line {}: expected {} flags", n + 1, classes.unwrap_or(0)),
            ));
        }
        let image = read_ppm(dir.join(name))?;
        items.push(LabeledImage::new(image, labels).map_err(|_| {
            DidError::format(&manifest_path, format!("line {}: no positive label", n + 1))
        })?);
    }
    Ok(items)
}

/// Parses `key = value` lines; blank lines and `#` comments are ignored.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DidError::Config(format!("config line {} has no '='", n + 1)))?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}
