//! MetaImage (`.mhd` header + `.raw` payload) reader and writer.
//!
//! Only uncompressed, little-endian, three-dimensional images are handled.
//! The element type fixes the [`ElementKind`]:
//!
//! | ElementType | kind          | bytes |
//! |-------------|---------------|-------|
//! | `MET_SHORT` | CT (HU)       | 2     |
//! | `MET_UCHAR` | binary mask   | 1     |
//! | `MET_FLOAT` | probability   | 4     |

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{ElementKind, Volume3D};

const KNOWN_KEYS: &[&str] = &[
    "ObjectType",
    "NDims",
    "BinaryData",
    "BinaryDataByteOrderMSB",
    "ElementByteOrderMSB",
    "CompressedData",
    "TransformMatrix",
    "CenterOfRotation",
    "AnatomicalOrientation",
    "DimSize",
    "ElementType",
    "ElementSpacing",
    "Offset",
    "ElementDataFile",
];

fn element_type(kind: ElementKind) -> (&'static str, usize) {
    match kind {
        ElementKind::CtHu => ("MET_SHORT", 2),
        ElementKind::BinaryMask => ("MET_UCHAR", 1),
        ElementKind::Probability => ("MET_FLOAT", 4),
    }
}

fn parse_header(text: &str) -> Result<HashMap<String, String>> {
    let mut keys: HashMap<String, String> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Header(format!("line {}: expected `key = value`", lineno + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if let Some(prev) = keys.get(&k) {
            if *prev != v {
                return Err(Error::Header(format!("key {k} given twice with different values")));
            }
        }
        if !KNOWN_KEYS.contains(&k.as_str()) {
            log::debug!("ignoring metaimage key {k}");
        }
        keys.insert(k, v);
    }
    Ok(keys)
}

fn parse_triple<T: std::str::FromStr>(keys: &HashMap<String, String>, key: &str) -> Result<Option<[T; 3]>> {
    let Some(v) = keys.get(key) else {
        return Ok(None);
    };
    let parts: Vec<&str> = v.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::Header(format!("{key} needs 3 values, got `{v}`")));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::Header(format!("{key}: cannot parse `{p}`")))?,
        );
    }
    let mut it = out.into_iter();
    Ok(Some([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]))
}

fn is_true(v: &str) -> bool {
    matches!(v.to_ascii_lowercase().as_str(), "true" | "1")
}

/// Reads a MetaImage header and its companion raw file.
pub fn read_mhd(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let keys = parse_header(&text)?;

    let ndims = keys
        .get("NDims")
        .ok_or_else(|| Error::Header("missing NDims".into()))?;
    if ndims.trim() != "3" {
        return Err(Error::Header(format!("NDims = {ndims}, only 3 is supported")));
    }
    for key in ["ElementByteOrderMSB", "BinaryDataByteOrderMSB"] {
        if keys.get(key).is_some_and(|v| is_true(v)) {
            return Err(Error::Header(format!("{key} = True (big-endian) is not supported")));
        }
    }
    if keys.get("CompressedData").is_some_and(|v| is_true(v)) {
        return Err(Error::Header("compressed payloads are not supported".into()));
    }
    let dims: [usize; 3] =
        parse_triple(&keys, "DimSize")?.ok_or_else(|| Error::Header("missing DimSize".into()))?;
    let spacing: [f64; 3] = parse_triple(&keys, "ElementSpacing")?.unwrap_or([1.0; 3]);
    let origin: [f64; 3] = parse_triple(&keys, "Offset")?.unwrap_or([0.0; 3]);
    let etype = keys
        .get("ElementType")
        .ok_or_else(|| Error::Header("missing ElementType".into()))?;
    let kind = match etype.as_str() {
        "MET_SHORT" => ElementKind::CtHu,
        "MET_UCHAR" => ElementKind::BinaryMask,
        "MET_FLOAT" => ElementKind::Probability,
        other => return Err(Error::UnsupportedElementType(other.to_string())),
    };
    let data_file = keys
        .get("ElementDataFile")
        .ok_or_else(|| Error::Header("missing ElementDataFile".into()))?;
    if data_file == "LOCAL" {
        return Err(Error::Header("ElementDataFile = LOCAL is not supported".into()));
    }
    let raw_path = path.parent().unwrap_or(Path::new(".")).join(data_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;

    let n = dims[0] * dims[1] * dims[2];
    let (_, width) = element_type(kind);
    if bytes.len() != n * width {
        return Err(Error::RawSize {
            expected: n * width,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = match kind {
        ElementKind::CtHu => bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        ElementKind::BinaryMask => bytes.iter().map(|b| if *b != 0 { 1.0 } else { 0.0 }).collect(),
        ElementKind::Probability => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    Volume3D::new(dims, spacing, origin, kind, data)
}

/// Writes `<path>` (header) and `<path stem>.raw` next to it.
pub fn write_mhd(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    v.validate()?;
    let (etype, width) = element_type(v.kind());
    let raw_name = raw_file_name(path);
    let raw_path = path.parent().unwrap_or(Path::new(".")).join(&raw_name);

    let [d, w, h] = v.dims();
    let sp = v.spacing();
    let o = v.origin();
    let header = format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         ElementByteOrderMSB = False\n\
         CompressedData = False\n\
         Offset = {:?} {:?} {:?}\n\
         ElementSpacing = {:?} {:?} {:?}\n\
         DimSize = {d} {w} {h}\n\
         ElementType = {etype}\n\
         ElementDataFile = {raw_name}\n",
        o[0], o[1], o[2], sp[0], sp[1], sp[2],
    );

    let mut bytes = Vec::with_capacity(v.len() * width);
    match v.kind() {
        ElementKind::CtHu => {
            for x in v.data() {
                bytes.extend_from_slice(&(*x as i16).to_le_bytes());
            }
        }
        ElementKind::BinaryMask => bytes.extend(v.data().iter().map(|x| *x as u8)),
        ElementKind::Probability => {
            for x in v.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn raw_file_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into());
    format!("{stem}.raw")
}

/// Path of the raw payload belonging to a header written by [`write_mhd`].
pub fn raw_path_for(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    path.parent().unwrap_or(Path::new(".")).join(raw_file_name(path))
}
