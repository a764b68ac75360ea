//! MetaImage (.mhd text header + .raw voxel file) reading and writing.
//!
//! Only the axis-aligned subset needed for CT volumes is supported:
//! NDims 3, MET_SHORT or MET_FLOAT elements, optional MSB byte order.
//! Headers declaring a non-identity TransformMatrix are rejected rather
//! than silently mishandled.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::io::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Short,
    Float,
}

impl ElementType {
    pub fn byte_size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::Float => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
        }
    }
}

/// Parsed header of one MetaImage volume. Geometric fields are stored in
/// the internal (z, y, x) order; the file order is (x, y, z).
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub element_type: ElementType,
    pub data_file: String,
    pub msb: bool,
}

fn parse_triple_f64(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::Parse(format!(
            "{key}: expected 3 values, got {}",
            parts.len()
        )));
    }
    let mut out = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("{key}: invalid number '{p}'")))?;
    }
    Ok(out)
}

/// Parse a .mhd header. Required keys: NDims (== 3), DimSize,
/// ElementSpacing, Offset, ElementType, ElementDataFile. Unknown keys are
/// ignored. DimSize/ElementSpacing/Offset are (x y z) in the file and come
/// back reordered to (z, y, x).
pub fn parse_mhd(header_text: &str) -> Result<VolumeMeta> {
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    for line in header_text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse(format!("malformed header line '{line}'")));
        };
        fields.insert(key.trim().to_string(), value.trim().to_string());
    }

    let require = |key: &str| -> Result<&String> {
        fields
            .get(key)
            .ok_or_else(|| Error::Parse(format!("missing required key {key}")))
    };

    let ndims = require("NDims")?;
    if ndims != "3" {
        return Err(Error::Parse(format!("NDims must be 3, got {ndims}")));
    }

    let dim_xyz = parse_triple_f64("DimSize", require("DimSize")?)?;
    let mut dims = [0usize; 3];
    for (i, &d) in dim_xyz.iter().enumerate() {
        if d.fract() != 0.0 || d < 1.0 {
            return Err(Error::Parse(format!("DimSize: invalid dimension {d}")));
        }
        // file order x y z -> store as (z, y, x)
        dims[2 - i] = d as usize;
    }

    let sp_xyz = parse_triple_f64("ElementSpacing", require("ElementSpacing")?)?;
    let spacing = [sp_xyz[2], sp_xyz[1], sp_xyz[0]];
    if spacing.iter().any(|&s| s <= 0.0) {
        return Err(Error::Parse(format!("ElementSpacing must be positive, got {sp_xyz:?}")));
    }

    let off_xyz = parse_triple_f64("Offset", require("Offset")?)?;
    let origin = [off_xyz[2], off_xyz[1], off_xyz[0]];

    let element_type = match require("ElementType")?.as_str() {
        "MET_SHORT" => ElementType::Short,
        "MET_FLOAT" => ElementType::Float,
        other => {
            return Err(Error::Parse(format!(
                "ElementType: unsupported type {other} (expected MET_SHORT or MET_FLOAT)"
            )))
        }
    };

    let data_file = require("ElementDataFile")?.clone();
    if data_file == "LOCAL" || data_file == "LIST" {
        return Err(Error::Parse(format!(
            "ElementDataFile: unsupported mode {data_file}"
        )));
    }

    let msb = match fields.get("BinaryDataByteOrderMSB").map(String::as_str) {
        Some("True") | Some("true") => true,
        Some("False") | Some("false") | None => false,
        Some(other) => {
            return Err(Error::Parse(format!(
                "BinaryDataByteOrderMSB: expected True or False, got {other}"
            )))
        }
    };

    if let Some(tm) = fields.get("TransformMatrix") {
        let m = parse_matrix(tm)?;
        let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        if m != identity {
            return Err(Error::Parse(
                "TransformMatrix: only the identity orientation is supported".into(),
            ));
        }
    }

    Ok(VolumeMeta {
        dims,
        spacing,
        origin,
        element_type,
        data_file,
        msb,
    })
}

fn parse_matrix(value: &str) -> Result<[f64; 9]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 9 {
        return Err(Error::Parse(format!(
            "TransformMatrix: expected 9 values, got {}",
            parts.len()
        )));
    }
    let mut m = [0.0; 9];
    for (i, p) in parts.iter().enumerate() {
        m[i] = p
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("TransformMatrix: invalid number '{p}'")))?;
    }
    Ok(m)
}

/// Render a header that `parse_mhd` reads back identically.
pub fn emit_mhd(meta: &VolumeMeta) -> String {
    let mut s = String::new();
    s.push_str("ObjectType = Image\n");
    s.push_str("NDims = 3\n");
    s.push_str("BinaryData = True\n");
    s.push_str(&format!(
        "BinaryDataByteOrderMSB = {}\n",
        if meta.msb { "True" } else { "False" }
    ));
    s.push_str("TransformMatrix = 1 0 0 0 1 0 0 0 1\n");
    // internal (z, y, x) -> file (x y z)
    s.push_str(&format!(
        "Offset = {} {} {}\n",
        meta.origin[2], meta.origin[1], meta.origin[0]
    ));
    s.push_str(&format!(
        "ElementSpacing = {} {} {}\n",
        meta.spacing[2], meta.spacing[1], meta.spacing[0]
    ));
    s.push_str(&format!(
        "DimSize = {} {} {}\n",
        meta.dims[2], meta.dims[1], meta.dims[0]
    ));
    s.push_str(&format!("ElementType = {}\n", meta.element_type.name()));
    s.push_str(&format!("ElementDataFile = {}\n", meta.data_file));
    s
}

/// Decode the raw voxel payload described by `meta` into a volume.
pub fn load_volume(meta: &VolumeMeta, raw_bytes: &[u8]) -> Result<Volume> {
    let count = meta.dims[0] * meta.dims[1] * meta.dims[2];
    let expect = count * meta.element_type.byte_size();
    if raw_bytes.len() != expect {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!(
                "raw payload is {} bytes, expected {expect} for dims {:?} ({})",
                raw_bytes.len(),
                meta.dims,
                meta.element_type.name()
            ),
        )));
    }
    let data: Vec<f32> = match meta.element_type {
        ElementType::Short => raw_bytes
            .chunks_exact(2)
            .map(|b| {
                let v = if meta.msb {
                    i16::from_be_bytes([b[0], b[1]])
                } else {
                    i16::from_le_bytes([b[0], b[1]])
                };
                v as f32
            })
            .collect(),
        ElementType::Float => raw_bytes
            .chunks_exact(4)
            .map(|b| {
                let arr = [b[0], b[1], b[2], b[3]];
                if meta.msb {
                    f32::from_be_bytes(arr)
                } else {
                    f32::from_le_bytes(arr)
                }
            })
            .collect(),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("volume contains non-finite intensities".into()));
    }
    Volume::new(meta.dims, meta.spacing, meta.origin, data)
}

/// Encode volume intensities as raw MET_FLOAT (little-endian) bytes.
pub fn volume_to_raw_f32(volume: &Volume) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(volume.data.len() * 4);
    for &v in &volume.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "ObjectType = Image\n\
        NDims = 3\n\
        DimSize = 6 5 4\n\
        ElementSpacing = 0.703125 0.703125 2.5\n\
        Offset = -80 -90 -100\n\
        ElementType = MET_SHORT\n\
        ElementDataFile = scan.raw\n";

    #[test]
    fn parses_and_reorders_axes() {
        let meta = parse_mhd(HEADER).unwrap();
        assert_eq!(meta.dims, [4, 5, 6]);
        assert_eq!(meta.spacing, [2.5, 0.703125, 0.703125]);
        assert_eq!(meta.origin, [-100.0, -90.0, -80.0]);
        assert_eq!(meta.element_type, ElementType::Short);
        assert_eq!(meta.data_file, "scan.raw");
        assert!(!meta.msb);
    }

    #[test]
    fn missing_key_named_in_error() {
        let broken = HEADER.replace("DimSize = 6 5 4\n", "");
        match parse_mhd(&broken) {
            Err(Error::Parse(msg)) => assert!(msg.contains("DimSize"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_ndims_rejected() {
        let broken = HEADER.replace("NDims = 3", "NDims = 2");
        assert!(parse_mhd(&broken).is_err());
    }

    #[test]
    fn unsupported_element_type_rejected() {
        let broken = HEADER.replace("MET_SHORT", "MET_UCHAR");
        match parse_mhd(&broken) {
            Err(Error::Parse(msg)) => assert!(msg.contains("ElementType"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_identity_transform_rejected() {
        let rotated = format!("{HEADER}TransformMatrix = 0 1 0 -1 0 0 0 0 1\n");
        assert!(parse_mhd(&rotated).is_err());
        let identity = format!("{HEADER}TransformMatrix = 1 0 0 0 1 0 0 0 1\n");
        assert!(parse_mhd(&identity).is_ok());
    }

    #[test]
    fn unknown_keys_ignored() {
        let extra = format!("{HEADER}CenterOfRotation = 0 0 0\nAnatomicalOrientation = RAI\n");
        assert!(parse_mhd(&extra).is_ok());
    }

    #[test]
    fn short_round_trip_little_endian() {
        let meta = parse_mhd(HEADER).unwrap();
        let values: Vec<i16> = (0..120).map(|i| (i as i16) - 60).collect();
        let mut raw = Vec::new();
        for v in &values {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        let vol = load_volume(&meta, &raw).unwrap();
        for (a, &b) in vol.data.iter().zip(&values) {
            assert_eq!(*a, b as f32);
        }
    }

    #[test]
    fn big_endian_honored() {
        let header = format!("{HEADER}BinaryDataByteOrderMSB = True\n");
        let meta = parse_mhd(&header).unwrap();
        let mut raw = Vec::new();
        for i in 0..120i16 {
            raw.extend_from_slice(&i.to_be_bytes());
        }
        let vol = load_volume(&meta, &raw).unwrap();
        assert_eq!(vol.data[5], 5.0);
    }

    #[test]
    fn byte_length_mismatch_rejected() {
        let meta = parse_mhd(HEADER).unwrap();
        assert!(load_volume(&meta, &[0u8; 10]).is_err());
    }

    #[test]
    fn emit_parse_identity() {
        let meta = VolumeMeta {
            dims: [12, 34, 56],
            spacing: [2.5, 0.7, 0.7],
            origin: [-10.0, 20.5, -30.25],
            element_type: ElementType::Float,
            data_file: "phantom.raw".into(),
            msb: false,
        };
        let parsed = parse_mhd(&emit_mhd(&meta)).unwrap();
        assert_eq!(parsed, meta);
    }

    #[test]
    fn float_payload_round_trip() {
        let vol = Volume::new(
            [2, 2, 2],
            [1.0; 3],
            [0.0; 3],
            vec![0.5, -1.25, 3.75, 0.0, 1.0, 2.0, -0.125, 9.5],
        )
        .unwrap();
        let meta = VolumeMeta {
            dims: vol.dims,
            spacing: vol.spacing,
            origin: vol.origin,
            element_type: ElementType::Float,
            data_file: "x.raw".into(),
            msb: false,
        };
        let raw = volume_to_raw_f32(&vol);
        let back = load_volume(&meta, &raw).unwrap();
        assert_eq!(back.data, vol.data);
    }
}
