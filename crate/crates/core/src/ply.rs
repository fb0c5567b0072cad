//! Binary PLY interchange in the layout Gaussian-splat training pipelines
//! emit: one `vertex` element with 59 little-endian float properties per splat
//! (position, SH DC and rest coefficients, opacity logit, log-scales, rotation
//! quaternion). Values round-trip bit-exactly; no activation is applied.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::CoreError;
use crate::record::{GaussianRecord, Snapshot, LIVE_EXIST_LOGIT};

/// Float properties per vertex, in file order.
pub const PLY_FIELD_COUNT: usize = 59;

/// Property names in the order they appear in the header and payload.
pub fn field_names() -> Vec<String> {
    let mut names = vec!["x".into(), "y".into(), "z".into()];
    for i in 0..3 {
        names.push(format!("f_dc_{i}"));
    }
    for i in 0..45 {
        names.push(format!("f_rest_{i}"));
    }
    names.push("opacity".into());
    for i in 0..3 {
        names.push(format!("scale_{i}"));
    }
    for i in 0..4 {
        names.push(format!("rot_{i}"));
    }
    names
}

/// Read a binary splat PLY. Records are assigned ids 0..n in file order and a
/// live exist logit; rotations are kept exactly as stored.
pub fn read_ply(path: impl AsRef<Path>) -> Result<Snapshot, CoreError> {
    let mut reader = BufReader::new(File::open(path.as_ref())?);
    let vertex_count = parse_header(&mut reader)?;

    let mut payload = vec![0u8; vertex_count * PLY_FIELD_COUNT * 4];
    reader.read_exact(&mut payload).map_err(|e| {
        CoreError::Format(format!(
            "payload truncated: expected {} bytes for {} vertices ({e})",
            payload.len(),
            vertex_count
        ))
    })?;

    let names = field_names();
    let mut gaussians = Vec::with_capacity(vertex_count);
    for row in 0..vertex_count {
        let base = row * PLY_FIELD_COUNT * 4;
        let mut fields = [0.0f32; PLY_FIELD_COUNT];
        for (i, field) in fields.iter_mut().enumerate() {
            let off = base + i * 4;
            let bits = u32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
            *field = f32::from_bits(bits);
            if !field.is_finite() {
                return Err(CoreError::NonFinite { field: names[i].clone(), row });
            }
        }
        gaussians.push(record_from_fields(row as u32, &fields));
    }

    Ok(Snapshot::new(0, "ply", gaussians))
}

/// Write a snapshot as a binary splat PLY. The exist logit is internal state
/// and is not written; everything else round-trips bit-exactly.
pub fn write_ply(path: impl AsRef<Path>, snapshot: &Snapshot) -> Result<(), CoreError> {
    if snapshot.is_empty() {
        return Err(CoreError::EmptySnapshot);
    }
    let mut writer = BufWriter::new(File::create(path.as_ref())?);

    writer.write_all(b"ply\n")?;
    writer.write_all(b"format binary_little_endian 1.0\n")?;
    writer.write_all(format!("element vertex {}\n", snapshot.len()).as_bytes())?;
    for name in field_names() {
        writer.write_all(format!("property float {name}\n").as_bytes())?;
    }
    writer.write_all(b"end_header\n")?;

    for rec in &snapshot.gaussians {
        for v in fields_from_record(rec) {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn record_from_fields(id: u32, f: &[f32; PLY_FIELD_COUNT]) -> GaussianRecord {
    let mut rec = GaussianRecord::zeroed(id);
    rec.position.copy_from_slice(&f[0..3]);
    rec.color.copy_from_slice(&f[3..6]);
    rec.sh_rest.copy_from_slice(&f[6..51]);
    rec.opacity = f[51];
    rec.log_scale.copy_from_slice(&f[52..55]);
    rec.rotation.copy_from_slice(&f[55..59]);
    rec.exist = LIVE_EXIST_LOGIT;
    rec
}

fn fields_from_record(rec: &GaussianRecord) -> [f32; PLY_FIELD_COUNT] {
    let mut f = [0.0f32; PLY_FIELD_COUNT];
    f[0..3].copy_from_slice(&rec.position);
    f[3..6].copy_from_slice(&rec.color);
    f[6..51].copy_from_slice(&rec.sh_rest);
    f[51] = rec.opacity;
    f[52..55].copy_from_slice(&rec.log_scale);
    f[55..59].copy_from_slice(&rec.rotation);
    f
}

/// Parse the ASCII header, validating the exact expected property list.
/// Returns the vertex count.
fn parse_header(reader: &mut impl Read) -> Result<usize, CoreError> {
    let mut lines = Vec::new();
    let mut line = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        reader
            .read_exact(&mut byte)
            .map_err(|_| CoreError::Format("header ended before end_header".into()))?;
        if byte[0] == b'\n' {
            let text = String::from_utf8(line.clone())
                .map_err(|_| CoreError::Format("non-utf8 header line".into()))?;
            let done = text.trim() == "end_header";
            lines.push(text);
            line.clear();
            if done {
                break;
            }
            if lines.len() > 256 {
                return Err(CoreError::Format("header exceeds 256 lines".into()));
            }
        } else {
            line.push(byte[0]);
        }
    }

    let mut it = lines.iter().map(|l| l.trim());
    if it.next() != Some("ply") {
        return Err(CoreError::Format("missing `ply` magic line".into()));
    }
    if it.next() != Some("format binary_little_endian 1.0") {
        return Err(CoreError::Format(
            "unsupported format: expected `format binary_little_endian 1.0`".into(),
        ));
    }

    let element = it.next().unwrap_or("");
    let vertex_count = element
        .strip_prefix("element vertex ")
        .and_then(|n| n.parse::<usize>().ok())
        .ok_or_else(|| {
            CoreError::Format(format!("expected `element vertex <count>`, got `{element}`"))
        })?;

    for expected in field_names() {
        let got = it.next().unwrap_or("end_header");
        if got == "end_header" {
            return Err(CoreError::Format(format!(
                "header missing property `{expected}`"
            )));
        }
        let want = format!("property float {expected}");
        if got != want {
            return Err(CoreError::Format(format!(
                "expected `{want}`, got `{got}`"
            )));
        }
    }
    match it.next() {
        Some("end_header") => Ok(vertex_count),
        Some(extra) => Err(CoreError::Format(format!(
            "unexpected header line after properties: `{extra}`"
        ))),
        None => Err(CoreError::Format("header ended before end_header".into())),
    }
}
