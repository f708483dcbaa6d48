//! Legacy ASCII VTK structured-points export and a matching reader.
//!
//! ASCII with 9 significant digits: the files are meant for inspection and
//! external viewers, and round-trip through the reader to about 1e-7
//! relative — tight enough for field comparisons with `diff`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    /// Three components per point.
    Vectors,
    /// Nine components per point, row-major.
    Tensors,
}

impl FieldKind {
    pub fn components(&self) -> usize {
        match self {
            FieldKind::Vectors => 3,
            FieldKind::Tensors => 9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VtkField {
    pub name: String,
    pub kind: FieldKind,
    /// `components * points` values, point-major, x fastest.
    pub data: Vec<f64>,
}

#[derive(Debug)]
pub struct VtkDataset {
    pub dimensions: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub fields: Vec<VtkField>,
}

/// Write a structured-points dataset; `title` lands on the header's title
/// line (artifact provenance goes there).
pub fn write_vtk(
    path: &Path,
    title: &str,
    dimensions: [usize; 3],
    origin: [f64; 3],
    spacing: [f64; 3],
    fields: &[VtkField],
) -> Result<()> {
    let points = dimensions[0] * dimensions[1] * dimensions[2];
    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    out.push_str(title);
    out.push('\n');
    out.push_str("ASCII\nDATASET STRUCTURED_POINTS\n");
    writeln!(
        out,
        "DIMENSIONS {} {} {}",
        dimensions[0], dimensions[1], dimensions[2]
    )?;
    writeln!(out, "ORIGIN {:.8e} {:.8e} {:.8e}", origin[0], origin[1], origin[2])?;
    writeln!(
        out,
        "SPACING {:.8e} {:.8e} {:.8e}",
        spacing[0], spacing[1], spacing[2]
    )?;
    writeln!(out, "POINT_DATA {points}")?;
    for field in fields {
        let c = field.kind.components();
        if field.data.len() != c * points {
            bail!(
                "field {} has {} values, expected {} for {} points",
                field.name,
                field.data.len(),
                c * points,
                points
            );
        }
        match field.kind {
            FieldKind::Vectors => {
                writeln!(out, "VECTORS {} double", field.name)?;
                for p in field.data.chunks_exact(3) {
                    writeln!(out, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2])?;
                }
            }
            FieldKind::Tensors => {
                writeln!(out, "TENSORS {} double", field.name)?;
                for p in field.data.chunks_exact(9) {
                    for row in p.chunks_exact(3) {
                        writeln!(out, "{:.8e} {:.8e} {:.8e}", row[0], row[1], row[2])?;
                    }
                    out.push('\n');
                }
            }
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_vtk(path: &Path) -> Result<VtkDataset> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let first = lines.next().unwrap_or("");
    if !first.starts_with("# vtk DataFile") {
        bail!("{}: not a VTK data file (bad first line)", path.display());
    }
    lines.next(); // title line
    let body: String = lines.collect::<Vec<_>>().join("\n");
    let tokens: Vec<&str> = body.split_whitespace().collect();
    let mut cursor = 0usize;
    let next = |cursor: &mut usize| -> Result<&str> {
        let tok = tokens
            .get(*cursor)
            .with_context(|| format!("{}: truncated file", path.display()))?;
        *cursor += 1;
        Ok(tok)
    };

    let mut dimensions = None;
    let mut origin = [0.0; 3];
    let mut spacing = [1.0; 3];
    let mut points: Option<usize> = None;
    let mut fields = Vec::new();

    while cursor < tokens.len() {
        let tok = tokens[cursor];
        cursor += 1;
        match tok {
            "ASCII" => {}
            "BINARY" => bail!("{}: binary VTK is not supported", path.display()),
            "DATASET" => {
                let kind = next(&mut cursor)?;
                if kind != "STRUCTURED_POINTS" {
                    bail!("{}: unsupported dataset {kind}", path.display());
                }
            }
            "DIMENSIONS" => {
                let mut d = [0usize; 3];
                for v in d.iter_mut() {
                    *v = next(&mut cursor)?.parse().context("DIMENSIONS")?;
                }
                dimensions = Some(d);
            }
            "ORIGIN" => {
                for v in origin.iter_mut() {
                    *v = next(&mut cursor)?.parse().context("ORIGIN")?;
                }
            }
            "SPACING" | "ASPECT_RATIO" => {
                for v in spacing.iter_mut() {
                    *v = next(&mut cursor)?.parse().context("SPACING")?;
                }
            }
            "POINT_DATA" => {
                points = Some(next(&mut cursor)?.parse().context("POINT_DATA")?);
            }
            "VECTORS" | "TENSORS" => {
                let kind = if tok == "VECTORS" {
                    FieldKind::Vectors
                } else {
                    FieldKind::Tensors
                };
                let name = next(&mut cursor)?.to_string();
                let _fieldtype = next(&mut cursor)?;
                let n = points.with_context(|| {
                    format!("{}: field {name} appears before POINT_DATA", path.display())
                })?;
                let total = kind.components() * n;
                let mut data = Vec::with_capacity(total);
                for _ in 0..total {
                    data.push(next(&mut cursor)?.parse::<f64>().with_context(|| {
                        format!("{}: bad value in field {name}", path.display())
                    })?);
                }
                fields.push(VtkField { name, kind, data });
            }
            other => bail!("{}: unexpected token {other:?}", path.display()),
        }
    }

    let dimensions = dimensions
        .with_context(|| format!("{}: missing DIMENSIONS", path.display()))?;
    if points != Some(dimensions[0] * dimensions[1] * dimensions[2]) {
        bail!(
            "{}: POINT_DATA {:?} disagrees with DIMENSIONS {:?}",
            path.display(),
            points,
            dimensions
        );
    }
    Ok(VtkDataset {
        dimensions,
        origin,
        spacing,
        fields,
    })
}

/// max |a - b| over max(max |a|, max |b|); zero when both vanish.
pub fn relative_difference(a: &[f64], b: &[f64]) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a
        .iter()
        .chain(b)
        .map(|x| x.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        num / scale
    }
}
