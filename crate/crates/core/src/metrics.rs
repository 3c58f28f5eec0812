//! Block averages, relative errors and the plain-text export formats.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{CoarsePartition, StructuredMesh};
use crate::media::MediumField;

/// Mean of a nodal P1 field over the elements of continuum `i` in each
/// block; `None` where the block has no such element.
pub fn block_continuum_average(
    fine: &StructuredMesh,
    field: &[f64],
    part: &CoarsePartition,
    medium: &MediumField,
    i: usize,
) -> Result<Vec<Option<f64>>> {
    if field.len() != fine.node_count() {
        return Err(Error::invalid("field does not match the mesh"));
    }
    Ok((0..part.block_count())
        .map(|b| {
            let (mut s, mut a) = (0.0, 0.0);
            for &e in part.block_elements(b) {
                if medium.labels()[e] == i {
                    let area = fine.element_area(e);
                    let tri = fine.triangles()[e];
                    s += area * (field[tri[0]] + field[tri[1]] + field[tri[2]]) / 3.0;
                    a += area;
                }
            }
            (a > 0.0).then(|| s / a)
        })
        .collect())
}

/// `|K|^{-1} int_K U` of a nodal P1 field on the coarse mesh, per block.
pub fn coarse_block_average(part: &CoarsePartition, values: &[f64]) -> Result<Vec<f64>> {
    let mesh = part.coarse_mesh();
    if values.len() != mesh.node_count() {
        return Err(Error::invalid("coarse field does not match the coarse mesh"));
    }
    Ok((0..part.block_count())
        .map(|b| {
            let (bx, by) = part.block_position(b);
            let v = |i, j| values[mesh.node_index(i, j)];
            // lower and upper triangles share the diagonal nodes
            (2.0 * (v(bx, by) + v(bx + 1, by + 1)) + v(bx + 1, by) + v(bx, by + 1)) / 6.0
        })
        .collect())
}

/// `100 sqrt( sum_K (U_K - u_K)^2 / sum_K u_K^2 )` over blocks where the
/// reference average exists.
pub fn relative_error(coarse: &[f64], reference: &[Option<f64>]) -> Result<f64> {
    if coarse.len() != reference.len() {
        return Err(Error::invalid("block counts differ"));
    }
    let skipped = reference.iter().filter(|r| r.is_none()).count();
    if skipped > 0 {
        log::warn!("{skipped} blocks without the continuum are excluded from the error");
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (u, r) in coarse.iter().zip(reference) {
        if let Some(r) = r {
            num += (u - r) * (u - r);
            den += r * r;
        }
    }
    if den == 0.0 {
        return Err(Error::Undefined("reference block averages are all zero".into()));
    }
    Ok(100.0 * (num / den).sqrt())
}

/// One row of an error table.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub t: f64,
    /// Percent error per continuum.
    pub errors: Vec<f64>,
}

const TABLE_MAGIC: &str = "# mchom error-table v1";

/// CSV text with a version comment and header `t,e1_percent,...`.
pub fn table_to_string(rows: &[ErrorRow], continua: usize) -> String {
    let mut s = String::new();
    writeln!(s, "{TABLE_MAGIC}").unwrap();
    let cols: Vec<String> = (1..=continua).map(|i| format!("e{i}_percent")).collect();
    writeln!(s, "t,{}", cols.join(",")).unwrap();
    for r in rows {
        write!(s, "{}", format_time(r.t)).unwrap();
        for e in &r.errors {
            write!(s, ",{e:.4}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn format_time(t: f64) -> String {
    let s = format!("{t:.6}");
    let s = s.trim_end_matches('0');
    if s.ends_with('.') {
        format!("{s}0")
    } else {
        s.to_string()
    }
}

pub fn table_from_str(text: &str) -> Result<Vec<ErrorRow>> {
    let err = |m: String| Error::format("error table", m);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TABLE_MAGIC) {
        return Err(err("missing version line".into()));
    }
    let header = lines.next().ok_or_else(|| err("missing header".into()))?;
    let cols = header.split(',').count();
    if !header.starts_with("t,") {
        return Err(err(format!("unexpected header `{header}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v = l
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| err(format!("bad number `{x}`"))))
                .collect::<Result<Vec<_>>>()?;
            if v.len() != cols {
                return Err(err(format!("row `{l}` has {} columns, expected {cols}", v.len())));
            }
            Ok(ErrorRow {
                t: v[0],
                errors: v[1..].to_vec(),
            })
        })
        .collect()
}

pub fn export_table(path: impl AsRef<Path>, rows: &[ErrorRow], continua: usize) -> Result<()> {
    std::fs::write(path, table_to_string(rows, continua))?;
    Ok(())
}

pub fn read_table(path: impl AsRef<Path>) -> Result<Vec<ErrorRow>> {
    table_from_str(&std::fs::read_to_string(path)?)
}

/// Nodal field on a structured mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    /// Cells per side; the field has `(nx + 1) * (ny + 1)` nodal values.
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

const FIELD_MAGIC: &str = "# mchom field v1";

/// Version line, `nx ny` (cells), then one line of `nx + 1` nodal values
/// per node row from `y = 0` upward. Values use the shortest exact
/// representation, so reading back is lossless.
pub fn field_to_string(field: &GridField) -> Result<String> {
    if field.values.len() != (field.nx + 1) * (field.ny + 1) {
        return Err(Error::invalid("field length does not match its grid"));
    }
    let mut s = String::new();
    writeln!(s, "{FIELD_MAGIC}").unwrap();
    writeln!(s, "{} {}", field.nx, field.ny).unwrap();
    for row in field.values.chunks(field.nx + 1) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(s, "{}", line.join(" ")).unwrap();
    }
    Ok(s)
}

pub fn field_from_str(text: &str) -> Result<GridField> {
    let err = |m: String| Error::format("field", m);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(FIELD_MAGIC) {
        return Err(err("missing version line".into()));
    }
    let header = lines.next().ok_or_else(|| err("missing header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| err(format!("bad header `{header}`"))))
        .collect::<Result<_>>()?;
    let [nx, ny] = dims[..] else {
        return Err(err(format!("bad header `{header}`")));
    };
    let values: Vec<f64> = lines
        .flat_map(str::split_whitespace)
        .map(|t| t.parse().map_err(|_| err(format!("bad number `{t}`"))))
        .collect::<Result<_>>()?;
    if values.len() != (nx + 1) * (ny + 1) {
        return Err(err(format!("{} values for a {nx}x{ny} grid", values.len())));
    }
    Ok(GridField { nx, ny, values })
}

pub fn export_field(path: impl AsRef<Path>, field: &GridField) -> Result<()> {
    std::fs::write(path, field_to_string(field)?)?;
    Ok(())
}

pub fn read_field(path: impl AsRef<Path>) -> Result<GridField> {
    field_from_str(&std::fs::read_to_string(path)?)
}

/// Legacy ASCII VTK structured-points dataset of a field on the unit square.
pub fn field_to_vtk(field: &GridField, name: &str) -> Result<String> {
    if field.values.len() != (field.nx + 1) * (field.ny + 1) {
        return Err(Error::invalid("field length does not match its grid"));
    }
    let mut s = String::new();
    writeln!(s, "# vtk DataFile Version 3.0").unwrap();
    writeln!(s, "mchom field {name}").unwrap();
    writeln!(s, "ASCII").unwrap();
    writeln!(s, "DATASET STRUCTURED_POINTS").unwrap();
    writeln!(s, "DIMENSIONS {} {} 1", field.nx + 1, field.ny + 1).unwrap();
    writeln!(s, "ORIGIN 0 0 0").unwrap();
    writeln!(s, "SPACING {:e} {:e} 1", 1.0 / field.nx as f64, 1.0 / field.ny as f64).unwrap();
    writeln!(s, "POINT_DATA {}", field.values.len()).unwrap();
    writeln!(s, "SCALARS {name} double 1").unwrap();
    writeln!(s, "LOOKUP_TABLE default").unwrap();
    for v in &field.values {
        writeln!(s, "{v:e}").unwrap();
    }
    Ok(s)
}

pub fn export_vtk(path: impl AsRef<Path>, field: &GridField, name: &str) -> Result<()> {
    std::fs::write(path, field_to_vtk(field, name)?)?;
    Ok(())
}
