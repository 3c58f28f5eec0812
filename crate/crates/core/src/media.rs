//! Piecewise-constant high-contrast media on a fine mesh.
//!
//! Continua are indexed from 0 in the API (`0` is the low-conductivity
//! region of the shipped generators, `1` the high-conductivity one). Raster
//! files store labels 1-based.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CoarsePartition, StructuredMesh};

/// Per-element coefficient and continuum label.
#[derive(Debug, Clone, PartialEq)]
pub struct MediumField {
    values: Vec<f64>,
    labels: Vec<usize>,
    continua: usize,
}

impl MediumField {
    pub fn new(values: Vec<f64>, labels: Vec<usize>, continua: usize) -> Result<Self> {
        if values.len() != labels.len() {
            return Err(Error::invalid("coefficient and label arrays differ in length"));
        }
        if continua == 0 {
            return Err(Error::invalid("a medium needs at least one continuum"));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("coefficient must be positive, found {v}")));
        }
        if let Some(l) = labels.iter().find(|l| **l >= continua) {
            return Err(Error::invalid(format!(
                "label {l} out of range for {continua} continua"
            )));
        }
        Ok(Self {
            values,
            labels,
            continua,
        })
    }

    /// Single-continuum medium with a constant coefficient.
    pub fn homogeneous(elements: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; elements], vec![0; elements], 1)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn continua(&self) -> usize {
        self.continua
    }

    pub fn element_count(&self) -> usize {
        self.values.len()
    }

    /// max / min of the coefficient.
    pub fn contrast(&self) -> f64 {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        hi / lo
    }

    /// Same geometry with the coefficient replaced by one value per continuum.
    pub fn with_continuum_values(&self, per_continuum: &[f64]) -> Result<Self> {
        if per_continuum.len() != self.continua {
            return Err(Error::invalid("one value per continuum required"));
        }
        let values = self.labels.iter().map(|&l| per_continuum[l]).collect();
        Self::new(values, self.labels.clone(), self.continua)
    }

    /// Same geometry with the coefficient multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let values = self.values.iter().map(|v| v * factor).collect();
        Self::new(values, self.labels.clone(), self.continua)
    }

    /// Errors unless every block of `part` contains elements of every
    /// continuum (needed for well-posed cell constraints).
    pub fn check_blocks_contain_all(&self, part: &CoarsePartition) -> Result<()> {
        for b in 0..part.block_count() {
            let mut present = vec![false; self.continua];
            for &e in part.block_elements(b) {
                present[self.labels[e]] = true;
            }
            if let Some(j) = present.iter().position(|p| !p) {
                return Err(Error::ConstraintDegeneracy(format!(
                    "coarse block {b} contains no element of continuum {}",
                    j + 1
                )));
            }
        }
        Ok(())
    }
}

/// Periodic lattice of horizontal and vertical high-conductivity channels;
/// one crossing per period cell, centered in it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossedParams {
    /// Period cells per side of the unit square.
    pub cells_per_side: usize,
    pub channel_width: f64,
    pub kappa_low: f64,
    pub kappa_high: f64,
}

impl Default for CrossedParams {
    fn default() -> Self {
        Self {
            cells_per_side: 40,
            channel_width: 0.005,
            kappa_low: 1e-4,
            kappa_high: 1.0,
        }
    }
}

/// Periodic vertical high-conductivity stripes, centered in each period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayeredParams {
    pub stripes: usize,
    pub stripe_width: f64,
    pub kappa_low: f64,
    pub kappa_high: f64,
}

impl Default for LayeredParams {
    fn default() -> Self {
        Self {
            stripes: 40,
            stripe_width: 0.01,
            kappa_low: 1e-4,
            kappa_high: 1.0,
        }
    }
}

/// A 1-D periodic channel pattern resolved in fine cells.
struct CellPattern {
    period: usize,
    start: usize,
    width: usize,
}

impl CellPattern {
    fn resolve(cells: usize, periods: usize, width: f64, what: &str) -> Result<Self> {
        let as_cells = |len: f64| -> Option<usize> {
            let c = len * cells as f64;
            let r = c.round();
            ((c - r).abs() < 1e-9 && r >= 1.0).then_some(r as usize)
        };
        if periods == 0 || cells % periods != 0 {
            return Err(Error::invalid(format!(
                "{what}: {periods} periods do not tile {cells} fine cells"
            )));
        }
        let period = cells / periods;
        let width = as_cells(width).filter(|w| *w < period).ok_or_else(|| {
            Error::invalid(format!(
                "{what}: width {width} is not a positive whole number of fine cells below the period"
            ))
        })?;
        if (period - width) % 2 != 0 {
            return Err(Error::invalid(format!(
                "{what}: channel of {width} cells cannot be centered in a period of {period} cells"
            )));
        }
        Ok(Self {
            period,
            start: (period - width) / 2,
            width,
        })
    }

    /// Whether a coordinate (in units of the domain) falls in a channel.
    fn contains(&self, x: f64, cells: usize) -> bool {
        let cell = ((x * cells as f64).floor() as usize).min(cells - 1);
        let r = cell % self.period;
        r >= self.start && r < self.start + self.width
    }
}

fn check_kappa(lo: f64, hi: f64) -> Result<()> {
    if !(lo > 0.0 && hi > 0.0 && lo.is_finite() && hi.is_finite()) {
        return Err(Error::invalid("coefficients must be positive and finite"));
    }
    Ok(())
}

pub fn crossed_field(mesh: &StructuredMesh, params: &CrossedParams) -> Result<MediumField> {
    check_kappa(params.kappa_low, params.kappa_high)?;
    let px = CellPattern::resolve(mesh.nx(), params.cells_per_side, params.channel_width, "crossed field")?;
    let py = CellPattern::resolve(mesh.ny(), params.cells_per_side, params.channel_width, "crossed field")?;
    let labels: Vec<usize> = (0..mesh.element_count())
        .map(|e| {
            let [x, y] = mesh.barycenter(e);
            usize::from(px.contains(x, mesh.nx()) || py.contains(y, mesh.ny()))
        })
        .collect();
    let values = labels
        .iter()
        .map(|&l| if l == 1 { params.kappa_high } else { params.kappa_low })
        .collect();
    MediumField::new(values, labels, 2)
}

pub fn layered_field(mesh: &StructuredMesh, params: &LayeredParams) -> Result<MediumField> {
    check_kappa(params.kappa_low, params.kappa_high)?;
    let px = CellPattern::resolve(mesh.nx(), params.stripes, params.stripe_width, "layered field")?;
    let labels: Vec<usize> = (0..mesh.element_count())
        .map(|e| usize::from(px.contains(mesh.barycenter(e)[0], mesh.nx())))
        .collect();
    let values = labels
        .iter()
        .map(|&l| if l == 1 { params.kappa_high } else { params.kappa_low })
        .collect();
    MediumField::new(values, labels, 2)
}

/// Indicator `psi_p` of continuum `p` (0-based) per element.
pub fn characteristic(field: &MediumField, p: usize) -> Result<Vec<f64>> {
    if p >= field.continua {
        return Err(Error::invalid(format!(
            "continuum {p} out of range for {} continua",
            field.continua
        )));
    }
    Ok(field
        .labels
        .iter()
        .map(|&l| if l == p { 1.0 } else { 0.0 })
        .collect())
}

const RASTER_TAG: &str = "# mchom raster v1";

/// Per-cell raster text: a version comment, a `nx ny N` header, then one
/// `label value` line per cell, rows from y = 0 upward and x fastest.
/// Labels are 1-based.
pub fn raster_to_string(mesh: &StructuredMesh, field: &MediumField) -> Result<String> {
    if field.element_count() != mesh.element_count() {
        return Err(Error::invalid("medium does not match mesh"));
    }
    let mut out = String::with_capacity(16 * mesh.element_count());
    let _ = writeln!(out, "{RASTER_TAG}");
    let _ = writeln!(out, "{} {} {}", mesh.nx(), mesh.ny(), field.continua);
    for c in 0..mesh.nx() * mesh.ny() {
        let (lo, up) = (2 * c, 2 * c + 1);
        if field.labels[lo] != field.labels[up] || field.values[lo] != field.values[up] {
            return Err(Error::invalid(format!(
                "cell {c} is not uniform and cannot be written as a raster pixel"
            )));
        }
        let _ = writeln!(out, "{} {:e}", field.labels[lo] + 1, field.values[lo]);
    }
    Ok(out)
}

pub fn save_raster(path: impl AsRef<Path>, mesh: &StructuredMesh, field: &MediumField) -> Result<()> {
    std::fs::write(path, raster_to_string(mesh, field)?)?;
    Ok(())
}

/// Parses a raster and maps it onto `mesh`; each raster pixel covers an
/// integer block of fine cells.
pub fn raster_from_str(text: &str, mesh: &StructuredMesh) -> Result<MediumField> {
    let bad = |m: String| Error::format("raster", m);
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad(format!("bad header `{header}`"))))
        .collect::<Result<_>>()?;
    let [rx, ry, n] = dims[..] else {
        return Err(bad(format!("header `{header}` must be `nx ny N`")));
    };
    if rx == 0 || ry == 0 || n == 0 {
        return Err(bad("zero dimension in header".into()));
    }
    if mesh.nx() % rx != 0 || mesh.ny() % ry != 0 {
        return Err(Error::invalid(format!(
            "raster {rx}x{ry} does not divide mesh {}x{}",
            mesh.nx(),
            mesh.ny()
        )));
    }
    let mut pixels = Vec::with_capacity(rx * ry);
    for (k, line) in lines.enumerate() {
        let mut it = line.split_whitespace();
        let (Some(l), Some(v), None) = (it.next(), it.next(), it.next()) else {
            return Err(bad(format!("pixel line {k}: expected `label value`")));
        };
        let l: usize = l.parse().map_err(|_| bad(format!("pixel line {k}: bad label")))?;
        let v: f64 = v.parse().map_err(|_| bad(format!("pixel line {k}: bad value")))?;
        if l == 0 || l > n {
            return Err(bad(format!("pixel line {k}: label {l} outside 1..={n}")));
        }
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("pixel line {k}: non-positive value {v}")));
        }
        pixels.push((l - 1, v));
    }
    if pixels.len() != rx * ry {
        return Err(bad(format!("expected {} pixels, found {}", rx * ry, pixels.len())));
    }
    let (sx, sy) = (mesh.nx() / rx, mesh.ny() / ry);
    let mut values = Vec::with_capacity(mesh.element_count());
    let mut labels = Vec::with_capacity(mesh.element_count());
    for e in 0..mesh.element_count() {
        let (ci, cj) = mesh.cell_of_element(e);
        let (l, v) = pixels[(cj / sy) * rx + ci / sx];
        labels.push(l);
        values.push(v);
    }
    MediumField::new(values, labels, n)
}

pub fn load_raster(path: impl AsRef<Path>, mesh: &StructuredMesh) -> Result<MediumField> {
    raster_from_str(&std::fs::read_to_string(path)?, mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_coarse_partition, build_fine_mesh};

    #[test]
    fn crossed_defaults_are_two_valued() {
        let mesh = build_fine_mesh(400, 400).unwrap();
        let f = crossed_field(&mesh, &CrossedParams::default()).unwrap();
        assert!(f.values().iter().all(|&v| v == 1e-4 || v == 1.0));
        assert_eq!(f.contrast(), 1e4);
        for m in [20, 40] {
            let p = build_coarse_partition(&mesh, m).unwrap();
            f.check_blocks_contain_all(&p).unwrap();
        }
    }

    #[test]
    fn channel_center_is_high_conductive() {
        let mesh = build_fine_mesh(400, 400).unwrap();
        let f = crossed_field(&mesh, &CrossedParams::default()).unwrap();
        // channels are centered in each 10-cell period: cells 4 and 5
        let e = 2 * (100 * 400 + 4);
        assert_eq!(f.labels()[e], 1);
        assert_eq!(f.values()[e], 1.0);
        let e = 2 * (1 * 400 + 1);
        assert_eq!(f.labels()[e], 0);
    }

    #[test]
    fn crossed_high_fraction_matches_area_count() {
        // rasterize the channel geometry independently at 400^2 and sum areas
        let n = 400usize;
        let (period, lo, hi) = (1.0 / 40.0, 0.01, 0.015);
        let inside = |s: f64| {
            let r = s.rem_euclid(period);
            r >= lo - 1e-12 && r < hi - 1e-12
        };
        let mut area = 0.0;
        for j in 0..n {
            for i in 0..n {
                let (x, y) = ((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64);
                if inside(x) || inside(y) {
                    area += 1.0 / (n * n) as f64;
                }
            }
        }
        assert!((area - 0.36).abs() < 1e-12);
        let mesh = build_fine_mesh(n, n).unwrap();
        let f = crossed_field(&mesh, &CrossedParams::default()).unwrap();
        let measured: f64 = (0..mesh.element_count())
            .filter(|&e| f.labels()[e] == 1)
            .map(|e| mesh.element_area(e))
            .sum();
        assert!((measured - area).abs() < 1e-12);
    }

    #[test]
    fn unresolvable_channel_rejected() {
        let mesh = build_fine_mesh(80, 80).unwrap();
        assert!(matches!(
            crossed_field(&mesh, &CrossedParams::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn layered_stripes() {
        let mesh = build_fine_mesh(400, 400).unwrap();
        let params = LayeredParams::default();
        let f = layered_field(&mesh, &params).unwrap();
        assert!(f.values().iter().all(|&v| v == 1e-4 || v == 1.0));
        // count runs of high-conductivity cells along a row
        let row: Vec<usize> = (0..400).map(|i| f.labels()[2 * (200 * 400 + i)]).collect();
        let runs = row.windows(2).filter(|w| w[0] == 0 && w[1] == 1).count() + usize::from(row[0] == 1);
        assert_eq!(runs, params.stripes);
        // one period to the right gives the same labels
        for cj in [0, 77, 399] {
            for ci in 0..390 {
                let a = f.labels()[2 * (cj * 400 + ci)];
                let b = f.labels()[2 * (cj * 400 + ci + 10)];
                assert_eq!(a, b);
            }
        }
        for m in [20, 40] {
            f.check_blocks_contain_all(&build_coarse_partition(&mesh, m).unwrap()).unwrap();
        }
    }

    #[test]
    fn characteristic_partition_of_unity() {
        let mesh = build_fine_mesh(40, 40).unwrap();
        let params = CrossedParams {
            cells_per_side: 4,
            channel_width: 0.05,
            ..Default::default()
        };
        let f = crossed_field(&mesh, &params).unwrap();
        let e = f.labels().iter().position(|&l| l == 0).unwrap();
        assert_eq!(characteristic(&f, 0).unwrap()[e], 1.0);
        assert_eq!(characteristic(&f, 1).unwrap()[e], 0.0);
        let total: f64 = (0..2)
            .map(|p| {
                let psi = characteristic(&f, p).unwrap();
                (0..mesh.element_count()).map(|e| psi[e] * mesh.element_area(e)).sum::<f64>()
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(characteristic(&f, 2).is_err());
    }

    #[test]
    fn raster_roundtrip_is_bit_exact() {
        let mesh = build_fine_mesh(20, 20).unwrap();
        let labels: Vec<usize> = (0..mesh.element_count()).map(|e| (e / 2 * 7 % 3) % 2).collect();
        let values: Vec<f64> = labels.iter().map(|&l| if l == 0 { 1.0 / 3.0 } else { 1e-4 * 7.1 }).collect();
        let f = MediumField::new(values, labels, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.raster");
        save_raster(&path, &mesh, &f).unwrap();
        let g = load_raster(&path, &mesh).unwrap();
        assert_eq!(f, g);
        assert_eq!(raster_to_string(&mesh, &g).unwrap(), std::fs::read_to_string(&path).unwrap());
    }

    #[test]
    fn raster_constant_and_two_valued() {
        let mesh = build_fine_mesh(8, 8).unwrap();
        let f = raster_from_str("2 2 1\n1 1\n1 1\n1 1\n1 1\n", &mesh).unwrap();
        assert_eq!(f.continua(), 1);
        assert!(f.values().iter().all(|&v| v == 1.0));
        let f = raster_from_str("2 1 2\n1 1e-4\n2 1\n", &mesh).unwrap();
        assert_eq!(f.contrast(), 1e4);
        assert_eq!(f.labels()[0], 0);
        assert_eq!(f.labels()[2 * 7], 1);
    }

    #[test]
    fn raster_errors() {
        let mesh = build_fine_mesh(8, 8).unwrap();
        assert!(matches!(raster_from_str("3 3 1\n", &mesh), Err(Error::InvalidArgument(_))));
        assert!(matches!(raster_from_str("1 1 1\n1 -2\n", &mesh), Err(Error::InvalidArgument(_))));
        assert!(matches!(raster_from_str("1 1 1\n1 0\n", &mesh), Err(Error::InvalidArgument(_))));
        assert!(raster_from_str("2 1 1\n1 1\n", &mesh).is_err());
        assert!(raster_from_str("1 1 1\n3 1\n", &mesh).is_err());
    }
}
