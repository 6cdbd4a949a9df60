//! Snapshot files, synthetic DIC data, resampling, and field export.
//!
//! A snapshot is a CSV table preceded by one comment line holding a JSON
//! header:
//!
//! ```text
//! # {"format":"pgs-snapshot","version":1,"dims":[21,21],...}
//! node,x1,x2,u1,u2
//! 0,0.0000000000000000e0,0.0000000000000000e0,1.2e-3,-4.0e-4
//! ```
//!
//! Rows are dense, sorted by node index, and follow the lattice order of
//! [`UniformGrid`] (`x1` fastest). Numbers are written with 17 significant
//! digits so a save/load cycle is exact.
//!
//! Exports from other DIC software come in through [`Snapshot::new`]: map the
//! tracked coordinates onto a [`UniformGrid`], build the snapshot, then save it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_recon::{reconstruct_displacement, CoefficientField, StrainField, Tensor2};
use crate::grid::{NodeGrid, Point, UniformGrid};
use crate::pgs_opt::{ConstraintMask, DisplacementSample};
use crate::rk_basis::RkKernel;

pub const SNAPSHOT_FORMAT: &str = "pgs-snapshot";
pub const SNAPSHOT_VERSION: u32 = 1;
const COLUMNS: &str = "node,x1,x2,u1,u2";

/// Length units a snapshot may declare.
pub const KNOWN_UNITS: [&str; 4] = ["m", "mm", "um", "px"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub format: String,
    pub version: u32,
    pub dims: [usize; 2],
    pub origin: Point,
    pub spacing: [f64; 2],
    #[serde(default = "default_center_dims")]
    pub center_dims: [usize; 2],
    pub protocol_id: String,
    pub constraint_mask: ConstraintMask,
    pub units: String,
}

fn default_center_dims() -> [usize; 2] {
    [10, 10]
}

/// Parsed snapshot file contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub header: SnapshotHeader,
    pub layout: UniformGrid,
    pub sample: DisplacementSample,
}

impl Snapshot {
    pub fn new(layout: UniformGrid, center_dims: [usize; 2], sample: DisplacementSample, units: &str) -> Self {
        Self {
            header: SnapshotHeader {
                format: SNAPSHOT_FORMAT.into(),
                version: SNAPSHOT_VERSION,
                dims: layout.dims,
                origin: layout.origin,
                spacing: layout.spacing,
                center_dims,
                protocol_id: sample.protocol_id.clone(),
                constraint_mask: sample.constraint_mask,
                units: units.into(),
            },
            layout,
            sample,
        }
    }

    pub fn node_grid(&self) -> Result<NodeGrid> {
        NodeGrid::uniform(self.layout, self.header.center_dims)
    }

    pub fn to_string(&self) -> Result<String> {
        let header = serde_json::to_string(&self.header).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut out = String::with_capacity(64 * self.sample.u_exp.len());
        let _ = writeln!(out, "# {header}");
        let _ = writeln!(out, "{COLUMNS}");
        for (k, (x, u)) in self.layout.points().iter().zip(&self.sample.u_exp).enumerate() {
            let _ = writeln!(out, "{k},{},{},{},{}", num(x[0]), num(x[1]), num(u[0]), num(u[1]));
        }
        Ok(out)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty file"))?;
        let json = first
            .strip_prefix('#')
            .ok_or_else(|| Error::parse(path, 1, "missing '# {...}' header line"))?;
        let header: SnapshotHeader =
            serde_json::from_str(json.trim()).map_err(|e| Error::parse(path, 1, format!("bad header: {e}")))?;
        if header.format != SNAPSHOT_FORMAT || header.version != SNAPSHOT_VERSION {
            return Err(Error::parse(
                path,
                1,
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        if !KNOWN_UNITS.contains(&header.units.as_str()) {
            return Err(Error::parse(path, 1, format!("unknown unit '{}'", header.units)));
        }
        let layout = UniformGrid::new(header.dims, header.origin, header.spacing)
            .map_err(|e| Error::parse(path, 1, e.to_string()))?;
        match lines.next() {
            Some((_, cols)) if cols.trim() == COLUMNS => {}
            Some((n, _)) => return Err(Error::parse(path, n + 1, format!("expected column line '{COLUMNS}'"))),
            None => return Err(Error::parse(path, 2, "missing column line")),
        }
        let expected = layout.points();
        let tol = 1e-6 * layout.spacing[0].min(layout.spacing[1]);
        let mut u = Vec::with_capacity(layout.len());
        for (n, line) in lines {
            let lineno = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(Error::parse(path, lineno, format!("expected 5 fields, found {}", fields.len())));
            }
            let node: usize = fields[0]
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad node index '{}'", fields[0])))?;
            if node != u.len() {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("node index {node} out of order (expected {})", u.len()),
                ));
            }
            if node >= expected.len() {
                return Err(Error::parse(path, lineno, format!("more rows than the {} grid nodes", expected.len())));
            }
            let mut vals = [0.0; 4];
            for (v, text) in vals.iter_mut().zip(&fields[1..]) {
                *v = text
                    .parse::<f64>()
                    .map_err(|_| Error::parse(path, lineno, format!("bad number '{text}'")))?;
                if !v.is_finite() {
                    return Err(Error::parse(path, lineno, format!("non-finite value '{text}'")));
                }
            }
            let x = expected[node];
            if (vals[0] - x[0]).abs() > tol || (vals[1] - x[1]).abs() > tol {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("node {node} at ({}, {}) does not match the header grid", vals[0], vals[1]),
                ));
            }
            u.push([vals[2], vals[3]]);
        }
        if u.len() != layout.len() {
            return Err(Error::parse(
                path,
                text.lines().count(),
                format!("{} rows for a {}x{} grid", u.len(), header.dims[0], header.dims[1]),
            ));
        }
        let sample = DisplacementSample {
            u_exp: u,
            protocol_id: header.protocol_id.clone(),
            constraint_mask: header.constraint_mask,
        };
        Ok(Self { header, layout, sample })
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn save_snapshot(path: &Path, snapshot: &Snapshot) -> Result<()> {
    fs::write(path, snapshot.to_string()?).map_err(|e| Error::io(path, e))
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Snapshot::parse(&text, path)
}

/// Grid (measurement lattice plus kernel centers) and sample from a snapshot file.
pub fn load_snapshot(path: &Path) -> Result<(NodeGrid, DisplacementSample)> {
    let snap = read_snapshot(path)?;
    Ok((snap.node_grid()?, snap.sample))
}

/// Ground-truth displacement families for synthetic data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthField {
    /// `u = G x + t`.
    Affine { grad: Tensor2, offset: [f64; 2] },
    /// Biaxial stretch plus a smooth sinusoidal perturbation:
    /// `u1 = s1 x1 + A sin(k x1) cos(k x2)`, `u2 = s2 x2 + A cos(k x1) sin(k x2)`.
    Trigonometric { stretch: [f64; 2], amplitude: f64, wavenumber: f64 },
}

impl TruthField {
    pub fn eval(&self, x: Point) -> ([f64; 2], Tensor2) {
        match *self {
            TruthField::Affine { grad, offset } => (
                [
                    grad[0][0] * x[0] + grad[0][1] * x[1] + offset[0],
                    grad[1][0] * x[0] + grad[1][1] * x[1] + offset[1],
                ],
                grad,
            ),
            TruthField::Trigonometric {
                stretch,
                amplitude: a,
                wavenumber: k,
            } => {
                let (s1, c1) = (k * x[0]).sin_cos();
                let (s2, c2) = (k * x[1]).sin_cos();
                (
                    [stretch[0] * x[0] + a * s1 * c2, stretch[1] * x[1] + a * c1 * s2],
                    [
                        [stretch[0] + a * k * c1 * c2, -a * k * s1 * s2],
                        [-a * k * s1 * s2, stretch[1] + a * k * c1 * c2],
                    ],
                )
            }
        }
    }
}

/// Smooth compressive bump `u_b(x) = −A exp(−|x − c|²/r²)(x − c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub center: Point,
    pub radius: f64,
    pub amplitude: f64,
}

impl Artifact {
    pub fn eval(&self, x: Point) -> ([f64; 2], Tensor2) {
        let d = [x[0] - self.center[0], x[1] - self.center[1]];
        let r2 = self.radius * self.radius;
        let g = (-(d[0] * d[0] + d[1] * d[1]) / r2).exp();
        let a = self.amplitude;
        // ∇u_b = −A g (I − 2 d dᵀ / r²)
        let mut grad = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let delta = if i == j { 1.0 } else { 0.0 };
                grad[i][j] = -a * g * (delta - 2.0 * d[i] * d[j] / r2);
            }
        }
        ([-a * g * d[0], -a * g * d[1]], grad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dims: [usize; 2],
    pub lower: Point,
    pub upper: Point,
    pub center_dims: [usize; 2],
    pub field: TruthField,
    pub noise_sigma: f64,
    pub artifact: Option<Artifact>,
    pub seed: u64,
    pub protocol_id: String,
    pub constraint_mask: ConstraintMask,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dims: [21, 21],
            lower: [0.0, 0.0],
            upper: [1.0, 1.0],
            center_dims: [10, 10],
            field: TruthField::Affine {
                grad: [[0.03, 0.0], [0.0, 0.03]],
                offset: [0.0, 0.0],
            },
            noise_sigma: 7e-4,
            artifact: Some(Artifact {
                center: [0.5, 0.5],
                radius: 0.31,
                amplitude: 0.041,
            }),
            seed: 0,
            protocol_id: "synthetic".into(),
            // uniaxial-dominant protocol: only E11 is constrained
            constraint_mask: ConstraintMask::new(true, false),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if let Some(a) = &self.artifact {
            if !(a.radius > 0.0) {
                return Err(Error::InvalidParameter(format!("artifact radius must be > 0, got {}", a.radius)));
            }
        }
        if !(self.upper[0] > self.lower[0] && self.upper[1] > self.lower[1]) {
            return Err(Error::InvalidParameter("domain upper corner must exceed lower corner".into()));
        }
        Ok(())
    }
}

/// A synthetic snapshot with the fields it was built from.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub grid: NodeGrid,
    pub layout: UniformGrid,
    pub center_dims: [usize; 2],
    pub sample: DisplacementSample,
    pub truth_u: Vec<[f64; 2]>,
    pub truth_grad: Vec<Tensor2>,
    /// Truth plus artifact, without noise.
    pub clean_u: Vec<[f64; 2]>,
    pub clean_grad: Vec<Tensor2>,
}

impl SyntheticData {
    pub fn truth_strain(&self) -> StrainField {
        StrainField::from_gradients(&self.truth_grad)
    }

    pub fn clean_strain(&self) -> StrainField {
        StrainField::from_gradients(&self.clean_grad)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot::new(self.layout, self.center_dims, self.sample.clone(), "mm")
    }

    pub fn truth_snapshot(&self) -> Snapshot {
        let mut sample = self.sample.clone();
        sample.u_exp.clone_from(&self.truth_u);
        Snapshot::new(self.layout, self.center_dims, sample, "mm")
    }
}

/// `u_exp = u_true + u_bump + N(0, σ²)` on a uniform lattice.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let layout = UniformGrid::spanning(spec.dims, spec.lower, spec.upper)?;
    let grid = NodeGrid::uniform(layout, spec.center_dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;

    let n = layout.len();
    let (mut truth_u, mut truth_grad) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut clean_u, mut clean_grad) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut u_exp = Vec::with_capacity(n);
    for x in layout.points() {
        let (u, g) = spec.field.eval(x);
        let (mut cu, mut cg) = (u, g);
        if let Some(art) = &spec.artifact {
            let (bu, bg) = art.eval(x);
            for i in 0..2 {
                cu[i] += bu[i];
                for j in 0..2 {
                    cg[i][j] += bg[i][j];
                }
            }
        }
        let noisy = if spec.noise_sigma > 0.0 {
            [cu[0] + noise.sample(&mut rng), cu[1] + noise.sample(&mut rng)]
        } else {
            cu
        };
        truth_u.push(u);
        truth_grad.push(g);
        clean_u.push(cu);
        clean_grad.push(cg);
        u_exp.push(noisy);
    }
    Ok(SyntheticData {
        grid,
        layout,
        center_dims: spec.center_dims,
        sample: DisplacementSample {
            u_exp,
            protocol_id: spec.protocol_id.clone(),
            constraint_mask: spec.constraint_mask,
        },
        truth_u,
        truth_grad,
        clean_u,
        clean_grad,
    })
}

/// Evaluate a continuous reconstruction on a new uniform lattice over the same box.
pub fn resample(
    coeffs: &CoefficientField,
    kernel: &RkKernel,
    from: &UniformGrid,
    to_dims: [usize; 2],
    template: &DisplacementSample,
) -> Result<(UniformGrid, DisplacementSample)> {
    if to_dims[0] < 2 || to_dims[1] < 2 {
        return Err(Error::InvalidParameter(format!(
            "target grid needs at least 2 nodes per axis, got {to_dims:?}"
        )));
    }
    let target = if to_dims == from.dims { *from } else { from.with_dims(to_dims)? };
    let basis = kernel.assemble(&target.points())?;
    let disp = reconstruct_displacement(coeffs, &basis)?;
    Ok((
        target,
        DisplacementSample {
            u_exp: disp.u,
            protocol_id: template.protocol_id.clone(),
            constraint_mask: template.constraint_mask,
        },
    ))
}

/// Named columns over a common point set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldSet {
    pub points: Vec<Point>,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl FieldSet {
    pub fn new(points: Vec<Point>) -> Self {
        Self {
            points,
            columns: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) -> &mut Self {
        self.columns.push((name.into(), values));
        self
    }

    /// Displacement and strain columns in the standard order.
    pub fn displacement_and_strain(points: Vec<Point>, u: &[[f64; 2]], strain: &StrainField) -> Self {
        let mut set = Self::new(points);
        set.push("u1", u.iter().map(|v| v[0]).collect())
            .push("u2", u.iter().map(|v| v[1]).collect())
            .push("E11", strain.e11.clone())
            .push("E12", strain.e12.clone())
            .push("E22", strain.e22.clone())
            .push("E_min", strain.principal_min.clone())
            .push("E_max", strain.principal_max.clone());
        set
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Summary,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub min: f64,
    pub max: f64,
    pub fraction_negative: f64,
}

pub fn summarize(fields: &FieldSet) -> std::collections::BTreeMap<String, ColumnSummary> {
    fields
        .columns
        .iter()
        .map(|(name, v)| {
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let neg = v.iter().filter(|x| **x < 0.0).count() as f64 / v.len().max(1) as f64;
            (
                name.clone(),
                ColumnSummary {
                    min,
                    max,
                    fraction_negative: neg,
                },
            )
        })
        .collect()
}

/// Path of the JSON summary written next to a CSV export.
pub fn summary_path(csv: &Path) -> PathBuf {
    csv.with_extension("summary.json")
}

/// Write `fields` as CSV (`x1,x2,<columns>`) and/or a JSON summary at
/// [`summary_path`].
pub fn export_fields(fields: &FieldSet, path: &Path, format: ExportFormat) -> Result<()> {
    if fields.columns.is_empty() {
        return Err(Error::InvalidParameter("no fields to export".into()));
    }
    if let Some((name, _)) = fields.columns.iter().find(|(_, v)| v.len() != fields.points.len()) {
        return Err(Error::InvalidParameter(format!(
            "column {name} length does not match {} points",
            fields.points.len()
        )));
    }
    if matches!(format, ExportFormat::Csv | ExportFormat::Both) {
        let mut out = String::from("x1,x2");
        for (name, _) in &fields.columns {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (k, p) in fields.points.iter().enumerate() {
            out.push_str(&num(p[0]));
            out.push(',');
            out.push_str(&num(p[1]));
            for (_, v) in &fields.columns {
                out.push(',');
                out.push_str(&num(v[k]));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))?;
    }
    if matches!(format, ExportFormat::Summary | ExportFormat::Both) {
        let target = summary_path(path);
        let json = serde_json::to_string_pretty(&summarize(fields)).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        fs::write(&target, json + "\n").map_err(|e| Error::io(&target, e))?;
    }
    Ok(())
}

/// Read back a CSV written by [`export_fields`].
pub fn read_fields(path: &Path) -> Result<FieldSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let names: Vec<&str> = head.split(',').collect();
    if names.len() < 2 || names[0] != "x1" || names[1] != "x2" {
        return Err(Error::parse(path, 1, "expected 'x1,x2,...' header"));
    }
    let mut set = FieldSet::new(Vec::new());
    for n in &names[2..] {
        set.push(*n, Vec::new());
    }
    for (k, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, k + 2, e.to_string()))?;
        if vals.len() != names.len() {
            return Err(Error::parse(path, k + 2, format!("expected {} fields", names.len())));
        }
        set.points.push([vals[0], vals[1]]);
        for (c, v) in set.columns.iter_mut().zip(&vals[2..]) {
            c.1.push(*v);
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_recon::principal_strains;
    use crate::field_recon::green_lagrange;
    use crate::pgs_opt::analytic_fit;
    use crate::rk_basis::{assemble_basis, Window};
    use proptest::prelude::*;

    fn small_snapshot(seed: u64) -> Snapshot {
        let spec = SyntheticSpec {
            dims: [5, 4],
            seed,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec).unwrap().snapshot()
    }

    #[test]
    fn snapshot_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let snap = generate_synthetic(&SyntheticSpec::default()).unwrap().snapshot();
        save_snapshot(&path, &snap).unwrap();
        let back = read_snapshot(&path).unwrap();
        assert_eq!(back, snap);
        let (grid, sample) = load_snapshot(&path).unwrap();
        assert_eq!(grid.num_points(), 441);
        assert_eq!(grid.num_centers(), 100);
        assert_eq!(sample.u_exp.len(), 441);
    }

    #[test]
    fn nan_row_reports_its_line() {
        let snap = small_snapshot(1);
        let text = snap.to_string().unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        // line 5 in the file: header, columns, nodes 0, 1, 2
        let parts: Vec<&str> = lines[4].split(',').collect();
        lines[4] = format!("{},{},{},NaN,{}", parts[0], parts[1], parts[2], parts[4]);
        let err = Snapshot::parse(&lines.join("\n"), Path::new("bad.csv")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        let snap = small_snapshot(2);
        let text = snap.to_string().unwrap();
        let p = Path::new("x.csv");
        // missing last row
        let short: Vec<&str> = text.lines().collect();
        assert!(matches!(Snapshot::parse(&short[..short.len() - 1].join("\n"), p), Err(Error::Parse { .. })));
        // out-of-order index
        let swapped = text.replacen("\n1,", "\n7,", 1);
        assert!(matches!(Snapshot::parse(&swapped, p), Err(Error::Parse { line: 4, .. })));
        // unknown unit
        let units = text.replacen("\"units\":\"mm\"", "\"units\":\"furlong\"", 1);
        assert!(matches!(Snapshot::parse(&units, p), Err(Error::Parse { line: 1, .. })));
        // too few fields
        let mut ls: Vec<String> = text.lines().map(String::from).collect();
        ls[2] = "0,0,0,0".into();
        assert!(matches!(Snapshot::parse(&ls.join("\n"), p), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(Snapshot::parse("", p), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn snapshot_text_round_trip(seed in any::<u64>(), sigma in 0.0..1.0f64) {
            let spec = SyntheticSpec { dims: [4, 3], seed, noise_sigma: sigma, ..SyntheticSpec::default() };
            let snap = generate_synthetic(&spec).unwrap().snapshot();
            let back = Snapshot::parse(&snap.to_string().unwrap(), Path::new("p")).unwrap();
            prop_assert_eq!(back, snap);
        }
    }

    #[test]
    fn noiseless_affine_data_is_exact() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            artifact: None,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        assert_eq!(data.sample.u_exp, data.truth_u);
        for (x, u) in data.layout.points().iter().zip(&data.sample.u_exp) {
            assert!((u[0] - 0.03 * x[0]).abs() < 1e-15 && (u[1] - 0.03 * x[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_amplitude_artifact_is_noise_only() {
        let with_zero = SyntheticSpec {
            artifact: Some(Artifact {
                center: [0.5, 0.5],
                radius: 0.2,
                amplitude: 0.0,
            }),
            seed: 5,
            ..SyntheticSpec::default()
        };
        let without = SyntheticSpec {
            artifact: None,
            seed: 5,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&with_zero).unwrap();
        let b = generate_synthetic(&without).unwrap();
        assert_eq!(a.sample.u_exp, b.sample.u_exp);
        assert_eq!(a.clean_u, a.truth_u);
    }

    #[test]
    fn default_artifact_is_compressive() {
        let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let min_e11 = data.clean_strain().e11.iter().copied().fold(f64::INFINITY, f64::min);
        // at the bump center ∇u = (0.03 − 0.041) I, so E11 = −0.011 + ½·0.011²
        let center = -0.011 + 0.5 * 0.011 * 0.011;
        assert!(min_e11 < -0.01);
        assert!((min_e11 - center).abs() < 1e-12, "{min_e11}");
    }

    #[test]
    fn artifact_gradient_matches_finite_differences() {
        let art = Artifact {
            center: [0.4, 0.6],
            radius: 0.3,
            amplitude: 0.07,
        };
        let h = 1e-6;
        for x in [[0.1, 0.2], [0.4, 0.6], [0.7, 0.45]] {
            let (_, g) = art.eval(x);
            for j in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let (up, _) = art.eval(xp);
                let (um, _) = art.eval(xm);
                for i in 0..2 {
                    let fd = (up[i] - um[i]) / (2.0 * h);
                    assert!((fd - g[i][j]).abs() < 1e-8);
                }
            }
        }
        let field = TruthField::Trigonometric {
            stretch: [0.02, 0.01],
            amplitude: 0.005,
            wavenumber: 3.0,
        };
        for x in [[0.1, 0.2], [0.7, 0.45]] {
            let (_, g) = field.eval(x);
            for j in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                for i in 0..2 {
                    let fd = (field.eval(xp).0[i] - field.eval(xm).0[i]) / (2.0 * h);
                    assert!((fd - g[i][j]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn synthetic_generation_is_reproducible() {
        let spec = SyntheticSpec {
            seed: 42,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap().snapshot().to_string().unwrap();
        let b = generate_synthetic(&spec).unwrap().snapshot().to_string().unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 43, ..spec }).unwrap().snapshot().to_string().unwrap();
        assert_ne!(a, c);
    }

    fn fitted() -> (SyntheticData, CoefficientField, crate::rk_basis::RkBasis) {
        let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let basis = assemble_basis(&data.grid, 3.1 * data.grid.spacing, 1, Window::CubicBspline).unwrap();
        let coeffs = analytic_fit(&basis, &data.sample).unwrap();
        (data, coeffs, basis)
    }

    #[test]
    fn resample_to_same_dims_is_identity() {
        let (data, coeffs, basis) = fitted();
        let direct = reconstruct_displacement(&coeffs, &basis).unwrap().u;
        let (grid, out) = resample(&coeffs, basis.kernel(), &data.layout, [21, 21], &data.sample).unwrap();
        assert_eq!(grid, data.layout);
        assert_eq!(out.u_exp, direct);
        assert!(resample(&coeffs, basis.kernel(), &data.layout, [1, 5], &data.sample).is_err());
    }

    #[test]
    fn resample_round_trip_matches_direct_evaluation() {
        let (data, coeffs, basis) = fitted();
        let (coarse, _) = resample(&coeffs, basis.kernel(), &data.layout, [16, 16], &data.sample).unwrap();
        // back on the original nodes, through the same continuous field
        let (_, back) = resample(&coeffs, basis.kernel(), &coarse, [21, 21], &data.sample).unwrap();
        let direct = reconstruct_displacement(&coeffs, &basis).unwrap().u;
        for (a, b) in back.u_exp.iter().zip(&direct) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_field_survives_refinement() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            artifact: None,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let basis = assemble_basis(&data.grid, 3.1 * data.grid.spacing, 1, Window::CubicBspline).unwrap();
        let coeffs = analytic_fit(&basis, &data.sample).unwrap();
        let (fine, out) = resample(&coeffs, basis.kernel(), &data.layout, [31, 31], &data.sample).unwrap();
        for (x, u) in fine.points().iter().zip(&out.u_exp) {
            assert!((u[0] - 0.03 * x[0]).abs() < 1e-9 && (u[1] - 0.03 * x[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn export_writes_csv_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fields.csv");
        let grads: Vec<Tensor2> = (0..6).map(|k| [[0.01 * k as f64, 0.0], [0.0, 0.02]]).collect();
        let strain = StrainField::from_gradients(&grads);
        let pts: Vec<Point> = (0..6).map(|k| [k as f64 / 3.0, 1.0 / 7.0]).collect();
        let u: Vec<[f64; 2]> = (0..6).map(|k| [std::f64::consts::PI * k as f64, -1e-300]).collect();
        let set = FieldSet::displacement_and_strain(pts, &u, &strain);
        export_fields(&set, &path, ExportFormat::Both).unwrap();
        let back = read_fields(&path).unwrap();
        assert_eq!(back.points, set.points);
        for ((n1, a), (n2, b)) in back.columns.iter().zip(&set.columns) {
            assert_eq!(n1, n2);
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-15 * y.abs().max(1e-300));
            }
        }
        let summary: std::collections::BTreeMap<String, ColumnSummary> =
            serde_json::from_str(&fs::read_to_string(summary_path(&path)).unwrap()).unwrap();
        for c in ["E11", "E12", "E22"] {
            assert_eq!(summary[c].fraction_negative, 0.0);
        }
        let e = green_lagrange(&grads[5]);
        assert_eq!(summary["E11"].max, e[0][0]);
        assert_eq!(summary["E_min"].min, principal_strains(&green_lagrange(&grads[0])).0);
    }

    #[test]
    fn empty_export_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("none.csv");
        let set = FieldSet::new(vec![[0.0, 0.0]]);
        assert!(export_fields(&set, &path, ExportFormat::Both).is_err());
        assert!(!path.exists());
        assert!(!summary_path(&path).exists());
    }

    #[test]
    fn export_reports_io_path() {
        let set = {
            let mut s = FieldSet::new(vec![[0.0, 0.0]]);
            s.push("E11", vec![1.0]);
            s
        };
        let bad = Path::new("/nonexistent-dir/xyz/out.csv");
        match export_fields(&set, bad, ExportFormat::Csv) {
            Err(Error::Io { path, .. }) => assert_eq!(path, bad),
            other => panic!("unexpected {other:?}"),
        }
    }
}
