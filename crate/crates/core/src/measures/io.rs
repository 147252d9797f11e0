//! JSON and binary snapshot encodings for parameter paths.
//!
//! Binary layout (all little-endian): `b"MFLB"`, then `version`, `L`, `N`,
//! `m` as `u32`, followed by `f64` arrays: the `L + 1` grid breakpoints and,
//! per layer, `N` weights then `N·m` point coordinates.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{DiscreteMeasure, ParameterPath};
use crate::dynamics::ForwardTrace;
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"MFLB";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeasureJson {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

/// Serde form of a [`ParameterPath`]:
/// `{"layer_grid":[...], "layers":[{"points":[[...]],"weights":[...]}]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathJson {
    layer_grid: Vec<f64>,
    layers: Vec<MeasureJson>,
}

impl From<&ParameterPath> for PathJson {
    fn from(p: &ParameterPath) -> Self {
        Self {
            layer_grid: p.layer_grid().to_vec(),
            layers: p
                .layers()
                .iter()
                .map(|l| MeasureJson { points: l.points().map(<[f64]>::to_vec).collect(), weights: l.weights().to_vec() })
                .collect(),
        }
    }
}

impl TryFrom<PathJson> for ParameterPath {
    type Error = Error;

    fn try_from(j: PathJson) -> Result<Self> {
        let layers = j
            .layers
            .into_iter()
            .map(|l| DiscreteMeasure::new(l.points, l.weights))
            .collect::<Result<Vec<_>>>()?;
        ParameterPath::new(layers, j.layer_grid)
    }
}

impl ParameterPath {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&PathJson::from(self)).expect("path serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: PathJson = serde_json::from_str(s).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        raw.try_into()
    }
}

fn header(out: &mut impl Write, a: usize, b: usize, c: usize) -> std::io::Result<()> {
    out.write_all(&SNAPSHOT_MAGIC)?;
    for v in [SNAPSHOT_VERSION, a as u32, b as u32, c as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn put_f64s(out: &mut impl Write, vals: &[f64]) -> std::io::Result<()> {
    vals.iter().try_for_each(|v| out.write_all(&v.to_le_bytes()))
}

pub fn write_path_snapshot(path: &ParameterPath, out: &mut impl Write) -> std::io::Result<()> {
    header(out, path.num_layers(), path.particles(), path.particle_dim())?;
    put_f64s(out, path.layer_grid())?;
    for layer in path.layers() {
        put_f64s(out, layer.weights())?;
        put_f64s(out, layer.flat_points())?;
    }
    Ok(())
}

/// Dumps forward node states with the same header, reading `(L, N, m)` as
/// `(node count, sample count, d)`; payload is states node-major.
pub fn write_forward_trace(trace: &ForwardTrace, out: &mut impl Write) -> std::io::Result<()> {
    let nodes = trace.node_count();
    header(out, nodes, trace.samples(), trace.dim())?;
    for node in 0..nodes {
        for i in 0..trace.samples() {
            put_f64s(out, trace.state(i, node))?;
        }
    }
    Ok(())
}

fn bad(msg: &str) -> Error {
    Error::InvalidArgument(format!("snapshot: {msg}"))
}

pub fn read_path_snapshot(input: &mut impl Read) -> Result<ParameterPath> {
    let mut head = [0u8; 20];
    input.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if head[..4] != SNAPSHOT_MAGIC {
        return Err(bad("wrong magic"));
    }
    let field = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if field(0) as u32 != SNAPSHOT_VERSION {
        return Err(bad("unsupported version"));
    }
    let (l, n, m) = (field(1), field(2), field(3));
    let mut read_vec = |len: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; len * 8];
        input.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let grid = read_vec(l + 1)?;
    let mut layers = Vec::with_capacity(l);
    for _ in 0..l {
        let weights = read_vec(n)?;
        let points = read_vec(n * m)?;
        layers.push(DiscreteMeasure::from_flat(m, points, weights)?);
    }
    ParameterPath::new(layers, grid)
}
