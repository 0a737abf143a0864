//! Legacy ASCII VTK unstructured grids: a writer for meshes with cell data
//! and a reader for the same subset.

use crate::linalg::{Mat, Point};
use crate::mesh::{MeshError, SimplicialMesh};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VtkError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported cell type {0}")]
    CellType(u32),
    #[error("cell data '{name}' has {got} entries, expected {expected}")]
    DataLength { name: String, expected: usize, got: usize },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

fn cell_type(d: usize) -> Option<u32> {
    match d {
        2 => Some(5),
        3 => Some(10),
        _ => None,
    }
}

/// Cell-centred data attached to a snapshot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellData {
    pub scalars: BTreeMap<String, Vec<f64>>,
    /// Symmetric tensors padded to 3x3, row-major.
    pub tensors: BTreeMap<String, Vec<[f64; 9]>>,
}

impl CellData {
    pub fn scalar(mut self, name: &str, v: Vec<f64>) -> Self {
        self.scalars.insert(name.to_string(), v);
        self
    }

    pub fn tensor<const D: usize>(mut self, name: &str, v: &[Mat<D>]) -> Self {
        let padded = v
            .iter()
            .map(|m| {
                let mut out = [0.0; 9];
                for r in 0..D {
                    for c in 0..D {
                        out[3 * r + c] = m[(r, c)];
                    }
                }
                out
            })
            .collect();
        self.tensors.insert(name.to_string(), padded);
        self
    }
}

fn pad<const D: usize>(p: &Point<D>) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..D {
        out[i] = p[i];
    }
    out
}

/// Render the physical mesh, the computational coordinates as point data,
/// and `data` as cell data.
pub fn to_string<const D: usize>(mesh: &SimplicialMesh<D>, data: &CellData, title: &str) -> Result<String, VtkError> {
    let ct = cell_type(D).ok_or(VtkError::CellType(0))?;
    let nc = mesh.n_cells();
    for (name, v) in &data.scalars {
        if v.len() != nc {
            return Err(VtkError::DataLength { name: name.clone(), expected: nc, got: v.len() });
        }
    }
    for (name, v) in &data.tensors {
        if v.len() != nc {
            return Err(VtkError::DataLength { name: name.clone(), expected: nc, got: v.len() });
        }
    }
    let mut s = String::new();
    let title: String = title.chars().filter(|c| *c != '\n').take(255).collect();
    writeln!(s, "# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID").unwrap();
    writeln!(s, "POINTS {} double", mesh.n_nodes()).unwrap();
    for p in mesh.x() {
        let [a, b, c] = pad(p);
        writeln!(s, "{a:e} {b:e} {c:e}").unwrap();
    }
    writeln!(s, "CELLS {} {}", nc, nc * (D + 2)).unwrap();
    for c in mesh.cells() {
        write!(s, "{}", D + 1).unwrap();
        for v in c {
            write!(s, " {v}").unwrap();
        }
        s.push('\n');
    }
    writeln!(s, "CELL_TYPES {nc}").unwrap();
    for _ in 0..nc {
        writeln!(s, "{ct}").unwrap();
    }
    writeln!(s, "POINT_DATA {}\nVECTORS xi double", mesh.n_nodes()).unwrap();
    for p in mesh.xi() {
        let [a, b, c] = pad(p);
        writeln!(s, "{a:e} {b:e} {c:e}").unwrap();
    }
    if !data.scalars.is_empty() || !data.tensors.is_empty() {
        writeln!(s, "CELL_DATA {nc}").unwrap();
    }
    for (name, v) in &data.scalars {
        writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default").unwrap();
        for x in v {
            writeln!(s, "{x:e}").unwrap();
        }
    }
    for (name, v) in &data.tensors {
        writeln!(s, "TENSORS {name} double").unwrap();
        for t in v {
            writeln!(s, "{:e} {:e} {:e}\n{:e} {:e} {:e}\n{:e} {:e} {:e}\n", t[0], t[1], t[2], t[3], t[4], t[5], t[6], t[7], t[8])
                .unwrap();
        }
    }
    Ok(s)
}

pub fn write<const D: usize>(path: &Path, mesh: &SimplicialMesh<D>, data: &CellData, title: &str) -> Result<(), VtkError> {
    std::fs::write(path, to_string(mesh, data, title)?)?;
    Ok(())
}

/// Contents of a parsed file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VtkData {
    pub points: Vec<[f64; 3]>,
    pub xi: Option<Vec<[f64; 3]>>,
    pub cells: Vec<Vec<usize>>,
    pub cell_types: Vec<u32>,
    pub cell_data: CellData,
}

impl VtkData {
    /// Rebuild a validated mesh; the computational coordinates default to
    /// the physical ones when absent.
    pub fn to_mesh<const D: usize>(&self) -> Result<SimplicialMesh<D>, VtkError> {
        let expected = cell_type(D).ok_or(VtkError::CellType(0))?;
        if let Some(t) = self.cell_types.iter().find(|t| **t != expected) {
            return Err(VtkError::CellType(*t));
        }
        let conv = |v: &[[f64; 3]]| v.iter().map(|p| Point::<D>::from_fn(|i, _| p[i])).collect::<Vec<_>>();
        let x = conv(&self.points);
        let xi = self.xi.as_deref().map_or_else(|| x.clone(), conv);
        let flat = self.cells.iter().flatten().copied().collect();
        Ok(SimplicialMesh::new(x, xi, flat)?)
    }
}

struct Tokens<'a> {
    iter: std::iter::Peekable<Box<dyn Iterator<Item = (usize, &'a str)> + 'a>>,
}

impl<'a> Tokens<'a> {
    fn new(body: &'a str) -> Self {
        let it: Box<dyn Iterator<Item = (usize, &'a str)> + 'a> = Box::new(
            body.lines().enumerate().flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t))),
        );
        Self { iter: it.peekable() }
    }

    fn next(&mut self) -> Result<(usize, &'a str), VtkError> {
        self.iter.next().ok_or(VtkError::Parse { line: 0, msg: "unexpected end of file".into() })
    }

    fn parse<T: std::str::FromStr>(&mut self) -> Result<T, VtkError> {
        let (line, t) = self.next()?;
        t.parse().map_err(|_| VtkError::Parse { line, msg: format!("cannot parse '{t}'") })
    }

    fn expect(&mut self, word: &str) -> Result<(), VtkError> {
        let (line, t) = self.next()?;
        if t != word {
            return Err(VtkError::Parse { line, msg: format!("expected '{word}', found '{t}'") });
        }
        Ok(())
    }

    fn triples(&mut self, n: usize) -> Result<Vec<[f64; 3]>, VtkError> {
        (0..n).map(|_| Ok([self.parse()?, self.parse()?, self.parse()?])).collect()
    }
}

pub fn parse(text: &str) -> Result<VtkData, VtkError> {
    let mut lines = text.splitn(5, '\n');
    let header = lines.next().unwrap_or_default();
    if !header.starts_with("# vtk DataFile") {
        return Err(VtkError::Parse { line: 1, msg: "missing vtk header".into() });
    }
    let _title = lines.next();
    if lines.next().map(str::trim) != Some("ASCII") {
        return Err(VtkError::Parse { line: 3, msg: "only ASCII files are supported".into() });
    }
    let rest = lines.next().unwrap_or_default().to_string() + "\n" + lines.next().unwrap_or_default();
    let mut tok = Tokens::new(&rest);
    tok.expect("DATASET")?;
    tok.expect("UNSTRUCTURED_GRID")?;
    let mut out = VtkData::default();
    let mut section_len = 0;
    while let Some(&(line, key)) = tok.iter.peek() {
        tok.next()?;
        match key {
            "POINTS" => {
                let n: usize = tok.parse()?;
                tok.next()?;
                out.points = tok.triples(n)?;
            }
            "CELLS" => {
                let n: usize = tok.parse()?;
                let _size: usize = tok.parse()?;
                for _ in 0..n {
                    let k: usize = tok.parse()?;
                    out.cells.push((0..k).map(|_| tok.parse()).collect::<Result<_, _>>()?);
                }
            }
            "CELL_TYPES" => {
                let n: usize = tok.parse()?;
                out.cell_types = (0..n).map(|_| tok.parse()).collect::<Result<_, _>>()?;
            }
            "POINT_DATA" | "CELL_DATA" => section_len = tok.parse()?,
            "VECTORS" => {
                let name = tok.next()?.1;
                tok.next()?;
                let v = tok.triples(section_len)?;
                if name == "xi" {
                    out.xi = Some(v);
                }
            }
            "SCALARS" => {
                let name = tok.next()?.1.to_string();
                tok.next()?;
                if tok.iter.peek().map(|t| t.1) == Some("1") {
                    tok.next()?;
                }
                tok.expect("LOOKUP_TABLE")?;
                tok.next()?;
                let v = (0..section_len).map(|_| tok.parse()).collect::<Result<_, _>>()?;
                out.cell_data.scalars.insert(name, v);
            }
            "TENSORS" => {
                let name = tok.next()?.1.to_string();
                tok.next()?;
                let mut v = Vec::with_capacity(section_len);
                for _ in 0..section_len {
                    let mut t = [0.0; 9];
                    for x in &mut t {
                        *x = tok.parse()?;
                    }
                    v.push(t);
                }
                out.cell_data.tensors.insert(name, v);
            }
            other => return Err(VtkError::Parse { line, msg: format!("unsupported keyword '{other}'") }),
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<VtkData, VtkError> {
    parse(&std::fs::read_to_string(path)?)
}
