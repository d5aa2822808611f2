//! Field dumps.
//!
//! Two formats are supported:
//!
//! * legacy VTK structured points (ASCII), readable by common scientific
//!   viewers. The writer emits `phi`, `psi`, the full symmetric Hessian as a
//!   tensor, and `kappa` with a `kappa_valid` mask (VTK readers choke on
//!   NaN). The reader accepts any file with a `phi` scalar array and an
//!   optional `psi` vector array, which is also the input format for
//!   reinitialization.
//! * a raw dump: one ASCII header line followed by little-endian `f64`
//!   blocks (`phi`, then `psi` with `dim` components per node, then the
//!   packed Hessian), nodes in row-major order with `x` fastest.

use std::io::{BufRead, Read, Write};

use crate::analysis::curvature;
use crate::error::{AfmmError, Result};
use crate::grid::{hess_len, GridSpec, JetField};

const RAW_MAGIC: &str = "AFMM-RAW 1";

fn io_err(e: std::io::Error) -> AfmmError {
    AfmmError::Io(e.to_string())
}

fn bad(msg: impl Into<String>) -> AfmmError {
    AfmmError::InvalidInput(msg.into())
}

/// Arrays recovered from a VTK file. `hess` is packed like [`JetField::hess`].
#[derive(Clone, Debug, PartialEq)]
pub struct VtkField {
    pub grid: GridSpec,
    pub phi: Vec<f64>,
    pub psi: Option<Vec<[f64; 3]>>,
    pub hess: Option<Vec<[f64; 6]>>,
}

impl VtkField {
    /// Full jet field; missing arrays are zero.
    pub fn into_jet_field(self) -> JetField {
        let mut f = JetField::zeros(self.grid);
        f.phi = self.phi;
        if let Some(p) = self.psi {
            f.psi = p;
        }
        if let Some(h) = self.hess {
            f.hess = h;
        }
        f
    }
}

pub fn write_vtk<W: Write>(mut w: W, field: &JetField, title: &str) -> Result<()> {
    let g = &field.grid;
    let dim = g.dim();
    let n = g.n();
    let lo = g.lo();
    let nodes = g.node_count();
    let title: String = title.chars().filter(|c| *c != '\n').take(255).collect();
    let nz = if dim == 2 { 1 } else { n };
    let mut out = String::with_capacity(nodes * 200);
    use std::fmt::Write as _;
    let _ = writeln!(
        out,
        "# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET STRUCTURED_POINTS"
    );
    let _ = writeln!(
        out,
        "DIMENSIONS {n} {n} {nz}\nORIGIN {} {} {}",
        lo[0], lo[1], lo[2]
    );
    let _ = writeln!(
        out,
        "SPACING {} {} {}\nPOINT_DATA {nodes}",
        g.h(),
        g.h(),
        g.h()
    );
    out.push_str("SCALARS phi double 1\nLOOKUP_TABLE default\n");
    for v in &field.phi {
        let _ = writeln!(out, "{v}");
    }
    out.push_str("VECTORS psi double\n");
    for p in &field.psi {
        let z = if dim == 2 { 0.0 } else { p[2] };
        let _ = writeln!(out, "{} {} {}", p[0], p[1], z);
    }
    out.push_str("TENSORS hessian double\n");
    for node in 0..nodes {
        let m = field.hessian_matrix(node);
        for row in m {
            let _ = writeln!(out, "{} {} {}", row[0], row[1], row[2]);
        }
    }
    let kappa: Vec<Option<f64>> = (0..nodes)
        .map(|k| curvature(&field.jet(k), dim).ok())
        .collect();
    out.push_str("SCALARS kappa double 1\nLOOKUP_TABLE default\n");
    for k in &kappa {
        let _ = writeln!(out, "{}", k.unwrap_or(0.0));
    }
    out.push_str("SCALARS kappa_valid int 1\nLOOKUP_TABLE default\n");
    for k in &kappa {
        let _ = writeln!(out, "{}", u8::from(k.is_some()));
    }
    w.write_all(out.as_bytes()).map_err(io_err)
}

struct Tokens<'a> {
    it: std::str::SplitAsciiWhitespace<'a>,
}

impl<'a> Tokens<'a> {
    fn word(&mut self) -> Result<&'a str> {
        self.it
            .next()
            .ok_or_else(|| bad("unexpected end of VTK data"))
    }

    fn num<T: std::str::FromStr>(&mut self) -> Result<T> {
        let t = self.word()?;
        t.parse()
            .map_err(|_| bad(format!("bad number {t:?} in VTK data")))
    }

    fn nums(&mut self, count: usize) -> Result<Vec<f64>> {
        (0..count).map(|_| self.num()).collect()
    }
}

pub fn read_vtk<R: Read>(mut r: R) -> Result<VtkField> {
    let mut text = String::new();
    r.read_to_string(&mut text).map_err(io_err)?;
    let mut lines = text.splitn(4, '\n');
    let version = lines.next().unwrap_or("");
    if !version.starts_with("# vtk DataFile") {
        return Err(bad("missing VTK version line"));
    }
    let _title = lines.next();
    if lines.next().map(str::trim) != Some("ASCII") {
        return Err(bad("only ASCII VTK files are supported"));
    }
    let mut t = Tokens {
        it: lines.next().unwrap_or("").split_ascii_whitespace(),
    };

    let (mut dims, mut origin, mut spacing, mut points) = (None, [0.0; 3], None, None);
    while points.is_none() {
        match t.word()?.to_ascii_uppercase().as_str() {
            "DATASET" => {
                let kind = t.word()?;
                if !kind.eq_ignore_ascii_case("STRUCTURED_POINTS") {
                    return Err(bad(format!("unsupported dataset {kind}")));
                }
            }
            "DIMENSIONS" => dims = Some([t.num::<usize>()?, t.num()?, t.num()?]),
            "ORIGIN" => origin = [t.num()?, t.num()?, t.num()?],
            "SPACING" | "ASPECT_RATIO" => spacing = Some([t.num::<f64>()?, t.num()?, t.num()?]),
            "POINT_DATA" => points = Some(t.num::<usize>()?),
            other => return Err(bad(format!("unexpected VTK keyword {other}"))),
        }
    }
    let dims = dims.ok_or_else(|| bad("missing DIMENSIONS"))?;
    let spacing = spacing.ok_or_else(|| bad("missing SPACING"))?;
    let dim = if dims[2] == 1 { 2 } else { 3 };
    let n = dims[0];
    if dims[1] != n || (dim == 3 && dims[2] != n) {
        return Err(bad(format!(
            "grid must have equal node counts per axis, got {dims:?}"
        )));
    }
    let h = spacing[0];
    if (0..dim).any(|a| (spacing[a] - h).abs() > 1e-12 * h.abs()) {
        return Err(bad(format!(
            "grid spacing must be isotropic, got {spacing:?}"
        )));
    }
    let grid = GridSpec::new(dim, origin, n, h)?;
    let nodes = grid.node_count();
    if points != Some(nodes) {
        return Err(bad(format!(
            "POINT_DATA {} does not match {nodes} grid nodes",
            points.unwrap_or(0)
        )));
    }

    let (mut phi, mut psi, mut hess) = (None, None, None);
    while let Some(kw) = t.it.next() {
        let kw = kw.to_ascii_uppercase();
        let name = t.word()?.to_string();
        let _ty = t.word()?;
        match kw.as_str() {
            "SCALARS" => {
                // optional component count, then the lookup table line
                let mut next = t.word()?;
                let mut comps = 1;
                if let Ok(c) = next.parse::<usize>() {
                    comps = c;
                    next = t.word()?;
                }
                if !next.eq_ignore_ascii_case("LOOKUP_TABLE") {
                    return Err(bad("SCALARS without LOOKUP_TABLE"));
                }
                t.word()?;
                let vals = t.nums(nodes * comps)?;
                if name == "phi" {
                    if comps != 1 {
                        return Err(bad("phi must have one component"));
                    }
                    phi = Some(vals);
                }
            }
            "VECTORS" | "NORMALS" => {
                let vals = t.nums(nodes * 3)?;
                if name == "psi" {
                    psi = Some(
                        vals.chunks(3)
                            .map(|c| [c[0], c[1], if dim == 2 { 0.0 } else { c[2] }])
                            .collect(),
                    );
                }
            }
            "TENSORS" => {
                let vals = t.nums(nodes * 9)?;
                if name == "hessian" {
                    hess = Some(
                        vals.chunks(9)
                            .map(|m| {
                                let mut p = [0.0; 6];
                                for (s, slot) in p.iter_mut().enumerate().take(hess_len(dim)) {
                                    let (a, b) = crate::grid::hess_pair(dim, s);
                                    *slot = m[3 * a + b];
                                }
                                p
                            })
                            .collect(),
                    );
                }
            }
            other => return Err(bad(format!("unsupported VTK array kind {other}"))),
        }
    }
    let phi = phi.ok_or_else(|| bad("VTK file has no phi scalar array"))?;
    Ok(VtkField {
        grid,
        phi,
        psi,
        hess,
    })
}

pub fn write_raw<W: Write>(mut w: W, field: &JetField) -> Result<()> {
    let g = &field.grid;
    let dim = g.dim();
    let lo = g.lo();
    let header = format!(
        "{RAW_MAGIC} dim={dim} n={} lo={},{},{} h={} blocks=phi,psi{dim},hess{}\n",
        g.n(),
        lo[0],
        lo[1],
        lo[2],
        g.h(),
        hess_len(dim)
    );
    let mut buf = header.into_bytes();
    buf.reserve(8 * g.node_count() * (1 + dim + hess_len(dim)));
    for v in &field.phi {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for p in &field.psi {
        for v in &p[..dim] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for hs in &field.hess {
        for v in &hs[..hess_len(dim)] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io_err)
}

pub fn read_raw<R: BufRead>(mut r: R) -> Result<JetField> {
    let mut header = String::new();
    r.read_line(&mut header).map_err(io_err)?;
    let rest = header
        .trim_end()
        .strip_prefix(RAW_MAGIC)
        .ok_or_else(|| bad("not a raw jet dump"))?;
    let (mut dim, mut n, mut lo, mut h) = (None, None, None, None);
    for kv in rest.split_ascii_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bad(format!("bad header field {kv:?}")))?;
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("bad header value {s:?}")))
        };
        match k {
            "dim" => dim = Some(v.parse::<usize>().map_err(|_| bad("bad dim"))?),
            "n" => n = Some(v.parse::<usize>().map_err(|_| bad("bad n"))?),
            "h" => h = Some(num(v)?),
            "lo" => {
                let c: Vec<f64> = v.split(',').map(num).collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(bad("lo needs three components"));
                }
                lo = Some([c[0], c[1], c[2]]);
            }
            _ => {}
        }
    }
    let missing = |f: &str| bad(format!("raw header lacks {f}"));
    let grid = GridSpec::new(
        dim.ok_or_else(|| missing("dim"))?,
        lo.ok_or_else(|| missing("lo"))?,
        n.ok_or_else(|| missing("n"))?,
        h.ok_or_else(|| missing("h"))?,
    )?;
    let dim = grid.dim();
    let nodes = grid.node_count();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io_err)?;
    let want = 8 * nodes * (1 + dim + hess_len(dim));
    if bytes.len() != want {
        return Err(bad(format!(
            "raw payload has {} bytes, expected {want}",
            bytes.len()
        )));
    }
    let mut vals = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut f = JetField::zeros(grid);
    for v in f.phi.iter_mut() {
        *v = vals.next().expect("sized");
    }
    for p in f.psi.iter_mut() {
        for v in p.iter_mut().take(dim) {
            *v = vals.next().expect("sized");
        }
    }
    for hs in f.hess.iter_mut() {
        for v in hs.iter_mut().take(hess_len(dim)) {
            *v = vals.next().expect("sized");
        }
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_field(dim: usize, n: usize, seed: &[f64]) -> JetField {
        let grid = GridSpec::cube(dim, -1.0, 1.5, n).unwrap();
        let mut f = JetField::zeros(grid);
        let mut k = 0;
        let mut next = || {
            k += 1;
            seed[k % seed.len()] * (k as f64).sqrt()
        };
        for node in 0..grid.node_count() {
            f.phi[node] = next();
            for a in 0..dim {
                f.psi[node][a] = next();
            }
            for s in 0..hess_len(dim) {
                f.hess[node][s] = next();
            }
        }
        f
    }

    #[test]
    fn vtk_header_layout() {
        let f = sample_field(2, 5, &[0.5, -1.25]);
        let mut buf = Vec::new();
        write_vtk(&mut buf, &f, "t").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "# vtk DataFile Version 3.0\nt\nASCII\nDATASET STRUCTURED_POINTS\nDIMENSIONS 5 5 1\n"
        ));
        assert!(text.contains("POINT_DATA 25\n"));
        assert!(text.contains("TENSORS hessian double\n"));
    }

    #[test]
    fn vtk_rejects_garbage() {
        assert!(read_vtk("hello".as_bytes()).is_err());
        let no_phi =
            "# vtk DataFile Version 3.0\nx\nASCII\nDATASET STRUCTURED_POINTS\nDIMENSIONS 4 4 1\n\
                      ORIGIN 0 0 0\nSPACING 1 1 1\nPOINT_DATA 16\n";
        assert_eq!(
            read_vtk(no_phi.as_bytes()),
            Err(bad("VTK file has no phi scalar array"))
        );
        let aniso = no_phi.replace("SPACING 1 1 1", "SPACING 1 2 1");
        assert!(read_vtk(aniso.as_bytes()).is_err());
    }

    #[test]
    fn vtk_input_with_phi_only() {
        let mut text = String::from(
            "# vtk DataFile Version 3.0\nplane\nASCII\nDATASET STRUCTURED_POINTS\nDIMENSIONS 4 4 1\n\
             ORIGIN -1 -1 0\nSPACING 0.5 0.5 0.5\nPOINT_DATA 16\nSCALARS phi float\nLOOKUP_TABLE default\n",
        );
        for k in 0..16 {
            text.push_str(&format!("{}\n", (k % 4) as f64 * 0.5 - 1.0));
        }
        let v = read_vtk(text.as_bytes()).unwrap();
        assert_eq!(v.grid.dim(), 2);
        assert_eq!(v.phi[5], -0.5);
        assert!(v.psi.is_none());
    }

    #[test]
    fn raw_rejects_short_payload() {
        let f = sample_field(2, 4, &[1.0]);
        let mut buf = Vec::new();
        write_raw(&mut buf, &f).unwrap();
        buf.pop();
        assert!(read_raw(buf.as_slice()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn raw_round_trip(dim in 2usize..=3, n in 4usize..7, seed in prop::collection::vec(-1e3f64..1e3, 1..20)) {
            let f = sample_field(dim, n, &seed);
            let mut buf = Vec::new();
            write_raw(&mut buf, &f).unwrap();
            prop_assert_eq!(read_raw(buf.as_slice()).unwrap(), f);
        }

        #[test]
        fn vtk_round_trip(dim in 2usize..=3, n in 4usize..6, seed in prop::collection::vec(-1e3f64..1e3, 1..20)) {
            let f = sample_field(dim, n, &seed);
            let mut buf = Vec::new();
            write_vtk(&mut buf, &f, "round trip").unwrap();
            let back = read_vtk(buf.as_slice()).unwrap().into_jet_field();
            prop_assert_eq!(back, f);
        }
    }
}
