//! Structured-text (key-value tree) serialization for specs, Fock vectors,
//! and symmetric states. Documents are emitted by hand in a deterministic
//! order and parsed with a TOML reader; floating-point values print in Rust's
//! shortest round-tripping form, so decimal inputs survive round trips
//! bit-faithfully.

use crate::error::{Error, Result};
use crate::fock::{occ_basis, FockVector, SymTensor, SymmetricState};
use crate::lattice::{
    build_schrodinger_spec, HamiltonianSpec, LatticeSpec, OneParticleState, PBodyKernel, Topology,
};
use crate::linalg::{c, CMat, CVec};
use num_complex::Complex64 as C64;
use std::fmt::Write as _;

fn topology_name(t: Topology) -> &'static str {
    match t {
        Topology::Periodic1D => "periodic-1d",
        Topology::Abstract => "abstract",
    }
}

fn topology_from(name: &str) -> Result<Topology> {
    match name {
        "periodic-1d" => Ok(Topology::Periodic1D),
        "abstract" => Ok(Topology::Abstract),
        other => Err(Error::Parse(format!("unknown topology {other:?}"))),
    }
}

fn write_f64_array(out: &mut String, key: &str, vals: &[f64]) {
    let body: Vec<String> = vals.iter().map(|v| format!("{v}")).collect();
    let _ = writeln!(out, "{key} = [{}]", body.join(", "));
}

fn write_complex_flat(out: &mut String, key: &str, vals: impl Iterator<Item = C64>) {
    let mut body = Vec::new();
    for z in vals {
        body.push(format!("{}", z.re));
        body.push(format!("{}", z.im));
    }
    let _ = writeln!(out, "{key} = [{}]", body.join(", "));
}

/// Serializes a Hamiltonian spec: builder fields (`U`, `V`) when present plus
/// any extra kernels in dense form.
pub fn spec_to_document(spec: &HamiltonianSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "m = {}", spec.lattice.m);
    let _ = writeln!(out, "h = {}", spec.lattice.h);
    let _ = writeln!(out, "topology = \"{}\"", topology_name(spec.lattice.topology));
    let _ = writeln!(out, "hbar = {}", spec.hbar);
    let _ = writeln!(out, "mass = {}", spec.mass);
    if let Some(data) = &spec.schrodinger {
        write_f64_array(&mut out, "U", &data.u);
        let rows: Vec<String> = (0..data.v.nrows())
            .map(|x| {
                let row: Vec<String> =
                    (0..data.v.ncols()).map(|y| format!("{}", data.v[(x, y)])).collect();
                format!("[{}]", row.join(", "))
            })
            .collect();
        let _ = writeln!(out, "V = [{}]", rows.join(", "));
    }
    for (l, kernels) in spec.levels.iter().enumerate() {
        for kernel in kernels {
            // kernels implied by the Schroedinger builder are not duplicated
            if spec.schrodinger.is_some() && l == 0 {
                match kernel {
                    PBodyKernel::OneBody(_) | PBodyKernel::TwoBodyMult(_) => continue,
                    PBodyKernel::Dense { .. } => {}
                }
            }
            let _ = writeln!(out, "\n[[extra_kernels]]");
            let _ = writeln!(out, "level = {l}");
            match kernel {
                PBodyKernel::OneBody(a) => {
                    let _ = writeln!(out, "kind = \"one-body\"");
                    write_complex_flat(&mut out, "vals", a.iter().copied());
                }
                PBodyKernel::TwoBodyMult(v) => {
                    let _ = writeln!(out, "kind = \"two-body-mult\"");
                    let flat: Vec<f64> = v.iter().copied().collect();
                    write_f64_array(&mut out, "vals", &flat);
                }
                PBodyKernel::Dense { p, vals } => {
                    let _ = writeln!(out, "kind = \"dense\"");
                    let _ = writeln!(out, "p = {p}");
                    write_complex_flat(&mut out, "vals", vals.iter().copied());
                }
            }
        }
    }
    out
}

fn toml_f64(value: &toml::Value, what: &str) -> Result<f64> {
    match value {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::Parse(format!("{what} must be a number"))),
    }
}

fn toml_f64_array(value: &toml::Value, what: &str) -> Result<Vec<f64>> {
    value
        .as_array()
        .ok_or_else(|| Error::Parse(format!("{what} must be an array")))?
        .iter()
        .map(|v| toml_f64(v, what))
        .collect()
}

fn complex_from_flat(flat: &[f64], what: &str) -> Result<Vec<C64>> {
    if flat.len() % 2 != 0 {
        return Err(Error::Parse(format!("{what}: odd-length complex array")));
    }
    Ok(flat.chunks(2).map(|ab| C64::new(ab[0], ab[1])).collect())
}

pub fn spec_from_document(text: &str) -> Result<HamiltonianSpec> {
    let doc: toml::Value =
        text.parse().map_err(|e| Error::Parse(format!("spec document: {e}")))?;
    let table = doc.as_table().ok_or_else(|| Error::Parse("expected a table".into()))?;
    let m = table
        .get("m")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| Error::Parse("missing site count m".into()))? as usize;
    let h = toml_f64(table.get("h").ok_or_else(|| Error::Parse("missing h".into()))?, "h")?;
    let topology = topology_from(
        table
            .get("topology")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Parse("missing topology".into()))?,
    )?;
    let hbar = table.get("hbar").map(|v| toml_f64(v, "hbar")).transpose()?.unwrap_or(1.0);
    let mass = table.get("mass").map(|v| toml_f64(v, "mass")).transpose()?.unwrap_or(1.0);
    let lattice = LatticeSpec::new(m, h, topology)?;
    let mut spec = match (table.get("U"), table.get("V")) {
        (Some(u), Some(v)) => {
            let u = toml_f64_array(u, "U")?;
            let v_rows = v
                .as_array()
                .ok_or_else(|| Error::Parse("V must be a matrix".into()))?;
            let mut vmat = nalgebra::DMatrix::<f64>::zeros(m, m);
            for (x, row) in v_rows.iter().enumerate() {
                for (y, val) in toml_f64_array(row, "V row")?.iter().enumerate() {
                    vmat[(x, y)] = *val;
                }
            }
            build_schrodinger_spec(&u, &vmat, hbar, mass, lattice)?
        }
        _ => HamiltonianSpec {
            lattice,
            hbar,
            mass,
            schrodinger: None,
            levels: vec![vec![]],
        },
    };
    if let Some(extras) = table.get("extra_kernels") {
        for entry in extras
            .as_array()
            .ok_or_else(|| Error::Parse("extra_kernels must be an array".into()))?
        {
            let et = entry
                .as_table()
                .ok_or_else(|| Error::Parse("extra kernel must be a table".into()))?;
            let level = et
                .get("level")
                .and_then(|v| v.as_integer())
                .ok_or_else(|| Error::Parse("kernel missing level".into()))?
                as usize;
            let kind = et
                .get("kind")
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::Parse("kernel missing kind".into()))?;
            let flat = toml_f64_array(
                et.get("vals").ok_or_else(|| Error::Parse("kernel missing vals".into()))?,
                "vals",
            )?;
            let kernel = match kind {
                "one-body" => {
                    let vals = complex_from_flat(&flat, "one-body kernel")?;
                    if vals.len() != m * m {
                        return Err(Error::Parse("one-body kernel size mismatch".into()));
                    }
                    // column-major iteration order of the emitter
                    let mat = CMat::from_vec(m, m, vals);
                    PBodyKernel::OneBody(mat)
                }
                "two-body-mult" => {
                    if flat.len() != m * m {
                        return Err(Error::Parse("pair potential size mismatch".into()));
                    }
                    PBodyKernel::TwoBodyMult(nalgebra::DMatrix::from_vec(m, m, flat))
                }
                "dense" => {
                    let p = et
                        .get("p")
                        .and_then(|v| v.as_integer())
                        .ok_or_else(|| Error::Parse("dense kernel missing p".into()))?
                        as usize;
                    let vals = complex_from_flat(&flat, "dense kernel")?;
                    if vals.len() != m.pow(2 * p as u32) {
                        return Err(Error::Parse("dense kernel size mismatch".into()));
                    }
                    PBodyKernel::Dense { p, vals }
                }
                other => return Err(Error::Parse(format!("unknown kernel kind {other:?}"))),
            };
            while spec.levels.len() <= level {
                spec.levels.push(Vec::new());
            }
            spec.levels[level].push(kernel);
        }
    }
    Ok(spec)
}

fn occ_key(occ: &[u8]) -> String {
    occ.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-")
}

fn occ_from_key(key: &str, m: usize) -> Result<Vec<u8>> {
    let parts: Vec<&str> = key.split('-').collect();
    if parts.len() != m {
        return Err(Error::Parse(format!("occupation key {key:?} has wrong arity")));
    }
    parts
        .iter()
        .map(|p| p.parse::<u8>().map_err(|e| Error::Parse(format!("occupation {key:?}: {e}"))))
        .collect()
}

/// Serializes a Fock vector with explicit multi-index keys, deterministic
/// (lexicographic) ordering.
pub fn fock_to_document(g: &FockVector) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "m = {}", g.lattice.m);
    let _ = writeln!(out, "h = {}", g.lattice.h);
    let _ = writeln!(out, "topology = \"{}\"", topology_name(g.lattice.topology));
    let _ = writeln!(out, "n_max = {}", g.n_max());
    write_complex_flat(&mut out, "phi", g.base_phi.amp.iter().copied());
    for comp in &g.comps {
        let _ = writeln!(out, "\n[g{}]", comp.n);
        for (i, occ) in comp.basis.states.iter().enumerate() {
            let z = comp.vals[i];
            let _ = writeln!(out, "\"{}\" = [{}, {}]", occ_key(occ), z.re, z.im);
        }
    }
    out
}

pub fn fock_from_document(text: &str) -> Result<FockVector> {
    let doc: toml::Value =
        text.parse().map_err(|e| Error::Parse(format!("fock document: {e}")))?;
    let table = doc.as_table().ok_or_else(|| Error::Parse("expected a table".into()))?;
    let m = table
        .get("m")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| Error::Parse("missing m".into()))? as usize;
    let h = toml_f64(table.get("h").ok_or_else(|| Error::Parse("missing h".into()))?, "h")?;
    let topology = topology_from(
        table
            .get("topology")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Parse("missing topology".into()))?,
    )?;
    let n_max = table
        .get("n_max")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| Error::Parse("missing n_max".into()))? as usize;
    let lattice = LatticeSpec::new(m, h, topology)?;
    let phi_flat = toml_f64_array(
        table.get("phi").ok_or_else(|| Error::Parse("missing phi".into()))?,
        "phi",
    )?;
    let phi = OneParticleState::new(CVec::from_vec(complex_from_flat(&phi_flat, "phi")?));
    let mut g = FockVector::zero(lattice, phi);
    g.ensure_rank(n_max)?;
    for n in 0..=n_max {
        let Some(section) = table.get(&format!("g{n}")) else {
            continue;
        };
        let st = section
            .as_table()
            .ok_or_else(|| Error::Parse(format!("g{n} must be a table")))?;
        let mut tensor = SymTensor::zeros(m, n);
        for (key, value) in st {
            let occ = occ_from_key(key, m)?;
            let pair = toml_f64_array(value, "component value")?;
            if pair.len() != 2 {
                return Err(Error::Parse("component value must be [re, im]".into()));
            }
            let idx = tensor
                .basis
                .try_index_of(&occ)
                .ok_or_else(|| Error::Parse(format!("occupation {key:?} has weight != {n}")))?;
            tensor.vals[idx] = C64::new(pair[0], pair[1]);
        }
        g.comps[n] = tensor;
    }
    Ok(g)
}

/// Serializes a symmetric N-particle state with explicit occupation keys.
pub fn sym_state_to_document(state: &SymmetricState) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "m = {}", state.lattice.m);
    let _ = writeln!(out, "h = {}", state.lattice.h);
    let _ = writeln!(out, "topology = \"{}\"", topology_name(state.lattice.topology));
    let _ = writeln!(out, "n_particles = {}", state.n_particles);
    let _ = writeln!(out, "\n[amp]");
    for (i, occ) in state.basis.states.iter().enumerate() {
        let z = state.amp[i];
        let _ = writeln!(out, "\"{}\" = [{}, {}]", occ_key(occ), z.re, z.im);
    }
    out
}

pub fn sym_state_from_document(text: &str) -> Result<SymmetricState> {
    let doc: toml::Value =
        text.parse().map_err(|e| Error::Parse(format!("state document: {e}")))?;
    let table = doc.as_table().ok_or_else(|| Error::Parse("expected a table".into()))?;
    let m = table
        .get("m")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| Error::Parse("missing m".into()))? as usize;
    let h = toml_f64(table.get("h").ok_or_else(|| Error::Parse("missing h".into()))?, "h")?;
    let topology = topology_from(
        table
            .get("topology")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Parse("missing topology".into()))?,
    )?;
    let n = table
        .get("n_particles")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| Error::Parse("missing n_particles".into()))? as usize;
    let lattice = LatticeSpec::new(m, h, topology)?;
    let mut state = SymmetricState::zeros(lattice, n);
    let amps = table
        .get("amp")
        .and_then(|v| v.as_table())
        .ok_or_else(|| Error::Parse("missing amp table".into()))?;
    let basis = occ_basis(m, n);
    for (key, value) in amps {
        let occ = occ_from_key(key, m)?;
        let pair = toml_f64_array(value, "amplitude")?;
        if pair.len() != 2 {
            return Err(Error::Parse("amplitude must be [re, im]".into()));
        }
        let idx = basis
            .try_index_of(&occ)
            .ok_or_else(|| Error::Parse(format!("occupation {key:?} has weight != {n}")))?;
        state.amp[idx] = C64::new(pair[0], pair[1]);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{random_dense_spec, random_unit_state};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn specs_equal_bitwise(a: &HamiltonianSpec, b: &HamiltonianSpec) -> bool {
        if a.lattice != b.lattice
            || a.hbar.to_bits() != b.hbar.to_bits()
            || a.mass.to_bits() != b.mass.to_bits()
        {
            return false;
        }
        if a.levels.len() != b.levels.len() {
            return false;
        }
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            if la.len() != lb.len() {
                return false;
            }
            for (ka, kb) in la.iter().zip(lb) {
                let da = ka.to_dense(&a.lattice);
                let db = kb.to_dense(&b.lattice);
                if da.len() != db.len() {
                    return false;
                }
                for (x, y) in da.iter().zip(&db) {
                    if x.re.to_bits() != y.re.to_bits() || x.im.to_bits() != y.im.to_bits() {
                        return false;
                    }
                }
            }
        }
        true
    }

    #[test]
    fn schrodinger_spec_round_trips_bitwise() {
        let lattice = LatticeSpec::new(3, 0.25, Topology::Periodic1D).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(110);
        let mut v = nalgebra::DMatrix::<f64>::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        v = (&v + v.transpose()) * 0.5;
        let u: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = build_schrodinger_spec(&u, &v, 0.7, 1.3, lattice).unwrap();
        let doc = spec_to_document(&spec);
        let parsed = spec_from_document(&doc).unwrap();
        assert!(specs_equal_bitwise(&spec, &parsed), "document:\n{doc}");
        // and the re-emitted document is byte-identical
        assert_eq!(doc, spec_to_document(&parsed));
    }

    #[test]
    fn dense_spec_round_trips_bitwise() {
        let lattice = LatticeSpec::new(2, 1.5, Topology::Abstract).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let spec = random_dense_spec(lattice, 2, 2, 1.0, &mut rng);
        let doc = spec_to_document(&spec);
        let parsed = spec_from_document(&doc).unwrap();
        assert!(specs_equal_bitwise(&spec, &parsed));
        assert_eq!(doc, spec_to_document(&parsed));
    }

    #[test]
    fn fock_vector_round_trips() {
        let lattice = LatticeSpec::new(3, 0.5, Topology::Abstract).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(112);
        let phi = random_unit_state(&lattice, &mut rng);
        let mut g = FockVector::zero(lattice, phi);
        g.ensure_rank(3).unwrap();
        for t in g.comps.iter_mut() {
            for v in t.vals.iter_mut() {
                *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
        let doc = fock_to_document(&g);
        let parsed = fock_from_document(&doc).unwrap();
        assert_eq!(doc, fock_to_document(&parsed));
        for (a, b) in g.comps.iter().zip(&parsed.comps) {
            for (x, y) in a.vals.iter().zip(&b.vals) {
                assert_eq!(x.re.to_bits(), y.re.to_bits());
                assert_eq!(x.im.to_bits(), y.im.to_bits());
            }
        }
    }

    #[test]
    fn symmetric_state_round_trips() {
        let lattice = LatticeSpec::new(2, 1.0, Topology::Abstract).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        let mut state = SymmetricState::zeros(lattice, 5);
        for a in state.amp.iter_mut() {
            *a = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let doc = sym_state_to_document(&state);
        let parsed = sym_state_from_document(&doc).unwrap();
        assert_eq!(doc, sym_state_to_document(&parsed));
        assert!((state.amp - parsed.amp).norm() == 0.0);
    }

    #[test]
    fn rejects_malformed_documents() {
        assert!(spec_from_document("m = 3").is_err());
        assert!(fock_from_document("nonsense = [").is_err());
        assert!(sym_state_from_document("m = 2\nh = 1.0").is_err());
    }
}
