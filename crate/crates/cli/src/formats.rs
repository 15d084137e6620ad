//! On-disk containers and table output. All integers and reals are
//! little-endian; strings are u32-length-prefixed UTF-8. Reading a file
//! and writing it back is byte-identical, and no format carries a
//! timestamp, so equal inputs produce equal bytes.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use gkn_core::model::{Activation, GknParams, ModelConfig};
use gkn_core::random_fields::{Boundary, GridField, GrfSpec};
use gkn_core::training::DarcyPair;

pub const DATASET_MAGIC: &[u8; 4] = b"GKND";
pub const MODEL_MAGIC: &[u8; 4] = b"GKNM";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let len = get_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(String::from_utf8(buf)?)
}

fn put_values(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    for &v in values {
        put_f64(w, v)?;
    }
    Ok(())
}

fn get_values(r: &mut impl Read, count: usize) -> std::io::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(get_f64(r)?);
    }
    Ok(out)
}

fn check_magic(r: &mut impl Read, expected: &[u8; 4], what: &str) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != expected {
        bail!("not a {what} file (bad magic {magic:?})");
    }
    let version = get_u32(r)?;
    if version != FORMAT_VERSION {
        bail!("unsupported {what} format version {version} (expected {FORMAT_VERSION})");
    }
    Ok(())
}

/// A generated dataset with the provenance needed to regenerate it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub d: usize,
    pub s: usize,
    /// Human-readable description of the forcing term.
    pub forcing: String,
    pub grf: GrfSpec,
    pub seed: u64,
    pub pairs: Vec<DarcyPair>,
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w =
        std::io::BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    w.write_all(DATASET_MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION)?;
    put_u32(&mut w, dataset.d as u32)?;
    put_u32(&mut w, dataset.s as u32)?;
    put_u32(&mut w, dataset.pairs.len() as u32)?;
    put_str(&mut w, &dataset.forcing)?;
    put_f64(&mut w, dataset.grf.shift)?;
    put_f64(&mut w, dataset.grf.exponent)?;
    let boundary = match dataset.grf.boundary {
        Boundary::Neumann => 0u32,
        Boundary::Periodic => 1u32,
    };
    put_u32(&mut w, boundary)?;
    put_u32(&mut w, dataset.grf.kmax as u32)?;
    put_u64(&mut w, dataset.grf.seed)?;
    put_u64(&mut w, dataset.seed)?;
    for pair in &dataset.pairs {
        put_values(&mut w, pair.a.values())?;
    }
    for pair in &dataset.pairs {
        put_values(&mut w, pair.u.values())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r =
        std::io::BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    check_magic(&mut r, DATASET_MAGIC, "dataset")?;
    let d = get_u32(&mut r)? as usize;
    let s = get_u32(&mut r)? as usize;
    let n = get_u32(&mut r)? as usize;
    let forcing = get_str(&mut r)?;
    let shift = get_f64(&mut r)?;
    let exponent = get_f64(&mut r)?;
    let boundary = match get_u32(&mut r)? {
        0 => Boundary::Neumann,
        1 => Boundary::Periodic,
        other => bail!("unknown boundary code {other} in dataset header"),
    };
    let kmax = get_u32(&mut r)? as usize;
    let grf_seed = get_u64(&mut r)?;
    let seed = get_u64(&mut r)?;
    let field_len = s.pow(d as u32);
    let mut a_fields = Vec::with_capacity(n);
    for _ in 0..n {
        a_fields.push(GridField::new(s, d, get_values(&mut r, field_len)?)?);
    }
    let mut pairs = Vec::with_capacity(n);
    for a in a_fields {
        let u = GridField::new(s, d, get_values(&mut r, field_len)?)?;
        pairs.push(DarcyPair { a, u });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        bail!("dataset has {} trailing bytes beyond the declared payload", rest.len());
    }
    Ok(Dataset {
        d,
        s,
        forcing,
        grf: GrfSpec { shift, exponent, boundary, kmax, seed: grf_seed },
        seed,
        pairs,
    })
}

/// Expected parameter-array shapes for a config, in group order.
fn group_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
    let n = config.n;
    let mut shapes = vec![
        vec![n, config.input_width],
        vec![n],
        vec![n, n],
        vec![1, n],
        vec![1],
    ];
    for pair in config.kappa_widths.windows(2) {
        shapes.push(vec![pair[1], pair[0]]);
        shapes.push(vec![pair[1]]);
    }
    shapes
}

pub fn write_model(path: &Path, params: &GknParams) -> Result<()> {
    let mut w =
        std::io::BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    w.write_all(MODEL_MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION)?;
    let config = &params.config;
    put_u32(&mut w, config.n as u32)?;
    put_u32(&mut w, config.t_steps as u32)?;
    put_u32(&mut w, config.d as u32)?;
    put_u32(&mut w, config.input_width as u32)?;
    let activation = match config.activation {
        Activation::Relu => 0u32,
        Activation::Linear => 1u32,
    };
    put_u32(&mut w, activation)?;
    put_u64(&mut w, config.seed)?;
    put_u32(&mut w, config.kappa_widths.len() as u32)?;
    for &width in &config.kappa_widths {
        put_u32(&mut w, width as u32)?;
    }
    for (group, shape) in params.groups().iter().zip(group_shapes(config)) {
        put_u32(&mut w, shape.len() as u32)?;
        for dim in &shape {
            put_u32(&mut w, *dim as u32)?;
        }
        put_values(&mut w, group)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<GknParams> {
    let mut r =
        std::io::BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    check_magic(&mut r, MODEL_MAGIC, "model")?;
    let n = get_u32(&mut r)? as usize;
    let t_steps = get_u32(&mut r)? as usize;
    let d = get_u32(&mut r)? as usize;
    let input_width = get_u32(&mut r)? as usize;
    let activation = match get_u32(&mut r)? {
        0 => Activation::Relu,
        1 => Activation::Linear,
        other => bail!("unknown activation code {other} in model header"),
    };
    let seed = get_u64(&mut r)?;
    let n_widths = get_u32(&mut r)? as usize;
    let mut kappa_widths = Vec::with_capacity(n_widths);
    for _ in 0..n_widths {
        kappa_widths.push(get_u32(&mut r)? as usize);
    }
    let config = ModelConfig { n, t_steps, d, input_width, kappa_widths, activation, seed };
    let mut flat = Vec::new();
    for expected in group_shapes(&config) {
        let ndim = get_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(get_u32(&mut r)? as usize);
        }
        if shape != expected {
            bail!("model parameter array has shape {shape:?}, config implies {expected:?}");
        }
        flat.extend(get_values(&mut r, shape.iter().product())?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        bail!("model has {} trailing bytes beyond the declared parameters", rest.len());
    }
    Ok(GknParams::from_flat(&config, &flat)?)
}

/// Full 17-significant-digit rendering so tables diff cleanly.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// UTF-8 comma-separated table with a header row and \n line endings.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use gkn_core::model::init_params;
    use gkn_core::training::generate_darcy_dataset;

    fn toy_model_config() -> ModelConfig {
        ModelConfig {
            n: 4,
            t_steps: 2,
            d: 2,
            input_width: 6,
            kappa_widths: vec![6, 8, 16],
            activation: Activation::Relu,
            seed: 11,
        }
    }

    #[test]
    fn dataset_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.gknd");
        let dataset = Dataset {
            d: 2,
            s: 9,
            forcing: "constant:1".into(),
            grf: GrfSpec::darcy_coefficient(8, 5),
            seed: 5,
            pairs: generate_darcy_dataset(3, 9, 5).unwrap(),
        };
        write_dataset(&path, &dataset).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.d, dataset.d);
        assert_eq!(back.s, dataset.s);
        assert_eq!(back.forcing, dataset.forcing);
        assert_eq!(back.seed, dataset.seed);
        assert_eq!(back.grf.kmax, dataset.grf.kmax);
        assert_eq!(back.pairs.len(), dataset.pairs.len());
        for (b, p) in back.pairs.iter().zip(&dataset.pairs) {
            assert_eq!(b.a.values(), p.a.values());
            assert_eq!(b.u.values(), p.u.values());
        }
        // Writing what was read reproduces the file byte for byte.
        let copy = dir.path().join("copy.gknd");
        write_dataset(&copy, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&copy).unwrap());
    }

    #[test]
    fn model_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gknm");
        let params = init_params(&toy_model_config()).unwrap();
        write_model(&path, &params).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(back.config.n, params.config.n);
        assert_eq!(back.config.kappa_widths, params.config.kappa_widths);
        assert_eq!(back.to_flat(), params.to_flat());
        let copy = dir.path().join("copy.gknm");
        write_model(&copy, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&copy).unwrap());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"NOPE????????????").unwrap();
        assert!(read_dataset(&path).is_err());
        assert!(read_model(&path).is_err());
    }

    #[test]
    fn truncated_and_padded_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gknm");
        let params = init_params(&toy_model_config()).unwrap();
        write_model(&path, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.gknm");
        std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_model(&cut).is_err());

        let padded = dir.path().join("padded.gknm");
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0u8; 4]);
        std::fs::write(&padded, &longer).unwrap();
        assert!(read_model(&padded).is_err());
    }

    #[test]
    fn format_real_round_trips_doubles_exactly() {
        for v in [
            0.0,
            1.0,
            -1.0 / 3.0,
            std::f64::consts::PI,
            6.626e-34,
            -2.5e300,
            f64::MIN_POSITIVE,
        ] {
            let shown = format_real(v);
            assert_eq!(shown.parse::<f64>().unwrap(), v, "rendering {shown}");
        }
        assert_eq!(format_real(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn csv_layout_is_header_then_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(
            &path,
            &["a", "b"],
            &[vec!["1".into(), "2".into()], vec!["3".into(), "4".into()]],
        )
        .unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a,b\n1,2\n3,4\n");
    }
}
