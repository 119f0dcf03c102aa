//! Versioned little-endian binary checkpoints.
//!
//! ```text
//! "DRMC" u32:version u64:step
//! u32:layers { u32:in u32:out f64[in*out]:weight f64[out]:bias }*
//! posterior: u32:d u32:c f64[(d+1)c]:mu f64[(d+1)c]:rho
//! matrix:    u32:c f64:beta u64:updates f64[c*c]:rows
//! adam:      f64:lr f64:beta1 f64:beta2 f64:eps f64:weight_decay u64:t u64:n f64[n]:m f64[n]:v
//! ```
//!
//! The posterior block on its own (`encode_posterior`) is also what head-only
//! files contain, after a `"DRMP"` magic and the version.

use std::fs;
use std::path::Path;

use crate::bayes::GaussianPosterior;
use crate::datagen::ByteReader;
use crate::discriminant::DiscriminantMatrix;
use crate::distributions::Categorical;
use crate::error::{Error, Result};
use crate::numcore::Tensor2;

use super::{Adam, AdamState, Dense, FeatureExtractor, TrainState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DRMC";
pub const POSTERIOR_MAGIC: [u8; 4] = *b"DRMP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_posterior(out: &mut Vec<u8>, post: &GaussianPosterior) {
    put_u32(out, post.feature_dim());
    put_u32(out, post.classes());
    put_f64s(out, post.mu());
    put_f64s(out, post.rho());
}

fn read_posterior(r: &mut ByteReader<'_>) -> Result<GaussianPosterior> {
    let d = r.u32("posterior feature dim")? as usize;
    let c = r.u32("posterior classes")? as usize;
    let n = (d + 1) * c;
    let mu = r.f64s(n, "posterior mu")?;
    let rho = r.f64s(n, "posterior rho")?;
    GaussianPosterior::new(d, c, mu, rho).map_err(|e| r.parse_err(e.to_string()))
}

fn check_header(r: &mut ByteReader<'_>, magic: [u8; 4]) -> Result<()> {
    if r.take(4, "magic")? != magic {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic, expected {:?}", String::from_utf8_lossy(&magic)),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(())
}

pub fn encode_posterior(post: &GaussianPosterior) -> Vec<u8> {
    let mut out = POSTERIOR_MAGIC.to_vec();
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    write_posterior(&mut out, post);
    out
}

pub fn decode_posterior(bytes: &[u8]) -> Result<GaussianPosterior> {
    let mut r = ByteReader::new(bytes);
    check_header(&mut r, POSTERIOR_MAGIC)?;
    let post = read_posterior(&mut r)?;
    r.finish()?;
    Ok(post)
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    put_u64(&mut out, state.step);

    put_u32(&mut out, state.extractor.layers().len());
    for l in state.extractor.layers() {
        put_u32(&mut out, l.weight.rows());
        put_u32(&mut out, l.weight.cols());
        put_f64s(&mut out, l.weight.data());
        put_f64s(&mut out, &l.bias);
    }

    write_posterior(&mut out, &state.posterior);

    let m = &state.matrix;
    put_u32(&mut out, m.classes());
    put_f64s(&mut out, &[m.beta()]);
    put_u64(&mut out, m.update_count());
    put_f64s(&mut out, &m.to_flat());

    let a = &state.adam;
    put_f64s(&mut out, &[a.lr, a.beta1, a.beta2, a.eps, a.weight_decay]);
    put_u64(&mut out, a.state.t);
    put_u64(&mut out, a.state.m.len() as u64);
    put_f64s(&mut out, &a.state.m);
    put_f64s(&mut out, &a.state.v);
    out
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut r = ByteReader::new(bytes);
    check_header(&mut r, CHECKPOINT_MAGIC)?;
    let step = r.u64("step")?;

    let n_layers = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let rows = r.u32("layer input")? as usize;
        let cols = r.u32("layer output")? as usize;
        let w = r.f64s(rows * cols, "layer weight")?;
        let bias = r.f64s(cols, "layer bias")?;
        let weight = Tensor2::new(rows, cols, w).map_err(|e| r.parse_err(e.to_string()))?;
        layers.push(Dense { weight, bias });
    }
    let extractor = FeatureExtractor::from_layers(layers).map_err(|e| r.parse_err(e.to_string()))?;

    let posterior = read_posterior(&mut r)?;

    let c = r.u32("matrix classes")? as usize;
    let beta = r.f64("matrix beta")?;
    let updates = r.u64("matrix updates")?;
    let flat = r.f64s(c * c, "matrix rows")?;
    let rows = flat
        .chunks(c.max(1))
        .map(|row| Categorical::new(row.to_vec()).map(|_| Categorical::from_trusted(row.to_vec())))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| r.parse_err(e.to_string()))?;
    let matrix = DiscriminantMatrix::from_parts(rows, updates, beta).map_err(|e| r.parse_err(e.to_string()))?;

    let hyper = r.f64s(5, "optimizer settings")?;
    let t = r.u64("optimizer step")?;
    let n = r.u64("optimizer size")? as usize;
    if n != extractor.param_count() {
        return Err(r.parse_err(format!(
            "optimizer holds {n} moments for {} parameters",
            extractor.param_count()
        )));
    }
    let m = r.f64s(n, "first moments")?;
    let v = r.f64s(n, "second moments")?;
    r.finish()?;

    if posterior.feature_dim() != extractor.output_dim() || posterior.classes() != matrix.classes() {
        return Err(Error::Parse {
            offset: 0,
            message: "checkpoint components have inconsistent shapes".into(),
        });
    }
    Ok(TrainState {
        extractor,
        posterior,
        matrix,
        step,
        adam: Adam {
            lr: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            eps: hyper[3],
            weight_decay: hyper[4],
            state: AdamState { t, m, v },
        },
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, encode(state))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    decode(&fs::read(path)?)
}
