//! The CBPD model container.
//!
//! Layout: `CBPD`, u32 LE version, u32 LE length of a UTF-8 JSON header, the
//! header, then the arrays it lists as contiguous f64 LE values in order:
//! `phi` (2P×K column-major), `Phi` (K), `tau1` (K), `tau2` (K),
//! `lambda` (2), `eps` (2).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GlobalVariationalState, Hyperparameters, ModelMetadata, PosteriorEstimate, Provenance};
use crate::rng::RNG_ALGORITHM;

pub const MAGIC: &[u8; 4] = b"CBPD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(rename = "P")]
    p: usize,
    #[serde(rename = "K")]
    k: usize,
    patch_size: usize,
    sr_ratio: usize,
    hyperparameters: Hyperparameters,
    rng: String,
    arrays: Vec<ArrayEntry>,
    provenance: Provenance,
}

fn manifest(p: usize, k: usize) -> Vec<ArrayEntry> {
    [
        ("phi", 2 * p * k),
        ("Phi", k),
        ("tau1", k),
        ("tau2", k),
        ("lambda", 2),
        ("eps", 2),
    ]
    .into_iter()
    .map(|(name, len)| ArrayEntry {
        name: name.to_string(),
        len,
    })
    .collect()
}

/// Serialises a model; identical inputs give identical bytes.
pub fn encode_model(est: &PosteriorEstimate) -> Result<Vec<u8>> {
    let g = &est.global;
    g.validate()?;
    let header = Header {
        p: g.p,
        k: g.k,
        patch_size: est.meta.patch_size,
        sr_ratio: est.meta.sr_ratio,
        hyperparameters: est.meta.hyperparameters,
        rng: RNG_ALGORITHM.to_string(),
        arrays: manifest(g.p, g.k),
        provenance: est.meta.provenance.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let json_len = u32::try_from(json.len()).map_err(|_| Error::ModelFormat("metadata too large".into()))?;
    let n_values = g.phi.len() + 3 * g.k + 4;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * n_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&json_len.to_le_bytes());
    out.extend_from_slice(&json);
    let arrays: [&[f64]; 6] = [
        &g.phi,
        &g.phi_var,
        &g.tau1,
        &g.tau2,
        &[g.lambda1, g.lambda2],
        &[g.eps1, g.eps2],
    ];
    for v in arrays.iter().flat_map(|a| a.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<PosteriorEstimate> {
    let fail = |m: &str| Error::ModelFormat(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(fail("missing CBPD magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::ModelFormat(format!("unsupported version {version}")));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < json_len {
        return Err(fail("truncated metadata block"));
    }
    let header: Header = serde_json::from_slice(&body[..json_len])?;
    if header.arrays != manifest(header.p, header.k) {
        return Err(fail("array manifest does not match P and K"));
    }
    let payload = &body[json_len..];
    let expected: usize = header.arrays.iter().map(|a| a.len).sum();
    if payload.len() != 8 * expected {
        return Err(Error::ModelFormat(format!(
            "payload holds {} bytes, manifest declares {}",
            payload.len(),
            8 * expected
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    let (p, k) = (header.p, header.k);
    let phi = take(2 * p * k);
    let phi_var = take(k);
    let tau1 = take(k);
    let tau2 = take(k);
    let lambda = take(2);
    let eps = take(2);
    let global = GlobalVariationalState {
        p,
        k,
        tau1,
        tau2,
        phi,
        phi_var,
        lambda1: lambda[0],
        lambda2: lambda[1],
        eps1: eps[0],
        eps2: eps[1],
    };
    header.hyperparameters.validate()?;
    let meta = ModelMetadata {
        patch_size: header.patch_size,
        sr_ratio: header.sr_ratio,
        hyperparameters: header.hyperparameters,
        provenance: header.provenance,
    };
    PosteriorEstimate::new(global, meta)
}

pub fn save_model(est: &PosteriorEstimate, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_model(est)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PosteriorEstimate> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}
