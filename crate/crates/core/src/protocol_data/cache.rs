//! On-disk scene cache: flat little-endian arrays plus a TOML manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::numerics::{Shape4, Tensor4};

use super::synth::{Scene, SynthSceneSpec};

pub const CACHE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub spec_hash: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
}

/// Hash identifying a pool: the spec plus the pool parameters.
pub fn pool_hash(spec: &SynthSceneSpec, offset: usize, count: usize, n_domains: usize) -> String {
    let text = toml::to_string(spec).unwrap_or_default();
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.update(format!("|{offset}|{count}|{n_domains}").as_bytes());
    crate::seg_model::hex(&h.finalize())
}

pub fn save(dir: &Path, hash: &str, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = scenes
        .first()
        .map(|s| (s.mask.height(), s.mask.width()))
        .unwrap_or((0, 0));
    let mut images = Vec::with_capacity(scenes.len() * 3 * h * w * 8);
    let mut masks = Vec::with_capacity(scenes.len() * h * w);
    let mut domains = Vec::with_capacity(scenes.len() * 8);
    for s in scenes {
        images.extend(s.image.to_le_bytes());
        masks.extend_from_slice(s.mask.data());
        domains.extend((s.domain_id as u64).to_le_bytes());
    }
    fs::write(dir.join("images.bin"), images)?;
    fs::write(dir.join("masks.bin"), masks)?;
    fs::write(dir.join("domains.bin"), domains)?;
    let m = Manifest {
        format_version: CACHE_FORMAT_VERSION,
        spec_hash: hash.to_string(),
        count: scenes.len(),
        height: h,
        width: w,
    };
    let text = toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

/// Load a cached pool, or `None` if absent, stale or malformed.
pub fn load(dir: &Path, hash: &str) -> Option<Vec<Scene>> {
    let text = fs::read_to_string(dir.join("manifest.toml")).ok()?;
    let m: Manifest = toml::from_str(&text).ok()?;
    if m.format_version != CACHE_FORMAT_VERSION || m.spec_hash != hash {
        return None;
    }
    let (n, h, w) = (m.count, m.height, m.width);
    let images = fs::read(dir.join("images.bin")).ok()?;
    let masks = fs::read(dir.join("masks.bin")).ok()?;
    let domains = fs::read(dir.join("domains.bin")).ok()?;
    let plane = h * w;
    if images.len() != n * 3 * plane * 8 || masks.len() != n * plane || domains.len() != n * 8 {
        return None;
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let bytes = &images[i * 3 * plane * 8..(i + 1) * 3 * plane * 8];
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let image = Tensor4::from_vec(Shape4::new(1, 3, h, w), data).ok()?;
        let mask = LabelMap::from_vec(1, h, w, masks[i * plane..(i + 1) * plane].to_vec()).ok()?;
        let domain_id = u64::from_le_bytes(domains[i * 8..(i + 1) * 8].try_into().unwrap()) as usize;
        out.push(Scene { image, mask, domain_id });
    }
    Some(out)
}

/// Generate a pool, going through the cache in `dir` when given.
pub fn cached_pool(
    dir: Option<&Path>,
    spec: &SynthSceneSpec,
    offset: usize,
    count: usize,
    n_domains: usize,
) -> Result<Vec<Scene>> {
    let Some(dir) = dir else {
        return super::synth::generate_pool(spec, offset, count, n_domains);
    };
    let hash = pool_hash(spec, offset, count, n_domains);
    let sub = dir.join(&hash[..16]);
    if let Some(s) = load(&sub, &hash) {
        return Ok(s);
    }
    let scenes = super::synth::generate_pool(spec, offset, count, n_domains)?;
    save(&sub, &hash, &scenes)?;
    Ok(scenes)
}
