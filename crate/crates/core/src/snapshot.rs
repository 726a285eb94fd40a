//! Full map + codebook persistence (`map.bin` and `codebook.json`).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evolution::{Codebook, CodebookRecord};
use crate::frame_store::ByteReader;
use crate::geometry::VoxelKey;
use crate::query::{codebook_json, CodebookJson, CODEBOOK_FILE};
use crate::voxel_map::{VoxelMap, VoxelState};

pub const MAP_FILE: &str = "map.bin";
const MAGIC: &[u8; 4] = b"VXSN";
const VERSION: u32 = 1;

pub fn encode_map(map: &VoxelMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&map.resolution().to_le_bytes());
    out.extend_from_slice(&map.next_instance_id().to_le_bytes());
    let retired = map.retired_ids();
    out.extend_from_slice(&(retired.len() as u32).to_le_bytes());
    for id in retired {
        out.extend_from_slice(&id.to_le_bytes());
    }
    let cells = map.sorted_cells();
    out.extend_from_slice(&(cells.len() as u64).to_le_bytes());
    for (key, cell) in cells {
        for c in [key.ix, key.iy, key.iz] {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&(cell.len() as u32).to_le_bytes());
        for &(id, count) in cell.counts() {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&count.to_le_bytes());
        }
    }
    out
}

pub fn decode_map(buf: &[u8], path: &Path) -> Result<VoxelMap> {
    let mut r = ByteReader::new(buf, path);
    r.magic(MAGIC)?;
    if r.u32("version")? != VERSION {
        return Err(Error::schema(path, "version", "unsupported"));
    }
    let resolution = r.f64("resolution")?;
    let next_id = r.u32("next_instance_id")?;
    let n_retired = r.u32("retired_count")?;
    let retired = (0..n_retired)
        .map(|_| r.u32("retired"))
        .collect::<Result<Vec<_>>>()?;
    let n_cells = r.u64("cell_count")?;
    let mut cells = Vec::new();
    for _ in 0..n_cells {
        let key = VoxelKey::new(r.i32("key")?, r.i32("key")?, r.i32("key")?);
        let n = r.u32("entry_count")?;
        let mut counts = Vec::with_capacity(n.min(1024) as usize);
        for _ in 0..n {
            counts.push((r.u32("entry.id")?, r.u32("entry.count")?));
        }
        let state = VoxelState::from_counts(counts);
        if state.len() != n as usize {
            return Err(Error::schema(path, "entries", format!("malformed cell {key:?}")));
        }
        cells.push((key, state));
    }
    r.finish()?;
    VoxelMap::from_parts(resolution, next_id, retired, cells)
        .map_err(|e| Error::schema(path, "cells", e.to_string()))
}

pub fn codebook_from_json(json: CodebookJson, path: &Path) -> Result<Codebook> {
    let mut cb = Codebook::new(json.dim);
    for e in json.instances {
        cb.insert_record(CodebookRecord {
            id: e.id,
            embedding: e.embedding,
            weight: e.weight,
            caption: e.caption,
            caption_weight: e.caption_weight,
        })
        .map_err(|err| Error::schema(path, "instances", err.to_string()))?;
    }
    Ok(cb)
}

pub fn save_snapshot(dir: impl AsRef<Path>, map: &VoxelMap, codebook: &Codebook) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(MAP_FILE);
    fs::write(&p, encode_map(map)).map_err(|e| Error::io(&p, e))?;
    let p = dir.join(CODEBOOK_FILE);
    let text = serde_json::to_string_pretty(&codebook_json(map, codebook))
        .map_err(|e| Error::Inconsistent(e.to_string()))?;
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

pub fn load_snapshot(dir: impl AsRef<Path>) -> Result<(VoxelMap, Codebook)> {
    let dir = dir.as_ref();
    let p = dir.join(MAP_FILE);
    let buf = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let map = decode_map(&buf, &p)?;
    let p = dir.join(CODEBOOK_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let json: CodebookJson =
        serde_json::from_str(&text).map_err(|e| Error::schema(&p, "codebook", e.to_string()))?;
    let codebook = codebook_from_json(json, &p)?;
    for id in map.instance_ids() {
        if !codebook.contains(id) && map.extent(id) > 0 {
            return Err(Error::schema(&p, "instances", format!("instance {id} missing")));
        }
    }
    Ok((map, codebook))
}
