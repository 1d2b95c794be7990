//! Binary scene container (`PLCS`) and JSON Lines region/pair files.
//!
//! Scene layout, all little-endian:
//! `"PLCS"`, version u32, point count u32, view count u32, then
//! points f32x3 per point, colors f32x3 per point, labels u16 per point,
//! then per view: width u32, height u32, intrinsics 9 x f64 (row-major),
//! world_to_cam 16 x f64 (row-major), depth f32 x width x height (row-major).
//! The scene id is the file stem.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Matrix4};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{CameraView, PointScene, Region2D, RegionLanguagePair};
use crate::error::{Error, Result};

pub const SCENE_MAGIC: &[u8; 4] = b"PLCS";
pub const SCENE_VERSION: u32 = 1;

pub fn encode_scene(scene: &PointScene) -> Vec<u8> {
    let n = scene.points.len();
    let mut buf = Vec::with_capacity(16 + n * 26);
    buf.extend_from_slice(SCENE_MAGIC);
    buf.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(scene.views.len() as u32).to_le_bytes());
    for p in scene.points.iter().chain(&scene.colors) {
        for c in p {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    for l in &scene.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    for v in &scene.views {
        buf.extend_from_slice(&v.width.to_le_bytes());
        buf.extend_from_slice(&v.height.to_le_bytes());
        for r in 0..3 {
            for c in 0..3 {
                buf.extend_from_slice(&v.intrinsics[(r, c)].to_le_bytes());
            }
        }
        for r in 0..4 {
            for c in 0..4 {
                buf.extend_from_slice(&v.world_to_cam[(r, c)].to_le_bytes());
            }
        }
        for d in &v.depth {
            buf.extend_from_slice(&d.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::format("scene file", "unexpected end of data"))?;
        self.pos = end;
        Ok(bytes.try_into().unwrap())
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn vec3(&mut self) -> Result<[f32; 3]> {
        Ok([self.f32()?, self.f32()?, self.f32()?])
    }
}

pub fn decode_scene(scene_id: &str, buf: &[u8]) -> Result<PointScene> {
    let mut r = Reader { buf, pos: 0 };
    if &r.take::<4>()? != SCENE_MAGIC {
        return Err(Error::format("scene file", "bad magic"));
    }
    let version = r.u32()?;
    if version != SCENE_VERSION {
        return Err(Error::format("scene file", format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let n_views = r.u32()? as usize;
    let points = (0..n).map(|_| r.vec3()).collect::<Result<Vec<_>>>()?;
    let colors = (0..n).map(|_| r.vec3()).collect::<Result<Vec<_>>>()?;
    let labels = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    let mut views = Vec::with_capacity(n_views);
    for _ in 0..n_views {
        let width = r.u32()?;
        let height = r.u32()?;
        let mut k = Matrix3::zeros();
        for row in 0..3 {
            for col in 0..3 {
                k[(row, col)] = r.f64()?;
            }
        }
        let mut m = Matrix4::zeros();
        for row in 0..4 {
            for col in 0..4 {
                m[(row, col)] = r.f64()?;
            }
        }
        let depth = (0..width as usize * height as usize)
            .map(|_| r.f32())
            .collect::<Result<Vec<_>>>()?;
        views.push(CameraView {
            intrinsics: k,
            world_to_cam: m,
            width,
            height,
            depth,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::format("scene file", "trailing bytes"));
    }
    Ok(PointScene {
        scene_id: scene_id.to_string(),
        points,
        colors,
        labels,
        views,
    })
}

pub fn write_scene(path: &Path, scene: &PointScene) -> Result<()> {
    fs::write(path, encode_scene(scene))?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<PointScene> {
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("cannot derive scene id from {}", path.display())))?;
    let buf = fs::read(path)?;
    let scene = decode_scene(id, &buf)?;
    scene.validate(None)?;
    Ok(scene)
}

/// One line of a region file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    #[serde(flatten)]
    pub region: Region2D,
    pub view_id: u32,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_regions(path: &Path, regions: &[RegionRecord]) -> Result<()> {
    write_jsonl(path, regions)
}

pub fn read_regions(path: &Path) -> Result<Vec<RegionRecord>> {
    read_jsonl(path)
}

pub fn write_pairs(path: &Path, pairs: &[RegionLanguagePair]) -> Result<()> {
    write_jsonl(path, pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<RegionLanguagePair>> {
    read_jsonl(path)
}
