//! `.mclip` and `.mpack` containers. Both are an 8-byte magic, a
//! little-endian `u32` version, a `u64` header length, a JSON header and a
//! payload of little-endian `f64` frame scalars.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clip::{Frame, MotionClip};
use crate::library::ClipLibrary;
use crate::{Result, SimError};

pub const CLIP_MAGIC: &[u8; 8] = b"HMCLIP\0\0";
pub const PACK_MAGIC: &[u8; 8] = b"HMPACK\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipHeader {
    pub id: String,
    pub source: String,
    pub fps: f64,
    pub num_joints: usize,
    pub num_frames: usize,
    pub frame_scalars: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackEntry {
    #[serde(flatten)]
    pub clip: ClipHeader,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackHeader {
    pub weights: BTreeMap<String, f64>,
    pub clips: Vec<PackEntry>,
}

fn header_of(clip: &MotionClip) -> ClipHeader {
    ClipHeader {
        id: clip.id.clone(),
        source: clip.source.clone(),
        fps: clip.fps,
        num_joints: clip.num_joints,
        num_frames: clip.len(),
        frame_scalars: Frame::scalar_count(clip.num_joints),
    }
}

fn payload(clip: &MotionClip) -> Vec<u8> {
    let mut scalars = Vec::with_capacity(clip.len() * Frame::scalar_count(clip.num_joints));
    for f in &clip.frames {
        f.push_scalars(&mut scalars);
    }
    scalars.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_payload(h: &ClipHeader, bytes: &[u8]) -> Result<MotionClip> {
    if h.frame_scalars != Frame::scalar_count(h.num_joints) {
        return Err(SimError::Format(format!(
            "clip {} declares {} scalars per frame",
            h.id, h.frame_scalars
        )));
    }
    if bytes.len() != h.num_frames * h.frame_scalars * 8 {
        return Err(SimError::Format(format!("clip {} payload has {} bytes", h.id, bytes.len())));
    }
    let scalars: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let frames = scalars
        .chunks_exact(h.frame_scalars.max(1))
        .map(|s| Frame::from_scalars(h.num_joints, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(MotionClip {
        id: h.id.clone(),
        source: h.source.clone(),
        fps: h.fps,
        num_joints: h.num_joints,
        frames,
    })
}

fn write_preamble(out: &mut impl Write, magic: &[u8; 8], header: &[u8]) -> Result<()> {
    out.write_all(magic)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(header)?;
    Ok(())
}

/// Returns the header bytes and the offset at which the payload begins.
fn read_preamble(inp: &mut impl Read, magic: &[u8; 8]) -> Result<(Vec<u8>, u64)> {
    let mut m = [0u8; 8];
    inp.read_exact(&mut m)
        .map_err(|_| SimError::Format("file too short for a header".into()))?;
    if &m != magic {
        return Err(SimError::Format("bad magic".into()));
    }
    let mut v = [0u8; 4];
    inp.read_exact(&mut v)
        .map_err(|_| SimError::Format("truncated version".into()))?;
    let version = u32::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(SimError::Format(format!("unsupported version {version}")));
    }
    let mut l = [0u8; 8];
    inp.read_exact(&mut l)
        .map_err(|_| SimError::Format("truncated header length".into()))?;
    let len = u64::from_le_bytes(l);
    if len > 1 << 32 {
        return Err(SimError::Format(format!("header length {len}")));
    }
    let mut header = vec![0u8; len as usize];
    inp.read_exact(&mut header)
        .map_err(|_| SimError::Format("truncated header".into()))?;
    Ok((header, 20 + len))
}

pub fn encode_clip(clip: &MotionClip) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&header_of(clip))?;
    let mut out = Vec::new();
    write_preamble(&mut out, CLIP_MAGIC, &header)?;
    out.extend(payload(clip));
    Ok(out)
}

pub fn decode_clip(bytes: &[u8]) -> Result<MotionClip> {
    let mut cursor = bytes;
    let (header, start) = read_preamble(&mut cursor, CLIP_MAGIC)?;
    let h: ClipHeader = serde_json::from_slice(&header)?;
    decode_payload(&h, &bytes[start as usize..])
}

pub fn write_clip(clip: &MotionClip, path: &Path) -> Result<()> {
    std::fs::write(path, encode_clip(clip)?)?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<MotionClip> {
    decode_clip(&std::fs::read(path)?)
}

pub fn pack_library(lib: &ClipLibrary, path: &Path) -> Result<()> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(lib.len());
    let mut blobs = Vec::with_capacity(lib.len());
    for c in lib.clips() {
        let blob = payload(c);
        entries.push(PackEntry {
            clip: header_of(c),
            offset,
        });
        offset += blob.len() as u64;
        blobs.push(blob);
    }
    let header = serde_json::to_vec(&PackHeader {
        weights: lib.weights(),
        clips: entries,
    })?;
    let mut out = BufWriter::new(File::create(path)?);
    write_preamble(&mut out, PACK_MAGIC, &header)?;
    for b in blobs {
        out.write_all(&b)?;
    }
    out.flush()?;
    Ok(())
}

/// Random access into a pack: only the index is read up front.
pub struct PackReader {
    file: BufReader<File>,
    header: PackHeader,
    payload_start: u64,
}

impl PackReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = BufReader::new(File::open(path)?);
        let (header, payload_start) = read_preamble(&mut file, PACK_MAGIC)?;
        let header: PackHeader = serde_json::from_slice(&header)?;
        if header.clips.is_empty() {
            return Err(SimError::EmptyLibrary);
        }
        Ok(Self {
            file,
            header,
            payload_start,
        })
    }

    pub fn len(&self) -> usize {
        self.header.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.header.clips.is_empty()
    }

    pub fn header(&self) -> &PackHeader {
        &self.header
    }

    pub fn read_clip(&mut self, k: usize) -> Result<MotionClip> {
        let e = self
            .header
            .clips
            .get(k)
            .ok_or_else(|| SimError::Format(format!("clip index {k} of {}", self.len())))?;
        let size = e.clip.num_frames * e.clip.frame_scalars * 8;
        self.file.seek(SeekFrom::Start(self.payload_start + e.offset))?;
        let mut buf = vec![0u8; size];
        self.file
            .read_exact(&mut buf)
            .map_err(|_| SimError::Format(format!("clip {} truncated", e.clip.id)))?;
        decode_payload(&e.clip, &buf)
    }
}

pub fn load_library(path: &Path) -> Result<ClipLibrary> {
    let mut reader = PackReader::open(path)?;
    let clips = (0..reader.len())
        .map(|k| reader.read_clip(k))
        .collect::<Result<Vec<_>>>()?;
    ClipLibrary::with_weights(clips, reader.header.weights.clone())
}
