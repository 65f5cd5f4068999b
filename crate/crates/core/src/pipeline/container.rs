//! The `AVDS` dataset container.
//!
//! Layout, little-endian throughout: magic `AVDS`, `u32` version, `u32`
//! section count, then per section `u32` tag, `u64` payload length, the
//! payload, and a `u32` CRC32 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EpochSet, Region};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"AVDS";
pub const VERSION: u32 = 1;

pub const TAG_META: u32 = 1;
pub const TAG_EPOCHS: u32 = 2;
pub const TAG_IMAGES: u32 = 3;
pub const TAG_IMAGE_EMBEDS: u32 = 4;
pub const TAG_PAIRS: u32 = 5;

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }
    pub fn str(&mut self, s: &str) {
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }
}

pub(crate) struct Reader<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(what: &'static str, bytes: &'a [u8]) -> Self {
        Reader { what, bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.what, format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    pub fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::format(self.what, e.to_string()))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.what, "length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    pub fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
    pub fn finish(&self) -> Result<()> {
        if self.done() {
            Ok(())
        } else {
            Err(Error::format(self.what, format!("{} trailing bytes", self.bytes.len() - self.pos)))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// One signal/image pairing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub subject: u32,
    pub trial: u32,
    pub image: u32,
    pub class: u32,
    pub split: Split,
}

/// Dataset-level description stored as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub classes: usize,
    pub seed: u64,
    #[serde(default)]
    pub notes: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub subjects: Vec<EpochSet>,
    pub images: Vec<Image>,
    /// `images × d`; frozen image embeddings.
    pub image_embeds: Tensor,
    pub pairs: Vec<Pair>,
}

fn encode_epochs(set: &EpochSet) -> Vec<u8> {
    let mut w = Writer::default();
    w.str(&set.subject_id);
    w.len(set.channels.len());
    for (i, c) in set.channels.iter().enumerate() {
        w.str(c);
        w.u8(set.regions[i].map_or(u8::MAX, Region::code));
    }
    w.f64(set.sample_rate);
    w.f64(set.start_ms);
    w.len(set.n_samples);
    w.len(set.n_trials());
    for (&s, &r) in set.stimulus_ids.iter().zip(&set.repetition_index) {
        w.u32(s);
        w.u32(r);
    }
    w.f64s(&set.data);
    w.buf
}

fn decode_epochs(bytes: &[u8]) -> Result<EpochSet> {
    let mut r = Reader::new("epoch section", bytes);
    let subject_id = r.str()?;
    let c = r.len()?;
    let mut channels = Vec::with_capacity(c);
    let mut regions = Vec::with_capacity(c);
    for _ in 0..c {
        channels.push(r.str()?);
        let code = r.u8()?;
        regions.push(if code == u8::MAX {
            None
        } else {
            Some(Region::from_code(code).ok_or_else(|| Error::format("epoch section", format!("region code {code}")))?)
        });
    }
    let sample_rate = r.f64()?;
    let start_ms = r.f64()?;
    let n_samples = r.len()?;
    let n_trials = r.len()?;
    let mut stimulus_ids = Vec::with_capacity(n_trials);
    let mut repetition_index = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        stimulus_ids.push(r.u32()?);
        repetition_index.push(r.u32()?);
    }
    let data = r.f64s(n_trials * c * n_samples)?;
    r.finish()?;
    let set = EpochSet {
        subject_id,
        channels,
        regions,
        sample_rate,
        start_ms,
        n_samples,
        data,
        stimulus_ids,
        repetition_index,
    };
    set.validate().map_err(|e| Error::format("epoch section", e.to_string()))?;
    Ok(set)
}

fn encode_images(images: &[Image]) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(images.len());
    for img in images {
        w.len(img.channels);
        w.len(img.height);
        w.len(img.width);
        w.f64s(&img.data);
    }
    w.buf
}

fn decode_images(bytes: &[u8]) -> Result<Vec<Image>> {
    let mut r = Reader::new("image section", bytes);
    let n = r.len()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (c, h, w) = (r.len()?, r.len()?, r.len()?);
        let data = r.f64s(c * h * w)?;
        out.push(Image::new(c, h, w, data).map_err(|e| Error::format("image section", e.to_string()))?);
    }
    r.finish()?;
    Ok(out)
}

fn encode_pairs(pairs: &[Pair]) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(pairs.len());
    for p in pairs {
        w.u32(p.subject);
        w.u32(p.trial);
        w.u32(p.image);
        w.u32(p.class);
        w.u8(match p.split {
            Split::Train => 0,
            Split::Test => 1,
        });
    }
    w.buf
}

fn decode_pairs(bytes: &[u8]) -> Result<Vec<Pair>> {
    let mut r = Reader::new("pair section", bytes);
    let n = r.len()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (subject, trial, image, class) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Test,
            s => return Err(Error::format("pair section", format!("split code {s}"))),
        };
        out.push(Pair {
            subject,
            trial,
            image,
            class,
            split,
        });
    }
    r.finish()?;
    Ok(out)
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.image_embeds.rows() != self.images.len() {
            return Err(Error::shape("image embeddings", &[self.images.len()], self.image_embeds.shape()));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            let subject = self.subjects.get(p.subject as usize).ok_or(Error::Index {
                what: "subject",
                index: p.subject as usize,
                len: self.subjects.len(),
            })?;
            if p.trial as usize >= subject.n_trials() {
                return Err(Error::Index {
                    what: "trial",
                    index: p.trial as usize,
                    len: subject.n_trials(),
                });
            }
            if p.image as usize >= self.images.len() {
                return Err(Error::Config(format!("pair {i} references missing image {}", p.image)));
            }
        }
        Ok(())
    }

    pub fn pairs_in(&self, split: Split) -> Vec<Pair> {
        self.pairs.iter().copied().filter(|p| p.split == split).collect()
    }

    pub fn epoch(&self, p: &Pair) -> &[f64] {
        self.subjects[p.subject as usize].epoch(p.trial as usize)
    }

    pub fn image_embed(&self, p: &Pair) -> &[f64] {
        self.image_embeds.row(p.image as usize)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut sections: Vec<(u32, Vec<u8>)> = vec![(TAG_META, serde_json::to_vec(&self.meta)?)];
        for s in &self.subjects {
            sections.push((TAG_EPOCHS, encode_epochs(s)));
        }
        sections.push((TAG_IMAGES, encode_images(&self.images)));
        let mut w = Writer::default();
        w.len(self.image_embeds.rows());
        w.len(self.image_embeds.cols());
        w.f64s(self.image_embeds.data());
        sections.push((TAG_IMAGE_EMBEDS, w.buf));
        sections.push((TAG_PAIRS, encode_pairs(&self.pairs)));

        let mut out = Writer::default();
        out.buf.extend_from_slice(MAGIC);
        out.u32(VERSION);
        out.len(sections.len());
        for (tag, payload) in sections {
            out.u32(tag);
            out.u64(payload.len() as u64);
            out.buf.extend_from_slice(&payload);
            out.u32(crc32fast::hash(&payload));
        }
        Ok(out.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("dataset container", bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::format("dataset container", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("dataset container", format!("unsupported version {version}")));
        }
        let n = r.len()?;
        let (mut meta, mut images, mut embeds, mut pairs) = (None, None, None, None);
        let mut subjects = Vec::new();
        for _ in 0..n {
            let tag = r.u32()?;
            let len = usize::try_from(r.u64()?).map_err(|_| Error::format("dataset container", "section too large"))?;
            let payload = r.take(len)?;
            let crc = r.u32()?;
            if crc32fast::hash(payload) != crc {
                return Err(Error::format("dataset container", format!("checksum mismatch in section tag {tag}")));
            }
            match tag {
                TAG_META => meta = Some(serde_json::from_slice(payload)?),
                TAG_EPOCHS => subjects.push(decode_epochs(payload)?),
                TAG_IMAGES => images = Some(decode_images(payload)?),
                TAG_IMAGE_EMBEDS => {
                    let mut er = Reader::new("embedding section", payload);
                    let (rows, cols) = (er.len()?, er.len()?);
                    let data = er.f64s(rows * cols)?;
                    er.finish()?;
                    embeds = Some(if rows == 0 { None } else { Some(Tensor::new(vec![rows, cols], data)?) });
                }
                TAG_PAIRS => pairs = Some(decode_pairs(payload)?),
                other => log::warn!("skipping unknown dataset section tag {other}"),
            }
        }
        r.finish()?;
        let missing = |what: &str| Error::format("dataset container", format!("missing {what} section"));
        let images = images.ok_or_else(|| missing("image"))?;
        let ds = Dataset {
            meta: meta.ok_or_else(|| missing("meta"))?,
            subjects,
            image_embeds: embeds
                .ok_or_else(|| missing("embedding"))?
                .ok_or_else(|| Error::format("dataset container", "empty embedding table"))?,
            images,
            pairs: pairs.ok_or_else(|| missing("pair"))?,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
