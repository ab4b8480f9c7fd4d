//! Transport codec and the in-process transport simulator.
//!
//! A frame is `magic "PLN1" | message type byte | entries`, where each entry
//! is `name_len: u32 LE | name bytes | ndim: u32 LE | extents: u32 LE each |
//! values: f64 LE each`. Frame length is therefore exactly
//! `4 + 1 + sum(12 + name_len + 4*ndim + 8*numel)` over entries. Decoding
//! consumes the whole buffer; any shortfall or malformed field is a protocol
//! error carrying the byte offset where parsing stopped.

use crate::agg::{AggregatorSet, Modality};
use crate::encoder::PromptSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub const MAGIC: [u8; 4] = *b"PLN1";

/// What kind of object a frame carries. Only prompt and aggregator tensors
/// ever cross the transport; the privacy audit rests on this enum being
/// exhaustive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgType {
    PromptSet = 0x01,
    AggregatorSet = 0x02,
}

impl MsgType {
    fn from_byte(b: u8, offset: usize) -> Result<Self> {
        match b {
            0x01 => Ok(MsgType::PromptSet),
            0x02 => Ok(MsgType::AggregatorSet),
            other => Err(Error::Protocol {
                offset,
                detail: format!("unknown message type byte {other:#04x}"),
            }),
        }
    }
}

/// Serialized tensor-data size of an object: number of values times eight.
/// Entry and frame headers are deliberately excluded; this is the metric the
/// round reports use.
pub fn payload_bytes<'a, I: IntoIterator<Item = &'a Tensor>>(tensors: I) -> usize {
    tensors.into_iter().map(|t| t.numel() * 8).sum()
}

pub fn prompt_payload_bytes(p: &PromptSet) -> usize {
    p.numel() * 8
}

pub fn aggregator_payload_bytes(a: &AggregatorSet) -> usize {
    a.numel() * 8
}

fn write_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn fail(&self, detail: String) -> Error {
        Error::Protocol { offset: self.pos, detail }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| Error::Protocol {
            offset: self.pos,
            detail: format!("{what} length overflows"),
        })?;
        if end > self.buf.len() {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn entry(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32("entry name length")? as usize;
        let name_bytes = self.take(name_len, "entry name")?;
        let name = core::str::from_utf8(name_bytes)
            .map_err(|_| self.fail(String::from("entry name is not UTF-8")))?;
        let ndim = self.u32("entry rank")? as usize;
        if ndim > 8 {
            return Err(self.fail(format!("entry rank {ndim} is implausible")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let e = self.u32("entry extent")? as usize;
            numel = numel.checked_mul(e).ok_or_else(|| Error::Protocol {
                offset: self.pos,
                detail: String::from("entry extent product overflows"),
            })?;
            shape.push(e);
        }
        let raw = self.take(numel * 8, "entry values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        Ok((String::from(name), Tensor::from_vec(shape, data)?))
    }
}

pub(crate) fn write_blob_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    write_entry(out, name, t);
}

/// Entry loop for the checkpoint container; `base` shifts reported offsets
/// to positions in the whole file.
pub(crate) fn read_blob_entries(buf: &[u8], base: usize) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(buf);
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    while !r.done() {
        let e = r.entry().map_err(|err| match err {
            Error::Protocol { offset, detail } => Error::Protocol { offset: offset + base, detail },
            other => other,
        })?;
        if entries.iter().any(|(n, _)| *n == e.0) {
            return Err(Error::Protocol {
                offset: r.pos + base,
                detail: format!("duplicate entry name {:?}", e.0),
            });
        }
        entries.push(e);
    }
    Ok(entries)
}

/// Writes a bare frame from named tensors; the building block every encoder
/// shares.
pub fn encode_frame(msg: MsgType, entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(msg as u8);
    for (name, t) in entries {
        write_entry(&mut out, name, t);
    }
    out
}

/// Parses a frame back into named tensors, checking magic and type.
pub fn decode_frame(frame: &[u8], expect: MsgType) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(frame);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Protocol {
            offset: 0,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let t = r.u8("message type")?;
    let got = MsgType::from_byte(t, 4)?;
    if got != expect {
        return Err(Error::Protocol {
            offset: 4,
            detail: format!("expected {expect:?} frame, found {got:?}"),
        });
    }
    let mut entries = Vec::new();
    while !r.done() {
        let e = r.entry()?;
        if entries.iter().any(|(n, _)| *n == e.0) {
            return Err(Error::Protocol {
                offset: r.pos,
                detail: format!("duplicate entry name {:?}", e.0),
            });
        }
        entries.push(e);
    }
    Ok(entries)
}

pub fn encode_prompt_set(p: &PromptSet) -> Vec<u8> {
    encode_frame(MsgType::PromptSet, &p.named_tensors())
}

fn indexed<'e>(
    entries: &'e [(String, Tensor)],
    prefix: &str,
) -> Result<Vec<(usize, &'e Tensor)>> {
    let mut found: Vec<(usize, &Tensor)> = Vec::new();
    for (name, t) in entries {
        if let Some(rest) = name.strip_prefix(prefix) {
            let idx: usize = rest.parse().map_err(|_| Error::Protocol {
                offset: 5,
                detail: format!("entry name {name:?} has no index after {prefix:?}"),
            })?;
            found.push((idx, t));
        }
    }
    found.sort_by_key(|(i, _)| *i);
    for (pos, (idx, _)) in found.iter().enumerate() {
        if *idx != pos {
            return Err(Error::Protocol {
                offset: 5,
                detail: format!("{prefix:?} indices are not contiguous from 0"),
            });
        }
    }
    Ok(found)
}

pub fn decode_prompt_set(frame: &[u8]) -> Result<PromptSet> {
    let entries = decode_frame(frame, MsgType::PromptSet)?;
    let text = indexed(&entries, "prompt.text")?;
    let visual = indexed(&entries, "prompt.vis")?;
    if text.len() + visual.len() != entries.len() {
        return Err(Error::Protocol {
            offset: 5,
            detail: String::from("prompt frame carries foreign entries"),
        });
    }
    if text.is_empty() || text.len() != visual.len() {
        return Err(Error::Protocol {
            offset: 5,
            detail: format!(
                "prompt frame has {} text and {} visual blocks",
                text.len(),
                visual.len()
            ),
        });
    }
    let check = |side: &[(usize, &Tensor)], label: &str| -> Result<Vec<Tensor>> {
        let shape = side[0].1.shape();
        if shape.len() != 2 {
            return Err(Error::Protocol {
                offset: 5,
                detail: format!("{label} prompt rank {} is not 2", shape.len()),
            });
        }
        for (_, t) in side {
            if t.shape() != shape {
                return Err(Error::Protocol {
                    offset: 5,
                    detail: format!("{label} prompt shapes differ across blocks"),
                });
            }
        }
        Ok(side.iter().map(|(_, t)| (*t).clone()).collect())
    };
    Ok(PromptSet {
        text: check(&text, "text")?,
        visual: check(&visual, "visual")?,
    })
}

/// Aggregator frames carry one extra `meta.dims` entry `[modality, m, d]` so
/// the receiving side can rebuild the set without out-of-band config.
pub fn encode_aggregator_set(a: &AggregatorSet) -> Vec<u8> {
    let mut entries = vec![(
        String::from("meta.dims"),
        Tensor::from_vec(
            vec![3],
            vec![
                match a.modality {
                    Modality::Text => 0.0,
                    Modality::Visual => 1.0,
                },
                a.m as f64,
                a.d as f64,
            ],
        )
        .expect("shape"),
    )];
    entries.extend(a.named_tensors());
    encode_frame(MsgType::AggregatorSet, &entries)
}

pub fn decode_aggregator_set(frame: &[u8]) -> Result<AggregatorSet> {
    let entries = decode_frame(frame, MsgType::AggregatorSet)?;
    let meta = entries
        .iter()
        .find(|(n, _)| n == "meta.dims")
        .ok_or_else(|| Error::Protocol {
            offset: 5,
            detail: String::from("aggregator frame lacks meta.dims"),
        })?;
    if meta.1.numel() != 3 {
        return Err(Error::Protocol {
            offset: 5,
            detail: String::from("meta.dims must hold 3 values"),
        });
    }
    let modality = match meta.1.data()[0] {
        x if x == 0.0 => Modality::Text,
        x if x == 1.0 => Modality::Visual,
        other => {
            return Err(Error::Protocol {
                offset: 5,
                detail: format!("unknown modality code {other}"),
            })
        }
    };
    let (m, d) = (meta.1.data()[1] as usize, meta.1.data()[2] as usize);
    let label = match modality {
        Modality::Text => "text",
        Modality::Visual => "vis",
    };
    let block_count = {
        let mut n = 0usize;
        while entries
            .iter()
            .any(|(name, _)| name == &format!("{label}.block{n}.q"))
        {
            n += 1;
        }
        n
    };
    if block_count == 0 {
        return Err(Error::Protocol {
            offset: 5,
            detail: String::from("aggregator frame has no blocks"),
        });
    }
    if entries.len() != 1 + block_count * 9 {
        return Err(Error::Protocol {
            offset: 5,
            detail: format!(
                "aggregator frame has {} entries, expected {}",
                entries.len(),
                1 + block_count * 9
            ),
        });
    }
    let get = |name: String| -> Result<Tensor> {
        entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Protocol {
                offset: 5,
                detail: format!("aggregator frame lacks entry {name:?}"),
            })
    };
    let mut blocks = Vec::with_capacity(block_count);
    for l in 0..block_count {
        let p = format!("{label}.block{l}");
        blocks.push(crate::agg::Aggregator {
            q: get(format!("{p}.q"))?,
            fq: crate::agg::Mlp {
                w1: get(format!("{p}.fq.w1"))?,
                b1: get(format!("{p}.fq.b1"))?,
                w2: get(format!("{p}.fq.w2"))?,
                b2: get(format!("{p}.fq.b2"))?,
            },
            fa: crate::agg::Mlp {
                w1: get(format!("{p}.fa.w1"))?,
                b1: get(format!("{p}.fa.b1"))?,
                w2: get(format!("{p}.fa.w2"))?,
                b2: get(format!("{p}.fa.b2"))?,
            },
        });
    }
    let set = AggregatorSet { modality, m, d, blocks };
    for a in &set.blocks {
        if a.input_width() != m * d {
            return Err(Error::Protocol {
                offset: 5,
                detail: format!(
                    "aggregator width {} conflicts with meta dims {m}x{d}",
                    a.input_width()
                ),
            });
        }
    }
    Ok(set)
}

/// Who sent or received a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Party {
    Server,
    Client(usize),
}

/// Protocol stage a frame belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

/// One transmitted frame, as the accounting sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub round: usize,
    pub stage: Stage,
    pub from: Party,
    pub to: Party,
    pub msg: MsgType,
    /// Full frame length including headers.
    pub frame_bytes: usize,
    /// Tensor-data bytes only; the reported communication metric.
    pub payload_bytes: usize,
}

impl FrameRecord {
    pub fn is_download(&self) -> bool {
        self.from == Party::Server
    }
}

/// In-process transport: every transfer round-trips through the codec, so
/// the objects computation continues with are the decoded ones and the byte
/// log reflects real frames.
#[derive(Debug, Default)]
pub struct SimTransport {
    records: Vec<FrameRecord>,
}

impl SimTransport {
    pub fn new() -> Self {
        SimTransport { records: Vec::new() }
    }

    pub fn send_prompt_set(
        &mut self,
        round: usize,
        stage: Stage,
        from: Party,
        to: Party,
        p: &PromptSet,
    ) -> Result<PromptSet> {
        let frame = encode_prompt_set(p);
        self.records.push(FrameRecord {
            round,
            stage,
            from,
            to,
            msg: MsgType::PromptSet,
            frame_bytes: frame.len(),
            payload_bytes: prompt_payload_bytes(p),
        });
        decode_prompt_set(&frame)
    }

    pub fn send_aggregator_set(
        &mut self,
        round: usize,
        stage: Stage,
        from: Party,
        to: Party,
        a: &AggregatorSet,
    ) -> Result<AggregatorSet> {
        let frame = encode_aggregator_set(a);
        self.records.push(FrameRecord {
            round,
            stage,
            from,
            to,
            msg: MsgType::AggregatorSet,
            frame_bytes: frame.len(),
            payload_bytes: aggregator_payload_bytes(a),
        });
        decode_aggregator_set(&frame)
    }

    pub fn records(&self) -> &[FrameRecord] {
        &self.records
    }

    /// Payload bytes one round moved in one stage and direction.
    pub fn payload_total(&self, round: usize, stage: Stage, download: bool) -> usize {
        self.records
            .iter()
            .filter(|r| r.round == round && r.stage == stage && r.is_download() == download)
            .map(|r| r.payload_bytes)
            .sum()
    }

    /// Privacy audit: every frame that ever crossed the boundary must carry
    /// prompt or aggregator tensors; nothing else exists to carry samples.
    pub fn audit(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            match r.msg {
                MsgType::PromptSet | MsgType::AggregatorSet => {}
            }
            if r.from == r.to {
                return Err(Error::Protocol {
                    offset: i,
                    detail: String::from("frame looped back to its sender"),
                });
            }
        }
        Ok(())
    }
}
