//! Checkpoint files (.plnb): a fixed header, a content digest, and the three
//! wire frames of a global state. Reusing the wire codec means a checkpoint
//! decodes exactly when a transmission would; the digest additionally catches
//! silent at-rest corruption that framing alone cannot see.

use plan_core::fed::GlobalState;
use plan_core::wire::{
    decode_aggregator_set, decode_prompt_set, encode_aggregator_set, encode_prompt_set,
};
use plan_core::{Error, Result};
use sha2::{Digest, Sha256};

const MAGIC: &[u8; 6] = b"PLNB1\n";
const DIGEST_LEN: usize = 32;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn get_u64(bytes: &[u8], at: &mut usize) -> Result<u64> {
    let end = *at + 8;
    if end > bytes.len() {
        return Err(Error::Protocol {
            offset: *at,
            detail: "checkpoint truncated inside a length field".into(),
        });
    }
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&bytes[*at..end]);
    *at = end;
    Ok(u64::from_le_bytes(buf))
}

fn get_frame<'a>(bytes: &'a [u8], at: &mut usize) -> Result<&'a [u8]> {
    let len = get_u64(bytes, at)? as usize;
    let end = at.checked_add(len).filter(|e| *e <= bytes.len()).ok_or(Error::Protocol {
        offset: *at,
        detail: "checkpoint truncated inside a frame".into(),
    })?;
    let frame = &bytes[*at..end];
    *at = end;
    Ok(frame)
}

pub fn encode_global_state(state: &GlobalState) -> Vec<u8> {
    let prompts = encode_prompt_set(&state.prompts);
    let agg_text = encode_aggregator_set(&state.agg_text);
    let agg_vis = encode_aggregator_set(&state.agg_vis);
    let mut body = Vec::with_capacity(32 + prompts.len() + agg_text.len() + agg_vis.len());
    put_u64(&mut body, state.round as u64);
    for frame in [&prompts, &agg_text, &agg_vis] {
        put_u64(&mut body, frame.len() as u64);
        body.extend_from_slice(frame);
    }
    let mut out = Vec::with_capacity(MAGIC.len() + DIGEST_LEN + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&Sha256::digest(&body));
    out.extend_from_slice(&body);
    out
}

pub fn decode_global_state(bytes: &[u8]) -> Result<GlobalState> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Protocol { offset: 0, detail: "not a checkpoint: bad magic".into() });
    }
    let body_at = MAGIC.len() + DIGEST_LEN;
    let stored = &bytes[MAGIC.len()..body_at];
    let body = &bytes[body_at..];
    if Sha256::digest(body).as_slice() != stored {
        return Err(Error::Protocol {
            offset: MAGIC.len(),
            detail: "checkpoint digest mismatch: file is corrupt or truncated".into(),
        });
    }
    let mut at = 0;
    let round = get_u64(body, &mut at)? as usize;
    let prompts = decode_prompt_set(get_frame(body, &mut at)?)?;
    let agg_text = decode_aggregator_set(get_frame(body, &mut at)?)?;
    let agg_vis = decode_aggregator_set(get_frame(body, &mut at)?)?;
    if at != body.len() {
        return Err(Error::Protocol {
            offset: body_at + at,
            detail: "trailing bytes after checkpoint payload".into(),
        });
    }
    Ok(GlobalState { prompts, agg_text, agg_vis, round })
}

#[cfg(test)]
mod tests {
    use super::*;
    use plan_core::encoder::ModelConfig;

    #[test]
    fn global_state_round_trips_bitwise() {
        let state = GlobalState::init(&ModelConfig::toy(), 3);
        let bytes = encode_global_state(&state);
        let back = decode_global_state(&bytes).unwrap();
        assert_eq!(back.round, state.round);
        assert_eq!(back.fingerprint(), state.fingerprint());
        assert_eq!(encode_global_state(&back), bytes);
    }

    #[test]
    fn any_corruption_is_rejected() {
        let state = GlobalState::init(&ModelConfig::toy(), 4);
        let bytes = encode_global_state(&state);
        assert!(decode_global_state(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_global_state(&bytes[1..]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_global_state(&long).is_err());
        for at in [7, bytes.len() / 2, bytes.len() - 2] {
            let mut flipped = bytes.clone();
            flipped[at] ^= 0xff;
            assert!(decode_global_state(&flipped).is_err(), "flip at {at} accepted");
        }
    }
}
