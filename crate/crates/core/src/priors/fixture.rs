//! Recorded request → response archives for deterministic replay.
//!
//! Archive layout: the magic bytes `FSFX0001`, then repeated entries of a
//! 32-byte request key followed by one response frame (see [`super::wire`]).
//! Keys are SHA-256 digests of the request with every float quantized to f32,
//! so a request that survives a trip over the wire keeps its key.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::wire::{
    decode_response, encode_response, read_frame, write_frame, Dtype, Reply, WireError,
    DEFAULT_MAX_FRAME_BYTES,
};
use super::{Conditioning, Latent, PriorError, ScoreProvider, ScoreRequest, ScoreResponse};

pub const FIXTURE_MAGIC: &[u8; 8] = b"FSFX0001";

pub type RequestKey = [u8; 32];

fn push_f32(h: &mut Sha256, v: f64) {
    h.update((v as f32).to_le_bytes());
}

fn push_tensor(h: &mut Sha256, t: &Latent) {
    for d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in t.to_chw() {
        push_f32(h, v);
    }
}

/// Canonical digest of a request.
pub fn request_key(req: &ScoreRequest) -> RequestKey {
    let mut h = Sha256::new();
    h.update(b"FSREQ1");
    h.update((req.timestep as u64).to_le_bytes());
    push_f32(&mut h, req.guidance_scale);
    match &req.conditioning {
        Conditioning::Unconditional => h.update([0u8]),
        Conditioning::Text(e) => {
            h.update([1u8]);
            h.update((e.len() as u64).to_le_bytes());
            for v in e {
                push_f32(&mut h, *v);
            }
        }
        Conditioning::View(v) => {
            h.update([2u8]);
            for i in 0..3 {
                for j in 0..3 {
                    push_f32(&mut h, v.rotation()[(i, j)]);
                }
            }
            for t in v.translation().iter() {
                push_f32(&mut h, *t);
            }
            push_tensor(&mut h, &Latent::new(v.reference().clone()));
        }
    }
    push_tensor(&mut h, &req.latent);
    h.finalize().into()
}

fn hex(key: &RequestKey) -> String {
    key.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixtureArchive {
    entries: BTreeMap<RequestKey, ScoreResponse>,
}

impl FixtureArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, req: &ScoreRequest, resp: ScoreResponse) {
        self.entries.insert(request_key(req), resp);
    }

    pub fn get(&self, req: &ScoreRequest) -> Option<&ScoreResponse> {
        self.entries.get(&request_key(req))
    }

    /// Writes entries in key order. `F64` frames replay bit-exactly.
    pub fn write_to(&self, w: &mut impl Write, dtype: Dtype) -> Result<(), PriorError> {
        w.write_all(FIXTURE_MAGIC)?;
        for (key, resp) in &self.entries {
            w.write_all(key)?;
            write_frame(w, &encode_response(resp, dtype))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, PriorError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| PriorError::Protocol("fixture archive is too short".into()))?;
        if &magic != FIXTURE_MAGIC {
            return Err(PriorError::Protocol("not a fixture archive".into()));
        }
        let mut entries = BTreeMap::new();
        loop {
            let mut key = [0u8; 32];
            let mut filled = 0;
            while filled < key.len() {
                let n = r.read(&mut key[filled..])?;
                if n == 0 {
                    break;
                }
                filled += n;
            }
            if filled == 0 {
                break;
            }
            if filled < key.len() {
                return Err(PriorError::Protocol("truncated fixture key".into()));
            }
            let frame = read_frame(r, DEFAULT_MAX_FRAME_BYTES).map_err(|e| match e {
                WireError::Closed => {
                    PriorError::Protocol("fixture entry without a response".into())
                }
                other => other.into(),
            })?;
            match decode_response(&frame)? {
                Reply::Score(resp) => {
                    entries.insert(key, resp);
                }
                Reply::Error { .. } => {
                    return Err(PriorError::Protocol(
                        "fixture archive holds an error frame".into(),
                    ));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<(), PriorError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w, dtype)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PriorError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Replays responses from a [`FixtureArchive`].
#[derive(Debug, Clone)]
pub struct FixtureProvider {
    archive: FixtureArchive,
}

impl FixtureProvider {
    pub fn new(archive: FixtureArchive) -> Self {
        Self { archive }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PriorError> {
        FixtureArchive::load(path).map(Self::new)
    }
}

impl ScoreProvider for FixtureProvider {
    fn name(&self) -> &str {
        "fixture"
    }

    fn predict(&self, request: &ScoreRequest) -> Result<ScoreResponse, PriorError> {
        let resp = self
            .archive
            .get(request)
            .ok_or_else(|| PriorError::MissingFixture(hex(&request_key(request))))?;
        request.latent.check_shape(&resp.noise)?;
        Ok(resp.clone())
    }
}

/// Wraps a provider and records every answered request.
pub struct RecordingProvider<P> {
    inner: P,
    archive: Mutex<FixtureArchive>,
}

impl<P: ScoreProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            archive: Mutex::new(FixtureArchive::new()),
        }
    }

    pub fn archive(&self) -> FixtureArchive {
        self.archive.lock().expect("archive lock").clone()
    }
}

impl<P: ScoreProvider> ScoreProvider for RecordingProvider<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn predict(&self, request: &ScoreRequest) -> Result<ScoreResponse, PriorError> {
        let resp = self.inner.predict(request)?;
        self.archive
            .lock()
            .expect("archive lock")
            .insert(request, resp.clone());
        Ok(resp)
    }
}
