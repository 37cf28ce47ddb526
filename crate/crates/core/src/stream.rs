//! Chunked streaming conversion, the latency ledger and the binary token
//! framing used on the command line.

use std::io::{Read, Write};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use streamconv_nn::Mat;

use crate::backbone::{DecodeState, Sampling, SemInput, SemSlotValue};
use crate::corpus::AcousticTokens;
use crate::encoder::{pooled_frames, semantic_rows, EncoderStream};
use crate::error::{arg, Error, Result};
use crate::model::{ConversionMode, ConversionModel, EncoderView};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub delay_ms: f64,
    pub token_ms: f64,
    pub rtf_model: f64,
    pub rtf_codec: f64,
    pub total_ms: f64,
}

impl LatencyReport {
    /// `total = delay + token + token * (rtf_model + rtf_codec)`.
    pub fn new(delay_ms: f64, token_ms: f64, rtf_model: f64, rtf_codec: f64) -> Result<Self> {
        for (name, v) in [
            ("delay_ms", delay_ms),
            ("token_ms", token_ms),
            ("rtf_model", rtf_model),
            ("rtf_codec", rtf_codec),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return arg(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        Ok(Self {
            delay_ms,
            token_ms,
            rtf_model,
            rtf_codec,
            total_ms: delay_ms + token_ms + token_ms * (rtf_model + rtf_codec),
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Wall time spent inside one `feed_chunk`/`close` call.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkTiming {
    pub frames_in: usize,
    pub frames_out: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Open,
    Closed,
}

/// Incremental conversion of one source stream towards one prompt speaker.
///
/// Semantic row `t` is encoded once frames up to `2t + 1 + k` have arrived;
/// each row then yields acoustic frames `2t` and `2t + 1`. At close the
/// remaining rows are produced by repeating the last received frame, which
/// matches offline conversion of the same input exactly.
pub struct StreamSession {
    model: Arc<ConversionModel<f32>>,
    view: EncoderView<f32>,
    mode: ConversionMode,
    enc: EncoderStream<f32>,
    dec: DecodeState<f32>,
    sampling: Sampling,
    rng: ChaCha8Rng,
    received: AcousticTokens,
    emitted: AcousticTokens,
    logits: Vec<Mat<f32>>,
    ledger: Vec<ChunkTiming>,
    phase: Phase,
}

impl StreamSession {
    /// Ingests the whole prompt before any source input.
    pub fn open(
        model: Arc<ConversionModel<f32>>,
        prompt: &AcousticTokens,
        mode: ConversionMode,
        sampling: Sampling,
        seed: u64,
    ) -> Result<Self> {
        if prompt.frames() % 2 != 0 {
            return arg("prompt must hold two acoustic frames per semantic frame");
        }
        let path = model.path(mode)?;
        let view = path.view.clone();
        let prompt_e = if prompt.is_empty() {
            Mat::zeros(0, path.backbone.dims.hidden)
        } else {
            path.semantic_embeddings(prompt)?
        };
        let mut dec = path.backbone.start();
        path.backbone
            .ingest_prompt(&mut dec, SemInput::Embeddings(&prompt_e), prompt, path.lora)?;
        let enc = view.encoder.start_stream();
        let q = model.backbone.dims.quantizers;
        drop(path);
        Ok(Self {
            view,
            mode,
            enc,
            dec,
            sampling,
            rng: ChaCha8Rng::seed_from_u64(seed),
            received: AcousticTokens::empty(q),
            emitted: AcousticTokens::empty(q),
            logits: Vec::new(),
            ledger: Vec::new(),
            phase: Phase::Open,
            model,
        })
    }

    pub fn mode(&self) -> ConversionMode {
        self.mode
    }

    pub fn delay(&self) -> usize {
        self.view.encoder.delay()
    }

    /// Everything emitted so far (append-only).
    pub fn emitted(&self) -> &AcousticTokens {
        &self.emitted
    }

    /// Per emitted frame, `L x codec_vocab` logits.
    pub fn logits(&self) -> &[Mat<f32>] {
        &self.logits
    }

    pub fn ledger(&self) -> &[ChunkTiming] {
        &self.ledger
    }

    pub fn is_closed(&self) -> bool {
        self.phase == Phase::Closed
    }

    /// Appends source frames; returns the newly emitted frames.
    pub fn feed_chunk(&mut self, frames: &AcousticTokens) -> Result<AcousticTokens> {
        if self.mode == ConversionMode::NonStream {
            return Err(Error::Mode("offline sessions take the whole source at once".into()));
        }
        if self.phase == Phase::Closed {
            return Err(Error::State("session already closed".into()));
        }
        if frames.quantizers() != self.received.quantizers() {
            return arg("chunk quantizer count does not match the session");
        }
        frames.check_vocab(self.model.backbone.dims.codec_vocab)?;
        let start = Instant::now();
        let before = self.emitted.frames();
        self.received.extend(frames);
        let k = self.delay();
        // row t is ready once frame 2t + 1 + k has arrived
        let ready = (self.received.frames() + 1).saturating_sub(k + 1) / 2;
        self.advance(ready, None)?;
        Ok(self.finish_call(start, frames.frames(), before))
    }

    /// Flushes the delay buffer and closes the session; returns the frames
    /// emitted by the flush.
    pub fn close(&mut self) -> Result<AcousticTokens> {
        if self.phase == Phase::Closed {
            return Err(Error::State("session already closed".into()));
        }
        let start = Instant::now();
        let before = self.emitted.frames();
        let total = self.received.frames();
        self.advance(semantic_rows(total), Some(total))?;
        self.phase = Phase::Closed;
        Ok(self.finish_call(start, 0, before))
    }

    fn finish_call(&mut self, start: Instant, frames_in: usize, before: usize) -> AcousticTokens {
        let out = self.emitted.slice(before, self.emitted.frames());
        self.ledger.push(ChunkTiming {
            frames_in,
            frames_out: out.frames(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        out
    }

    /// Produces rows up to `rows`; `final_frames` caps emission at the end
    /// of the stream.
    fn advance(&mut self, rows: usize, final_frames: Option<usize>) -> Result<()> {
        let path = self.model.path_shared(self.mode)?;
        let k = self.delay();
        let n = self.received.frames();
        while self.enc.rows() < rows {
            let t = self.enc.rows();
            let (j0, j1) = pooled_frames(t, k, n);
            let (states, logits) = self.view.encoder.stream_row(
                &mut self.enc,
                self.received.frame(j0),
                self.received.frame(j1),
                self.view.lora.as_ref(),
            )?;
            let (conn, _) = path
                .connector
                .connect(&states, &logits, &path.backbone.sem_emb.table.value)?;
            let mut h = path
                .backbone
                .push_semantic(&mut self.dec, SemSlotValue::Row(conn.embeddings.row(0)), path.lora)?;
            for _ in 0..2 {
                let f = path.backbone.predict_frame(&h, self.sampling, &mut self.rng);
                h = path.backbone.push_frame(&mut self.dec, &f.codes, path.lora)?;
                if final_frames.is_none_or(|cap| self.emitted.frames() < cap) {
                    self.emitted.push_frame(&f.codes);
                    self.logits.push(f.logits);
                }
            }
        }
        Ok(())
    }

    /// Latency ledger: `rtf_model` is measured wall time per emitted second
    /// of audio; the codec term is the configured placeholder.
    pub fn latency_report(&self) -> Result<LatencyReport> {
        let token_ms = self.model.cfg.stream.token_ms;
        let wall: f64 = self.ledger.iter().map(|c| c.wall_ms).sum();
        let audio_ms = self.emitted.frames() as f64 * token_ms;
        let rtf = if audio_ms > 0.0 { wall / audio_ms } else { 0.0 };
        LatencyReport::new(self.delay() as f64 * token_ms, token_ms, rtf, self.model.cfg.stream.rtf_codec)
    }
}

/// Writes one chunk: a little-endian `u32` frame count, then `T x L` codes.
pub fn write_chunk<W: Write>(w: &mut W, a: &AcousticTokens) -> Result<()> {
    let n = u32::try_from(a.frames()).map_err(|_| Error::Argument("chunk too long".into()))?;
    let mut buf = Vec::with_capacity(4 + 4 * a.codes().len());
    buf.extend_from_slice(&n.to_le_bytes());
    for c in a.codes() {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..])? {
            0 => break,
            n => got += n,
        }
    }
    Ok(got)
}

/// Reads the next chunk; `None` at a clean end of stream.
pub fn read_chunk<R: Read>(r: &mut R, quantizers: usize) -> Result<Option<AcousticTokens>> {
    let mut head = [0u8; 4];
    match read_full(r, &mut head)? {
        0 => return Ok(None),
        4 => {}
        _ => return arg("truncated chunk header"),
    }
    let frames = u32::from_le_bytes(head) as usize;
    let mut body = vec![0u8; frames * quantizers * 4];
    if read_full(r, &mut body)? != body.len() {
        return arg("truncated chunk body");
    }
    let codes = body
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Some(AcousticTokens::new(codes, quantizers)?))
}

/// Reads chunks until end of stream.
pub fn read_all_chunks<R: Read>(r: &mut R, quantizers: usize) -> Result<Vec<AcousticTokens>> {
    let mut out = Vec::new();
    while let Some(c) = read_chunk(r, quantizers)? {
        out.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_cases() {
        assert_eq!(LatencyReport::new(0.0, 20.0, 0.0, 0.0).unwrap().total_ms, 20.0);
        let r = LatencyReport::new(40.0, 20.0, 0.58, 0.004).unwrap();
        assert!((r.total_ms - (40.0 + 20.0 + 20.0 * 0.584)).abs() < 1e-9);
    }

    #[test]
    fn negative_inputs_are_rejected() {
        assert!(matches!(LatencyReport::new(-1.0, 20.0, 0.5, 0.0), Err(Error::Argument(_))));
        assert!(matches!(LatencyReport::new(0.0, 20.0, f64::NAN, 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn framing_round_trip() {
        let a = AcousticTokens::new(vec![1, 2, 3, 4, 5, 6], 2).unwrap();
        let b = AcousticTokens::empty(2);
        let mut buf = Vec::new();
        write_chunk(&mut buf, &a).unwrap();
        write_chunk(&mut buf, &b).unwrap();
        assert_eq!(buf.len(), 4 + 24 + 4);
        assert_eq!(&buf[..8], &[3, 0, 0, 0, 1, 0, 0, 0]);
        let chunks = read_all_chunks(&mut buf.as_slice(), 2).unwrap();
        assert_eq!(chunks, vec![a, b]);
        assert!(read_chunk(&mut &buf[..6], 2).is_err());
    }
}
