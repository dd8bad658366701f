//! Secret scrubbing for everything the engine persists.

use std::collections::HashMap;
use std::io::{self, Write};

pub const REDACTED: &[u8] = b"[REDACTED]";

/// Env var holding the distribution API key; always treated as secret.
pub const DIST_API_KEY_ENV: &str = "FORGE_DIST_API_KEY";

/// Replaces every occurrence of a fixed set of secret byte strings.
#[derive(Debug, Clone, Default)]
pub struct Redactor {
    // Longest first, so overlapping secrets redact the widest match.
    secrets: Vec<Vec<u8>>,
}

impl Redactor {
    pub fn new<I, S>(secrets: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let mut secrets: Vec<Vec<u8>> = secrets
            .into_iter()
            .map(|s| s.as_ref().to_vec())
            .filter(|s| !s.is_empty())
            .collect();
        secrets.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        secrets.dedup();
        Redactor { secrets }
    }

    /// Collects the values of env vars whose names end in `_PASSWORD`, are
    /// listed in `extra_names`, or hold the distribution API key.
    pub fn from_env(env: &HashMap<String, String>, extra_names: &[&str]) -> Self {
        Redactor::new(
            env.iter()
                .filter(|(k, _)| k.ends_with("_PASSWORD") || k.as_str() == DIST_API_KEY_ENV || extra_names.contains(&k.as_str()))
                .map(|(_, v)| v.as_bytes()),
        )
    }

    pub fn is_empty(&self) -> bool {
        self.secrets.is_empty()
    }

    fn max_len(&self) -> usize {
        self.secrets.first().map_or(0, Vec::len)
    }

    /// Earliest match in `hay`, preferring the longest secret at a position.
    fn find(&self, hay: &[u8]) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize)> = None;
        for secret in &self.secrets {
            if let Some(pos) = hay.windows(secret.len()).position(|w| w == secret.as_slice()) {
                if best.is_none_or(|(p, _)| pos < p) {
                    best = Some((pos, secret.len()));
                }
            }
        }
        best
    }

    pub fn redact(&self, bytes: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(bytes.len());
        let mut rest = bytes;
        while let Some((pos, len)) = self.find(rest) {
            out.extend_from_slice(&rest[..pos]);
            out.extend_from_slice(REDACTED);
            rest = &rest[pos + len..];
        }
        out.extend_from_slice(rest);
        out
    }

    pub fn redact_str(&self, text: &str) -> String {
        String::from_utf8_lossy(&self.redact(text.as_bytes())).into_owned()
    }

    pub fn writer<W: Write>(&self, inner: W) -> RedactingWriter<W> {
        RedactingWriter { redactor: self.clone(), inner, pending: Vec::new() }
    }
}

/// Streaming redaction. Holds back just enough bytes to catch a secret
/// split across writes; call [`RedactingWriter::finish`] to flush the tail.
pub struct RedactingWriter<W: Write> {
    redactor: Redactor,
    inner: W,
    pending: Vec<u8>,
}

impl<W: Write> RedactingWriter<W> {
    fn drain(&mut self, final_flush: bool) -> io::Result<()> {
        while let Some((pos, len)) = self.redactor.find(&self.pending) {
            self.inner.write_all(&self.pending[..pos])?;
            self.inner.write_all(REDACTED)?;
            self.pending.drain(..pos + len);
        }
        let keep = if final_flush { 0 } else { self.redactor.max_len().saturating_sub(1) };
        if self.pending.len() > keep {
            let emit = self.pending.len() - keep;
            self.inner.write_all(&self.pending[..emit])?;
            self.pending.drain(..emit);
        }
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.drain(true)?;
        self.inner.flush()?;
        Ok(self.inner)
    }
}

impl<W: Write> Write for RedactingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.pending.extend_from_slice(buf);
        self.drain(false)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}
