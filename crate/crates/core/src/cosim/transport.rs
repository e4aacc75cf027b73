//! Byte carriers for endpoint connections.

use std::io::{self, Read, Write};
use std::sync::mpsc::{channel, Receiver, Sender};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    /// In-process duplex pipe.
    Memory,
    /// Loopback TCP socket.
    Tcp,
}

impl Transport {
    pub fn as_str(&self) -> &'static str {
        match self {
            Transport::Memory => "memory",
            Transport::Tcp => "tcp",
        }
    }
}

impl std::str::FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "memory" | "mem" => Ok(Transport::Memory),
            "tcp" => Ok(Transport::Tcp),
            other => Err(format!("unknown transport `{other}`")),
        }
    }
}

pub struct PipeReader {
    rx: Receiver<Vec<u8>>,
    buf: Vec<u8>,
    pos: usize,
}

impl Read for PipeReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        while self.pos >= self.buf.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.buf = chunk;
                    self.pos = 0;
                }
                // writer dropped: end of stream
                Err(_) => return Ok(0),
            }
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

pub struct PipeWriter {
    tx: Sender<Vec<u8>>,
    pending: Vec<u8>,
}

impl Write for PipeWriter {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        self.pending.extend_from_slice(data);
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        self.tx
            .send(std::mem::take(&mut self.pending))
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer hung up"))
    }
}

pub struct PipeEnd {
    pub reader: PipeReader,
    pub writer: PipeWriter,
}

/// Two connected ends; bytes flushed on one side are readable on the other.
pub fn memory_pipe() -> (PipeEnd, PipeEnd) {
    let (tx_ab, rx_ab) = channel();
    let (tx_ba, rx_ba) = channel();
    let a = PipeEnd {
        reader: PipeReader { rx: rx_ba, buf: Vec::new(), pos: 0 },
        writer: PipeWriter { tx: tx_ab, pending: Vec::new() },
    };
    let b = PipeEnd {
        reader: PipeReader { rx: rx_ab, buf: Vec::new(), pos: 0 },
        writer: PipeWriter { tx: tx_ba, pending: Vec::new() },
    };
    (a, b)
}
