//! Versioned endpoint messages and their byte framing.
//!
//! The HELLO exchange is always one JSON object per `\n`-terminated line.
//! Afterwards both sides switch to the framing named in HELLO: either the
//! same line format, or a 4-byte big-endian payload length followed by the
//! JSON payload.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use super::{CosimError, VehicleState};

pub const PROTOCOL_VERSION: u32 = 1;
const MAX_FRAME: u32 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Framing {
    LengthPrefixed,
    JsonLines,
}

impl Framing {
    pub fn as_str(&self) -> &'static str {
        match self {
            Framing::LengthPrefixed => "length-prefixed",
            Framing::JsonLines => "json-lines",
        }
    }
}

impl std::str::FromStr for Framing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "length-prefixed" | "length" | "binary" => Ok(Framing::LengthPrefixed),
            "json-lines" | "lines" | "jsonl" => Ok(Framing::JsonLines),
            other => Err(format!("unknown framing `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "UPPERCASE")]
pub enum Message {
    Hello { version: u32, dt: f64, framing: Framing },
    Step { n: u64 },
    States { n: u64, states: Vec<VehicleState> },
    Resync { n: u64, vehicle_id: String, x: f64, y: f64 },
    Bye,
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::Step { .. } => "STEP",
            Message::States { .. } => "STATES",
            Message::Resync { .. } => "RESYNC",
            Message::Bye => "BYE",
        }
    }
}

/// One side of a message stream.
pub struct Connection<R: Read, W: Write> {
    reader: BufReader<R>,
    writer: W,
    framing: Framing,
}

impl<R: Read, W: Write> Connection<R, W> {
    /// Starts in line framing for the handshake.
    pub fn new(reader: R, writer: W) -> Self {
        Self { reader: BufReader::new(reader), writer, framing: Framing::JsonLines }
    }

    pub fn framing(&self) -> Framing {
        self.framing
    }

    pub fn set_framing(&mut self, framing: Framing) {
        self.framing = framing;
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), CosimError> {
        let payload = serde_json::to_vec(msg)?;
        match self.framing {
            Framing::JsonLines => {
                self.writer.write_all(&payload)?;
                self.writer.write_all(b"\n")?;
            }
            Framing::LengthPrefixed => {
                let len = u32::try_from(payload.len())
                    .ok()
                    .filter(|&l| l <= MAX_FRAME)
                    .ok_or_else(|| CosimError::Protocol(format!("frame of {} bytes is too large", payload.len())))?;
                self.writer.write_all(&len.to_be_bytes())?;
                self.writer.write_all(&payload)?;
            }
        }
        self.writer.flush()?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Message, CosimError> {
        let payload = match self.framing {
            Framing::JsonLines => {
                let mut line = Vec::new();
                if self.reader.read_until(b'\n', &mut line)? == 0 {
                    return Err(CosimError::Protocol("peer closed the stream".into()));
                }
                if line.last() != Some(&b'\n') {
                    return Err(CosimError::Protocol("truncated line".into()));
                }
                line.pop();
                line
            }
            Framing::LengthPrefixed => {
                let mut len = [0u8; 4];
                self.reader.read_exact(&mut len).map_err(|e| match e.kind() {
                    std::io::ErrorKind::UnexpectedEof => CosimError::Protocol("peer closed the stream".into()),
                    _ => e.into(),
                })?;
                let len = u32::from_be_bytes(len);
                if len > MAX_FRAME {
                    return Err(CosimError::Protocol(format!("frame length {len} exceeds limit")));
                }
                let mut buf = vec![0u8; len as usize];
                self.reader.read_exact(&mut buf)?;
                buf
            }
        };
        serde_json::from_slice(&payload).map_err(|e| CosimError::Protocol(format!("undecodable message: {e}")))
    }

    /// Initiator side of the handshake.
    pub fn hello(&mut self, dt: f64, framing: Framing) -> Result<(), CosimError> {
        self.framing = Framing::JsonLines;
        self.send(&Message::Hello { version: PROTOCOL_VERSION, dt, framing })?;
        match self.recv()? {
            Message::Hello { version, dt: peer_dt, framing: peer_framing }
                if version == PROTOCOL_VERSION && peer_dt.to_bits() == dt.to_bits() && peer_framing == framing =>
            {
                self.framing = framing;
                Ok(())
            }
            Message::Hello { version, .. } if version != PROTOCOL_VERSION => {
                Err(CosimError::Protocol(format!("peer speaks version {version}, expected {PROTOCOL_VERSION}")))
            }
            other => Err(CosimError::Protocol(format!("bad handshake reply {}", other.kind()))),
        }
    }

    /// Responder side: accepts the peer's HELLO if `dt` matches, echoes it and
    /// switches framing.
    pub fn accept(&mut self, dt: f64) -> Result<Framing, CosimError> {
        self.framing = Framing::JsonLines;
        match self.recv()? {
            Message::Hello { version, dt: peer_dt, framing } => {
                if version != PROTOCOL_VERSION {
                    return Err(CosimError::Protocol(format!("peer speaks version {version}, expected {PROTOCOL_VERSION}")));
                }
                if peer_dt.to_bits() != dt.to_bits() {
                    return Err(CosimError::Protocol(format!("peer dt {peer_dt} differs from local dt {dt}")));
                }
                self.send(&Message::Hello { version, dt, framing })?;
                self.framing = framing;
                Ok(framing)
            }
            other => Err(CosimError::Protocol(format!("expected HELLO, got {}", other.kind()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_messages() -> Vec<Message> {
        vec![
            Message::Step { n: 7 },
            Message::States {
                n: 7,
                states: vec![VehicleState { vehicle_id: "v\"1".into(), x: 0.1, y: -2.5, z: 1e-7, speed: 3.0, heading: 6.2 }],
            },
            Message::Resync { n: 7, vehicle_id: "v1".into(), x: 1.0 / 3.0, y: 2.0 },
            Message::Bye,
        ]
    }

    #[test]
    fn both_framings_round_trip() {
        for framing in [Framing::LengthPrefixed, Framing::JsonLines] {
            let mut bytes = Vec::new();
            {
                let mut c = Connection::new(std::io::empty(), &mut bytes);
                c.set_framing(framing);
                for m in sample_messages() {
                    c.send(&m).unwrap();
                }
            }
            let mut c = Connection::new(bytes.as_slice(), std::io::sink());
            c.set_framing(framing);
            for m in sample_messages() {
                assert_eq!(c.recv().unwrap(), m);
            }
            assert!(matches!(c.recv(), Err(CosimError::Protocol(_))));
        }
    }

    #[test]
    fn wire_bytes_are_documented_form() {
        let mut bytes = Vec::new();
        let mut c = Connection::new(std::io::empty(), &mut bytes);
        c.set_framing(Framing::LengthPrefixed);
        c.send(&Message::Step { n: 3 }).unwrap();
        let body = br#"{"type":"STEP","n":3}"#;
        assert_eq!(&bytes[..4], &(body.len() as u32).to_be_bytes());
        assert_eq!(&bytes[4..], body);

        let mut lines = Vec::new();
        let mut c = Connection::new(std::io::empty(), &mut lines);
        c.send(&Message::Hello { version: 1, dt: 0.05, framing: Framing::LengthPrefixed }).unwrap();
        assert_eq!(lines, b"{\"type\":\"HELLO\",\"version\":1,\"dt\":0.05,\"framing\":\"length-prefixed\"}\n");
    }

    #[test]
    fn garbage_and_oversized_frames_are_rejected() {
        let mut c = Connection::new(&b"not json\n"[..], std::io::sink());
        assert!(matches!(c.recv(), Err(CosimError::Protocol(_))));
        let mut c = Connection::new(&[0xffu8, 0xff, 0xff, 0xff][..], std::io::sink());
        c.set_framing(Framing::LengthPrefixed);
        assert!(matches!(c.recv(), Err(CosimError::Protocol(_))));
        let mut c = Connection::new(&b"{\"type\":\"BYE\"}"[..], std::io::sink());
        assert!(matches!(c.recv(), Err(CosimError::Protocol(_))));
    }
}
