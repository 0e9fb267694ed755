//! Edge side of CKMP, with byte accounting.

use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use crate::error::{EdgeError, Result};
use crate::manifest::ModelManifest;
use crate::protocol::{read_frame, write_frame, Frame, FrameType};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const IO_TIMEOUT: Duration = Duration::from_secs(120);

/// Bytes moved over one client's connection, frame headers included.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TransferStats {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Payload bytes of WEIGHTS frames only.
    pub weight_bytes: u64,
    pub requests: u64,
}

impl TransferStats {
    pub fn total(&self) -> u64 {
        self.bytes_sent + self.bytes_received
    }

    pub fn add(&mut self, other: &TransferStats) {
        self.bytes_sent += other.bytes_sent;
        self.bytes_received += other.bytes_received;
        self.weight_bytes += other.weight_bytes;
        self.requests += other.requests;
    }
}

pub struct Client {
    addr: String,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    stats: TransferStats,
}

impl Client {
    pub fn connect(addr: &str) -> Result<Self> {
        let fail = |source| EdgeError::Connect {
            addr: addr.to_string(),
            source,
        };
        let mut last = None;
        let mut stream = None;
        for sa in addr.to_socket_addrs().map_err(fail)? {
            match TcpStream::connect_timeout(&sa, CONNECT_TIMEOUT) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = Some(e),
            }
        }
        let stream = match (stream, last) {
            (Some(s), _) => s,
            (None, Some(e)) => return Err(fail(e)),
            (None, None) => return Err(fail(std::io::Error::other("address resolved to nothing"))),
        };
        stream.set_read_timeout(Some(IO_TIMEOUT))?;
        stream.set_write_timeout(Some(IO_TIMEOUT))?;
        stream.set_nodelay(true)?;
        Ok(Client {
            addr: addr.to_string(),
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            stats: TransferStats::default(),
        })
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn stats(&self) -> TransferStats {
        self.stats
    }

    /// Sends one request and returns the reply, turning ERROR frames into errors.
    pub fn request(&mut self, req: &Frame) -> Result<Frame> {
        write_frame(&mut self.writer, req)?;
        self.stats.bytes_sent += req.wire_len();
        self.stats.requests += 1;
        let reply = read_frame(&mut self.reader)?
            .ok_or_else(|| EdgeError::protocol("server closed the connection"))?;
        self.stats.bytes_received += reply.wire_len();
        if reply.kind == FrameType::Weights {
            self.stats.weight_bytes += reply.payload.len() as u64;
        }
        if reply.kind == FrameType::Error {
            return Err(EdgeError::Remote(reply.text()?.to_string()));
        }
        Ok(reply)
    }

    fn expect(&mut self, req: Frame, kind: FrameType) -> Result<Frame> {
        let reply = self.request(&req)?;
        if reply.kind != kind {
            return Err(EdgeError::protocol(format!(
                "expected {kind:?}, got {:?}",
                reply.kind
            )));
        }
        Ok(reply)
    }

    pub fn list(&mut self) -> Result<Vec<ModelManifest>> {
        let reply = self.expect(
            Frame::new(FrameType::ListReq, Vec::new()),
            FrameType::ListResp,
        )?;
        Ok(serde_json::from_slice(&reply.payload)?)
    }

    /// `version` may be `"latest"`.
    pub fn manifest(&mut self, version: &str) -> Result<ModelManifest> {
        let reply = self.expect(
            Frame::new(FrameType::GetManifest, version.as_bytes()),
            FrameType::Manifest,
        )?;
        Ok(serde_json::from_slice(&reply.payload)?)
    }

    /// Raw CKMW bytes, unverified.
    pub fn weights(&mut self, version: &str) -> Result<Vec<u8>> {
        Ok(self
            .expect(
                Frame::new(FrameType::GetWeights, version.as_bytes()),
                FrameType::Weights,
            )?
            .payload)
    }
}
