//! Validator wire protocol over stream sockets.
//!
//! Every frame is `u32` length then body. Bodies:
//! `PROVE = 1 ‖ request`, `SIG = 2 ‖ proof tag ‖ payload`,
//! `REJECT = 3 ‖ code ‖ detail`.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::attested::AttestationDoc;
use crate::codec::{frame, put_bytes, put_u32, put_u8, DecodeError, Reader};
use crate::frontend::{FrontendKind, ProveRequest, RejectCode};
use crate::quorum::NodeId;
use crate::validator::{NodeReply, RejectInfo, ValidatorEndpoint};

const TAG_PROVE: u8 = 1;
const TAG_SIG: u8 = 2;
const TAG_REJECT: u8 = 3;
const PROOF_QC: u8 = 1;
const PROOF_ATTEST: u8 = 2;

pub const MAX_FRAME: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Prove(ProveRequest),
    Reply(NodeReply),
}

impl Frame {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Frame::Prove(req) => {
                put_u8(&mut out, TAG_PROVE);
                out.extend_from_slice(&req.to_bytes());
            }
            Frame::Reply(NodeReply::Sig { node_id, sig }) => {
                put_u8(&mut out, TAG_SIG);
                put_u8(&mut out, PROOF_QC);
                put_u32(&mut out, *node_id);
                out.extend_from_slice(sig);
            }
            Frame::Reply(NodeReply::Attest(doc)) => {
                put_u8(&mut out, TAG_SIG);
                put_u8(&mut out, PROOF_ATTEST);
                put_u8(&mut out, doc.kind as u8);
                put_u32(&mut out, doc.enclave_id);
                out.extend_from_slice(&doc.measurement);
                out.extend_from_slice(&doc.user_data);
                out.extend_from_slice(&doc.sig);
            }
            Frame::Reply(NodeReply::Reject(info)) => {
                put_u8(&mut out, TAG_REJECT);
                put_u8(&mut out, info.code as u8);
                put_bytes(&mut out, info.detail.as_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        match r.u8()? {
            TAG_PROVE => {
                let rest = r.take(r.remaining())?;
                Ok(Frame::Prove(ProveRequest::from_bytes(rest)?))
            }
            TAG_SIG => {
                let reply = match r.u8()? {
                    PROOF_QC => NodeReply::Sig {
                        node_id: r.u32()?,
                        sig: r.array()?,
                    },
                    PROOF_ATTEST => NodeReply::Attest(AttestationDoc {
                        kind: FrontendKind::from_byte(r.u8()?)?,
                        enclave_id: r.u32()?,
                        measurement: r.array()?,
                        user_data: r.array()?,
                        sig: r.array()?,
                    }),
                    t => return Err(DecodeError::invalid("proof tag", t.to_string())),
                };
                r.finish()?;
                Ok(Frame::Reply(reply))
            }
            TAG_REJECT => {
                let code = RejectCode::from_byte(r.u8()?);
                let detail = String::from_utf8_lossy(r.bytes()?).into_owned();
                r.finish()?;
                Ok(Frame::Reply(NodeReply::Reject(RejectInfo { code, detail })))
            }
            t => Err(DecodeError::invalid("frame tag", t.to_string())),
        }
    }
}

pub fn write_frame(w: &mut impl Write, f: &Frame) -> io::Result<()> {
    w.write_all(&frame(&f.to_bytes()))?;
    w.flush()
}

pub fn read_frame(r: &mut impl Read) -> io::Result<Frame> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "frame too large",
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Frame::from_bytes(&body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Serves one validator on `listener`; one thread per connection, each
/// connection handling any number of sequential requests.
pub fn serve(listener: TcpListener, validator: Arc<dyn ValidatorEndpoint>) -> JoinHandle<()> {
    thread::spawn(move || {
        for conn in listener.incoming() {
            let Ok(mut stream) = conn else { continue };
            let v = validator.clone();
            thread::spawn(move || loop {
                let req = match read_frame(&mut stream) {
                    Ok(Frame::Prove(req)) => req,
                    Ok(Frame::Reply(_)) | Err(_) => return,
                };
                // A silent validator answers nothing; the client times out.
                if let Some(reply) = v.prove(&req) {
                    if write_frame(&mut stream, &Frame::Reply(reply)).is_err() {
                        return;
                    }
                }
            });
        }
    })
}

/// Remote validator reached over TCP. Each call opens a fresh connection
/// and waits at most `timeout` for the reply.
#[derive(Debug, Clone)]
pub struct TcpEndpoint {
    pub node_id: NodeId,
    pub addr: SocketAddr,
    pub timeout: Duration,
}

impl TcpEndpoint {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(500);

    pub fn new(node_id: NodeId, addr: SocketAddr) -> Self {
        Self {
            node_id,
            addr,
            timeout: Self::DEFAULT_TIMEOUT,
        }
    }

    fn call(&self, req: &ProveRequest) -> io::Result<NodeReply> {
        let mut s = TcpStream::connect_timeout(&self.addr, self.timeout)?;
        s.set_read_timeout(Some(self.timeout))?;
        s.set_write_timeout(Some(self.timeout))?;
        s.set_nodelay(true)?;
        write_frame(&mut s, &Frame::Prove(req.clone()))?;
        match read_frame(&mut s)? {
            Frame::Reply(r) => Ok(r),
            Frame::Prove(_) => Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "unexpected PROVE frame",
            )),
        }
    }
}

impl ValidatorEndpoint for TcpEndpoint {
    fn node_id(&self) -> NodeId {
        self.node_id
    }

    fn prove(&self, req: &ProveRequest) -> Option<NodeReply> {
        match self.call(req) {
            Ok(r) => Some(r),
            Err(e) => {
                log::debug!("validator {} at {}: {e}", self.node_id, self.addr);
                None
            }
        }
    }
}
