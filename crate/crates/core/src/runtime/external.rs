//! Client side of external instance attachment.
//!
//! An external process plays one declared instance by connecting to its
//! local manager's data listener and speaking the frame protocol: a
//! `REGISTER` naming the instance, then `DATA` frames in both directions,
//! then `FIN`. The attach address comes from the `COUPLET_MANAGER`
//! environment variable or is passed explicitly.

use std::io::Write;
use std::net::{Shutdown, TcpStream};
use std::time::Duration;

use thiserror::Error;

use crate::codec::{encode_frame, read_frame, Frame, FrameDecoder, Payload};
use crate::topology::Endpoint;

use super::sim_server::connect_with_retry;
use super::MANAGER_ENV_VAR;

#[derive(Debug, Error)]
pub enum ExternalError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("attach rejected: {0}")]
    Rejected(String),
    #[error("aborted by the runtime: {0}")]
    Aborted(String),
    #[error("{MANAGER_ENV_VAR} is not set")]
    NoManagerAddress,
}

/// A message or control event delivered to an external instance.
#[derive(Debug, Clone, PartialEq)]
pub enum ExternalEvent {
    /// A message arrived on one of the instance's in-ports.
    Message {
        port: String,
        payload: Payload,
        timestamp: f64,
    },
    /// The runtime closed the connection; no more messages will arrive.
    Closed,
}

/// A connected external instance session.
pub struct ExternalInstance {
    name: String,
    stream: TcpStream,
    decoder: FrameDecoder,
}

impl ExternalInstance {
    /// Attaches to the local manager at `manager_addr` as instance `name`.
    /// Blocks until the registration handshake completes.
    pub fn connect(manager_addr: &str, name: &str) -> Result<ExternalInstance, ExternalError> {
        let mut stream = connect_with_retry(manager_addr, Duration::from_secs(10))?;
        let hello = encode_frame(&Frame::Register {
            name: name.to_string(),
            host: String::new(),
            port: 0,
        })
        .expect("encode hello");
        stream.write_all(&hello)?;
        let mut decoder = FrameDecoder::new();
        match read_frame(&mut stream, &mut decoder) {
            Ok(Some(Frame::RegisterAck { ok: true })) => Ok(ExternalInstance {
                name: name.to_string(),
                stream,
                decoder,
            }),
            Ok(Some(Frame::Abort { reason })) => Err(ExternalError::Rejected(reason)),
            Ok(other) => Err(ExternalError::Protocol(format!(
                "unexpected handshake reply: {other:?}"
            ))),
            Err(err) => Err(ExternalError::Protocol(err.to_string())),
        }
    }

    /// Attaches using the address in `COUPLET_MANAGER`.
    pub fn connect_from_env(name: &str) -> Result<ExternalInstance, ExternalError> {
        let addr =
            std::env::var(MANAGER_ENV_VAR).map_err(|_| ExternalError::NoManagerAddress)?;
        ExternalInstance::connect(&addr, name)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Sends a payload out of `out_port`. The runtime looks up the conduit
    /// and applies its filter chain; the destination fields are filled in
    /// manager-side.
    pub fn send(&mut self, out_port: &str, payload: Payload, t: f64) -> Result<(), ExternalError> {
        let frame = Frame::Data {
            src: Endpoint::new(self.name.clone(), out_port),
            dst: Endpoint::new("", ""),
            timestamp: t,
            payload,
        };
        let bytes = encode_frame(&frame).map_err(|e| ExternalError::Protocol(e.to_string()))?;
        self.stream.write_all(&bytes)?;
        Ok(())
    }

    /// Blocks until a message addressed to this instance arrives.
    pub fn receive(&mut self) -> Result<ExternalEvent, ExternalError> {
        loop {
            match read_frame(&mut self.stream, &mut self.decoder) {
                Ok(Some(Frame::Data {
                    dst,
                    timestamp,
                    payload,
                    ..
                })) => {
                    return Ok(ExternalEvent::Message {
                        port: dst.port,
                        payload,
                        timestamp,
                    })
                }
                Ok(Some(Frame::Abort { reason })) => return Err(ExternalError::Aborted(reason)),
                Ok(Some(Frame::Fin)) | Ok(None) => return Ok(ExternalEvent::Closed),
                Ok(Some(_)) => continue,
                Err(err) => return Err(ExternalError::Protocol(err.to_string())),
            }
        }
    }

    /// Declares this instance finished: sends FIN, half-closes the
    /// connection, and drains until the runtime closes its side.
    pub fn finish(mut self) -> Result<(), ExternalError> {
        let bytes = encode_frame(&Frame::Fin).expect("encode fin");
        self.stream.write_all(&bytes)?;
        let _ = self.stream.shutdown(Shutdown::Write);
        loop {
            match read_frame(&mut self.stream, &mut self.decoder) {
                Ok(Some(Frame::Abort { reason })) => return Err(ExternalError::Aborted(reason)),
                Ok(Some(_)) => continue,
                Ok(None) | Err(_) => return Ok(()),
            }
        }
    }
}
