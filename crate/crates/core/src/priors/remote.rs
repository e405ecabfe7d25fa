use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use super::wire::{decode_response, read_frame, write_request, Reply, DEFAULT_MAX_FRAME_BYTES};
use super::{PriorError, ScoreProvider, ScoreRequest, ScoreResponse};

pub trait Duplex: Read + Write + Send {}

impl<T: Read + Write + Send> Duplex for T {}

/// Client side of the score wire protocol. Requests are single-flight: the
/// stream is locked for a full request/response exchange.
pub struct RemoteProvider {
    stream: Mutex<Box<dyn Duplex>>,
    max_frame_bytes: usize,
    label: String,
}

impl RemoteProvider {
    pub fn from_stream(stream: impl Duplex + 'static, label: &str) -> Self {
        Self {
            stream: Mutex::new(Box::new(stream)),
            max_frame_bytes: DEFAULT_MAX_FRAME_BYTES,
            label: label.to_string(),
        }
    }

    /// Connects over TCP; `timeout` bounds the connect and every read/write.
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self, PriorError> {
        let addr = endpoint
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| PriorError::Protocol(format!("cannot resolve {endpoint}")))?;
        let stream = TcpStream::connect_timeout(&addr, timeout).map_err(|e| match e.kind() {
            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => PriorError::Timeout,
            _ => PriorError::Io(e),
        })?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(Self::from_stream(stream, endpoint))
    }

    pub fn with_max_frame_bytes(mut self, max: usize) -> Self {
        self.max_frame_bytes = max;
        self
    }
}

impl ScoreProvider for RemoteProvider {
    fn name(&self) -> &str {
        &self.label
    }

    fn predict(&self, request: &ScoreRequest) -> Result<ScoreResponse, PriorError> {
        let mut stream = self.stream.lock().map_err(|_| {
            PriorError::Protocol("connection poisoned by an earlier failure".into())
        })?;
        write_request(&mut *stream, request)?;
        let frame = read_frame(&mut *stream, self.max_frame_bytes)?;
        match decode_response(&frame)? {
            Reply::Score(resp) => {
                request.latent.check_shape(&resp.noise)?;
                Ok(resp)
            }
            Reply::Error { code, message } => Err(PriorError::Remote { code, message }),
        }
    }
}
