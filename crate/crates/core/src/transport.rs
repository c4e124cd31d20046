//! Message delivery between instances.
//!
//! Within one process, messages travel over in-process channels built from
//! a mutex-guarded queue: `send` never blocks, `receive` blocks until a
//! message arrives, the queue closes, or the run is aborted. Between
//! processes the same messages travel as `codec` DATA frames over TCP; the
//! socket layer uses one background writer per connection so that no API
//! call blocks on network progress except `receive`.
//!
//! Ownership makes delivery copy-free and isolated at once: a sent
//! [`Message`] is moved into the channel, so the sender cannot observe or
//! mutate it afterwards.

use std::collections::VecDeque;
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::codec::{encode_frame, Frame, Payload};
use crate::topology::Endpoint;

/// A time-stamped typed message between two endpoints.
///
/// The timestamp is simulation time in seconds; it must be finite and
/// non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub timestamp: f64,
    pub payload: Payload,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SendError {
    #[error("channel closed: receiver is gone")]
    ChannelClosed,
    #[error("peer unreachable: {0}")]
    PeerUnreachable(String),
}

#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
pub enum ReceiveError {
    /// The runtime is shutting down; all blocked receivers unblock.
    #[error("receive aborted: runtime is shutting down")]
    Aborted,
    /// All senders finished and the queue is drained.
    #[error("queue closed: all senders finished")]
    QueueClosed,
}

struct ChannelCore {
    state: Mutex<ChannelState>,
    cond: Condvar,
}

struct ChannelState {
    queue: VecDeque<Message>,
    senders: usize,
    receiver_alive: bool,
    aborted: bool,
}

/// Sending half of an in-process channel. Cloning adds a sender; the queue
/// closes once every sender is dropped.
pub struct MessageSender {
    core: Arc<ChannelCore>,
}

/// Receiving half of an in-process channel; single consumer.
pub struct MessageReceiver {
    core: Arc<ChannelCore>,
}

/// Creates an in-process channel registered with `abort`, so that blocked
/// receivers unblock when the run is aborted.
pub fn channel(abort: &AbortToken) -> (MessageSender, MessageReceiver) {
    let core = Arc::new(ChannelCore {
        state: Mutex::new(ChannelState {
            queue: VecDeque::new(),
            senders: 1,
            receiver_alive: true,
            aborted: abort.is_aborted(),
        }),
        cond: Condvar::new(),
    });
    abort.watch_channel(&core);
    (
        MessageSender { core: core.clone() },
        MessageReceiver { core },
    )
}

impl MessageSender {
    /// Enqueues a message without waiting for the receiver.
    pub fn send(&self, message: Message) -> Result<(), SendError> {
        let mut state = self.core.state.lock().unwrap();
        if !state.receiver_alive {
            return Err(SendError::ChannelClosed);
        }
        state.queue.push_back(message);
        drop(state);
        self.core.cond.notify_all();
        Ok(())
    }
}

impl Clone for MessageSender {
    fn clone(&self) -> Self {
        self.core.state.lock().unwrap().senders += 1;
        MessageSender {
            core: self.core.clone(),
        }
    }
}

impl Drop for MessageSender {
    fn drop(&mut self) {
        let mut state = self.core.state.lock().unwrap();
        state.senders -= 1;
        let last = state.senders == 0;
        drop(state);
        if last {
            self.core.cond.notify_all();
        }
    }
}

impl MessageReceiver {
    /// Blocks until a message is available. Messages come back in send
    /// order (per-conduit FIFO).
    pub fn receive(&self) -> Result<Message, ReceiveError> {
        let mut state = self.core.state.lock().unwrap();
        loop {
            if state.aborted {
                return Err(ReceiveError::Aborted);
            }
            if let Some(message) = state.queue.pop_front() {
                return Ok(message);
            }
            if state.senders == 0 {
                return Err(ReceiveError::QueueClosed);
            }
            state = self.core.cond.wait(state).unwrap();
        }
    }

    /// Returns immediately; `Ok(None)` when no message is queued.
    pub fn try_receive(&self) -> Result<Option<Message>, ReceiveError> {
        let mut state = self.core.state.lock().unwrap();
        if state.aborted {
            return Err(ReceiveError::Aborted);
        }
        if let Some(message) = state.queue.pop_front() {
            return Ok(Some(message));
        }
        if state.senders == 0 {
            return Err(ReceiveError::QueueClosed);
        }
        Ok(None)
    }
}

impl Drop for MessageReceiver {
    fn drop(&mut self) {
        self.core.state.lock().unwrap().receiver_alive = false;
    }
}

struct AbortInner {
    reason: Mutex<Option<String>>,
    cond: Condvar,
    channels: Mutex<Vec<Weak<ChannelCore>>>,
    sockets: Mutex<Vec<TcpStream>>,
}

/// Shared fail-fast switch for one simulation run.
///
/// `abort` is idempotent and best-effort: the first call stores the reason,
/// wakes every blocked receiver with [`ReceiveError::Aborted`], and shuts
/// down every watched socket so blocked network I/O unblocks too.
#[derive(Clone)]
pub struct AbortToken {
    inner: Arc<AbortInner>,
}

impl Default for AbortToken {
    fn default() -> Self {
        Self::new()
    }
}

impl AbortToken {
    pub fn new() -> Self {
        AbortToken {
            inner: Arc::new(AbortInner {
                reason: Mutex::new(None),
                cond: Condvar::new(),
                channels: Mutex::new(Vec::new()),
                sockets: Mutex::new(Vec::new()),
            }),
        }
    }

    /// Triggers the abort. Returns true if this call was the first.
    pub fn abort(&self, reason: &str) -> bool {
        {
            let mut stored = self.inner.reason.lock().unwrap();
            if stored.is_some() {
                return false;
            }
            *stored = Some(reason.to_string());
        }
        self.inner.cond.notify_all();
        let channels = std::mem::take(&mut *self.inner.channels.lock().unwrap());
        for weak in channels {
            if let Some(core) = weak.upgrade() {
                core.state.lock().unwrap().aborted = true;
                core.cond.notify_all();
            }
        }
        let sockets = std::mem::take(&mut *self.inner.sockets.lock().unwrap());
        for socket in sockets {
            let _ = socket.shutdown(Shutdown::Both);
        }
        true
    }

    pub fn is_aborted(&self) -> bool {
        self.inner.reason.lock().unwrap().is_some()
    }

    pub fn reason(&self) -> Option<String> {
        self.inner.reason.lock().unwrap().clone()
    }

    /// Waits until the token is aborted or the timeout elapses.
    pub fn wait_timeout(&self, timeout: Duration) -> Option<String> {
        let stored = self.inner.reason.lock().unwrap();
        let (stored, _) = self
            .inner
            .cond
            .wait_timeout_while(stored, timeout, |reason| reason.is_none())
            .unwrap();
        stored.clone()
    }

    /// Registers a socket to be shut down on abort, unblocking any thread
    /// blocked on it.
    pub fn watch_socket(&self, stream: &TcpStream) {
        if let Ok(clone) = stream.try_clone() {
            if self.is_aborted() {
                let _ = clone.shutdown(Shutdown::Both);
            } else {
                self.inner.sockets.lock().unwrap().push(clone);
            }
        }
    }

    fn watch_channel(&self, core: &Arc<ChannelCore>) {
        self.inner.channels.lock().unwrap().push(Arc::downgrade(core));
    }
}

/// Handle to a background thread that writes frames to a TCP stream.
///
/// `send` enqueues without blocking on the network. A write failure while
/// the run is not already aborting escalates fail-fast through the
/// [`AbortToken`].
#[derive(Clone)]
pub struct FrameWriter {
    tx: mpsc::Sender<WriterCommand>,
    closed: Arc<AtomicBool>,
    quiet: Arc<AtomicBool>,
}

enum WriterCommand {
    Frame(Frame),
    Shutdown,
}

impl FrameWriter {
    pub fn spawn(stream: TcpStream, abort: AbortToken, label: String) -> FrameWriter {
        abort.watch_socket(&stream);
        let (tx, rx) = mpsc::channel::<WriterCommand>();
        let closed = Arc::new(AtomicBool::new(false));
        let quiet = Arc::new(AtomicBool::new(false));
        let thread_closed = closed.clone();
        let thread_quiet = quiet.clone();
        thread::Builder::new()
            .name(format!("frame-writer-{label}"))
            .spawn(move || {
                let mut stream = stream;
                use std::io::Write;
                while let Ok(command) = rx.recv() {
                    match command {
                        WriterCommand::Frame(frame) => {
                            let bytes = match encode_frame(&frame) {
                                Ok(bytes) => bytes,
                                Err(err) => {
                                    abort.abort(&format!("{label}: cannot encode frame: {err}"));
                                    break;
                                }
                            };
                            if let Err(err) = stream.write_all(&bytes) {
                                if !abort.is_aborted() && !thread_quiet.load(Ordering::Acquire) {
                                    abort.abort(&format!("{label}: write failed: {err}"));
                                }
                                break;
                            }
                        }
                        WriterCommand::Shutdown => {
                            let _ = stream.flush();
                            let _ = stream.shutdown(Shutdown::Write);
                            break;
                        }
                    }
                }
                thread_closed.store(true, Ordering::Release);
            })
            .expect("spawn frame writer");
        FrameWriter { tx, closed, quiet }
    }

    pub fn send(&self, frame: Frame) -> Result<(), SendError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(SendError::PeerUnreachable("writer closed".into()));
        }
        self.tx
            .send(WriterCommand::Frame(frame))
            .map_err(|_| SendError::PeerUnreachable("writer thread gone".into()))
    }

    /// During orderly teardown write failures are expected (the peer may
    /// close first) and must not escalate.
    pub fn set_quiet(&self) {
        self.quiet.store(true, Ordering::Release);
    }

    /// Flushes queued frames and half-closes the stream.
    pub fn shutdown(&self) {
        let _ = self.tx.send(WriterCommand::Shutdown);
    }
}
