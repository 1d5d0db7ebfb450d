use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};

use music_core::controller::{Channel, CommandSink, DeltaKind, FrameOutcome, SinkClosed};
use music_core::wire::Deframer;

use crate::Shared;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Role {
    Data,
    Command,
}

/// Write half of a command connection, fed through a channel so dispatch
/// never waits on the socket.
struct ChannelSink(mpsc::UnboundedSender<Vec<u8>>);

impl CommandSink for ChannelSink {
    fn send_frame(&self, frame: &[u8]) -> Result<(), SinkClosed> {
        self.0.send(frame.to_vec()).map_err(|_| SinkClosed)
    }
}

pub(crate) async fn serve(
    listener: TcpListener,
    role: Role,
    shared: Arc<Shared>,
    ids: Arc<AtomicU64>,
    mut stop: watch::Receiver<bool>,
) {
    let mut conns = tokio::task::JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let id = ids.fetch_add(1, Ordering::Relaxed);
                    conns.spawn(connection(stream, peer, id, role, shared.clone(), stop.clone()));
                }
                Err(e) => tracing::warn!(error = %e, "accept failed"),
            },
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
            _ = stop.changed() => break,
        }
    }
    while conns.join_next().await.is_some() {}
}

async fn connection(
    stream: TcpStream,
    peer: SocketAddr,
    id: u64,
    role: Role,
    shared: Arc<Shared>,
    mut stop: watch::Receiver<bool>,
) {
    let _ = stream.set_nodelay(true);
    let addr = peer.to_string();
    let (mut rd, mut wr) = stream.into_split();
    let (channel, sink, writer) = match role {
        Role::Data => (Channel::Data, None, None),
        Role::Command => {
            let (tx, mut rx) = mpsc::unbounded_channel::<Vec<u8>>();
            let writer = tokio::spawn(async move {
                while let Some(frame) = rx.recv().await {
                    if let Err(e) = wr.write_all(&frame).await {
                        tracing::debug!(error = %e, "command write failed");
                        break;
                    }
                }
                let _ = wr.shutdown().await;
            });
            let sink: Arc<dyn CommandSink> = Arc::new(ChannelSink(tx));
            (Channel::Command, Some(sink), Some(writer))
        }
    };

    let mut deframer = Deframer::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut bound: Option<String> = None;
    loop {
        let n = tokio::select! {
            r = rd.read(&mut buf) => match r {
                Ok(0) => break,
                Ok(n) => n,
                Err(e) => {
                    tracing::debug!(%addr, error = %e, "read failed");
                    break;
                }
            },
            _ = stop.changed() => break,
        };
        let frames = match deframer.push(&buf[..n]) {
            Ok(f) => f,
            Err(e) => {
                tracing::warn!(%addr, error = %e, "closing connection");
                break;
            }
        };
        for frame in frames {
            let now = shared.now_ms();
            match shared
                .controller
                .handle_frame(channel, id, &addr, &frame, sink.as_ref(), now)
            {
                Ok(FrameOutcome::KeepAlive(d)) => {
                    if d.kind == DeltaKind::Revived {
                        shared.log.lock().revivals.push((now, d.imei.clone()));
                    }
                    if role == Role::Command {
                        bound = Some(d.imei);
                    }
                }
                Ok(FrameOutcome::Data(_)) => {}
                Err(e) => {
                    tracing::warn!(%addr, error = %e, "frame rejected");
                    shared.log.lock().rejected_frames += 1;
                }
            }
        }
    }
    if let Some(imei) = bound {
        shared.controller.unbind_command_route(&imei, id);
    }
    drop(sink);
    if let Some(w) = writer {
        // the controller may still hold a clone of the sink; do not wait on it
        w.abort();
    }
}
