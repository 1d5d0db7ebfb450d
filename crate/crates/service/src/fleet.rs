//! Simulated edges speaking the wire protocol over real TCP connections,
//! paced by a free-running virtual clock.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;

use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use music_core::controller::Channel;
use music_core::edge::{EdgeNode, VirtualClock};
use music_core::scenario::{NodeSpec, Scenario};
use music_core::wire::Deframer;

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("cannot reach controller at {addr}: {source}")]
    Connect {
        addr: SocketAddr,
        #[source]
        source: io::Error,
    },
    #[error("node task failed: {0}")]
    Task(String),
}

/// Final state of every edge, in scenario order.
pub struct FleetReport {
    pub edges: Vec<EdgeNode>,
    /// Bytes written to the sockets, per node.
    pub link_bytes: BTreeMap<String, u64>,
}

struct Link {
    data: OwnedWriteHalf,
    cmd: OwnedWriteHalf,
    commands: mpsc::UnboundedReceiver<Vec<u8>>,
    reader: JoinHandle<()>,
    // read half of the data connection, kept so the socket stays open
    _data_rd: tokio::net::tcp::OwnedReadHalf,
}

impl Drop for Link {
    fn drop(&mut self) {
        self.reader.abort();
    }
}

async fn open_link(data_addr: SocketAddr, cmd_addr: SocketAddr) -> io::Result<Link> {
    let data = TcpStream::connect(data_addr).await?;
    let cmd = TcpStream::connect(cmd_addr).await?;
    let _ = data.set_nodelay(true);
    let _ = cmd.set_nodelay(true);
    let (data_rd, data_wr) = data.into_split();
    let (mut cmd_rd, cmd_wr) = cmd.into_split();
    let (tx, rx) = mpsc::unbounded_channel();
    let reader = tokio::spawn(async move {
        let mut d = Deframer::new();
        let mut buf = vec![0u8; 16 * 1024];
        loop {
            let n = match cmd_rd.read(&mut buf).await {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            let Ok(frames) = d.push(&buf[..n]) else {
                break;
            };
            for f in frames {
                if tx.send(f).is_err() {
                    return;
                }
            }
        }
    });
    Ok(Link {
        data: data_wr,
        cmd: cmd_wr,
        commands: rx,
        reader,
        _data_rd: data_rd,
    })
}

struct LiveNode {
    spec: NodeSpec,
    edge: EdgeNode,
    link: Option<Link>,
    link_bytes: u64,
}

impl LiveNode {
    fn in_outage(&self, offset_ms: i64) -> bool {
        self.spec.outages.iter().any(|&(a, b)| offset_ms >= a && offset_ms < b)
    }

    fn drop_link(&mut self) {
        self.link = None;
        self.edge.on_disconnected();
    }

    /// Writes everything the edge has queued; a failed write drops the link.
    async fn flush(&mut self) {
        let Some(link) = self.link.as_mut() else {
            return;
        };
        let mut frames = self.edge.take_frames().into_iter();
        while let Some(f) = frames.next() {
            let w = match f.channel {
                Channel::Data => &mut link.data,
                Channel::Command => &mut link.cmd,
            };
            if let Err(e) = w.write_all(&f.bytes).await {
                tracing::debug!(imei = %self.edge.imei(), error = %e, "write failed");
                let mut rest = vec![f];
                rest.extend(frames);
                self.edge.requeue(rest);
                self.drop_link();
                return;
            }
            self.link_bytes += f.bytes.len() as u64;
        }
    }

    async fn on_command(&mut self, frame: Option<Vec<u8>>, now: i64) {
        match frame {
            Some(frame) => {
                if let Err(e) = self.edge.receive(&frame, now) {
                    tracing::warn!(imei = %self.edge.imei(), error = %e, "bad command frame");
                }
                self.flush().await;
            }
            None => self.drop_link(),
        }
    }
}

async fn drive(
    mut node: LiveNode,
    start_ms: i64,
    end_ms: i64,
    step_ms: i64,
    clock: Arc<VirtualClock>,
    data_addr: SocketAddr,
    cmd_addr: SocketAddr,
) -> LiveNode {
    let mut prev_offset: Option<i64> = None;
    loop {
        let now = clock.now_ms().min(end_ms);
        let offset = now - start_ms;
        let churn = node
            .spec
            .churn_at_ms
            .iter()
            .any(|&c| c <= offset && prev_offset.is_none_or(|p| c > p));
        prev_offset = Some(offset);
        if churn && node.link.is_some() {
            node.link = None;
            node.edge.churn();
        }
        if node.link.is_some() && node.in_outage(offset) {
            node.drop_link();
        }
        node.edge.step(now);
        if node.link.is_none() && node.edge.wants_connect(now) {
            if node.in_outage(offset) {
                node.edge.on_connect_failed(now);
            } else {
                match open_link(data_addr, cmd_addr).await {
                    Ok(link) => {
                        node.link = Some(link);
                        node.edge.on_connected(now);
                    }
                    Err(e) => {
                        let wait = node.edge.on_connect_failed(now);
                        tracing::debug!(imei = %node.edge.imei(), error = %e, wait, "connect failed");
                    }
                }
            }
        }
        node.flush().await;
        if now >= end_ms {
            break;
        }
        let nap = tokio::time::sleep(clock.wall_duration(step_ms));
        tokio::pin!(nap);
        loop {
            let cmd = match node.link.as_mut() {
                Some(link) => tokio::select! {
                    _ = &mut nap => break,
                    c = link.commands.recv() => c,
                },
                None => {
                    (&mut nap).await;
                    break;
                }
            };
            let now = clock.now_ms().min(end_ms);
            node.on_command(cmd, now).await;
        }
    }
    node.link = None;
    node
}

/// Runs every node of `scenario` against a controller listening on the two
/// addresses until the clock reaches the scenario end.
pub async fn run_fleet(
    scenario: &Scenario,
    data_addr: SocketAddr,
    cmd_addr: SocketAddr,
    clock: Arc<VirtualClock>,
) -> Result<FleetReport, FleetError> {
    for addr in [data_addr, cmd_addr] {
        TcpStream::connect(addr)
            .await
            .map_err(|source| FleetError::Connect { addr, source })?;
    }
    let tasks: Vec<_> = scenario
        .nodes
        .iter()
        .map(|spec| {
            let node = LiveNode {
                edge: EdgeNode::new(spec.edge.clone(), scenario.env.clone(), scenario.seed),
                spec: spec.clone(),
                link: None,
                link_bytes: 0,
            };
            tokio::spawn(drive(
                node,
                scenario.start_ms,
                scenario.end_ms(),
                scenario.step_ms,
                clock.clone(),
                data_addr,
                cmd_addr,
            ))
        })
        .collect();
    let mut edges = Vec::with_capacity(tasks.len());
    let mut link_bytes = BTreeMap::new();
    for t in tasks {
        let node = t.await.map_err(|e| FleetError::Task(e.to_string()))?;
        link_bytes.insert(node.edge.imei().to_string(), node.link_bytes);
        edges.push(node.edge);
    }
    Ok(FleetReport { edges, link_bytes })
}
