//! TCP transport for relays and clients. Each side sends its 16-byte node
//! id once, then raw 512-byte cells follow. One reader thread per
//! connection feeds a single node loop.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::json;

use crate::cell::{LinkCell, CELL_LEN};
use crate::client::ClientNode;
use crate::relay::{Action, NodeId, Record, RelayNode};

/// Node logic driven by a transport.
pub trait LinkNode {
    fn node_id(&self) -> NodeId;
    fn link_cell(&mut self, from: NodeId, cell: LinkCell, now_ms: u64) -> Vec<Action>;
    fn wakeup(&mut self, now_ms: u64) -> Vec<Action>;
    fn next_wakeup(&self) -> Option<u64>;
    fn peers_changed(&mut self, peers: &[NodeId]);
}

impl LinkNode for RelayNode {
    fn node_id(&self) -> NodeId {
        self.id
    }
    fn link_cell(&mut self, from: NodeId, cell: LinkCell, now_ms: u64) -> Vec<Action> {
        self.handle_link_cell(from, cell, now_ms)
    }
    fn wakeup(&mut self, now_ms: u64) -> Vec<Action> {
        self.on_wakeup(now_ms)
    }
    fn next_wakeup(&self) -> Option<u64> {
        RelayNode::next_wakeup(self)
    }
    fn peers_changed(&mut self, peers: &[NodeId]) {
        self.set_peers(peers.iter().copied());
    }
}

impl LinkNode for ClientNode {
    fn node_id(&self) -> NodeId {
        self.id
    }
    fn link_cell(&mut self, from: NodeId, cell: LinkCell, now_ms: u64) -> Vec<Action> {
        self.handle_link_cell(from, cell, now_ms)
    }
    fn wakeup(&mut self, now_ms: u64) -> Vec<Action> {
        self.on_wakeup(now_ms)
    }
    fn next_wakeup(&self) -> Option<u64> {
        ClientNode::next_wakeup(self)
    }
    fn peers_changed(&mut self, peers: &[NodeId]) {
        for p in peers {
            self.add_relay(*p);
        }
    }
}

#[allow(clippy::large_enum_variant)]
enum Incoming {
    Connected(NodeId, TcpStream),
    Cell(NodeId, LinkCell),
    Closed(NodeId),
}

fn handshake(stream: &mut TcpStream, me: NodeId) -> io::Result<NodeId> {
    stream.write_all(&me.0)?;
    let mut peer = [0u8; 16];
    stream.read_exact(&mut peer)?;
    Ok(NodeId(peer))
}

fn spawn_reader(mut stream: TcpStream, peer: NodeId, tx: Sender<Incoming>) {
    thread::spawn(move || {
        let mut buf = [0u8; CELL_LEN];
        while stream.read_exact(&mut buf).is_ok() {
            let Ok(cell) = LinkCell::decode(&buf) else { break };
            if tx.send(Incoming::Cell(peer, cell)).is_err() {
                return;
            }
        }
        let _ = tx.send(Incoming::Closed(peer));
    });
}

pub struct Transport {
    me: NodeId,
    start: Instant,
    tx: Sender<Incoming>,
    rx: Receiver<Incoming>,
    writers: BTreeMap<NodeId, TcpStream>,
    peers_dirty: bool,
}

impl Transport {
    pub fn new(me: NodeId) -> Transport {
        let (tx, rx) = channel();
        Transport { me, start: Instant::now(), tx, rx, writers: BTreeMap::new(), peers_dirty: false }
    }

    pub fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    pub fn peers(&self) -> Vec<NodeId> {
        self.writers.keys().copied().collect()
    }

    /// Accepts connections in the background.
    pub fn listen(&self, addr: impl ToSocketAddrs) -> io::Result<SocketAddr> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let (me, tx) = (self.me, self.tx.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let tx = tx.clone();
                thread::spawn(move || {
                    let _ = stream.set_nodelay(true);
                    let Ok(peer) = handshake(&mut stream, me) else { return };
                    let Ok(reader) = stream.try_clone() else { return };
                    if tx.send(Incoming::Connected(peer, stream)).is_ok() {
                        spawn_reader(reader, peer, tx);
                    }
                });
            }
        });
        Ok(local)
    }

    pub fn connect(&mut self, addr: impl ToSocketAddrs) -> io::Result<NodeId> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let peer = handshake(&mut stream, self.me)?;
        spawn_reader(stream.try_clone()?, peer, self.tx.clone());
        self.writers.insert(peer, stream);
        self.peers_dirty = true;
        Ok(peer)
    }

    /// Executes node actions; records go to `sink`.
    pub fn apply(&mut self, actions: Vec<Action>, sink: &mut dyn FnMut(u64, Record)) {
        let now = self.now_ms();
        for a in actions {
            match a {
                Action::Send { to, cell } => {
                    let ok = match self.writers.get_mut(&to) {
                        Some(w) => w.write_all(&cell.encode()).is_ok(),
                        None => false,
                    };
                    if !ok {
                        if self.writers.remove(&to).is_some() {
                            self.peers_dirty = true;
                        }
                        sink(
                            now,
                            Record::new("drop", json!({"reason": "no link", "to": to.hex(), "circ_id": cell.circ_id})),
                        );
                    }
                }
                // timers are polled through next_wakeup
                Action::Wakeup { .. } => {}
                Action::Record(r) => sink(now, r),
            }
        }
    }

    fn sync_peers(&mut self, node: &mut dyn LinkNode) {
        if self.peers_dirty {
            self.peers_dirty = false;
            node.peers_changed(&self.peers());
        }
    }

    /// Delivers cells and fires timers until `deadline`.
    pub fn poll(&mut self, node: &mut dyn LinkNode, deadline: Instant, sink: &mut dyn FnMut(u64, Record)) {
        loop {
            self.sync_peers(node);
            let now = self.now_ms();
            if node.next_wakeup().is_some_and(|t| t <= now) {
                let actions = node.wakeup(now);
                self.apply(actions, sink);
                continue;
            }
            let mut until = deadline;
            if let Some(t) = node.next_wakeup() {
                until = until.min(self.start + Duration::from_millis(t));
            }
            let timeout = until.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(timeout) {
                Ok(Incoming::Connected(peer, stream)) => {
                    self.writers.insert(peer, stream);
                    self.peers_dirty = true;
                }
                Ok(Incoming::Cell(from, cell)) => {
                    let actions = node.link_cell(from, cell, self.now_ms());
                    self.apply(actions, sink);
                }
                Ok(Incoming::Closed(peer)) => {
                    if self.writers.remove(&peer).is_some() {
                        self.peers_dirty = true;
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return,
            }
            if Instant::now() >= deadline {
                return;
            }
        }
    }

    /// Polls until `done` holds or `timeout` passes. Returns whether `done` held.
    pub fn poll_until<N: LinkNode>(
        &mut self,
        node: &mut N,
        timeout: Duration,
        sink: &mut dyn FnMut(u64, Record),
        mut done: impl FnMut(&N) -> bool,
    ) -> bool {
        let end = Instant::now() + timeout;
        while !done(node) {
            if Instant::now() >= end {
                return false;
            }
            self.poll(node, (Instant::now() + Duration::from_millis(5)).min(end), sink);
        }
        true
    }

    /// Serves until `stop` is set.
    pub fn serve(&mut self, node: &mut dyn LinkNode, stop: &AtomicBool, sink: &mut dyn FnMut(u64, Record)) {
        while !stop.load(Ordering::Relaxed) {
            self.poll(node, Instant::now() + Duration::from_millis(20), sink);
        }
    }
}

/// JSON line for a record, as printed by `relay run` and `client run`.
pub fn record_line(t_ms: u64, node: NodeId, r: &Record) -> String {
    crate::canonical::to_string(&json!({"t_ms": t_ms, "node": node.hex(), "kind": r.kind, "detail": r.detail}))
        .expect("record serializes")
}

/// Runs a relay on its own thread; for tests and embedding.
pub struct RelayHandle {
    pub addr: SocketAddr,
    pub id: NodeId,
    stop: Arc<AtomicBool>,
    thread: Option<thread::JoinHandle<Vec<String>>>,
}

impl RelayHandle {
    pub fn spawn(mut node: RelayNode, listen: impl ToSocketAddrs, peers: &[SocketAddr]) -> io::Result<RelayHandle> {
        let id = node.id;
        let mut t = Transport::new(id);
        let addr = t.listen(listen)?;
        for p in peers {
            t.connect(p)?;
        }
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = thread::spawn(move || {
            let mut lines = Vec::new();
            t.serve(&mut node, &flag, &mut |now, r| lines.push(record_line(now, id, &r)));
            lines
        });
        Ok(RelayHandle { addr, id, stop, thread: Some(thread) })
    }

    /// Stops the relay and returns its record lines.
    pub fn stop(mut self) -> Vec<String> {
        self.stop.store(true, Ordering::Relaxed);
        self.thread.take().map(|t| t.join().unwrap_or_default()).unwrap_or_default()
    }
}

impl Drop for RelayHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manager::{KeyPair, TrustStore};
    use crate::relay::Policy;
    use crate::toolkit::sample;
    use rand_chacha::ChaCha20Rng;
    use rand_core::SeedableRng;

    fn relay(name: &str, trust: &TrustStore) -> RelayNode {
        RelayNode::new(NodeId::from_name(name), trust.clone(), Policy::default(), ChaCha20Rng::seed_from_u64(1))
    }

    #[test]
    fn three_hops_over_loopback() {
        let key = KeyPair::from_seed([9; 32]);
        let trust = TrustStore::new().with(key.public());
        let r3 = RelayHandle::spawn(relay("s3", &trust), "127.0.0.1:0", &[]).unwrap();
        let r2 = RelayHandle::spawn(relay("s2", &trust), "127.0.0.1:0", &[r3.addr]).unwrap();
        let r1 = RelayHandle::spawn(relay("s1", &trust), "127.0.0.1:0", &[r2.addr]).unwrap();

        let mut client =
            ClientNode::new(NodeId::from_name("sc"), trust, Policy::default(), ChaCha20Rng::seed_from_u64(2));
        let mut t = Transport::new(client.id);
        let entry = t.connect(r1.addr).unwrap();
        assert_eq!(entry, r1.id);
        for id in [r2.id, r3.id] {
            client.add_relay(id);
        }
        let mut sink = |_: u64, _: Record| {};
        t.poll(&mut client, Instant::now(), &mut sink);
        // the relays learn their outbound peers asynchronously
        thread::sleep(Duration::from_millis(50));
        let (serial, actions) = client.build_circuit(&[r1.id, r2.id, r3.id], t.now_ms()).unwrap();
        t.apply(actions, &mut sink);
        let open =
            t.poll_until(&mut client, Duration::from_secs(5), &mut sink, |c| c.circuit(serial).unwrap().is_open());
        assert!(open, "{:?}", client.circuit(serial).unwrap().state);

        let actions = client.send_data(serial, 1, b"over tcp").unwrap();
        t.apply(actions, &mut sink);
        let got = t.poll_until(&mut client, Duration::from_secs(5), &mut sink, |c| {
            !c.circuit(serial).unwrap().received.is_empty()
        });
        assert!(got);
        assert_eq!(client.take_received(serial), vec![(1, b"over tcp".to_vec())]);

        let actions = client.inject_plugin(serial, 2, &sample("sink").unwrap().package(&key, false)).unwrap();
        t.apply(actions, &mut sink);
        let got = t.poll_until(&mut client, Duration::from_secs(5), &mut sink, |c| {
            !c.circuit(serial).unwrap().replies.is_empty()
        });
        assert!(got);
        assert!(matches!(client.take_replies(serial)[0], crate::client::PluginReply::Ack { hop: 2, .. }));

        let lines = r2.stop();
        assert!(lines.iter().any(|l| l.contains("\"kind\":\"plugin_attach\"")), "{lines:?}");
        r1.stop();
        r3.stop();
    }
}
