use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::sim::Mailboxes;
use super::{wire, Ledger, Message, NetConfig, NodeId, Result, Source, Tag, Transport, TransportError, HEADER_BYTES};

fn io_err(e: std::io::Error) -> TransportError {
    TransportError::Io(e.to_string())
}

/// Loopback TCP network. Each node listens on its own ephemeral port; a
/// connection per ordered node pair is opened on first use.
pub struct TcpTransport {
    boxes: Arc<Mailboxes>,
    ledger: Ledger,
    addrs: BTreeMap<NodeId, SocketAddr>,
    links: Mutex<BTreeMap<(NodeId, NodeId), Arc<Mutex<TcpStream>>>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

fn read_loop(mut stream: TcpStream, boxes: Arc<Mailboxes>) {
    let mut head = [0u8; HEADER_BYTES];
    loop {
        if stream.read_exact(&mut head).is_err() {
            return;
        }
        let Ok(h) = wire::decode_header(&head) else { return };
        let mut body = vec![0u8; wire::body_len(&h) as usize];
        if stream.read_exact(&mut body).is_err() {
            return;
        }
        match wire::assemble(h, body) {
            Ok(msg) => {
                if boxes.deliver(msg).is_err() {
                    return;
                }
            }
            Err(_) => return,
        }
    }
}

fn accept_loop(listener: TcpListener, boxes: Arc<Mailboxes>) {
    let mut readers = Vec::new();
    while !boxes.is_down() {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                let b = Arc::clone(&boxes);
                readers.push(thread::spawn(move || read_loop(stream, b)));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(_) => break,
        }
    }
    for r in readers {
        let _ = r.join();
    }
}

impl TcpTransport {
    pub fn new(nodes: &[NodeId], net: NetConfig) -> Result<Self> {
        let boxes = Arc::new(Mailboxes::new(nodes));
        let mut addrs = BTreeMap::new();
        let mut threads = Vec::new();
        for &n in nodes {
            let listener = TcpListener::bind("127.0.0.1:0").map_err(io_err)?;
            listener.set_nonblocking(true).map_err(io_err)?;
            addrs.insert(n, listener.local_addr().map_err(io_err)?);
            let b = Arc::clone(&boxes);
            threads.push(thread::spawn(move || accept_loop(listener, b)));
        }
        Ok(Self {
            boxes,
            ledger: Ledger::new(net),
            addrs,
            links: Mutex::new(BTreeMap::new()),
            threads: Mutex::new(threads),
        })
    }

    fn link(&self, src: NodeId, dst: NodeId) -> Result<Arc<Mutex<TcpStream>>> {
        let mut links = self.links.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(s) = links.get(&(src, dst)) {
            return Ok(Arc::clone(s));
        }
        let addr = self.addrs.get(&dst).ok_or(TransportError::UnknownNode(dst))?;
        let stream = TcpStream::connect(addr).map_err(io_err)?;
        stream.set_nodelay(true).map_err(io_err)?;
        let s = Arc::new(Mutex::new(stream));
        links.insert((src, dst), Arc::clone(&s));
        Ok(s)
    }
}

impl Transport for TcpTransport {
    fn send(&self, msg: Message) -> Result<()> {
        if self.boxes.is_down() {
            return Err(TransportError::ClusterShutDown);
        }
        self.boxes.check(msg.src)?;
        self.boxes.check(msg.dst)?;
        msg.validate()?;
        let bytes = wire::encode(&msg)?;
        let link = self.link(msg.src, msg.dst)?;
        self.ledger.record_send(&msg);
        let mut s = link.lock().unwrap_or_else(|e| e.into_inner());
        s.write_all(&bytes).map_err(io_err)
    }

    fn recv(&self, dst: NodeId, tag: Tag, from: Source) -> Result<Message> {
        let msg = self.boxes.take(dst, tag, from)?;
        self.ledger.record_recv(&msg);
        Ok(msg)
    }

    fn shutdown(&self) {
        self.boxes.shutdown();
        for s in self.links.lock().unwrap_or_else(|e| e.into_inner()).values() {
            let _ = s.lock().unwrap_or_else(|e| e.into_inner()).shutdown(Shutdown::Both);
        }
        for t in self.threads.lock().unwrap_or_else(|e| e.into_inner()).drain(..) {
            let _ = t.join();
        }
    }

    fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    fn nodes(&self) -> Vec<NodeId> {
        self.boxes.nodes()
    }

    fn net(&self) -> NetConfig {
        self.ledger.net()
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        self.shutdown();
    }
}
