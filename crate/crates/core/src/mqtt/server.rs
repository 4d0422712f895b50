//! Threaded TCP front end for [`Broker`]. One reader and one writer thread
//! per connection; all routing happens under a single broker lock so each
//! publish sees a consistent subscription snapshot.

use std::collections::HashMap;
use std::io::{self, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tracing::{debug, info};

use super::broker::{Broker, BrokerOutput, BrokerStats, ConnId};
use super::codec::encode_packet;
use super::stream::{PacketStream, StreamError};

enum WriterMsg {
    Data(Vec<u8>),
    Close,
}

struct Shared {
    broker: Mutex<Broker>,
    writers: Mutex<HashMap<ConnId, Sender<WriterMsg>>>,
    start: Instant,
    stop: AtomicBool,
    next_conn: AtomicU64,
}

impl Shared {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn dispatch(&self, outputs: Vec<BrokerOutput>) {
        if outputs.is_empty() {
            return;
        }
        let mut writers = self.writers.lock().expect("writers lock");
        for o in outputs {
            match o {
                BrokerOutput::Send(conn, packet) => {
                    if let Some(w) = writers.get(&conn) {
                        let bytes = encode_packet(&packet).expect("broker emits valid packets");
                        let _ = w.send(WriterMsg::Data(bytes));
                    }
                }
                BrokerOutput::Close(conn) => {
                    if let Some(w) = writers.remove(&conn) {
                        let _ = w.send(WriterMsg::Close);
                    }
                }
            }
        }
    }
}

pub struct BrokerServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl BrokerServer {
    pub fn bind(addr: &str) -> io::Result<Self> {
        Self::spawn(TcpListener::bind(addr)?)
    }

    pub fn spawn(listener: TcpListener) -> io::Result<Self> {
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let shared = Arc::new(Shared {
            broker: Mutex::new(Broker::new()),
            writers: Mutex::new(HashMap::new()),
            start: Instant::now(),
            stop: AtomicBool::new(false),
            next_conn: AtomicU64::new(1),
        });
        info!(%addr, "broker listening");
        let accept = {
            let shared = shared.clone();
            thread::spawn(move || accept_loop(listener, shared))
        };
        let ticker = {
            let shared = shared.clone();
            thread::spawn(move || {
                while !shared.stop.load(Ordering::Relaxed) {
                    thread::sleep(Duration::from_millis(250));
                    let out = shared.broker.lock().expect("broker lock").tick(shared.now_ms());
                    shared.dispatch(out);
                }
            })
        };
        Ok(BrokerServer {
            addr,
            shared,
            threads: vec![accept, ticker],
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> BrokerStats {
        self.shared.broker.lock().expect("broker lock").stats()
    }

    /// Run `f` against the broker state under its lock.
    pub fn with_broker<T>(&self, f: impl FnOnce(&Broker) -> T) -> T {
        f(&self.shared.broker.lock().expect("broker lock"))
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        let writers: Vec<_> = self.shared.writers.lock().expect("writers lock").drain().collect();
        for (_, w) in writers {
            let _ = w.send(WriterMsg::Close);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Block until the process is killed.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((sock, peer)) => {
                let conn = shared.next_conn.fetch_add(1, Ordering::Relaxed);
                debug!(conn, %peer, "accepted");
                if let Err(e) = start_connection(conn, sock, &shared) {
                    debug!(conn, error = %e, "connection setup failed");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => {
                debug!(error = %e, "accept failed");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn start_connection(conn: ConnId, sock: TcpStream, shared: &Arc<Shared>) -> io::Result<()> {
    sock.set_nonblocking(false)?;
    sock.set_nodelay(true)?;
    sock.set_read_timeout(Some(Duration::from_millis(200)))?;
    let mut write_half = sock.try_clone()?;
    let (tx, rx) = mpsc::channel::<WriterMsg>();
    shared.writers.lock().expect("writers lock").insert(conn, tx);
    shared.broker.lock().expect("broker lock").open(conn, shared.now_ms());

    thread::spawn(move || {
        while let Ok(msg) = rx.recv() {
            match msg {
                WriterMsg::Data(bytes) => {
                    if write_half.write_all(&bytes).is_err() {
                        break;
                    }
                }
                WriterMsg::Close => break,
            }
        }
        let _ = write_half.shutdown(Shutdown::Both);
    });

    let shared = shared.clone();
    thread::spawn(move || {
        let mut stream = PacketStream::new(sock);
        loop {
            if shared.stop.load(Ordering::Relaxed) {
                break;
            }
            match stream.try_recv() {
                Ok(Some(packet)) => {
                    let mut broker = shared.broker.lock().expect("broker lock");
                    let out = broker.handle(conn, packet, shared.now_ms());
                    let closing = out.contains(&BrokerOutput::Close(conn));
                    shared.dispatch(out);
                    drop(broker);
                    if closing {
                        return;
                    }
                }
                Ok(None) => {}
                Err(StreamError::Closed) | Err(StreamError::Io(_)) | Err(StreamError::Decode(_)) => break,
            }
        }
        let mut broker = shared.broker.lock().expect("broker lock");
        let out = broker.close(conn);
        shared.dispatch(out);
        drop(broker);
        shared.dispatch(vec![BrokerOutput::Close(conn)]);
    });
    Ok(())
}
