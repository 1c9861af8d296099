//! TCP connection setup: rendezvous through rank 0 and the all-to-all mesh.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Hello {
    rank: u32,
    addr: SocketAddr,
}

fn timed_out(what: impl std::fmt::Display) -> Error {
    Error::HandshakeTimeout(what.to_string())
}

fn connect_retry(addr: SocketAddr, deadline: Instant) -> Result<TcpStream> {
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_millis(500)) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(timed_out(format!("connect to {addr}: {e}")))
            }
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn accept_until(listener: &TcpListener, deadline: Instant) -> Result<TcpStream> {
    listener.set_nonblocking(true)?;
    loop {
        match listener.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false)?;
                return Ok(s);
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(timed_out("waiting for peer connections"));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Exchanges mesh listener addresses through rank 0's rendezvous socket.
///
/// Returns every rank's mesh address indexed by rank.
pub(crate) fn rendezvous(
    rank: u32,
    nranks: u32,
    rendezvous: &str,
    mesh_addr: SocketAddr,
    timeout: Duration,
) -> Result<Vec<SocketAddr>> {
    let deadline = Instant::now() + timeout;
    if nranks == 1 {
        return Ok(vec![mesh_addr]);
    }
    if rank == 0 {
        let listener = TcpListener::bind(rendezvous)
            .map_err(|e| Error::Io(format!("bind rendezvous {rendezvous}: {e}")))?;
        let mut addrs = vec![None; nranks as usize];
        addrs[0] = Some(mesh_addr);
        let mut peers = Vec::new();
        while peers.len() + 1 < nranks as usize {
            let stream = accept_until(&listener, deadline)?;
            stream.set_read_timeout(Some(timeout))?;
            let mut line = String::new();
            BufReader::new(stream.try_clone()?).read_line(&mut line)?;
            let hello: Hello = serde_json::from_str(&line)?;
            let slot = addrs.get_mut(hello.rank as usize).ok_or_else(|| {
                Error::ConfigMismatch(format!("rank {} out of range", hello.rank))
            })?;
            if slot.replace(hello.addr).is_some() {
                return Err(Error::ConfigMismatch(format!(
                    "rank {} registered twice",
                    hello.rank
                )));
            }
            peers.push(stream);
        }
        let addrs: Vec<SocketAddr> = addrs.into_iter().map(|a| a.unwrap()).collect();
        let mut table = serde_json::to_string(&addrs)?;
        table.push('\n');
        for mut p in peers {
            p.write_all(table.as_bytes())?;
        }
        Ok(addrs)
    } else {
        let target: SocketAddr = rendezvous
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad rendezvous address {rendezvous}")))?;
        let mut stream = connect_retry(target, deadline)?;
        let mut hello = serde_json::to_string(&Hello {
            rank,
            addr: mesh_addr,
        })?;
        hello.push('\n');
        stream.write_all(hello.as_bytes())?;
        stream.set_read_timeout(Some(
            deadline
                .saturating_duration_since(Instant::now())
                .max(Duration::from_millis(1)),
        ))?;
        let mut line = String::new();
        BufReader::new(stream)
            .read_line(&mut line)
            .map_err(|e| timed_out(format!("rendezvous reply: {e}")))?;
        let addrs: Vec<SocketAddr> = serde_json::from_str(&line)?;
        if addrs.len() != nranks as usize {
            return Err(Error::ConfigMismatch(format!(
                "rendezvous table has {} ranks, expected {nranks}",
                addrs.len()
            )));
        }
        Ok(addrs)
    }
}

/// Opens one TCP connection to every peer `p` with `wanted(p)`.
///
/// Lower ranks are dialed and sent our rank id; higher ranks dial us.
pub(crate) fn build_mesh(
    rank: u32,
    listener: &TcpListener,
    addrs: &[SocketAddr],
    wanted: impl Fn(u32) -> bool,
    timeout: Duration,
) -> Result<HashMap<u32, TcpStream>> {
    let deadline = Instant::now() + timeout;
    let mut links = HashMap::new();
    for peer in (0..rank).filter(|&p| wanted(p)) {
        let mut s = connect_retry(addrs[peer as usize], deadline)?;
        s.write_all(&rank.to_le_bytes())?;
        links.insert(peer, s);
    }
    let expected = (rank + 1..addrs.len() as u32)
        .filter(|&p| wanted(p))
        .count();
    for _ in 0..expected {
        let mut s = accept_until(listener, deadline)?;
        s.set_read_timeout(Some(timeout))?;
        let mut id = [0u8; 4];
        s.read_exact(&mut id)?;
        s.set_read_timeout(None)?;
        let peer = u32::from_le_bytes(id);
        if peer <= rank || !wanted(peer) || links.contains_key(&peer) {
            return Err(Error::ConfigMismatch(format!(
                "unexpected mesh connection from rank {peer}"
            )));
        }
        links.insert(peer, s);
    }
    Ok(links)
}
