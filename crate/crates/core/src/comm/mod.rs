//! In-process SPMD runtime and the parallel data movement primitives.
//!
//! A worker group is `k` threads that run the same program, parameterized
//! by rank, and talk only through per-pair FIFO channels. Sends never block;
//! receives block until the matching message arrives, a peer exits, another
//! worker fails, or the watchdog fires.

mod ops;
mod primitives;

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

pub use ops::{
    AllReduceOp, BroadcastOp, GatherOp, RepartitionOp, ScatterOp, SendRecvOp, Spmd, SpmdOp, SumReduceOp,
};
pub use primitives::{
    all_reduce, broadcast, broadcast_along, gather, gather_adjoint, gather_partition, reduce_along, repartition,
    repartition_adjoint, scatter, scatter_adjoint, scatter_partition, send_recv, send_recv_adjoint, sum_reduce,
};

use crate::{Error, Real, Result, Tensor};

/// The collective or phase a message belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    SendRecv,
    Scatter,
    Gather,
    Broadcast,
    SumReduce,
    Repartition,
    Halo,
    Barrier,
    User,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tag {
    pub kind: OpKind,
    pub phase: u32,
}

impl Tag {
    pub const fn new(kind: OpKind, phase: u32) -> Self {
        Self { kind, phase }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}#{}", self.kind, self.phase)
    }
}

/// A point-to-point message; the payload is owned, never shared.
#[derive(Debug)]
pub struct Message<T> {
    pub tag: Tag,
    pub src: usize,
    pub dst: usize,
    pub payload: Tensor<T>,
}

/// Matched, blocking point-to-point transport. The operator code only sees
/// this boundary, so a different backend can stand in for the channels.
pub trait Transport<T>: Send {
    fn send(&self, msg: Message<T>) -> Result<()>;
    /// Next message from `src`, which must carry `tag`.
    fn recv(&self, src: usize, tag: Tag) -> Result<Message<T>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupConfig {
    /// Longest a single receive may wait before the group is declared stuck.
    pub watchdog: Duration,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self { watchdog: Duration::from_secs(30) }
    }
}

struct Shared {
    abort: AtomicBool,
    status: Vec<Mutex<String>>,
}

impl Shared {
    fn new(k: usize) -> Self {
        Self { abort: AtomicBool::new(false), status: (0..k).map(|_| Mutex::new("running".into())).collect() }
    }

    fn set_status(&self, rank: usize, s: String) {
        if let Ok(mut g) = self.status[rank].lock() {
            *g = s;
        }
    }

    fn describe(&self) -> String {
        self.status
            .iter()
            .enumerate()
            .map(|(r, s)| format!("rank {r}: {}", s.lock().map(|g| g.clone()).unwrap_or_default()))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

const POLL: Duration = Duration::from_millis(5);

struct ChannelTransport<T> {
    rank: usize,
    senders: Vec<Sender<Message<T>>>,
    receivers: Vec<Receiver<Message<T>>>,
    shared: Arc<Shared>,
    watchdog: Duration,
}

impl<T: Send> Transport<T> for ChannelTransport<T> {
    fn send(&self, msg: Message<T>) -> Result<()> {
        let (dst, tag) = (msg.dst, msg.tag);
        // A send only fails once the receiving worker has exited.
        self.senders[dst].send(msg).map_err(|_| Error::Disconnected { rank: self.rank, peer: dst, tag })
    }

    fn recv(&self, src: usize, tag: Tag) -> Result<Message<T>> {
        self.shared.set_status(self.rank, format!("waiting for {tag} from rank {src}"));
        let start = Instant::now();
        let rx = &self.receivers[src];
        loop {
            if self.shared.abort.load(Ordering::SeqCst) {
                return Err(Error::Aborted);
            }
            let waited = start.elapsed();
            if waited >= self.watchdog {
                return Err(Error::Watchdog {
                    rank: self.rank,
                    peer: src,
                    tag,
                    waited,
                    pending: self.shared.describe(),
                });
            }
            match rx.recv_timeout(POLL.min(self.watchdog - waited)) {
                Ok(msg) => {
                    if msg.tag != tag {
                        return Err(Error::TagMismatch { rank: self.rank, peer: src, expected: tag, got: msg.tag });
                    }
                    self.shared.set_status(self.rank, "running".into());
                    return Ok(msg);
                }
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Disconnected { rank: self.rank, peer: src, tag })
                }
            }
        }
    }
}

/// One worker's handle on its group.
pub struct Comm<T> {
    rank: usize,
    size: usize,
    transport: Box<dyn Transport<T>>,
}

impl<T: Real> Comm<T> {
    pub fn from_transport(rank: usize, size: usize, transport: Box<dyn Transport<T>>) -> Self {
        Self { rank, size, transport }
    }

    /// A single-worker group on the calling thread.
    pub fn solo() -> Self {
        let mut group = channel_group(1, GroupConfig::default(), Arc::new(Shared::new(1)));
        group.pop().expect("one worker")
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub(crate) fn check_rank(&self, rank: usize) -> Result<()> {
        if rank < self.size {
            Ok(())
        } else {
            Err(Error::RankOutOfRange { rank, size: self.size })
        }
    }

    pub fn send(&self, dst: usize, tag: Tag, payload: Tensor<T>) -> Result<()> {
        self.check_rank(dst)?;
        self.transport.send(Message { tag, src: self.rank, dst, payload })
    }

    pub fn recv(&self, src: usize, tag: Tag) -> Result<Tensor<T>> {
        self.check_rank(src)?;
        Ok(self.transport.recv(src, tag)?.payload)
    }

    /// Returns once every worker in the group has entered the barrier.
    pub fn barrier(&self) -> Result<()> {
        let tag = Tag::new(OpKind::Barrier, 0);
        let token = || Tensor::zeros(&[1]);
        if self.rank == 0 {
            for r in 1..self.size {
                self.recv(r, tag)?;
            }
            for r in 1..self.size {
                self.send(r, tag, token())?;
            }
        } else {
            self.send(0, tag, token())?;
            self.recv(0, tag)?;
        }
        Ok(())
    }
}

fn channel_group<T: Real>(k: usize, config: GroupConfig, shared: Arc<Shared>) -> Vec<Comm<T>> {
    let mut senders: Vec<Vec<Sender<Message<T>>>> = (0..k).map(|_| Vec::with_capacity(k)).collect();
    let mut receivers: Vec<Vec<Option<Receiver<Message<T>>>>> = (0..k).map(|_| (0..k).map(|_| None).collect()).collect();
    for (src, row) in senders.iter_mut().enumerate() {
        for inbox in receivers.iter_mut() {
            let (tx, rx) = mpsc::channel();
            row.push(tx);
            inbox[src] = Some(rx);
        }
    }
    senders
        .into_iter()
        .zip(receivers)
        .enumerate()
        .map(|(rank, (senders, receivers))| {
            let transport = ChannelTransport {
                rank,
                senders,
                receivers: receivers.into_iter().map(|r| r.expect("every pair has a channel")).collect(),
                shared: shared.clone(),
                watchdog: config.watchdog,
            };
            Comm::from_transport(rank, k, Box::new(transport))
        })
        .collect()
}

/// Runs `program` on `k` workers with the default configuration.
pub fn spawn<T, R, F>(k: usize, program: F) -> Result<Vec<R>>
where
    T: Real,
    R: Send,
    F: Fn(&Comm<T>) -> Result<R> + Sync,
{
    spawn_with(k, GroupConfig::default(), program)
}

/// Runs `program` on `k` concurrent workers and returns the per-rank results.
///
/// The first worker to fail aborts the rest of the group; the returned error
/// names that worker. Failures caused only by the abort are not reported.
pub fn spawn_with<T, R, F>(k: usize, config: GroupConfig, program: F) -> Result<Vec<R>>
where
    T: Real,
    R: Send,
    F: Fn(&Comm<T>) -> Result<R> + Sync,
{
    if k == 0 {
        return Err(Error::contract("a worker group needs at least one worker"));
    }
    let shared = Arc::new(Shared::new(k));
    let comms = channel_group::<T>(k, config, shared.clone());
    let program = &program;
    let outcomes: Vec<std::result::Result<Result<R>, String>> = thread::scope(|s| {
        let handles: Vec<_> = comms
            .into_iter()
            .map(|comm| {
                let shared = shared.clone();
                s.spawn(move || {
                    let rank = comm.rank();
                    let out = catch_unwind(AssertUnwindSafe(|| program(&comm)));
                    let failed = !matches!(out, Ok(Ok(_)));
                    if failed {
                        shared.abort.store(true, Ordering::SeqCst);
                    }
                    shared.set_status(rank, if failed { "failed".into() } else { "finished".into() });
                    drop(comm);
                    out.map_err(|p| {
                        p.downcast_ref::<String>()
                            .cloned()
                            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "unknown panic".into())
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err("join failed".into()))).collect()
    });

    let mut results = Vec::with_capacity(k);
    let mut first_failure: Option<Error> = None;
    let mut secondary: Option<Error> = None;
    for (rank, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(Ok(r)) => results.push(r),
            Ok(Err(e)) => {
                let wrapped = Error::Worker { rank, source: Box::new(e) };
                let is_secondary = matches!(wrapped.root_cause(), Error::Aborted | Error::Disconnected { .. });
                if is_secondary {
                    secondary.get_or_insert(wrapped);
                } else {
                    first_failure.get_or_insert(wrapped);
                }
            }
            Err(message) => {
                first_failure.get_or_insert(Error::Panic { rank, message });
            }
        }
    }
    match first_failure.or(secondary) {
        Some(e) => Err(e),
        None => Ok(results),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_worker_returns_rank() {
        let out = spawn::<f64, _, _>(1, |c| Ok(c.rank())).unwrap();
        assert_eq!(out, vec![0]);
    }

    #[test]
    fn ring_send() {
        let tag = Tag::new(OpKind::User, 0);
        let out = spawn::<f64, _, _>(4, |c| {
            let next = (c.rank() + 1) % c.size();
            let prev = (c.rank() + c.size() - 1) % c.size();
            c.send(next, tag, Tensor::vector(vec![c.rank() as f64]))?;
            Ok(c.recv(prev, tag)?.data()[0] as usize)
        })
        .unwrap();
        assert_eq!(out, vec![3, 0, 1, 2]);
    }

    #[test]
    fn fifo_per_pair() {
        let tag = Tag::new(OpKind::User, 0);
        let out = spawn::<f64, _, _>(2, |c| {
            if c.rank() == 0 {
                for i in 0..50 {
                    c.send(1, tag, Tensor::vector(vec![i as f64]))?;
                }
                Ok(vec![])
            } else {
                (0..50).map(|_| Ok(c.recv(0, tag)?.data()[0])).collect()
            }
        })
        .unwrap();
        assert_eq!(out[1], (0..50).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn mismatched_collective_trips_watchdog() {
        let config = GroupConfig { watchdog: Duration::from_millis(200) };
        let err = spawn_with::<f64, _, _>(3, config, |c| {
            let x = Tensor::vector(vec![c.rank() as f64]);
            let group = [0, 1, 2];
            if c.rank() == 2 {
                // Skips the reduction and waits on rank 0 instead.
                c.recv(0, Tag::new(OpKind::User, 7))?;
            } else {
                sum_reduce(c, 0, &group, Some(&x))?;
            }
            Ok(())
        })
        .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err.root_cause(), Error::Watchdog { .. }), "{msg}");
        assert!(msg.contains("probable collective mismatch"), "{msg}");
        assert!(msg.contains("rank 2: waiting for User#7 from rank 0"), "{msg}");
    }

    #[test]
    fn tag_mismatch_is_detected() {
        let err = spawn::<f64, _, _>(2, |c| {
            if c.rank() == 0 {
                c.send(1, Tag::new(OpKind::Broadcast, 0), Tensor::zeros(&[1]))?;
            } else {
                c.recv(0, Tag::new(OpKind::SumReduce, 0))?;
            }
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err.root_cause(), Error::TagMismatch { rank: 1, peer: 0, .. }), "{err}");
    }

    #[test]
    fn failure_names_rank_and_aborts_group() {
        let err = spawn::<f64, _, _>(3, |c| {
            if c.rank() == 1 {
                return Err(Error::contract("boom"));
            }
            c.recv((c.rank() + 1) % 3, Tag::new(OpKind::User, 0))?;
            Ok(())
        })
        .unwrap_err();
        match err {
            Error::Worker { rank, source } => {
                assert_eq!(rank, 1);
                assert!(matches!(*source, Error::Contract(_)));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn panics_are_reported() {
        let err = spawn::<f64, _, _>(2, |c| {
            if c.rank() == 0 {
                panic!("worker exploded");
            }
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, Error::Panic { rank: 0, ref message } if message.contains("exploded")));
    }

    #[test]
    fn barrier_and_rank_checks() {
        spawn::<f64, _, _>(4, |c| c.barrier()).unwrap();
        let err = spawn::<f64, _, _>(1, |c| c.send(3, Tag::new(OpKind::User, 0), Tensor::zeros(&[1]))).unwrap_err();
        assert!(matches!(err.root_cause(), Error::RankOutOfRange { rank: 3, size: 1 }));
        assert!(spawn::<f64, (), _>(0, |_| Ok(())).is_err());
    }
}
