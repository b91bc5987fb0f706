//! Replay against a running server, one connection per session.

use std::net::SocketAddr;
use std::sync::Mutex;

use tierkv_core::workload::{OpOutcome, ReplayTarget, TargetCounters, TraceOp, TraceRecord, WorkloadError};

use crate::protocol::{Client, ClientError};

pub struct RemoteTarget {
    addr: SocketAddr,
    sessions: Vec<Mutex<Option<Client>>>,
    control: Mutex<Client>,
}

fn unreachable(e: ClientError) -> WorkloadError {
    WorkloadError::StoreUnreachable(e.to_string())
}

impl RemoteTarget {
    pub fn connect(addr: SocketAddr, sessions: usize) -> Result<Self, WorkloadError> {
        Ok(Self {
            addr,
            sessions: (0..sessions.max(1)).map(|_| Mutex::new(None)).collect(),
            control: Mutex::new(Client::connect(addr).map_err(unreachable)?),
        })
    }
}

impl ReplayTarget for RemoteTarget {
    fn execute(&self, session: u64, record: &TraceRecord) -> Result<OpOutcome, WorkloadError> {
        let slot = &self.sessions[session as usize % self.sessions.len()];
        let mut guard = slot.lock().unwrap();
        if guard.is_none() {
            *guard = Some(Client::connect(self.addr).map_err(unreachable)?);
        }
        let client = guard.as_mut().unwrap();
        let result = match &record.op {
            TraceOp::Get => client.get(&record.key).map(|_| ()),
            TraceOp::Set(v) => client.set(&record.key, v),
            TraceOp::Del => client.del(&record.key).map(|_| ()),
        };
        match result {
            Ok(()) => Ok(OpOutcome::Ok),
            Err(ClientError::Server(_)) => Ok(OpOutcome::Failed),
            Err(e) => {
                *guard = None;
                Err(unreachable(e))
            }
        }
    }

    fn counters(&self) -> TargetCounters {
        let Ok(stats) = self.control.lock().unwrap().stats() else {
            return TargetCounters::default();
        };
        let n = |k: &str| stats.get(k).and_then(|v| v.parse().ok()).unwrap_or(0);
        TargetCounters {
            storage_reads: n("storage_reads"),
            storage_writes: n("storage_writes"),
            cache_hits: n("cache_hits"),
            cache_misses: n("cache_misses"),
        }
    }
}
