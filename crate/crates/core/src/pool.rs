//! Globally shared tool-execution pool.
//!
//! A fixed set of resources, each able to run some subset of tools. A caller
//! takes a [`Lease`] on a free capable resource (waiting FIFO when none is
//! free), runs the tool while holding it, and the lease hands the resource
//! straight to the oldest capable waiter when dropped. Simulated transient
//! faults are retried with a fresh allocation, up to [`MAX_ATTEMPTS`] total.
//!
//! Fault and latency draws are keyed by `(seed, request_id, attempt)`, so the
//! fault pattern of a workload does not depend on thread interleaving.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};
use thiserror::Error;

use crate::env::{EnvConfig, EnvError, EnvState, ToolId};
use crate::policy::ToolExecutor;
use crate::rng::{self, domain};

/// Total attempts per request: the first try plus two retries.
pub const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub resource: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("no resource can execute tool {0}")]
    NoCapableResource(ToolId),
    #[error("timed out waiting for a resource for tool {tool}")]
    Timeout { tool: ToolId },
    #[error("wait queue is full ({depth} waiters)")]
    QueueFull { depth: usize },
    #[error("request {request_id} failed after {} attempts", trace.len())]
    ExhaustedRetries {
        request_id: u64,
        trace: Vec<AttemptRecord>,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid pool config at `{path}`: {reason}")]
    InvalidConfig { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub num_resources: usize,
    /// Probability that a single attempt transiently fails.
    pub failure_rate: f64,
    /// Sleep per attempt = `exec_cost_ms * time_scale` plus uniform jitter.
    pub time_scale: f64,
    pub jitter_us: u64,
    pub max_queue_depth: usize,
    pub acquire_timeout_ms: u64,
    /// Per-resource tool lists; `None` makes every resource all-capable.
    pub capabilities: Option<Vec<Vec<ToolId>>>,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            num_resources: 8,
            failure_rate: 0.0,
            time_scale: 0.0,
            jitter_us: 0,
            max_queue_depth: 4096,
            acquire_timeout_ms: 30_000,
            capabilities: None,
            seed: 0,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), PoolError> {
        let bad = |path: &str, reason: &str| PoolError::InvalidConfig {
            path: path.into(),
            reason: reason.into(),
        };
        if self.num_resources == 0 {
            return Err(bad("pool.num_resources", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.failure_rate) {
            return Err(bad("pool.failure_rate", "must be in [0, 1)"));
        }
        if !(self.time_scale.is_finite() && self.time_scale >= 0.0) {
            return Err(bad("pool.time_scale", "must be non-negative"));
        }
        if self.max_queue_depth == 0 {
            return Err(bad("pool.max_queue_depth", "must be at least 1"));
        }
        if let Some(caps) = &self.capabilities {
            if caps.len() != self.num_resources {
                return Err(bad("pool.capabilities", "need one entry per resource"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InvocationRequest {
    pub request_id: u64,
    pub tool: ToolId,
    pub input: EnvState,
    /// Overrides the pool's acquire timeout.
    pub timeout: Option<Duration>,
}

#[derive(Debug, Default)]
struct ResourceCounters {
    completed: AtomicU64,
    failed: AtomicU64,
    retried: AtomicU64,
    busy: AtomicUsize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceStats {
    pub id: usize,
    pub capabilities: Option<Vec<ToolId>>,
    pub completed: u64,
    pub failed: u64,
    pub retried: u64,
    pub busy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub resources: Vec<ResourceStats>,
    pub free_resources: usize,
    pub queue_depth: usize,
    pub max_queue_depth: usize,
    pub in_flight: usize,
    pub max_concurrency: usize,
    pub exclusion_violations: u64,
    pub requests: u64,
    pub succeeded: u64,
    /// Requests that needed more than one attempt.
    pub retried_requests: u64,
    pub exhausted_requests: u64,
    /// `attempts_histogram[k]` = requests that settled after `k` attempts.
    pub attempts_histogram: Vec<u64>,
    pub max_attempts_seen: u32,
}

impl PoolStats {
    pub fn total_completed(&self) -> u64 {
        self.resources.iter().map(|r| r.completed).sum()
    }
}

struct Waiter {
    ticket: u64,
    tool: ToolId,
}

struct Shared {
    free: Vec<bool>,
    queue: VecDeque<Waiter>,
    grants: HashMap<u64, usize>,
    next_ticket: u64,
    max_queue_depth: usize,
}

pub struct McPool {
    config: PoolConfig,
    env: Arc<EnvConfig>,
    shared: Mutex<Shared>,
    wake: Condvar,
    counters: Vec<ResourceCounters>,
    in_flight: AtomicUsize,
    max_concurrency: AtomicUsize,
    violations: AtomicU64,
    requests: AtomicU64,
    succeeded: AtomicU64,
    retried_requests: AtomicU64,
    exhausted: AtomicU64,
    attempts_histogram: [AtomicU64; MAX_ATTEMPTS as usize + 1],
    max_attempts_seen: AtomicU64,
}

/// Exclusive hold on one resource; released on drop.
pub struct Lease<'a> {
    pool: &'a McPool,
    resource: usize,
}

impl Lease<'_> {
    pub fn resource_id(&self) -> usize {
        self.resource
    }

    pub fn release(self) {}
}

impl std::fmt::Debug for Lease<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lease")
            .field("resource", &self.resource)
            .finish()
    }
}

impl Drop for Lease<'_> {
    fn drop(&mut self) {
        self.pool.release(self.resource);
    }
}

impl McPool {
    pub fn new(config: PoolConfig, env: Arc<EnvConfig>) -> Result<Self, PoolError> {
        config.validate()?;
        let n = config.num_resources;
        Ok(Self {
            shared: Mutex::new(Shared {
                free: vec![true; n],
                queue: VecDeque::new(),
                grants: HashMap::new(),
                next_ticket: 0,
                max_queue_depth: 0,
            }),
            wake: Condvar::new(),
            counters: (0..n).map(|_| ResourceCounters::default()).collect(),
            in_flight: AtomicUsize::new(0),
            max_concurrency: AtomicUsize::new(0),
            violations: AtomicU64::new(0),
            requests: AtomicU64::new(0),
            succeeded: AtomicU64::new(0),
            retried_requests: AtomicU64::new(0),
            exhausted: AtomicU64::new(0),
            attempts_histogram: Default::default(),
            max_attempts_seen: AtomicU64::new(0),
            config,
            env,
        })
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn env(&self) -> &EnvConfig {
        &self.env
    }

    fn capable(&self, resource: usize, tool: ToolId) -> bool {
        match &self.config.capabilities {
            None => true,
            Some(caps) => caps[resource].contains(&tool),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Shared> {
        self.shared.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn acquire(&self, tool: ToolId) -> Result<Lease<'_>, PoolError> {
        self.acquire_with_timeout(tool, Duration::from_millis(self.config.acquire_timeout_ms))
    }

    pub fn acquire_with_timeout(
        &self,
        tool: ToolId,
        timeout: Duration,
    ) -> Result<Lease<'_>, PoolError> {
        if !(0..self.config.num_resources).any(|r| self.capable(r, tool)) {
            return Err(PoolError::NoCapableResource(tool));
        }
        let mut shared = self.lock();
        // A free resource never has a capable waiter (release hands off first),
        // so taking one here cannot overtake the queue.
        if let Some(r) = (0..shared.free.len()).find(|&r| shared.free[r] && self.capable(r, tool)) {
            shared.free[r] = false;
            return Ok(Lease {
                pool: self,
                resource: r,
            });
        }
        if shared.queue.len() >= self.config.max_queue_depth {
            return Err(PoolError::QueueFull {
                depth: shared.queue.len(),
            });
        }
        let ticket = shared.next_ticket;
        shared.next_ticket += 1;
        shared.queue.push_back(Waiter { ticket, tool });
        shared.max_queue_depth = shared.max_queue_depth.max(shared.queue.len());
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(r) = shared.grants.remove(&ticket) {
                return Ok(Lease {
                    pool: self,
                    resource: r,
                });
            }
            let now = Instant::now();
            if now >= deadline {
                shared.queue.retain(|w| w.ticket != ticket);
                return Err(PoolError::Timeout { tool });
            }
            shared = self
                .wake
                .wait_timeout(shared, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    fn release(&self, resource: usize) {
        let mut shared = self.lock();
        let next = shared
            .queue
            .iter()
            .position(|w| self.capable(resource, w.tool));
        match next {
            Some(pos) => {
                let waiter = shared.queue.remove(pos).expect("position is in range");
                shared.grants.insert(waiter.ticket, resource);
                drop(shared);
                self.wake.notify_all();
            }
            None => shared.free[resource] = true,
        }
    }

    fn attempt_draws(&self, request_id: u64, attempt: u32) -> (bool, Duration) {
        let mut rng = rng::stream(
            self.config.seed,
            &[domain::POOL_FAULT, request_id, u64::from(attempt)],
        );
        let fault = rng.gen::<f64>() < self.config.failure_rate;
        let jitter = if self.config.jitter_us > 0 {
            rng::stream(
                self.config.seed,
                &[domain::POOL_LATENCY, request_id, u64::from(attempt)],
            )
            .gen_range(0..=self.config.jitter_us)
        } else {
            0
        };
        (fault, Duration::from_micros(jitter))
    }

    /// Runs `f` on the leased resource with exclusion instrumentation.
    fn run_on<T>(&self, lease: &Lease<'_>, f: impl FnOnce() -> T) -> T {
        let c = &self.counters[lease.resource];
        if c.busy.fetch_add(1, Ordering::SeqCst) != 0 {
            self.violations.fetch_add(1, Ordering::SeqCst);
        }
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_concurrency.fetch_max(now, Ordering::SeqCst);
        let out = f();
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        c.busy.fetch_sub(1, Ordering::SeqCst);
        out
    }

    fn settle(&self, attempts: u32) {
        self.attempts_histogram[attempts as usize].fetch_add(1, Ordering::SeqCst);
        self.max_attempts_seen
            .fetch_max(u64::from(attempts), Ordering::SeqCst);
        if attempts > 1 {
            self.retried_requests.fetch_add(1, Ordering::SeqCst);
        }
    }

    /// Acquire, execute, release; transient faults retry with a fresh
    /// acquisition. The result equals a direct `apply_tool` call.
    pub fn invoke(&self, request: &InvocationRequest) -> Result<EnvState, PoolError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let timeout = request
            .timeout
            .unwrap_or(Duration::from_millis(self.config.acquire_timeout_ms));
        let spec = self
            .env
            .tools
            .get(request.tool)
            .ok_or(EnvError::UnknownTool(request.tool))?;
        let base_sleep = spec.exec_cost_ms * self.config.time_scale;
        let mut trace = Vec::new();
        for attempt in 1..=MAX_ATTEMPTS {
            let lease = match self.acquire_with_timeout(request.tool, timeout) {
                Ok(l) => l,
                Err(e) => {
                    self.settle(attempt - 1);
                    return Err(e);
                }
            };
            let (fault, jitter) = self.attempt_draws(request.request_id, attempt);
            let outcome = self.run_on(&lease, || {
                let sleep = Duration::from_secs_f64(base_sleep / 1000.0) + jitter;
                if !sleep.is_zero() {
                    std::thread::sleep(sleep);
                }
                if fault {
                    None
                } else {
                    Some(self.env.apply_tool(&request.input, request.tool))
                }
            });
            let resource = lease.resource;
            drop(lease);
            match outcome {
                Some(Ok(state)) => {
                    self.counters[resource]
                        .completed
                        .fetch_add(1, Ordering::SeqCst);
                    self.succeeded.fetch_add(1, Ordering::SeqCst);
                    self.settle(attempt);
                    return Ok(state);
                }
                Some(Err(e)) => {
                    self.settle(attempt);
                    return Err(e.into());
                }
                None => {
                    let c = &self.counters[resource];
                    c.failed.fetch_add(1, Ordering::SeqCst);
                    if attempt < MAX_ATTEMPTS {
                        c.retried.fetch_add(1, Ordering::SeqCst);
                    }
                    trace.push(AttemptRecord { attempt, resource });
                    log::debug!(
                        "request {} attempt {attempt} faulted on resource {resource}",
                        request.request_id
                    );
                }
            }
        }
        self.settle(MAX_ATTEMPTS);
        self.exhausted.fetch_add(1, Ordering::SeqCst);
        Err(PoolError::ExhaustedRetries {
            request_id: request.request_id,
            trace,
        })
    }

    pub fn stats(&self) -> PoolStats {
        let shared = self.lock();
        PoolStats {
            resources: self
                .counters
                .iter()
                .enumerate()
                .map(|(id, c)| ResourceStats {
                    id,
                    capabilities: self
                        .config
                        .capabilities
                        .as_ref()
                        .map(|caps| caps[id].clone()),
                    completed: c.completed.load(Ordering::SeqCst),
                    failed: c.failed.load(Ordering::SeqCst),
                    retried: c.retried.load(Ordering::SeqCst),
                    busy: !shared.free[id],
                })
                .collect(),
            free_resources: shared.free.iter().filter(|&&f| f).count(),
            queue_depth: shared.queue.len(),
            max_queue_depth: shared.max_queue_depth,
            in_flight: self.in_flight.load(Ordering::SeqCst),
            max_concurrency: self.max_concurrency.load(Ordering::SeqCst),
            exclusion_violations: self.violations.load(Ordering::SeqCst),
            requests: self.requests.load(Ordering::SeqCst),
            succeeded: self.succeeded.load(Ordering::SeqCst),
            retried_requests: self.retried_requests.load(Ordering::SeqCst),
            exhausted_requests: self.exhausted.load(Ordering::SeqCst),
            attempts_histogram: self
                .attempts_histogram
                .iter()
                .map(|a| a.load(Ordering::SeqCst))
                .collect(),
            max_attempts_seen: self.max_attempts_seen.load(Ordering::SeqCst) as u32,
        }
    }

    /// Executor view for one rollout; request ids derive from `rollout_key`
    /// and the state's step, so they are stable across runs.
    pub fn session(&self, rollout_key: u64) -> PoolSession<'_> {
        PoolSession {
            pool: self,
            rollout_key,
        }
    }
}

/// Issues every request from `workers` threads at once; results keep the
/// order of `requests`.
pub fn run_workload(
    pool: &McPool,
    requests: &[InvocationRequest],
    workers: usize,
) -> Vec<Result<EnvState, PoolError>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<EnvState, PoolError>>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(req) = requests.get(i) else { return };
                let out = pool.invoke(req);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| {
            s.into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .expect("every request settles")
        })
        .collect()
}

pub struct PoolSession<'a> {
    pool: &'a McPool,
    rollout_key: u64,
}

impl ToolExecutor for PoolSession<'_> {
    type Error = PoolError;

    fn execute(&self, state: &EnvState, tool: ToolId) -> Result<EnvState, PoolError> {
        self.pool.invoke(&InvocationRequest {
            request_id: rng::mix(self.rollout_key, &[state.step as u64]),
            tool,
            input: state.clone(),
            timeout: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    fn pool(n: usize, failure_rate: f64) -> McPool {
        McPool::new(
            PoolConfig {
                num_resources: n,
                failure_rate,
                ..Default::default()
            },
            Arc::new(EnvConfig::default()),
        )
        .unwrap()
    }

    #[test]
    fn idle_pool_has_zero_counters() {
        let s = pool(4, 0.0).stats();
        assert_eq!(s.total_completed(), 0);
        assert_eq!(s.requests, 0);
        assert_eq!(s.max_concurrency, 0);
        assert_eq!(s.free_resources, 4);
        assert!(s.attempts_histogram.iter().all(|&a| a == 0));
    }

    #[test]
    fn capacity_bounds_outstanding_leases() {
        let p = pool(4, 0.0);
        let outstanding = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..10 {
                s.spawn(|| {
                    let lease = p.acquire(0).unwrap();
                    let now = outstanding.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(2));
                    outstanding.fetch_sub(1, Ordering::SeqCst);
                    drop(lease);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 4);
        assert_eq!(p.stats().free_resources, 4);
    }

    #[test]
    fn single_resource_sequential_cycles() {
        let p = pool(1, 0.0);
        let a = p.acquire(3).unwrap();
        assert_eq!(a.resource_id(), 0);
        assert!(matches!(
            p.acquire_with_timeout(3, Duration::from_millis(5)),
            Err(PoolError::Timeout { tool: 3 })
        ));
        a.release();
        let b = p.acquire(3).unwrap();
        assert_eq!(b.resource_id(), 0);
        drop(b);
        assert_eq!(p.stats().queue_depth, 0);
    }

    #[test]
    fn unknown_capability_fails_fast() {
        let p = McPool::new(
            PoolConfig {
                num_resources: 2,
                capabilities: Some(vec![vec![0, 1], vec![2]]),
                ..Default::default()
            },
            Arc::new(EnvConfig::default()),
        )
        .unwrap();
        assert!(matches!(p.acquire(7), Err(PoolError::NoCapableResource(7))));
        assert_eq!(p.acquire(2).unwrap().resource_id(), 1);
    }

    #[test]
    fn waiters_are_served_fifo() {
        let p = pool(1, 0.0);
        let order = Mutex::new(Vec::new());
        let held = p.acquire(0).unwrap();
        std::thread::scope(|s| {
            for i in 0..4 {
                let (p, order) = (&p, &order);
                s.spawn(move || {
                    let lease = p.acquire(0).unwrap();
                    order.lock().unwrap().push(i);
                    drop(lease);
                });
                // Let each waiter enqueue before the next one starts.
                while p.stats().queue_depth < i + 1 {
                    std::thread::yield_now();
                }
            }
            drop(held);
        });
        assert_eq!(*order.lock().unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn transparent_without_faults() {
        let p = pool(2, 0.0);
        let env = EnvConfig::default();
        let s = env.init_state(5);
        for tool in 0..env.num_tools() {
            let req = InvocationRequest {
                request_id: tool as u64,
                tool,
                input: s.clone(),
                timeout: None,
            };
            assert_eq!(p.invoke(&req).unwrap(), env.apply_tool(&s, tool).unwrap());
        }
        assert_eq!(p.stats().total_completed(), env.num_tools() as u64);
    }

    #[test]
    fn forced_failure_exhausts_three_attempts() {
        let p = McPool::new(
            PoolConfig {
                num_resources: 2,
                failure_rate: 0.999_999_999,
                ..Default::default()
            },
            Arc::new(EnvConfig::default()),
        )
        .unwrap();
        let req = InvocationRequest {
            request_id: 1,
            tool: 0,
            input: EnvConfig::default().init_state(1),
            timeout: None,
        };
        match p.invoke(&req) {
            Err(PoolError::ExhaustedRetries { trace, .. }) => {
                assert_eq!(
                    trace.iter().map(|t| t.attempt).collect::<Vec<_>>(),
                    vec![1, 2, 3]
                );
            }
            other => panic!("expected exhaustion, got {other:?}"),
        }
        let s = p.stats();
        assert_eq!(s.max_attempts_seen, 3);
        assert_eq!(s.exhausted_requests, 1);
        assert_eq!(s.free_resources, 2);
    }

    #[test]
    fn horizon_errors_are_not_retried() {
        let p = pool(1, 0.0);
        let mut s = EnvConfig::default().init_state(1);
        s.step = 8;
        let req = InvocationRequest {
            request_id: 9,
            tool: 0,
            input: s,
            timeout: None,
        };
        assert!(matches!(
            p.invoke(&req),
            Err(PoolError::Env(EnvError::HorizonExceeded { .. }))
        ));
        assert_eq!(p.stats().attempts_histogram[1], 1);
    }

    #[test]
    fn config_validation() {
        let env = Arc::new(EnvConfig::default());
        for bad in [
            PoolConfig {
                num_resources: 0,
                ..Default::default()
            },
            PoolConfig {
                failure_rate: 1.0,
                ..Default::default()
            },
            PoolConfig {
                capabilities: Some(vec![vec![0]]),
                ..Default::default()
            },
        ] {
            assert!(matches!(
                McPool::new(bad, env.clone()),
                Err(PoolError::InvalidConfig { .. })
            ));
        }
    }
}
