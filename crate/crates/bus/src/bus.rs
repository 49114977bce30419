//! Deterministic in-process bus.
//!
//! Publishing is synchronous: by the time `publish` returns, every matching
//! subscriber queue holds the envelope and any command handler has run and
//! published its acknowledgement. The bus never blocks on a subscriber;
//! full queues either drop their oldest telemetry or refuse the publish
//! (at-least-once topics).

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{BufRead, Write};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{BusError, Result};
use crate::schema::validate;
use crate::topics::{ack_topic, lookup, Qos, TopicKind};

/// Default per-subscriber queue depth.
pub const DEFAULT_QUEUE_CAPACITY: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub topic: String,
    pub seq: u64,
    pub t_virtual: f64,
    pub payload: Value,
    pub qos: Qos,
    pub retained: bool,
}

/// Single-level topic pattern: an exact path or a prefix ending in `/#`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicPattern {
    prefix: String,
    wildcard: bool,
}

impl TopicPattern {
    pub fn parse(pattern: &str) -> Result<Self> {
        let malformed = || BusError::MalformedPattern(pattern.to_string());
        if !pattern.starts_with(crate::topics::ROOT) {
            return Err(malformed());
        }
        let (prefix, wildcard) = match pattern.strip_suffix("/#") {
            Some(p) => (p, true),
            None => (pattern, false),
        };
        if prefix.is_empty()
            || prefix.contains(['#', '+'])
            || prefix.split('/').any(str::is_empty)
        {
            return Err(malformed());
        }
        Ok(Self {
            prefix: prefix.to_string(),
            wildcard,
        })
    }

    pub fn matches(&self, topic: &str) -> bool {
        if self.wildcard {
            topic == self.prefix
                || topic
                    .strip_prefix(self.prefix.as_str())
                    .is_some_and(|rest| rest.starts_with('/'))
        } else {
            topic == self.prefix
        }
    }
}

#[derive(Debug)]
struct Queue {
    items: VecDeque<Envelope>,
    capacity: usize,
    dropped: u64,
    closed: bool,
}

#[derive(Debug)]
struct SharedQueue {
    queue: Mutex<Queue>,
    ready: Condvar,
}

/// Receiving end of a subscription.
#[derive(Debug)]
pub struct Subscription {
    id: u64,
    shared: Arc<SharedQueue>,
    bus: Bus,
}

impl Subscription {
    pub fn try_recv(&self) -> Option<Envelope> {
        self.shared.queue.lock().items.pop_front()
    }

    /// Waits up to `timeout` of wall time; used by the broker bridge.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<Envelope> {
        let deadline = Instant::now() + timeout;
        let mut q = self.shared.queue.lock();
        loop {
            if let Some(e) = q.items.pop_front() {
                return Some(e);
            }
            if q.closed || self.shared.ready.wait_until(&mut q, deadline).timed_out() {
                return q.items.pop_front();
            }
        }
    }

    pub fn drain(&self) -> Vec<Envelope> {
        self.shared.queue.lock().items.drain(..).collect()
    }

    /// Envelopes queued and not yet received.
    pub fn len(&self) -> usize {
        self.shared.queue.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Envelopes discarded because the queue was full.
    pub fn dropped(&self) -> u64 {
        self.shared.queue.lock().dropped
    }

    pub fn close(&self) {
        {
            let mut q = self.shared.queue.lock();
            q.closed = true;
            q.items.clear();
        }
        self.shared.ready.notify_all();
        self.bus.state.lock().subs.retain(|s| s.id != self.id);
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.bus.state.lock().subs.retain(|s| s.id != self.id);
    }
}

struct SubEntry {
    id: u64,
    pattern: TopicPattern,
    shared: Arc<SharedQueue>,
}

/// Command handler: receives the command envelope, returns the `result`
/// object for the acknowledgement or an error message.
pub type Handler = Box<dyn FnMut(&Envelope) -> std::result::Result<Value, String> + Send>;

struct HandlerSlot {
    handler: Option<Handler>,
    running: bool,
    latency_s: f64,
    /// Acknowledgement payload per command `seq`, for idempotent redelivery.
    acks: HashMap<u64, Value>,
}

#[derive(Default)]
struct State {
    seq: HashMap<String, u64>,
    retained: HashMap<String, Envelope>,
    subs: Vec<SubEntry>,
    next_sub: u64,
    log: Vec<Envelope>,
    handlers: HashMap<String, HandlerSlot>,
    duplicate_next: HashSet<String>,
}

/// Cloneable handle to one shared bus.
#[derive(Clone)]
pub struct Bus {
    state: Arc<Mutex<State>>,
    capacity: usize,
}

impl std::fmt::Debug for Bus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Bus").field("capacity", &self.capacity).finish()
    }
}

impl Default for Bus {
    fn default() -> Self {
        Self::new()
    }
}

impl Bus {
    pub fn new() -> Self {
        Self::with_capacity(DEFAULT_QUEUE_CAPACITY)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            state: Arc::new(Mutex::new(State::default())),
            capacity: capacity.max(1),
        }
    }

    pub fn subscribe(&self, pattern: &str) -> Result<Subscription> {
        self.subscribe_with_capacity(pattern, self.capacity)
    }

    /// Subscribes; matching retained values are queued immediately.
    pub fn subscribe_with_capacity(&self, pattern: &str, capacity: usize) -> Result<Subscription> {
        let pattern = TopicPattern::parse(pattern)?;
        let mut st = self.state.lock();
        let id = st.next_sub;
        st.next_sub += 1;
        let mut retained: Vec<&Envelope> = st.retained.values().filter(|e| pattern.matches(&e.topic)).collect();
        retained.sort_by(|a, b| a.topic.cmp(&b.topic));
        let items: VecDeque<Envelope> = retained.into_iter().cloned().collect();
        let shared = Arc::new(SharedQueue {
            queue: Mutex::new(Queue {
                items,
                capacity: capacity.max(1),
                dropped: 0,
                closed: false,
            }),
            ready: Condvar::new(),
        });
        st.subs.push(SubEntry {
            id,
            pattern,
            shared: shared.clone(),
        });
        drop(st);
        Ok(Subscription {
            id,
            shared,
            bus: self.clone(),
        })
    }

    /// Publishes `payload` on `topic` at virtual time `t`.
    ///
    /// `t` and `seq` are written into the payload unless the caller already
    /// set them (acknowledgements carry the command's `seq`).
    pub fn publish(&self, topic: &str, t: f64, payload: Value) -> Result<Envelope> {
        let (env, copies) = {
            let mut st = self.state.lock();
            let spec = lookup(topic).ok_or_else(|| {
                if topic.contains(['#', '+']) {
                    BusError::WildcardPublish(topic.to_string())
                } else {
                    BusError::UnregisteredTopic(topic.to_string())
                }
            })?;
            let seq = st.seq.get(topic).copied().unwrap_or(0) + 1;
            let mut payload = match payload {
                Value::Object(m) => m,
                other => {
                    return Err(BusError::Schema {
                        topic: topic.to_string(),
                        path: "/".into(),
                        message: format!("payload must be an object, got {other}"),
                    })
                }
            };
            if !payload.contains_key("t") {
                payload.insert("t".into(), json!(t));
            }
            if !payload.contains_key("seq") {
                payload.insert("seq".into(), json!(seq));
            }
            let payload = Value::Object(payload);
            validate(&spec.schema(), &payload).map_err(|v| BusError::Schema {
                topic: topic.to_string(),
                path: v.path,
                message: v.message,
            })?;
            let env = Envelope {
                topic: topic.to_string(),
                seq,
                t_virtual: t,
                payload,
                qos: spec.qos(),
                retained: spec.retained,
            };
            let copies = if st.duplicate_next.remove(topic) { 2 } else { 1 };
            Self::deliver(&st, &env, copies)?;
            st.seq.insert(topic.to_string(), seq);
            if spec.retained {
                st.retained.insert(topic.to_string(), env.clone());
            }
            st.log.push(env.clone());
            (env, copies)
        };
        for _ in 0..copies {
            self.dispatch_command(&env)?;
        }
        Ok(env)
    }

    fn deliver(st: &State, env: &Envelope, copies: usize) -> Result<()> {
        let targets: Vec<&SubEntry> = st.subs.iter().filter(|s| s.pattern.matches(&env.topic)).collect();
        if env.qos == Qos::AtLeastOnce {
            for s in &targets {
                let q = s.shared.queue.lock();
                if q.items.len() + copies > q.capacity {
                    return Err(BusError::Backpressure(env.topic.clone()));
                }
            }
        }
        for s in targets {
            let mut q = s.shared.queue.lock();
            for _ in 0..copies {
                if q.items.len() >= q.capacity {
                    q.items.pop_front();
                    q.dropped += 1;
                }
                q.items.push_back(env.clone());
            }
            drop(q);
            s.shared.ready.notify_all();
        }
        Ok(())
    }

    fn dispatch_command(&self, env: &Envelope) -> Result<()> {
        if lookup(&env.topic).map(|s| s.kind) != Some(TopicKind::Command) {
            return Ok(());
        }
        let cmd_seq = env.payload.get("seq").and_then(Value::as_u64).unwrap_or(env.seq);
        let (handler, cached, latency) = {
            let mut st = self.state.lock();
            let Some(slot) = st.handlers.get_mut(&env.topic) else {
                return Ok(());
            };
            if !slot.running {
                return Ok(());
            }
            match slot.acks.get(&cmd_seq) {
                Some(ack) => (None, Some(ack.clone()), slot.latency_s),
                None => (slot.handler.take(), None, slot.latency_s),
            }
        };
        let t_ack = env.t_virtual + latency;
        let ack = match cached {
            Some(ack) => ack,
            None => {
                let Some(mut h) = handler else {
                    // the handler is running further up the stack
                    return Ok(());
                };
                let outcome = h(env);
                let ack = match outcome {
                    Ok(result) => json!({"t": t_ack, "seq": cmd_seq, "ok": true, "error": null, "result": result}),
                    Err(e) => json!({"t": t_ack, "seq": cmd_seq, "ok": false, "error": e, "result": null}),
                };
                let mut st = self.state.lock();
                if let Some(slot) = st.handlers.get_mut(&env.topic) {
                    slot.handler = Some(h);
                    slot.acks.insert(cmd_seq, ack.clone());
                }
                ack
            }
        };
        self.publish(&ack_topic(&env.topic), t_ack, ack).map(|_| ())
    }

    /// Installs the handler for a command topic. Each command `seq` reaches
    /// the handler once; redeliveries get the cached acknowledgement.
    pub fn register_handler<F>(&self, cmd_topic: &str, handler: F) -> Result<()>
    where
        F: FnMut(&Envelope) -> std::result::Result<Value, String> + Send + 'static,
    {
        if lookup(cmd_topic).map(|s| s.kind) != Some(TopicKind::Command) {
            return Err(BusError::UnregisteredTopic(cmd_topic.to_string()));
        }
        self.state.lock().handlers.insert(
            cmd_topic.to_string(),
            HandlerSlot {
                handler: Some(Box::new(handler)),
                running: true,
                latency_s: 0.0,
                acks: HashMap::new(),
            },
        );
        Ok(())
    }

    /// Stops or restarts a handler; a stopped handler never acknowledges.
    pub fn set_handler_running(&self, cmd_topic: &str, running: bool) {
        if let Some(slot) = self.state.lock().handlers.get_mut(cmd_topic) {
            slot.running = running;
        }
    }

    /// Virtual delay between a command and its acknowledgement.
    pub fn set_handler_latency(&self, cmd_topic: &str, latency_s: f64) {
        if let Some(slot) = self.state.lock().handlers.get_mut(cmd_topic) {
            slot.latency_s = latency_s;
        }
    }

    /// Test hook: the next publish on `topic` is delivered twice.
    pub fn inject_duplicate(&self, topic: &str) {
        self.state.lock().duplicate_next.insert(topic.to_string());
    }

    /// Publishes a command and waits (in virtual time) for its acknowledgement.
    ///
    /// At-least-once commands are redelivered once, with the same `seq`,
    /// before giving up.
    pub fn command_roundtrip(&self, cmd_topic: &str, t: f64, payload: Value, timeout_s: f64) -> Result<Value> {
        if !self.state.lock().handlers.contains_key(cmd_topic) {
            return Err(BusError::NoHandler(cmd_topic.to_string()));
        }
        let acks = self.subscribe(&ack_topic(cmd_topic))?;
        let env = self.publish(cmd_topic, t, payload)?;
        let cmd_seq = env.payload.get("seq").and_then(Value::as_u64).unwrap_or(env.seq);
        let find = |acks: &Subscription| {
            acks.drain().into_iter().find(|a| {
                a.payload.get("seq").and_then(Value::as_u64) == Some(cmd_seq) && a.t_virtual - t <= timeout_s
            })
        };
        if let Some(a) = find(&acks) {
            return Ok(a.payload);
        }
        let mut attempts = 1;
        if env.qos == Qos::AtLeastOnce {
            attempts += 1;
            self.redeliver(&env)?;
            if let Some(a) = find(&acks) {
                return Ok(a.payload);
            }
        }
        Err(BusError::CommandFailed {
            topic: cmd_topic.to_string(),
            attempts,
        })
    }

    fn redeliver(&self, env: &Envelope) -> Result<()> {
        {
            let mut st = self.state.lock();
            Self::deliver(&st, env, 1)?;
            st.log.push(env.clone());
        }
        self.dispatch_command(env)
    }

    /// Latest retained envelope on `topic`.
    pub fn retained(&self, topic: &str) -> Option<Envelope> {
        self.state.lock().retained.get(topic).cloned()
    }

    /// Every envelope in publish order.
    pub fn log(&self) -> Vec<Envelope> {
        self.state.lock().log.clone()
    }

    pub fn log_len(&self) -> usize {
        self.state.lock().log.len()
    }

    pub fn write_log<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_jsonl(&self.log(), out)
    }
}

pub fn write_jsonl<W: Write>(log: &[Envelope], mut out: W) -> std::io::Result<()> {
    for e in log {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSON-Lines envelope log; blank lines are skipped.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Envelope>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| BusError::Log(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let env: Envelope =
            serde_json::from_str(&line).map_err(|e| BusError::Log(format!("line {}: {e}", i + 1)))?;
        out.push(env);
    }
    Ok(out)
}
