//! Bridge between the in-process bus and an external MQTT 3.1.1 broker.
//!
//! Outbound, every envelope on the bus is published to the broker under the
//! same topic with its JSON payload; the retained flag and QoS follow the
//! topic table. Inbound, publishes on command topics (`ogs/+/cmd`) are fed
//! into the bus, so handlers acknowledge them exactly as local commands.
//! Operator consoles reach the same broker over MQTT-over-WebSocket.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rumqttc::{Client, Event, MqttOptions, Packet, QoS, Transport};
use serde_json::Value;
use url::Url;

use crate::bus::{Bus, Subscription};
use crate::error::{BusError, Result};
use crate::topics::{lookup, Qos, TopicKind};

/// Environment variable holding the broker URL.
pub const BROKER_URL_ENV: &str = "OGS_BROKER_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrokerTransport {
    Tcp,
    WebSocket,
}

/// Parsed broker address: `mqtt://host[:port]`, `tcp://host[:port]` or
/// `ws://host[:port][/path]`. A `client_id` query parameter is honoured.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerUrl {
    pub transport: BrokerTransport,
    pub host: String,
    pub port: u16,
    pub path: String,
    pub client_id: Option<String>,
}

impl BrokerUrl {
    pub fn parse(raw: &str) -> Result<Self> {
        let bad = |reason: &str| BusError::BrokerUrl {
            url: raw.to_string(),
            reason: reason.to_string(),
        };
        let url = Url::parse(raw).map_err(|e| bad(&e.to_string()))?;
        let (transport, default_port) = match url.scheme() {
            "mqtt" | "tcp" => (BrokerTransport::Tcp, 1883),
            "ws" => (BrokerTransport::WebSocket, 8000),
            other => return Err(bad(&format!("unsupported scheme `{other}` (use mqtt, tcp or ws)"))),
        };
        let host = url.host_str().filter(|h| !h.is_empty()).ok_or_else(|| bad("missing host"))?;
        let client_id = url
            .query_pairs()
            .find(|(k, _)| k == "client_id")
            .map(|(_, v)| v.into_owned());
        Ok(Self {
            transport,
            host: host.to_string(),
            port: url.port().unwrap_or(default_port),
            path: url.path().to_string(),
            client_id,
        })
    }

    /// Reads [`BROKER_URL_ENV`]; `None` when unset or empty.
    pub fn from_env() -> Option<Result<Self>> {
        std::env::var(BROKER_URL_ENV)
            .ok()
            .filter(|s| !s.trim().is_empty())
            .map(|s| Self::parse(s.trim()))
    }

    pub fn options(&self, default_client_id: &str) -> MqttOptions {
        let id = self.client_id.clone().unwrap_or_else(|| default_client_id.to_string());
        let mut opts = match self.transport {
            BrokerTransport::Tcp => MqttOptions::new(id, self.host.clone(), self.port),
            BrokerTransport::WebSocket => {
                let mut o = MqttOptions::new(id, format!("ws://{}:{}{}", self.host, self.port, self.path), self.port);
                o.set_transport(Transport::Ws);
                o
            }
        };
        opts.set_keep_alive(Duration::from_secs(30));
        opts.set_max_packet_size(1 << 20, 1 << 20);
        opts
    }
}

fn mqtt_qos(q: Qos) -> QoS {
    match q {
        Qos::AtMostOnce => QoS::AtMostOnce,
        Qos::AtLeastOnce => QoS::AtLeastOnce,
    }
}

/// Running bridge; dropping it without [`MqttBridge::stop`] leaves the
/// worker threads running until the process exits.
pub struct MqttBridge {
    client: Client,
    stop: Arc<AtomicBool>,
    outbound: Arc<Subscription>,
    // held by the outbound worker from receive to hand-off
    forwarding: Arc<Mutex<()>>,
    workers: Vec<JoinHandle<()>>,
}

impl MqttBridge {
    pub fn start(bus: &Bus, url: &BrokerUrl, client_id: &str) -> Result<Self> {
        let (client, mut connection) = Client::new(url.options(client_id), 256);
        client
            .subscribe("ogs/+/cmd", QoS::AtLeastOnce)
            .map_err(|e| BusError::Mqtt(e.to_string()))?;
        let stop = Arc::new(AtomicBool::new(false));
        // commands that came in from the broker are not echoed back
        let ingested: Arc<Mutex<HashSet<(String, u64)>>> = Arc::default();

        let inbound = {
            let bus = bus.clone();
            let stop = stop.clone();
            let ingested = ingested.clone();
            std::thread::spawn(move || {
                for event in connection.iter() {
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    match event {
                        Ok(Event::Incoming(Packet::Publish(p))) => {
                            if lookup(&p.topic).map(|s| s.kind) != Some(TopicKind::Command) {
                                continue;
                            }
                            let payload: Value = match serde_json::from_slice(&p.payload) {
                                Ok(v) => v,
                                Err(e) => {
                                    log::warn!("dropping malformed command on {}: {e}", p.topic);
                                    continue;
                                }
                            };
                            let t = payload.get("t").and_then(Value::as_f64).unwrap_or(0.0);
                            if let Some(seq) = payload.get("seq").and_then(Value::as_u64) {
                                ingested.lock().insert((p.topic.clone(), seq));
                            }
                            if let Err(e) = bus.publish(&p.topic, t, payload) {
                                log::warn!("rejected command on {}: {e}", p.topic);
                            }
                        }
                        Ok(_) => {}
                        Err(e) => {
                            if stop.load(Ordering::Relaxed) {
                                break;
                            }
                            log::warn!("broker connection: {e}");
                            std::thread::sleep(Duration::from_millis(200));
                        }
                    }
                }
            })
        };

        let sub = Arc::new(bus.subscribe_with_capacity("ogs/#", 1 << 16)?);
        let forwarding = Arc::new(Mutex::new(()));
        let outbound = {
            let sub = sub.clone();
            let forwarding = forwarding.clone();
            let client = client.clone();
            let stop = stop.clone();
            std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    let _busy = forwarding.lock();
                    let Some(env) = sub.recv_timeout(Duration::from_millis(50)) else {
                        continue;
                    };
                    let seq = env.payload.get("seq").and_then(Value::as_u64).unwrap_or(env.seq);
                    if ingested.lock().remove(&(env.topic.clone(), seq)) {
                        continue;
                    }
                    let bytes = match serde_json::to_vec(&env.payload) {
                        Ok(b) => b,
                        Err(e) => {
                            log::warn!("cannot encode payload on {}: {e}", env.topic);
                            continue;
                        }
                    };
                    if let Err(e) = client.publish(env.topic.as_str(), mqtt_qos(env.qos), env.retained, bytes) {
                        log::warn!("broker publish on {} failed: {e}", env.topic);
                    }
                }
            })
        };

        Ok(Self {
            client,
            stop,
            outbound: sub,
            forwarding,
            workers: vec![inbound, outbound],
        })
    }

    /// Waits until everything published on the bus so far has been handed to
    /// the broker client; false on timeout.
    pub fn flush(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if let Some(_idle) = self.forwarding.try_lock_for(Duration::from_millis(100)) {
                if self.outbound.is_empty() {
                    return true;
                }
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        false
    }

    pub fn stop(self) {
        self.stop.store(true, Ordering::Relaxed);
        let _ = self.client.disconnect();
        for w in self.workers {
            let _ = w.join();
        }
    }
}
