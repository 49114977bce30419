//! Bridge round trips against a minimal in-test MQTT 3.1.1 broker.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use bytes::BytesMut;
use ogs_bus::mqtt::{BrokerUrl, MqttBridge, BROKER_URL_ENV};
use ogs_bus::{topics, Bus};
use rumqttc::mqttbytes::v4::{self, ConnAck, ConnectReturnCode, Packet, PubAck, Publish, SubAck, SubscribeReasonCode};
use rumqttc::mqttbytes::{matches, Error as WireError, QoS};
use rumqttc::{Client, Event, MqttOptions};
use serde_json::{json, Value};

#[derive(Default)]
struct BrokerState {
    clients: Vec<(TcpStream, Vec<String>)>,
    retained: Vec<Publish>,
}

fn forward(state: &mut BrokerState, p: &Publish) {
    let mut out = Publish::new(p.topic.clone(), QoS::AtMostOnce, p.payload.to_vec());
    out.retain = false;
    let mut buf = BytesMut::new();
    out.write(&mut buf).unwrap();
    for (stream, filters) in &mut state.clients {
        if filters.iter().any(|f| matches(&p.topic, f)) {
            let _ = stream.write_all(&buf);
        }
    }
    if p.retain {
        state.retained.retain(|r| r.topic != p.topic);
        state.retained.push(p.clone());
    }
}

fn serve(mut stream: TcpStream, state: Arc<Mutex<BrokerState>>) {
    let mut buf = BytesMut::new();
    let mut chunk = [0u8; 4096];
    let slot = {
        let mut st = state.lock().unwrap();
        st.clients.push((stream.try_clone().unwrap(), Vec::new()));
        st.clients.len() - 1
    };
    loop {
        let packet = match v4::read(&mut buf, 1 << 20) {
            Ok(p) => p,
            Err(WireError::InsufficientBytes(_)) => match stream.read(&mut chunk) {
                Ok(0) | Err(_) => return,
                Ok(n) => {
                    buf.extend_from_slice(&chunk[..n]);
                    continue;
                }
            },
            Err(_) => return,
        };
        let mut out = BytesMut::new();
        match packet {
            Packet::Connect(_) => {
                ConnAck::new(ConnectReturnCode::Success, false).write(&mut out).unwrap();
            }
            Packet::Subscribe(s) => {
                let codes = s.filters.iter().map(|_| SubscribeReasonCode::Success(QoS::AtMostOnce)).collect();
                SubAck::new(s.pkid, codes).write(&mut out).unwrap();
                let mut st = state.lock().unwrap();
                st.clients[slot].1.extend(s.filters.iter().map(|f| f.path.clone()));
                let filters = st.clients[slot].1.clone();
                for r in st.retained.clone() {
                    if filters.iter().any(|f| matches(&r.topic, f)) {
                        let mut p = Publish::new(r.topic.clone(), QoS::AtMostOnce, r.payload.to_vec());
                        p.retain = true;
                        p.write(&mut out).unwrap();
                    }
                }
            }
            Packet::Publish(p) => {
                if p.qos == QoS::AtLeastOnce {
                    PubAck::new(p.pkid).write(&mut out).unwrap();
                }
                forward(&mut state.lock().unwrap(), &p);
            }
            Packet::PingReq => {
                v4::PingResp.write(&mut out).unwrap();
            }
            Packet::Disconnect => return,
            _ => {}
        }
        if !out.is_empty() && stream.write_all(&out).is_err() {
            return;
        }
    }
}

fn start_broker() -> (u16, Arc<Mutex<BrokerState>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let state: Arc<Mutex<BrokerState>> = Arc::default();
    let st = state.clone();
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let st = st.clone();
            thread::spawn(move || serve(stream, st));
        }
    });
    (port, state)
}

/// Console-side client; collects everything it receives.
fn console(port: u16, filter: &str) -> (Client, Arc<Mutex<Vec<(String, Value, bool)>>>) {
    let mut opts = MqttOptions::new("console", "127.0.0.1", port);
    opts.set_keep_alive(Duration::from_secs(5));
    let (client, mut conn) = Client::new(opts, 64);
    client.subscribe(filter, QoS::AtMostOnce).unwrap();
    let seen: Arc<Mutex<Vec<(String, Value, bool)>>> = Arc::default();
    let s = seen.clone();
    thread::spawn(move || {
        for ev in conn.iter() {
            match ev {
                Ok(Event::Incoming(rumqttc::Packet::Publish(p))) => {
                    let v: Value = serde_json::from_slice(&p.payload).unwrap_or(Value::Null);
                    s.lock().unwrap().push((p.topic.clone(), v, p.retain));
                }
                Ok(_) => {}
                Err(_) => break,
            }
        }
    });
    (client, seen)
}

fn wait_for<F: Fn(&[(String, Value, bool)]) -> bool>(seen: &Mutex<Vec<(String, Value, bool)>>, f: F) -> bool {
    let deadline = Instant::now() + Duration::from_secs(10);
    while Instant::now() < deadline {
        if f(&seen.lock().unwrap()) {
            return true;
        }
        thread::sleep(Duration::from_millis(20));
    }
    false
}

#[test]
fn telemetry_and_commands_cross_the_bridge() {
    let (port, broker) = start_broker();
    let bus = Bus::new();
    bus.register_handler(topics::TRACK_CMD, |env| {
        let kp = env.payload.get("kp").and_then(Value::as_f64).ok_or("kp missing")?;
        Ok(json!({"kp": kp, "ki": 50.0}))
    })
    .unwrap();
    let url = BrokerUrl::parse(&format!("mqtt://127.0.0.1:{port}")).unwrap();
    let bridge = MqttBridge::start(&bus, &url, "station").unwrap();

    let (client, seen) = console(port, "ogs/#");
    // wait until both sides are connected and subscribed
    let deadline = Instant::now() + Duration::from_secs(10);
    while broker.lock().unwrap().clients.iter().filter(|c| !c.1.is_empty()).count() < 2 {
        assert!(Instant::now() < deadline, "clients never subscribed");
        thread::sleep(Duration::from_millis(20));
    }

    bus.publish(topics::CONTROLLER_STATE, 1.0, json!({"state": "TRACK", "pass_id": "p", "previous": "FINE_ACQ", "event": "fine_lock", "cause": null, "warning": null}))
        .unwrap();
    assert!(wait_for(&seen, |s| s.iter().any(|(t, v, _)| t == topics::CONTROLLER_STATE && v["state"] == "TRACK")));

    client
        .publish(topics::TRACK_CMD, QoS::AtLeastOnce, false, serde_json::to_vec(&json!({"t": 2.0, "seq": 7, "kp": 0.3})).unwrap())
        .unwrap();
    assert!(wait_for(&seen, |s| s.iter().any(|(t, v, _)| t == "ogs/track/cmd/ack" && v["seq"] == 7 && v["result"]["kp"] == 0.3)));
    let log = bus.log();
    assert!(log.iter().any(|e| e.topic == topics::TRACK_CMD && e.payload["seq"] == 7));
    // the ingested command is not published back by the bridge
    thread::sleep(Duration::from_millis(200));
    let echoes = seen.lock().unwrap().iter().filter(|(t, _, _)| t == topics::TRACK_CMD).count();
    assert_eq!(echoes, 1);

    // retained state reaches a console that connects later
    let (late, late_seen) = console(port, "ogs/controller/#");
    assert!(wait_for(&late_seen, |s| s.iter().any(|(t, _, r)| t == topics::CONTROLLER_STATE && *r)));

    let _ = client.disconnect();
    let _ = late.disconnect();
    bridge.stop();
}

#[test]
fn broker_url_from_environment() {
    std::env::set_var(BROKER_URL_ENV, "ws://127.0.0.1:9001/mqtt");
    let url = BrokerUrl::from_env().unwrap().unwrap();
    assert_eq!(url.port, 9001);
    std::env::set_var(BROKER_URL_ENV, "  ");
    assert!(BrokerUrl::from_env().is_none());
    std::env::set_var(BROKER_URL_ENV, "ftp://x");
    assert!(BrokerUrl::from_env().unwrap().is_err());
    std::env::remove_var(BROKER_URL_ENV);
}
