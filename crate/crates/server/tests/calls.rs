mod common;

use std::time::Duration;

use common::*;
use peervoip_core::crypto::{CipherSuite, Initiator, KeyExchangeMessage, Responder};
use peervoip_core::media::StreamParams;
use peervoip_core::protocol::{from_body, CallControl, CallNotice, ErrorCode, InviteBody};
use peervoip_core::routing::CallState;
use peervoip_core::wire::Kind;
use tokio::net::UdpSocket;

fn invite(relay: bool) -> InviteBody {
    InviteBody {
        call_id: 0,
        stream: StreamParams::random().into(),
        suites: vec![],
        relay_media: relay,
    }
}

fn ctl(call_id: u64) -> CallControl {
    CallControl {
        call_id,
        stream: None,
        reason: None,
    }
}

/// Invite, ring, accept; returns the call id and both media plans' notices.
async fn ring_and_accept(alice: &mut Client, bob: &mut Client, relay: bool) -> (u64, CallNotice, CallNotice) {
    let r = alice.request(Kind::CallInvite, "bob", &invite(relay)).await;
    let n: CallNotice = from_body(&r.body).unwrap();
    assert_eq!(n.state, CallState::Invited);
    let call_id = n.call_id;
    let inv: InviteBody = bob.expect_body(Kind::CallInvite).await;
    assert_eq!(inv.call_id, call_id);
    let ringing: CallNotice = alice.expect_body(Kind::CallInvite).await;
    assert_eq!(ringing.state, CallState::Ringing);
    let r = bob
        .request(
            Kind::CallAccept,
            "",
            &CallControl {
                call_id,
                stream: Some(StreamParams::random().into()),
                reason: None,
            },
        )
        .await;
    let bob_plan: CallNotice = from_body(&r.body).unwrap();
    let alice_plan: CallNotice = alice.expect_body(Kind::CallAccept).await;
    assert!(alice_plan.media.is_some() && bob_plan.media.is_some());
    (call_id, alice_plan, bob_plan)
}

/// Runs the end-to-end key exchange through the server relay.
async fn key_exchange(alice: &mut Client, bob: &mut Client, call_id: u64) -> [u8; 32] {
    let (init, ke1) = Initiator::start(call_id, CipherSuite::DEFAULT).unwrap();
    alice.send_raw(Kind::KeyExchange, "bob", ke1.encode());
    let got = bob.expect(Kind::KeyExchange).await;
    let (resp, ke2) = Responder::respond(
        call_id,
        &KeyExchangeMessage::decode(&got.body).unwrap(),
        &[CipherSuite::DEFAULT],
    )
    .unwrap();
    bob.send_raw(Kind::KeyExchange, "alice", ke2.encode());
    let got = alice.expect(Kind::KeyExchange).await;
    let (a_keys, ke3) = init.finish(&KeyExchangeMessage::decode(&got.body).unwrap()).unwrap();
    alice.send_raw(Kind::KeyExchange, "bob", ke3.encode());
    let got = bob.expect(Kind::KeyExchange).await;
    let (b_keys, ke4) = resp.finish(&KeyExchangeMessage::decode(&got.body).unwrap()).unwrap();
    bob.send_raw(Kind::KeyExchange, "", ke4.encode());
    assert_eq!(a_keys.send.raw().expose(), b_keys.receive.raw().expose());
    let mut out = [0u8; 32];
    out.copy_from_slice(&a_keys.send.raw().expose()[..32]);
    out
}

#[tokio::test]
async fn accept_flow_reaches_active_and_ends_once() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path(), |_| {}).await;
    let addr = srv.signaling_addr();
    let mut alice = Client::online(addr, "alice", Some(41000)).await;
    let mut bob = Client::online(addr, "bob", Some(41002)).await;

    let (call_id, alice_plan, bob_plan) = ring_and_accept(&mut alice, &mut bob, false).await;
    let a_media = alice_plan.media.unwrap();
    let b_media = bob_plan.media.unwrap();
    assert!(!a_media.relayed);
    assert_eq!(a_media.send_to.port(), 41002);
    assert_eq!(b_media.send_to.port(), 41000);
    assert!(a_media.route.is_empty());

    key_exchange(&mut alice, &mut bob, call_id).await;
    let a_active: CallNotice = alice.expect_body(Kind::CallAccept).await;
    let b_active: CallNotice = bob.expect_body(Kind::CallAccept).await;
    assert_eq!(a_active.state, CallState::Active);
    assert_eq!(b_active.state, CallState::Active);
    assert_eq!(a_active.media_epoch, b_active.media_epoch);
    assert!(a_active.media_epoch.is_some());

    let session = srv.hub().call_session(call_id).unwrap();
    assert_eq!(
        session.states(),
        vec![CallState::Invited, CallState::Ringing, CallState::Active]
    );

    let r = alice.request(Kind::CallEnd, "", &ctl(call_id)).await;
    assert_eq!(from_body::<CallNotice>(&r.body).unwrap().state, CallState::Ended);
    let n: CallNotice = bob.expect_body(Kind::CallEnd).await;
    assert_eq!((n.call_id, n.state), (call_id, CallState::Ended));
    let r = alice.request(Kind::CallEnd, "", &ctl(call_id)).await;
    assert_eq!(error_code(&r), ErrorCode::UnknownCall);
    assert!(srv.hub().call_session(call_id).unwrap().media_endpoints.is_none());
    srv.shutdown().await;
}

#[tokio::test]
async fn reject_flow_allocates_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path(), |_| {}).await;
    let addr = srv.signaling_addr();
    let mut alice = Client::online(addr, "alice", Some(41000)).await;
    let mut bob = Client::online(addr, "bob", Some(41002)).await;
    let r = alice.request(Kind::CallInvite, "bob", &invite(false)).await;
    let call_id = from_body::<CallNotice>(&r.body).unwrap().call_id;
    bob.expect(Kind::CallInvite).await;
    let r = bob.request(Kind::CallReject, "", &ctl(call_id)).await;
    assert_eq!(from_body::<CallNotice>(&r.body).unwrap().state, CallState::Rejected);
    let n: CallNotice = alice.expect_body(Kind::CallReject).await;
    assert_eq!(n.state, CallState::Rejected);
    let s = srv.hub().call_session(call_id).unwrap();
    assert_eq!(s.state, CallState::Rejected);
    assert!(s.media_endpoints.is_none());
    // a rejected call frees both parties
    let r = alice.request(Kind::CallInvite, "bob", &invite(false)).await;
    assert_eq!(r.kind, Kind::CallInvite);
    srv.shutdown().await;
}

#[tokio::test]
async fn offline_and_busy_callees() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path(), |_| {}).await;
    let addr = srv.signaling_addr();
    let mut alice = Client::online(addr, "alice", Some(41000)).await;
    let mut bob = Client::online(addr, "bob", Some(41002)).await;
    let mut carol = Client::online(addr, "carol", Some(41004)).await;
    let r = alice.request(Kind::CallInvite, "zed", &invite(false)).await;
    assert_eq!(error_code(&r), ErrorCode::CalleeOffline);

    let (call_id, ..) = ring_and_accept(&mut alice, &mut bob, false).await;
    let r = carol.request(Kind::CallInvite, "bob", &invite(false)).await;
    assert_eq!(error_code(&r), ErrorCode::CalleeBusy);
    let r = alice.request(Kind::CallInvite, "carol", &invite(false)).await;
    assert_eq!(error_code(&r), ErrorCode::CallerBusy);
    alice.request(Kind::CallEnd, "", &ctl(call_id)).await;
    srv.shutdown().await;
}

#[tokio::test]
async fn racing_invites_have_one_winner() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path(), |_| {}).await;
    let addr = srv.signaling_addr();
    let _bob = Client::online(addr, "bob", Some(41002)).await;
    let mut callers = Vec::new();
    for i in 0..6 {
        callers.push(Client::online(addr, &format!("caller{i}"), Some(41100 + i)).await);
    }
    let results = futures_join(callers).await;
    let wins = results.iter().filter(|k| **k == Kind::CallInvite).count();
    assert_eq!(wins, 1, "{results:?}");
    srv.shutdown().await;
}

async fn futures_join(callers: Vec<Client>) -> Vec<Kind> {
    let mut set = tokio::task::JoinSet::new();
    let barrier = std::sync::Arc::new(tokio::sync::Barrier::new(callers.len()));
    for mut c in callers {
        let b = barrier.clone();
        set.spawn(async move {
            b.wait().await;
            let r = c.request(Kind::CallInvite, "bob", &invite(false)).await;
            if r.kind == Kind::Error {
                assert_eq!(error_code(&r), ErrorCode::CalleeBusy);
            }
            r.kind
        });
    }
    set.join_all().await
}

#[tokio::test]
async fn disconnect_mid_call_ends_session() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path(), |_| {}).await;
    let addr = srv.signaling_addr();
    let mut alice = Client::online(addr, "alice", Some(41000)).await;
    let mut bob = Client::online(addr, "bob", Some(41002)).await;
    let (call_id, ..) = ring_and_accept(&mut alice, &mut bob, false).await;
    key_exchange(&mut alice, &mut bob, call_id).await;
    alice.expect(Kind::CallAccept).await;
    drop(bob);
    let n: CallNotice = alice.expect_body(Kind::CallEnd).await;
    assert_eq!((n.call_id, n.state), (call_id, CallState::Ended));
    assert_eq!(srv.hub().call_session(call_id).unwrap().state, CallState::Ended);
    srv.shutdown().await;
}

#[tokio::test]
async fn silent_peer_call_ends_within_presence_timeout() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path(), |c| c.heartbeat_ms = 100).await;
    let addr = srv.signaling_addr();
    let mut alice = Client::online(addr, "alice", Some(41000)).await;
    let mut bob = Client::online(addr, "bob", Some(41002)).await;
    let (call_id, ..) = ring_and_accept(&mut alice, &mut bob, false).await;
    // bob's socket stays open but he stops heartbeating
    let started = std::time::Instant::now();
    let ended = loop {
        alice.send(Kind::Presence, "", &serde_json::json!({}));
        if let Ok(env) = tokio::time::timeout(Duration::from_millis(50), alice.expect(Kind::CallEnd)).await {
            break from_body::<CallNotice>(&env.body).unwrap();
        }
    };
    assert_eq!(ended.call_id, call_id);
    assert!(started.elapsed() < Duration::from_millis(600));
    srv.shutdown().await;
}

#[tokio::test]
async fn tampered_exchange_never_goes_active() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path(), |c| c.key_exchange_timeout_ms = 300).await;
    let addr = srv.signaling_addr();
    let mut alice = Client::online(addr, "alice", Some(41000)).await;
    let mut bob = Client::online(addr, "bob", Some(41002)).await;
    let (call_id, ..) = ring_and_accept(&mut alice, &mut bob, false).await;
    srv.hub()
        .faults
        .tamper_key_exchange
        .store(1, std::sync::atomic::Ordering::SeqCst);

    let (init, ke1) = Initiator::start(call_id, CipherSuite::DEFAULT).unwrap();
    alice.send_raw(Kind::KeyExchange, "bob", ke1.encode());
    let got = bob.expect(Kind::KeyExchange).await;
    let (_resp, ke2) = Responder::respond(
        call_id,
        &KeyExchangeMessage::decode(&got.body).unwrap(),
        &[CipherSuite::DEFAULT],
    )
    .unwrap();
    bob.send_raw(Kind::KeyExchange, "alice", ke2.encode());
    let got = alice.expect(Kind::KeyExchange).await;
    assert_ne!(got.body, ke2.encode());
    // the initiator either rejects the reply outright or derives keys the
    // responder's confirmation check will refuse; either way nobody sends KE4
    let outcome = KeyExchangeMessage::decode(&got.body).and_then(|m| init.finish(&m));
    drop(outcome);

    let n: CallNotice = alice.expect_body(Kind::CallEnd).await;
    assert_eq!(n.reason.as_deref(), Some("EXCHANGE_TIMEOUT"));
    let s = srv.hub().call_session(call_id).unwrap();
    assert!(!s.states().contains(&CallState::Active));
    srv.shutdown().await;
}

#[tokio::test]
async fn relayed_media_flows_through_server_socket() {
    let dir = tempfile::tempdir().unwrap();
    let a_sock = UdpSocket::bind("127.0.0.1:0").await.unwrap();
    let b_sock = UdpSocket::bind("127.0.0.1:0").await.unwrap();
    let srv = server(dir.path(), |_| {}).await;
    let addr = srv.signaling_addr();
    let mut alice = Client::online(addr, "alice", Some(a_sock.local_addr().unwrap().port())).await;
    let mut bob = Client::online(addr, "bob", Some(b_sock.local_addr().unwrap().port())).await;
    let (call_id, a_plan, b_plan) = ring_and_accept(&mut alice, &mut bob, true).await;
    let (a, b) = (a_plan.media.unwrap(), b_plan.media.unwrap());
    assert!(a.relayed && b.relayed);
    assert_eq!(a.send_to, b.send_to);
    assert_ne!(a.send_to.port(), b_sock.local_addr().unwrap().port());

    a_sock.send_to(b"frame-a", a.send_to).await.unwrap();
    let mut buf = [0u8; 64];
    let (n, _) = tokio::time::timeout(WAIT, b_sock.recv_from(&mut buf)).await.unwrap().unwrap();
    assert_eq!(&buf[..n], b"frame-a");
    b_sock.send_to(b"frame-b", b.send_to).await.unwrap();
    let (n, _) = tokio::time::timeout(WAIT, a_sock.recv_from(&mut buf)).await.unwrap().unwrap();
    assert_eq!(&buf[..n], b"frame-b");

    alice.request(Kind::CallEnd, "", &ctl(call_id)).await;
    // the relay socket is released with the call
    tokio::time::sleep(Duration::from_millis(50)).await;
    a_sock.send_to(b"late", a.send_to).await.unwrap();
    assert!(tokio::time::timeout(Duration::from_millis(200), b_sock.recv_from(&mut buf))
        .await
        .is_err());
    srv.shutdown().await;
}
