mod common;

use std::sync::atomic::Ordering;
use std::time::Duration;

use common::*;
use peervoip_core::wire::Kind;
use serde_json::json;

#[tokio::test]
async fn receiver_blocklist_refuses_relayed_and_direct_offers() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir.path().join("srv"), |_| {}).await;
    let mut ca = node_config(&srv, &dir.path().join("a"));
    ca.blocklist = vec![];
    let mut cb = node_config(&srv, &dir.path().join("b"));
    cb.blocklist = vec!["bat".into(), "exe".into()];
    let mut a = Node::online(ca, "alice").await;
    let mut b = Node::online(cb, "bob").await;
    let src = write_file(dir.path(), "run.BAT", 1000);

    // relayed: the server has no objection, the receiving daemon refuses
    let id = a.call("offer_file", json!({"to": "bob", "path": src})).await["transfer_id"]
        .as_u64()
        .unwrap();
    let err = b.next_event(|e| e["event"] == "error").await;
    assert_eq!(err["data"]["code"], "BLOCKED_EXTENSION");
    let done = a.transfer_done(id).await;
    assert_eq!(done["state"], "failed");
    assert_eq!(done["error"], "BLOCKED_EXTENSION");

    // direct: the refusal comes back as the offer's reply
    let code = a.call_err("offer_file", json!({"to": "bob", "path": src, "direct": true})).await;
    assert_eq!(code, "BLOCKED_EXTENSION");
    assert!(!dir.path().join("b").join("run.BAT").exists());

    // the server's own blocklist still applies to relayed offers
    let exe = write_file(dir.path(), "setup.exe", 10);
    assert_eq!(a.call_err("offer_file", json!({"to": "bob", "path": exe})).await, "BLOCKED_EXTENSION");
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn paused_receiver_stalls_the_sender_until_resumed() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir.path().join("srv"), |_| {}).await;
    let mut a = Node::online(node_config(&srv, &dir.path().join("a")), "alice").await;
    let mut b = Node::online(node_config(&srv, &dir.path().join("b")), "bob").await;
    let src = write_file(dir.path(), "big.bin", 4 * 1024 * 1024);
    let id = a.call("offer_file", json!({"to": "bob", "path": src})).await["transfer_id"]
        .as_u64()
        .unwrap();
    b.next_event(|e| e["event"] == "file-offer").await;
    b.call("pause_file", json!({"transfer_id": id})).await;
    b.call("accept_file", json!({"transfer_id": id})).await;
    tokio::time::sleep(Duration::from_millis(500)).await;

    let mid = b.daemon.engine.transfer(id).unwrap();
    assert!(!mid.state.is_terminal(), "{mid:?}");
    // at most the initial credit window got through
    assert!(mid.bytes <= 16 * 64 * 1024, "{mid:?}");
    assert!(a.daemon.engine.transfer(id).unwrap().bytes <= 16 * 64 * 1024);

    let r = b.call("resume_file", json!({"transfer_id": id})).await;
    assert_eq!(r["state"], "active");
    let done = b.transfer_done(id).await;
    assert_eq!(done["state"], "complete", "{done}");
    assert_eq!(std::fs::read(done["path"].as_str().unwrap()).unwrap(), std::fs::read(&src).unwrap());
    a.transfer_done(id).await;
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn direct_transfer_bypasses_the_server() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir.path().join("srv"), |_| {}).await;
    let mut a = Node::online(node_config(&srv, &dir.path().join("a")), "alice").await;
    let mut b = Node::online(node_config(&srv, &dir.path().join("b")), "bob").await;
    let src = write_file(dir.path(), "photo.png", 1_500_000);
    let id = a
        .call("offer_file", json!({"to": "bob", "path": src, "direct": true}))
        .await["transfer_id"]
        .as_u64()
        .unwrap();
    let offer = b.next_event(|e| e["event"] == "file-offer").await;
    assert_eq!(offer["data"]["route"], "direct");
    b.call("accept_file", json!({"transfer_id": id})).await;
    let done = b.transfer_done(id).await;
    assert_eq!(done["state"], "complete");
    assert_eq!(std::fs::read(done["path"].as_str().unwrap()).unwrap(), std::fs::read(&src).unwrap());
    assert_eq!(a.transfer_done(id).await["state"], "complete");
    let m = &srv.hub().metrics;
    assert_eq!(m.received(Kind::FileChunk), 0);
    assert_eq!(m.received(Kind::FileOffer), 0);
    srv.shutdown().await;
}

#[tokio::test]
async fn corrupted_chunk_fails_the_digest_and_leaves_no_file() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir.path().join("srv"), |_| {}).await;
    srv.hub().faults.corrupt_chunk.store(2, Ordering::SeqCst);
    let mut a = Node::online(node_config(&srv, &dir.path().join("a")), "alice").await;
    let mut b = Node::online(node_config(&srv, &dir.path().join("b")), "bob").await;
    let src = write_file(dir.path(), "data.bin", 500_000);
    let id = a.call("offer_file", json!({"to": "bob", "path": src})).await["transfer_id"]
        .as_u64()
        .unwrap();
    b.next_event(|e| e["event"] == "file-offer").await;
    b.call("accept_file", json!({"transfer_id": id})).await;
    let done = b.transfer_done(id).await;
    assert_eq!(done["state"], "failed");
    assert_eq!(done["error"], "DIGEST_MISMATCH");
    let sent = a.transfer_done(id).await;
    assert_eq!(sent["error"], "DIGEST_MISMATCH", "{sent}");
    let leftovers: Vec<_> = std::fs::read_dir(dir.path().join("b")).unwrap().collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
    srv.shutdown().await;
}

#[tokio::test]
async fn declined_offer_is_reported_to_the_sender() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir.path().join("srv"), |_| {}).await;
    let mut a = Node::online(node_config(&srv, &dir.path().join("a")), "alice").await;
    let mut b = Node::online(node_config(&srv, &dir.path().join("b")), "bob").await;
    let src = write_file(dir.path(), "x.txt", 10);
    let id = a.call("offer_file", json!({"to": "bob", "path": src})).await["transfer_id"]
        .as_u64()
        .unwrap();
    b.next_event(|e| e["event"] == "file-offer").await;
    b.call("accept_file", json!({"transfer_id": id, "accept": false})).await;
    assert_eq!(a.transfer_done(id).await["state"], "declined");
    assert_eq!(b.call_err("accept_file", json!({"transfer_id": id})).await, "UNKNOWN_TRANSFER");
    srv.shutdown().await;
}
