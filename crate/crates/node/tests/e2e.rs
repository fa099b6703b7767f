mod common;

use std::time::Duration;

use common::*;
use peervoip_node::EventKind;
use serde_json::json;

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn two_daemons_chat_call_and_send_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir.path().join("srv"), |_| {}).await;
    let mut alice = Node::online(node_config(&srv, &dir.path().join("a")), "alice").await;
    let mut bob = Node::online(node_config(&srv, &dir.path().join("b")), "bob").await;

    let roster = alice.call("roster", json!({})).await;
    let users: Vec<&str> = roster["users"]
        .as_array()
        .unwrap()
        .iter()
        .map(|u| u["username"].as_str().unwrap())
        .collect();
    assert!(users.contains(&"bob"), "{roster}");

    // chat through the server
    let sent = alice.call("send_chat", json!({"to": "bob", "body": "hi bob"})).await;
    assert_eq!(sent["via"], "server");
    assert!(sent["journal_seq"].is_u64(), "{sent}");
    let msg = bob.next_event(|e| e["event"] == EventKind::MessageReceived.as_str()).await;
    assert_eq!(msg["data"]["from"], "alice");
    assert_eq!(msg["data"]["body"], "hi bob");

    // a short call
    let call_id = connect_call(&mut alice, &mut bob).await;
    tokio::time::sleep(Duration::from_secs(3)).await;
    let live = bob.call("get_stats", json!({})).await;
    assert_eq!(live["call"]["state"], "active", "{live}");
    let summary = alice.call("end_call", json!({"call_id": call_id})).await;
    assert!(summary["stats"]["frames_sent"].as_u64().unwrap() > 100, "{summary}");
    assert!(summary["stats"]["frames_received"].as_u64().unwrap() > 100, "{summary}");
    assert_eq!(summary["stats"]["auth_failures"], 0);
    let ended = bob.call_state("ended").await;
    assert_eq!(ended["data"]["call_id"], call_id);
    let stats = bob.call("get_stats", json!({})).await;
    assert!(stats["call"].is_null());
    assert!(stats["last_call"]["stats"]["frames_received"].as_u64().unwrap() > 0, "{stats}");

    // a file through the relay
    let src = write_file(dir.path(), "notes.txt", 300_000);
    let r = alice.call("offer_file", json!({"to": "bob", "path": src})).await;
    let id = r["transfer_id"].as_u64().unwrap();
    let offer = bob.next_event(|e| e["event"] == "file-offer").await;
    assert_eq!(offer["data"]["transfer_id"], id);
    assert_eq!(offer["data"]["size"], 300_000);
    bob.call("accept_file", json!({"transfer_id": id})).await;
    let done = bob.transfer_done(id).await;
    assert_eq!(done["state"], "complete", "{done}");
    let got = std::fs::read(done["path"].as_str().unwrap()).unwrap();
    assert_eq!(got, std::fs::read(&src).unwrap());
    assert_eq!(alice.transfer_done(id).await["state"], "complete");

    alice.daemon.shutdown().await;
    bob.daemon.shutdown().await;
    srv.shutdown().await;
}

#[tokio::test]
async fn calling_an_offline_user_reports_callee_offline() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir.path().join("srv"), |_| {}).await;
    let carol = Node::online(node_config(&srv, dir.path()), "carol").await;
    carol.daemon.shutdown().await;
    let alice = Node::online(node_config(&srv, dir.path()), "alice").await;
    assert_eq!(alice.call_err("start_call", json!({"to": "carol"})).await, "CALLEE_OFFLINE");
    // the failed attempt leaves no call behind
    assert!(alice.call("get_stats", json!({})).await["call"].is_null());
    assert_eq!(alice.call_err("end_call", json!({})).await, "NO_ACTIVE_CALL");
    srv.shutdown().await;
}

#[tokio::test]
async fn requests_before_login_fail_with_not_logged_in() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir.path().join("srv"), |_| {}).await;
    let n = Node::start(node_config(&srv, dir.path()), "dave").await;
    for (m, p) in [
        ("send_chat", json!({"to": "x", "body": "hi"})),
        ("start_call", json!({"to": "x"})),
        ("roster", json!({})),
        ("logout", json!({})),
    ] {
        assert_eq!(n.call_err(m, p).await, "NOT_LOGGED_IN", "{m}");
    }
    assert_eq!(
        n.call_err("login", json!({"username": "dave", "password": "wrong password"})).await,
        "BAD_CREDENTIALS"
    );
    srv.shutdown().await;
}

#[tokio::test]
async fn rejected_call_ends_on_both_sides() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir.path().join("srv"), |_| {}).await;
    let mut a = Node::online(node_config(&srv, dir.path()), "alice").await;
    let mut b = Node::online(node_config(&srv, dir.path()), "bob").await;
    let id = a.call("start_call", json!({"to": "bob"})).await["call_id"].as_u64().unwrap();
    b.next_event(|e| e["event"] == "call-incoming").await;
    b.call("reject_call", json!({"call_id": id})).await;
    let ev = a.call_state("rejected").await;
    assert_eq!(ev["data"]["call_id"], id);
    // a busy callee is refused while a call is up
    let c = Node::online(node_config(&srv, dir.path()), "carol").await;
    let _ = connect_call(&mut a, &mut b).await;
    let code = c.call_err("start_call", json!({"to": "bob"})).await;
    assert_eq!(code, "CALLEE_BUSY");
    srv.shutdown().await;
}
