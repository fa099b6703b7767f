mod common;

use common::*;
use serde_json::json;

#[tokio::test]
async fn snapshot_reflects_state_at_subscription() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir.path().join("srv"), |_| {}).await;
    let a = Node::online(node_config(&srv, dir.path()), "alice").await;
    let _b = Node::online(node_config(&srv, dir.path()), "bob").await;
    let late = a.daemon.client().await.unwrap();
    let mut rx = late.subscribe().await.unwrap();
    let first = rx.recv().await.unwrap();
    assert_eq!(first["event"], "snapshot");
    assert_eq!(first["seq"], 0);
    assert_eq!(first["data"]["username"], "alice");
    assert_eq!(first["data"]["connected"], true);
    srv.shutdown().await;
}

#[tokio::test]
async fn call_incoming_precedes_any_call_state_for_that_call() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir.path().join("srv"), |_| {}).await;
    let mut a = Node::online(node_config(&srv, dir.path()), "alice").await;
    let mut b = Node::online(node_config(&srv, dir.path()), "bob").await;
    let id = connect_call(&mut a, &mut b).await;
    a.call("end_call", json!({"call_id": id})).await;
    b.call_state("ended").await;

    // replay bob's view from a fresh subscriber and check ordering there too
    let fresh = b.daemon.client().await.unwrap();
    let mut rx = fresh.subscribe().await.unwrap();
    assert_eq!(rx.recv().await.unwrap()["event"], "snapshot");
    let id2 = a.call("start_call", json!({"to": "bob"})).await["call_id"].as_u64().unwrap();
    let mut seen_incoming = false;
    let mut last_seq = 0;
    loop {
        let ev = tokio::time::timeout(WAIT, rx.recv()).await.unwrap().unwrap();
        let seq = ev["seq"].as_u64().unwrap();
        assert_eq!(seq, last_seq + 1, "gap in event sequence");
        last_seq = seq;
        match ev["event"].as_str().unwrap() {
            "call-incoming" if ev["data"]["call_id"] == id2 => {
                seen_incoming = true;
                b.call("accept_call", json!({"call_id": id2})).await;
            }
            "call-state" if ev["data"]["call_id"] == id2 => {
                assert!(seen_incoming, "call-state before call-incoming: {ev}");
                if ev["data"]["state"] == "active" {
                    break;
                }
            }
            _ => {}
        }
    }
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn a_thousand_messages_arrive_gap_free_and_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(&dir.path().join("srv"), |_| {}).await;
    let a = Node::online(node_config(&srv, dir.path()), "alice").await;
    let b = Node::online(node_config(&srv, dir.path()), "bob").await;
    let watcher = b.daemon.client().await.unwrap();
    let mut rx = watcher.subscribe().await.unwrap();
    assert_eq!(rx.recv().await.unwrap()["seq"], 0);

    let sender = tokio::spawn(async move {
        for i in 0..1000 {
            a.ctl
                .call("send_chat", json!({"to": "bob", "body": format!("m{i}")}))
                .await
                .unwrap();
        }
        a
    });
    let mut n = 0;
    let mut expected_seq = 1;
    while n < 1000 {
        let ev = tokio::time::timeout(WAIT, rx.recv()).await.unwrap().unwrap();
        assert_eq!(ev["seq"], expected_seq);
        expected_seq += 1;
        if ev["event"] == "message-received" {
            assert_eq!(ev["data"]["body"], format!("m{n}"));
            n += 1;
        }
    }
    sender.await.unwrap();
    srv.shutdown().await;
}
