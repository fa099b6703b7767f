mod common;

use std::sync::atomic::Ordering;
use std::time::Duration;

use common::*;
use peervoip_core::crypto::sha256_digest;
use peervoip_core::files::{
    Chunker, FileChunk, FileError, FileManifest, Reassembler, ReassemblyStatus, CHUNK_SIZE, RELAY_WINDOW_BYTES,
    RELAY_WINDOW_CHUNKS,
};
use peervoip_core::protocol::{from_body, ErrorCode, FileAcceptBody};
use peervoip_core::wire::Kind;
use rand::{RngCore, SeedableRng};

fn random_bytes(len: usize, seed: u64) -> Vec<u8> {
    let mut data = vec![0u8; len];
    rand_chacha::ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut data);
    data
}

fn manifest(id: u64, name: &str, data: &[u8]) -> FileManifest {
    FileManifest {
        transfer_id: id,
        filename: name.into(),
        size: data.len() as u64,
        digest: sha256_digest(data),
        chunk_size: CHUNK_SIZE as u32,
    }
}

fn accept(id: u64, credits: u32) -> FileAcceptBody {
    FileAcceptBody {
        transfer_id: id,
        accept: true,
        credits,
        code: None,
    }
}

/// Streams `data` from `tx` to `rx` with credit flow control; returns the
/// receiver's outcome.
async fn transfer(tx: &mut Client, rx: &mut Client, id: u64, data: &[u8]) -> Result<Vec<u8>, FileError> {
    let m = manifest(id, "blob.bin", data);
    let r = tx.request(Kind::FileOffer, &rx.name.clone(), &m).await;
    assert_eq!(r.kind, Kind::FileOffer, "{:?}", String::from_utf8_lossy(&r.body));
    let offered: FileManifest = rx.expect_body(Kind::FileOffer).await;
    assert_eq!(offered, m);
    rx.send(Kind::FileAccept, &tx.name.clone(), &accept(id, RELAY_WINDOW_CHUNKS as u32));

    let mut credits = 0u32;
    let mut chunker = Chunker::new(data, id);
    let mut reasm = Reassembler::new(m, Vec::new());
    let mut sent_all = false;
    loop {
        while !sent_all && credits > 0 {
            match chunker.next_chunk().unwrap() {
                Some(c) => {
                    tx.send_raw(Kind::FileChunk, &rx.name.clone(), c.encode());
                    credits -= 1;
                    sent_all = c.is_final();
                }
                None => sent_all = true,
            }
        }
        tokio::select! {
            a = tx.expect_body::<FileAcceptBody>(Kind::FileAccept) => {
                assert!(a.accept);
                credits += a.credits;
            }
            env = rx.expect(Kind::FileChunk) => {
                let chunk = FileChunk::decode(&env.body).unwrap();
                match reasm.push(&chunk)? {
                    ReassemblyStatus::Complete { .. } => return Ok(reasm.into_sink()),
                    ReassemblyStatus::InProgress { .. } => {
                        rx.send(Kind::FileAccept, &tx.name.clone(), &accept(id, 1));
                    }
                }
            }
        }
    }
}

#[tokio::test]
async fn twenty_megabytes_through_bounded_relay() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path(), |_| {}).await;
    let addr = srv.signaling_addr();
    let mut alice = Client::online(addr, "alice", None).await;
    let mut bob = Client::online(addr, "bob", None).await;
    let data = random_bytes(20_000_000, 1);
    let got = transfer(&mut alice, &mut bob, 77, &data).await.unwrap();
    assert!(got == data);
    let hw = srv.hub().metrics.transfer_high_water.load(Ordering::SeqCst);
    assert!(hw > 0 && hw <= RELAY_WINDOW_BYTES as u64, "high water {hw}");

    // nothing of the payload reached the server's disk
    let marker = &data[5_000_000..5_000_032];
    for entry in walk(dir.path()) {
        let bytes = std::fs::read(&entry).unwrap();
        assert!(!bytes.windows(marker.len()).any(|w| w == marker), "{}", entry.display());
    }
    srv.shutdown().await;
}

fn walk(p: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(p).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[tokio::test]
async fn boundary_sizes_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path(), |_| {}).await;
    let addr = srv.signaling_addr();
    let mut alice = Client::online(addr, "alice", None).await;
    let mut bob = Client::online(addr, "bob", None).await;
    for (i, size) in [0, 1, CHUNK_SIZE - 1, CHUNK_SIZE, CHUNK_SIZE + 1].into_iter().enumerate() {
        let data = random_bytes(size, i as u64);
        let got = transfer(&mut alice, &mut bob, 100 + i as u64, &data).await.unwrap();
        assert_eq!(got, data, "size {size}");
    }
    srv.shutdown().await;
}

#[tokio::test]
async fn corrupted_chunk_fails_digest() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path(), |_| {}).await;
    let addr = srv.signaling_addr();
    let mut alice = Client::online(addr, "alice", None).await;
    let mut bob = Client::online(addr, "bob", None).await;
    srv.hub().faults.corrupt_chunk.store(3, Ordering::SeqCst);
    let data = random_bytes(10 * CHUNK_SIZE, 9);
    let r = transfer(&mut alice, &mut bob, 5, &data).await;
    assert!(matches!(r, Err(FileError::DigestMismatch)), "{r:?}");
    srv.shutdown().await;
}

#[tokio::test]
async fn offers_are_validated_at_the_server() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path(), |c| c.max_file_bytes = 1000).await;
    let addr = srv.signaling_addr();
    let mut alice = Client::online(addr, "alice", None).await;
    let mut bob = Client::online(addr, "bob", None).await;
    let r = alice.request(Kind::FileOffer, "bob", &manifest(1, "malware.EXE", b"MZ")).await;
    assert_eq!(error_code(&r), ErrorCode::BlockedExtension);
    let r = alice.request(Kind::FileOffer, "bob", &manifest(2, "big.bin", &[0; 1001])).await;
    assert_eq!(error_code(&r), ErrorCode::FileTooLarge);
    let r = alice.request(Kind::FileOffer, "carol", &manifest(3, "a.txt", b"x")).await;
    assert_eq!(error_code(&r), ErrorCode::RecipientOffline);
    let r = alice
        .request(Kind::FileOffer, "bob", &manifest(4, "../../etc/passwd", b"root"))
        .await;
    assert_eq!(r.kind, Kind::FileOffer);
    let m: FileManifest = bob.expect_body(Kind::FileOffer).await;
    assert_eq!(m.filename, "passwd");
    // chunks before acceptance go nowhere
    alice.send_raw(Kind::FileChunk, "bob", FileChunk::data(4, 0, b"root".to_vec()).encode());
    assert_eq!(error_code(&alice.expect(Kind::Error).await), ErrorCode::UnknownTransfer);
    srv.shutdown().await;
}

#[tokio::test]
async fn sender_disconnect_reaches_receiver_and_spares_siblings() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path(), |_| {}).await;
    let addr = srv.signaling_addr();
    let mut alice = Client::online(addr, "alice", None).await;
    let mut bob = Client::online(addr, "bob", None).await;
    let mut carol = Client::online(addr, "carol", None).await;

    let data = random_bytes(3 * CHUNK_SIZE, 4);
    carol.request(Kind::FileOffer, "bob", &manifest(9, "c.bin", &data)).await;
    bob.expect(Kind::FileOffer).await;
    bob.send(Kind::FileAccept, "carol", &accept(9, 1));
    carol.expect(Kind::FileAccept).await;
    drop(carol);
    let a: FileAcceptBody = bob.expect_body(Kind::FileAccept).await;
    assert_eq!((a.transfer_id, a.accept, a.code), (9, false, Some(ErrorCode::PeerDisconnected)));

    let got = transfer(&mut alice, &mut bob, 10, &data).await.unwrap();
    assert_eq!(got, data);
    srv.shutdown().await;
}

#[tokio::test]
async fn ten_parallel_transfers_stay_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path(), |_| {}).await;
    let addr = srv.signaling_addr();
    let mut jobs = tokio::task::JoinSet::new();
    for i in 0..10u64 {
        let mut tx = Client::online(addr, &format!("tx{i}"), None).await;
        let mut rx = Client::online(addr, &format!("rx{i}"), None).await;
        jobs.spawn(async move {
            let data = random_bytes(1_000_000, i);
            let got = transfer(&mut tx, &mut rx, 1000 + i, &data).await.unwrap();
            assert!(got == data);
        });
    }
    tokio::time::timeout(Duration::from_secs(60), jobs.join_all()).await.unwrap();
    let total = srv.hub().metrics.relay_high_water.load(Ordering::SeqCst);
    assert!(total <= 10 * RELAY_WINDOW_BYTES as u64, "{total}");
    assert_eq!(srv.hub().metrics.relay_in_flight.load(Ordering::SeqCst), 0);
    srv.shutdown().await;
}

#[tokio::test]
async fn declined_offer_is_forwarded() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path(), |_| {}).await;
    let addr = srv.signaling_addr();
    let mut alice = Client::online(addr, "alice", None).await;
    let mut bob = Client::online(addr, "bob", None).await;
    alice.request(Kind::FileOffer, "bob", &manifest(8, "a.txt", b"abc")).await;
    bob.expect(Kind::FileOffer).await;
    bob.send(
        Kind::FileAccept,
        "alice",
        &FileAcceptBody {
            transfer_id: 8,
            accept: false,
            credits: 0,
            code: None,
        },
    );
    let a: FileAcceptBody = alice.expect_body(Kind::FileAccept).await;
    assert!(!a.accept);
    let env = alice.request(Kind::FileAccept, "bob", &accept(8, 1)).await;
    assert_eq!(from_body::<peervoip_core::protocol::ErrorBody>(&env.body).unwrap().code, ErrorCode::UnknownTransfer);
    srv.shutdown().await;
}

#[tokio::test]
async fn verdict_after_the_final_chunk_reaches_the_sender() {
    let dir = tempfile::tempdir().unwrap();
    let srv = server(dir.path(), |_| {}).await;
    srv.hub().faults.corrupt_chunk.store(0, Ordering::SeqCst);
    let addr = srv.signaling_addr();
    let mut alice = Client::online(addr, "alice", None).await;
    let mut bob = Client::online(addr, "bob", None).await;
    let data = random_bytes(1000, 3);
    let err = transfer(&mut alice, &mut bob, 31, &data).await.unwrap_err();
    assert!(matches!(err, FileError::DigestMismatch), "{err:?}");
    assert_eq!(srv.hub().metrics_snapshot().active_transfers, 1);

    // late chunks are refused once the final one went through
    let id = alice.send_raw(Kind::FileChunk, "bob", FileChunk::data(31, 1, vec![0; 4]).encode());
    let late = alice.reply_to(id).await;
    assert_eq!(late.kind, Kind::Error);

    bob.send(
        Kind::FileAccept,
        "alice",
        &FileAcceptBody {
            transfer_id: 31,
            accept: false,
            credits: 0,
            code: Some(ErrorCode::DigestMismatch),
        },
    );
    // earlier credit grants may still be queued ahead of the verdict
    let v = loop {
        let v: FileAcceptBody = alice.expect_body(Kind::FileAccept).await;
        if !v.accept {
            break v;
        }
    };
    assert_eq!(v.code, Some(ErrorCode::DigestMismatch));
    assert_eq!(srv.hub().metrics_snapshot().active_transfers, 0);
    srv.shutdown().await;
}
