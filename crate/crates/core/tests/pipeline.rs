//! Cross-module paths through the public API: a sealed signaling hop over
//! a shaped link, and a voice stream from source to playout over lossy UDP.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use peervoip_core::conn::{accept_secure, connect_secure};
use peervoip_core::crypto::{exchange_in_memory, CipherSuite};
use peervoip_core::media::audio::{AudioSource, ChirpSource};
use peervoip_core::media::jitter::{JitterBuffer, Playout};
use peervoip_core::media::packetizer::{Depacketizer, Packetizer, StreamParams};
use peervoip_core::shaper::{AccessLink, LinkConfig, LinkShape, ShapedUdp};
use peervoip_core::wire::{decode_media_frame, encode_media_frame};
use peervoip_core::{Kind, SignalEnvelope};
use tokio::net::UdpSocket;

#[tokio::test]
async fn sealed_hop_over_shaped_link_preserves_order_and_bodies() {
    let (a, b) = tokio::io::duplex(64 * 1024);
    let link = AccessLink::new(LinkShape::symmetric(LinkConfig::rate(8_000_000).with_latency_ms(5.0)));
    let client = link.stream(a);
    let (c, s) = tokio::join!(connect_secure(client), accept_secure(Box::new(b)));
    let (c, mut s) = (c.unwrap(), s.unwrap());
    assert_eq!(c.keys.send.raw(), s.keys.receive.raw());

    let started = Instant::now();
    for i in 0..50u32 {
        let body = format!("message {i}").into_bytes();
        c.sender.send(SignalEnvelope::new(Kind::Chat, "alice", "bob", 0, body)).unwrap();
    }
    let mut last_id = 0;
    for i in 0..50u32 {
        let env = s.reader.next().await.unwrap().expect("open connection");
        assert_eq!(env.kind, Kind::Chat);
        assert_eq!(env.body, format!("message {i}").into_bytes());
        assert!(env.id > last_id);
        last_id = env.id;
    }
    // the added latency applies to the handshake and to every write after it
    assert!(started.elapsed() >= Duration::from_millis(5));
}

#[tokio::test]
async fn lossy_voice_stream_plays_in_order_and_conceals_gaps() {
    const FRAMES: u64 = 300;
    let (tx_keys, rx_keys) = exchange_in_memory(11, CipherSuite::Aes256Gcm).unwrap();
    let params = StreamParams {
        source_id: 0xfeed,
        initial_seq: 65_500,
        initial_ts: 7,
    };
    let rx_sock = UdpSocket::bind("127.0.0.1:0").await.unwrap();
    let to = rx_sock.local_addr().unwrap();
    let shape = LinkShape {
        egress: LinkConfig::unlimited().with_drop(0.1, 99),
        ingress: LinkConfig::unlimited(),
    };
    let tx_sock = ShapedUdp::with_trace(UdpSocket::bind("127.0.0.1:0").await.unwrap(), shape);

    let mut source = ChirpSource::new(300.0, 3_000.0, 1.0, 8_000);
    let mut packetizer = Packetizer::with_key(params, tx_keys.send.clone());
    let mut sent = Vec::new();
    for i in 0..FRAMES {
        let pcm = source.next_frame();
        let frame = packetizer.packetize(&pcm, i == 0).unwrap();
        tx_sock.send_to(&encode_media_frame(&frame).unwrap(), to).await.unwrap();
        sent.push(pcm);
    }
    let dropped: HashSet<u64> = tx_sock
        .trace()
        .unwrap()
        .iter()
        .filter(|e| e.dropped)
        .map(|e| e.index)
        .collect();
    assert!(!dropped.is_empty() && dropped.len() < 60, "{} dropped", dropped.len());

    let mut depacketizer = Depacketizer::for_stream(rx_keys.receive.clone(), params);
    let mut arrived = std::collections::BTreeMap::new();
    let mut buf = [0u8; 2048];
    let expected = FRAMES as usize - dropped.len();
    for _ in 0..expected {
        let (n, _) = tokio::time::timeout(Duration::from_secs(5), rx_sock.recv_from(&mut buf))
            .await
            .expect("datagram")
            .unwrap();
        let opened = depacketizer.depacketize(&decode_media_frame(&buf[..n]).unwrap()).unwrap();
        let offset = opened.extended_seq - params.initial_seq as u64;
        assert!(!dropped.contains(&offset));
        assert_eq!(opened.pcm, sent[offset as usize]);
        arrived.insert(offset, opened);
    }

    // one push and one tick per 20 ms slot, then drain
    let mut jitter = JitterBuffer::new(2);
    let mut played = Vec::new();
    for slot in 0..FRAMES {
        if let Some(f) = arrived.get(&slot) {
            jitter.push(f.extended_seq, &f.pcm);
        }
        played.push(jitter.tick());
    }
    while !jitter.is_empty() {
        played.push(jitter.tick());
    }
    let mut expected_seq = None;
    let mut concealed = 0;
    for p in played {
        let seq = match p {
            Playout::Waiting => continue,
            Playout::Frame { seq, pcm } => {
                assert_eq!(*pcm, sent[(seq - params.initial_seq as u64) as usize]);
                seq
            }
            Playout::Concealed { seq } => {
                concealed += 1;
                assert!(dropped.contains(&(seq - params.initial_seq as u64)));
                seq
            }
        };
        if let Some(e) = expected_seq {
            assert_eq!(seq, e);
        }
        expected_seq = Some(seq + 1);
    }
    // the sequence wrapped past 65535 without a discontinuity
    assert!(expected_seq.unwrap() > 65_536);
    let stats = jitter.stats();
    assert_eq!(stats.played as usize, expected);
    assert_eq!(stats.lost, concealed);
}
