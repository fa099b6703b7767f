//! Property checks run by the acceptance gate alongside the scenarios:
//! media crypto, route selection, account security and decoder fuzzing.

use std::collections::{BTreeMap, HashSet};
use std::net::SocketAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use peervoip_core::crypto::{
    self, CipherSuite, FrameNonce, FrameSealer, Initiator, KeyExchangeMessage, Responder, SessionKeys,
};
use peervoip_core::files::Blocklist;
use peervoip_core::media::audio::FRAME_BYTES;
use peervoip_core::media::packetizer::{Depacketizer, Packetizer, StreamParams};
use peervoip_core::protocol::{to_body, LoginRequest};
use peervoip_core::routing::{ProxyGraph, Route, RouteError};
use peervoip_core::shaper::LinkShape;
use peervoip_core::wire::{self, decode_envelope, decode_media_frame, encode_envelope, encode_media_frame, WireError};
use peervoip_core::{Kind, SignalEnvelope};
use peervoip_node::EventKind;
use peervoip_server::{Server, ServerConfig};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::testbed::{engine_on, TestBed, EVENT_WAIT};
use crate::BenchError;

/// Outcome of one property check; `pass` is the verdict, the rest is evidence.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub details: Vec<String>,
    pub elapsed_s: f64,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            pass: true,
            details: Vec::new(),
            elapsed_s: 0.0,
        }
    }

    fn expect(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if !ok {
            self.pass = false;
            self.details.push(format!("FAILED: {what}"));
        } else {
            self.details.push(what);
        }
    }
}

fn suites() -> [CipherSuite; 2] {
    [CipherSuite::ChaCha20Poly1305, CipherSuite::Aes256Gcm]
}

/// Keys for one call, with every handshake message pushed through its wire encoding.
fn agree(context: u64, suite: CipherSuite) -> Result<(SessionKeys, SessionKeys), String> {
    let wire = |m: &KeyExchangeMessage| KeyExchangeMessage::decode(&m.encode()).map_err(|e| e.to_string());
    let (init, m1) = Initiator::start(context, suite).map_err(|e| e.to_string())?;
    let (resp, m2) = Responder::respond(context, &wire(&m1)?, &suites()).map_err(|e| e.to_string())?;
    let (caller, m3) = init.finish(&wire(&m2)?).map_err(|e| e.to_string())?;
    let (callee, _m4) = resp.finish(&wire(&m3)?).map_err(|e| e.to_string())?;
    Ok((caller, callee))
}

fn random_pcm(rng: &mut ChaCha8Rng) -> [u8; FRAME_BYTES] {
    let mut pcm = [0u8; FRAME_BYTES];
    rng.fill_bytes(&mut pcm);
    pcm
}

fn random_params(rng: &mut ChaCha8Rng) -> StreamParams {
    StreamParams {
        source_id: rng.gen(),
        initial_seq: rng.gen(),
        initial_ts: rng.gen(),
    }
}

/// open(seal(x)) == x, exhaustive single-byte mutation, nonce uniqueness
/// and key agreement.
pub fn crypto_properties(seed: u64) -> Check {
    let started = Instant::now();
    let mut check = Check::new("crypto properties");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // round trip through packetize, wire encode/decode and open
    let mut identical = 0usize;
    let mut frames = 0usize;
    for batch in 0..100u64 {
        let suite = suites()[batch as usize % 2];
        let (a, b) = match agree(batch, suite) {
            Ok(k) => k,
            Err(e) => {
                check.expect(false, format!("key agreement failed: {e}"));
                return check;
            }
        };
        let params = random_params(&mut rng);
        let mut tx = Packetizer::with_key(params, a.send.clone());
        let mut rx = Depacketizer::for_stream(b.receive.clone(), params);
        for _ in 0..100 {
            let pcm = random_pcm(&mut rng);
            frames += 1;
            let opened = tx
                .packetize(&pcm, false)
                .ok()
                .and_then(|f| encode_media_frame(&f).ok())
                .and_then(|w| decode_media_frame(&w).ok())
                .and_then(|f| rx.depacketize(&f).ok());
            if opened.is_some_and(|o| o.pcm == pcm) {
                identical += 1;
            }
        }
    }
    check.expect(identical == frames && frames == 10_000, format!("open(seal(x)) == x on {identical}/{frames} random frames"));

    // every single-byte change to a sealed frame must be rejected
    let (rejected, total, accepted) = mutation_sweep(&mut rng, 100);
    check.expect(
        accepted == 0 && rejected == total,
        format!("{rejected}/{total} single-byte mutations of 100 frames rejected ({accepted} accepted)"),
    );

    // nonce uniqueness over a simulated call, recovered independently from the wire
    let (unique, n, confirmed) = nonce_sweep(&mut rng, 1_000_000);
    check.expect(
        unique == n && confirmed == n,
        format!("{unique}/{n} distinct nonces over a {n}-frame call; {confirmed} confirmed by decryption"),
    );
    let mut sealer = FrameSealer::new(crypto::AeadKey::new(CipherSuite::DEFAULT, [7u8; 32]));
    let nonce = FrameNonce::new(1, 0, 5, 0);
    let first = sealer.seal(5, &nonce, b"", b"x").is_ok();
    let reuse = sealer.seal(5, &nonce, b"", b"x").is_err();
    check.expect(first && reuse, "sealer refuses a repeated sequence number");

    // key agreement: both sides equal, nothing shared between calls
    let mut matched = 0;
    let mut keys = HashSet::new();
    let mut digests = HashSet::new();
    for call in 0..100u64 {
        let suite = suites()[call as usize % 2];
        match agree(1_000 + call, suite) {
            Ok((caller, callee)) => {
                if caller.send.raw() == callee.receive.raw()
                    && caller.receive.raw() == callee.send.raw()
                    && caller.transcript_digest() == callee.transcript_digest()
                {
                    matched += 1;
                }
                keys.insert(*caller.send.raw().expose());
                keys.insert(*caller.receive.raw().expose());
                digests.insert(*caller.transcript_digest());
            }
            Err(e) => check.details.push(format!("call {call}: {e}")),
        }
    }
    check.expect(
        matched == 100 && keys.len() == 200 && digests.len() == 100,
        format!("{matched}/100 calls agree byte for byte; {} distinct directional keys of 200", keys.len()),
    );
    check.elapsed_s = started.elapsed().as_secs_f64();
    check
}

/// Returns (rejected, total, accepted) over every position and every
/// non-zero XOR delta of `frames` sealed frames.
fn mutation_sweep(rng: &mut ChaCha8Rng, frames: usize) -> (u64, u64, u64) {
    let (a, b) = agree(77, CipherSuite::DEFAULT).expect("in-memory agreement");
    let params = random_params(rng);
    let mut tx = Packetizer::with_key(params, a.send.clone());
    let sealed: Vec<Vec<u8>> = (0..frames)
        .map(|_| {
            let f = tx.packetize(&random_pcm(rng), false).expect("packetize");
            encode_media_frame(&f).expect("encode")
        })
        .collect();
    let receive = b.receive.clone();
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).clamp(1, 8);
    let per = sealed.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = sealed
            .chunks(per.max(1))
            .map(|chunk| {
                let receive = receive.clone();
                s.spawn(move || {
                    let (mut rejected, mut total, mut accepted) = (0u64, 0u64, 0u64);
                    for original in chunk {
                        // the untouched frame opens
                        let mut rx = Depacketizer::for_stream(receive.clone(), params);
                        let ok = decode_media_frame(original).ok().and_then(|f| rx.depacketize(&f).ok());
                        assert!(ok.is_some(), "unmodified frame must open");
                        let mut buf = original.clone();
                        for pos in 0..buf.len() {
                            for delta in 1..=255u8 {
                                buf[pos] ^= delta;
                                total += 1;
                                let mut rx = Depacketizer::for_stream(receive.clone(), params);
                                match decode_media_frame(&buf).map(|f| rx.depacketize(&f)) {
                                    Ok(Ok(_)) => accepted += 1,
                                    _ => rejected += 1,
                                }
                                buf[pos] ^= delta;
                            }
                        }
                    }
                    (rejected, total, accepted)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("mutation worker"))
            .fold((0, 0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2))
    })
}

/// Seals `n` frames of one stream and rebuilds each nonce from the wire
/// header with a local sequence unwrapper. Returns (distinct, n, confirmed),
/// where confirmed counts frames that open under the rebuilt nonce.
fn nonce_sweep(rng: &mut ChaCha8Rng, n: usize) -> (usize, usize, usize) {
    let (a, _) = agree(99, CipherSuite::DEFAULT).expect("in-memory agreement");
    let key = a.send.clone();
    let params = StreamParams {
        // start close to the 16-bit wrap so the epoch advances early
        initial_seq: u16::MAX - 10,
        ..random_params(rng)
    };
    let mut tx = Packetizer::with_key(params, key.clone());
    let pcm = [0u8; FRAME_BYTES];
    let mut seen = HashSet::with_capacity(n);
    let mut confirmed = 0;
    let mut ext: u64 = params.initial_seq as u64;
    let mut last_seq: Option<u16> = None;
    for _ in 0..n {
        let Ok(frame) = tx.packetize(&pcm, false) else { break };
        if let Some(prev) = last_seq {
            ext += frame.sequence.wrapping_sub(prev) as u64;
        }
        last_seq = Some(frame.sequence);
        let nonce = FrameNonce::new(frame.source_id, (ext >> 16) as u16, frame.sequence, frame.timestamp);
        seen.insert(*nonce.bytes());
        if crypto::open(&key, nonce.bytes(), &frame.header_bytes(), &frame.ciphertext).is_ok() {
            confirmed += 1;
        }
    }
    (seen.len(), n, confirmed)
}

/// Every simple path by depth-first search; best by (cost, id sequence).
pub fn exhaustive_route(g: &ProxyGraph, src: &str, dst: &str) -> Option<Route> {
    fn walk(g: &ProxyGraph, dst: &str, path: &mut Vec<String>, cost: f64, best: &mut Option<Route>) {
        let at = path.last().expect("non-empty").clone();
        if at == dst {
            let better = best
                .as_ref()
                .is_none_or(|b| cost < b.cost_ms || (cost == b.cost_ms && *path < b.proxies));
            if better {
                *best = Some(Route {
                    proxies: path.clone(),
                    cost_ms: cost,
                });
            }
            return;
        }
        let next: Vec<(String, f64)> = g.neighbors(&at).map(|(n, w)| (n.to_string(), w)).collect();
        for (n, w) in next {
            if path.contains(&n) {
                continue;
            }
            path.push(n);
            walk(g, dst, path, cost + w, best);
            path.pop();
        }
    }
    let mut best = None;
    walk(g, dst, &mut vec![src.to_string()], 0.0, &mut best);
    best
}

/// Dijkstra against exhaustive enumeration on `graphs` random graphs of
/// two to six proxies. Small integer RTTs make equal-cost ties common.
pub fn routing_oracle(seed: u64, graphs: usize) -> Check {
    let started = Instant::now();
    let mut check = Check::new("routing oracle");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pairs, mut mismatches, mut ties, mut unreachable) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..graphs {
        let n = rng.gen_range(2..=6);
        let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let mut g = ProxyGraph::new();
        for id in &ids {
            g.add_proxy(id);
        }
        let density = rng.gen_range(0.2..0.9);
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(density) {
                    g.set_rtt(&ids[i], &ids[j], rng.gen_range(1..=6) as f64).expect("known proxies");
                }
            }
        }
        for s in &ids {
            for d in &ids {
                pairs += 1;
                let got = g.shortest_route(s, d);
                let want = exhaustive_route(&g, s, d);
                let same = match (&got, &want) {
                    (Ok(r), Some(w)) => r == w,
                    (Err(RouteError::Unreachable(..)), None) => {
                        unreachable += 1;
                        true
                    }
                    _ => false,
                };
                if !same {
                    mismatches += 1;
                    if check.details.len() < 5 {
                        check.details.push(format!("{s}->{d}: dijkstra {got:?}, exhaustive {want:?}"));
                    }
                }
                if let Some(w) = &want {
                    let equal_cost = count_equal_cost(&g, s, d, w.cost_ms);
                    if equal_cost > 1 {
                        ties += 1;
                    }
                }
            }
        }
    }
    check.elapsed_s = started.elapsed().as_secs_f64();
    check.expect(
        mismatches == 0,
        format!("{graphs} graphs, {pairs} pairs, {mismatches} mismatches ({ties} with tied costs, {unreachable} unreachable)"),
    );
    check.expect(check.elapsed_s <= 30.0, format!("runtime {:.2} s (limit 30 s)", check.elapsed_s));
    check
}

fn count_equal_cost(g: &ProxyGraph, src: &str, dst: &str, cost: f64) -> usize {
    fn walk(g: &ProxyGraph, dst: &str, path: &mut Vec<String>, c: f64, target: f64, n: &mut usize) {
        let at = path.last().expect("non-empty").clone();
        if at == dst {
            if c == target {
                *n += 1;
            }
            return;
        }
        let next: Vec<(String, f64)> = g.neighbors(&at).map(|(n, w)| (n.to_string(), w)).collect();
        for (nb, w) in next {
            if !path.contains(&nb) {
                path.push(nb);
                walk(g, dst, path, c + w, target, n);
                path.pop();
            }
        }
    }
    let mut n = 0;
    walk(g, dst, &mut vec![src.to_string()], 0.0, cost, &mut n);
    n
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct FuzzTally {
    pub inputs: u64,
    pub decoded: u64,
    pub rejected: BTreeMap<String, u64>,
    pub panics: u64,
    /// Decoded inputs that did not re-encode to the same bytes.
    pub unstable: u64,
}

fn variant(e: &WireError) -> String {
    match e {
        WireError::Malformed(_) => "Malformed",
        WireError::BodyTooLarge { .. } => "BodyTooLarge",
        WireError::IdTooLong { .. } => "IdTooLong",
        WireError::FrameTooLarge { .. } => "FrameTooLarge",
        WireError::EmptyCiphertext => "EmptyCiphertext",
    }
    .into()
}

/// Random byte strings into both decoders. A third of the envelope inputs
/// carry a consistent length prefix and another third are valid encodings
/// with a few bytes overwritten; half the media inputs have a plausible
/// header. That way the parsers get past their first check.
pub fn protocol_fuzz(seed: u64, inputs: u64) -> (Check, FuzzTally, FuzzTally) {
    let started = Instant::now();
    let mut check = Check::new("protocol fuzz");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env_tally = FuzzTally::default();
    let mut media_tally = FuzzTally::default();
    let mut buf = Vec::new();
    for i in 0..inputs {
        let len = rng.gen_range(0..=2048usize);
        buf.resize(len, 0);
        rng.fill_bytes(&mut buf);
        match i % 3 {
            1 if len >= 4 => {
                let payload = (len - 4) as u32;
                buf[..4].copy_from_slice(&payload.to_be_bytes());
            }
            2 => {
                buf = mutated_envelope(&mut rng);
            }
            _ => {}
        }
        env_tally.inputs += 1;
        match catch_unwind(AssertUnwindSafe(|| decode_envelope(&buf))) {
            Err(_) => env_tally.panics += 1,
            Ok(Ok(env)) => {
                env_tally.decoded += 1;
                if encode_envelope(&env).ok().as_deref() != Some(&buf[..]) {
                    env_tally.unstable += 1;
                }
            }
            Ok(Err(e)) => *env_tally.rejected.entry(variant(&e)).or_default() += 1,
        }

        let mlen = rng.gen_range(0..=1600usize);
        buf.resize(mlen, 0);
        rng.fill_bytes(&mut buf);
        if i % 2 == 1 && mlen >= wire::MEDIA_HEADER_LEN {
            buf[0] = (wire::MEDIA_VERSION << 4) | wire::PAYLOAD_PCM16_MONO;
            buf[1] = 0;
            let tag = rng.gen_range(0..=(mlen - wire::MEDIA_HEADER_LEN) as u16 + 8);
            buf[12..14].copy_from_slice(&tag.to_be_bytes());
        }
        media_tally.inputs += 1;
        match catch_unwind(AssertUnwindSafe(|| decode_media_frame(&buf))) {
            Err(_) => media_tally.panics += 1,
            Ok(Ok(frame)) => {
                media_tally.decoded += 1;
                if encode_media_frame(&frame).ok().as_deref() != Some(&buf[..]) {
                    media_tally.unstable += 1;
                }
            }
            Ok(Err(e)) => *media_tally.rejected.entry(variant(&e)).or_default() += 1,
        }
    }
    for (name, t) in [("envelope", &env_tally), ("media", &media_tally)] {
        check.expect(
            t.panics == 0 && t.unstable == 0 && t.inputs == inputs,
            format!(
                "{name} decoder: {} inputs, {} panics, {} decoded (all re-encode identically: {}), rejections {:?}",
                t.inputs,
                t.panics,
                t.decoded,
                t.unstable == 0,
                t.rejected
            ),
        );
    }
    check.elapsed_s = started.elapsed().as_secs_f64();
    (check, env_tally, media_tally)
}

fn mutated_envelope(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let id = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(0..12);
        (0..n).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
    };
    let mut body = vec![0u8; rng.gen_range(0..256)];
    rng.fill_bytes(&mut body);
    let kind = Kind::ALL[rng.gen_range(0..Kind::ALL.len())];
    let (from, to) = (id(rng), id(rng));
    let env = SignalEnvelope::new(kind, from, to, rng.next_u64(), body);
    let mut out = encode_envelope(&env).expect("bounded envelope encodes");
    // zero edits leaves a valid frame, which must round-trip
    for _ in 0..rng.gen_range(0..=3) {
        let at = rng.gen_range(0..out.len());
        out[at] = rng.gen();
    }
    out
}

/// Sends one LOGIN on a fresh secure connection and returns the reply
/// as (kind, from, to, body), i.e. everything except the send time.
async fn raw_login(addr: SocketAddr, username: &str, password: &str) -> Result<(Kind, String, String, Vec<u8>), BenchError> {
    let stream = tokio::net::TcpStream::connect(addr).await?;
    let mut conn = peervoip_core::conn::connect_secure(Box::new(stream))
        .await
        .map_err(|e| BenchError::Setup(e.to_string()))?;
    let req = LoginRequest::Login {
        username: username.into(),
        password: password.into(),
        media_port: None,
        p2p_port: None,
    };
    conn.sender
        .send(SignalEnvelope::new(Kind::Login, "", "", 0, to_body(&req)))
        .map_err(|e| BenchError::Setup(e.to_string()))?;
    let reply = tokio::time::timeout(EVENT_WAIT, conn.reader.next())
        .await
        .map_err(|_| BenchError::Timeout("login reply"))?
        .map_err(|e| BenchError::Setup(e.to_string()))?
        .ok_or(BenchError::Setup("server closed the connection".into()))?;
    conn.sender.close();
    Ok((reply.kind, reply.from, reply.to, reply.body))
}

const SECRETS: [(&str, &str); 3] = [
    ("carol", "Zq7#vP!x9@Lm-first"),
    ("dave", "qq*Wobble^Tarn%88"),
    ("erin", "\u{00e9}t\u{00e9}-Gl\u{00fc}ck-\u{2603}-41"),
];

/// Blocklist on both endpoints, password-free store, indistinguishable
/// login failures and account persistence across a restart.
pub async fn auth_suite() -> Result<Check, BenchError> {
    let started = Instant::now();
    let mut check = Check::new("security/auth suite");

    // sender-side refusal: the server and receiver would allow it
    {
        let bed = TestBed::start(|c| c.blocklist = Blocklist::new(Vec::<String>::new())).await?;
        let alice = bed.peer("alice", LinkShape::default(), |_| {}).await?;
        let bob = bed.peer("bob", LinkShape::default(), |c| c.blocklist = vec![]).await?;
        for name in ["setup.exe", "Setup.EXE", "tool.ExE"] {
            let path = bed.path().join(name);
            std::fs::write(&path, b"MZ")?;
            let r = alice.engine.offer_file("bob", &path, false).await;
            let code = r.as_ref().err().map(|e| e.code());
            check.expect(
                code.as_deref() == Some("BLOCKED_EXTENSION"),
                format!("sender refuses {name}: {code:?}"),
            );
        }
        let offers = bed.server.hub().metrics.received(Kind::FileOffer);
        check.expect(offers == 0, format!("server saw {offers} offers from the blocked sender"));
        bed.shutdown(vec![alice, bob]).await;
    }

    // receiver-side refusal: the server and sender would allow it
    {
        let bed = TestBed::start(|c| c.blocklist = Blocklist::new(Vec::<String>::new())).await?;
        let alice = bed.peer("alice", LinkShape::default(), |c| c.blocklist = vec![]).await?;
        let bob = bed.peer("bob", LinkShape::default(), |_| {}).await?;
        for (i, name) in ["run.exe", "RUN2.EXE", "run3.eXe"].into_iter().enumerate() {
            let path = bed.path().join(name);
            std::fs::write(&path, b"MZ")?;
            let direct = i == 2;
            match alice.engine.offer_file("bob", &path, direct).await {
                Err(e) => check.expect(
                    e.code() == "BLOCKED_EXTENSION",
                    format!("receiver refuses {name} (direct={direct}): {}", e.code()),
                ),
                Ok(id) => {
                    let done = alice
                        .wait_for(EventKind::FileProgress, EVENT_WAIT, crate::file::is_terminal(id))
                        .await?;
                    check.expect(
                        done["state"] == "failed" && done["error"] == "BLOCKED_EXTENSION",
                        format!("receiver refuses {name} (direct={direct}): {}", done["error"]),
                    );
                }
            }
            let landed = std::fs::read_dir(&bob.download_dir)?.count();
            check.expect(landed == 0, format!("receiver download dir holds {landed} files after {name}"));
        }
        bed.shutdown(vec![alice, bob]).await;
    }

    // store contents, identical failures, persistence
    let data = tempfile::tempdir()?;
    let cfg = {
        let mut c = ServerConfig::ephemeral(data.path());
        c.admin_listen = None;
        c
    };
    let server = Server::start(cfg.clone()).await.map_err(|e| BenchError::Setup(e.to_string()))?;
    {
        let probe = engine_on(&server, &data.path().join("probe")).await?;
        for (user, pw) in SECRETS {
            probe.signup(user, pw, None).await?;
        }
        probe.shutdown().await;
    }
    let store = std::fs::read(data.path().join("accounts.json"))?;
    let leaks = password_fragments_in(&store);
    check.expect(
        leaks.is_empty(),
        format!("account store ({} bytes) holds no password substring of 4+ chars; hits: {leaks:?}", store.len()),
    );
    let addr = server.signaling_addr();
    let unknown = raw_login(addr, "nobody-here", SECRETS[0].1).await?;
    let wrong = raw_login(addr, SECRETS[0].0, "not-the-password").await?;
    check.expect(
        unknown == wrong && unknown.0 == Kind::Error,
        format!(
            "unknown user and wrong password replies identical: {} ({})",
            unknown == wrong,
            String::from_utf8_lossy(&unknown.3)
        ),
    );
    server.shutdown().await;

    let server = Server::start(cfg).await.map_err(|e| BenchError::Setup(e.to_string()))?;
    {
        let probe = engine_on(&server, &data.path().join("probe2")).await?;
        let mut restored = 0;
        for (user, pw) in SECRETS {
            if probe.login(user, pw).await.is_ok() {
                restored += 1;
                probe.logout().await?;
            }
        }
        let wrong = probe.login(SECRETS[1].0, SECRETS[0].1).await.err().map(|e| e.code());
        check.expect(
            restored == SECRETS.len() && wrong.as_deref() == Some("BAD_CREDENTIALS"),
            format!("{restored}/{} accounts log in after restart; cross password: {wrong:?}", SECRETS.len()),
        );
        probe.shutdown().await;
    }
    server.shutdown().await;
    check.elapsed_s = started.elapsed().as_secs_f64();
    Ok(check)
}

/// Substrings (4+ chars) of any test password found in `haystack`, also
/// checked in hex and base64 spellings of the full password.
fn password_fragments_in(haystack: &[u8]) -> Vec<String> {
    use base64::Engine as _;
    let b64 = |b: &[u8]| base64::engine::general_purpose::STANDARD_NO_PAD.encode(b);
    let text = String::from_utf8_lossy(haystack).to_lowercase();
    let mut hits = Vec::new();
    for (_, pw) in SECRETS {
        let chars: Vec<char> = pw.chars().collect();
        for i in 0..chars.len() {
            for j in i + 4..=chars.len() {
                let frag: String = chars[i..j].iter().collect::<String>().to_lowercase();
                if text.contains(&frag) {
                    hits.push(frag);
                }
            }
        }
        for spelled in [hex::encode(pw.as_bytes()), b64(pw.as_bytes())] {
            if text.contains(&spelled.to_lowercase()) {
                hits.push(spelled);
            }
        }
    }
    hits.sort();
    hits.dedup();
    hits
}

