//! Attestation-stub handshake and sealed framing between client and enclave.
//!
//! The handshake keeps the verify-then-exchange shape of remote attestation
//! without external attestation infrastructure: the server signs
//! `(measurement, client ephemeral, server ephemeral, session id, params)`
//! with a static attestation key whose public half ships with the client.
//! Both sides then derive the session key from an X25519 exchange.
//!
//! Frame layout (little-endian):
//! `session_id (16) | counter u64 | ciphertext length u32 | ciphertext | tag (16)`.
//! The header is authenticated as associated data and the nonce is
//! `session_id[..4] | counter`, with separate keys per direction.

use std::time::{SystemTime, UNIX_EPOCH};

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::RngCore;
use sha2::{Digest, Sha256};
use x25519_dalek::{EphemeralSecret, PublicKey};

use crate::error::{Error, Result};

pub const MEASUREMENT_VERSION: u16 = 1;
pub const MEASUREMENT_LEN: usize = 32 + 32 + 2;
pub const FRAME_HEADER_LEN: usize = 16 + 8 + 4;
pub const TAG_LEN: usize = 16;
pub const MAX_FRAME_PAYLOAD: usize = 256 << 20;
pub const DEFAULT_SESSION_TTL_SECS: u64 = 600;

const STUB_KEY_SEED: &[u8] = b"pct attestation stub key v1";
const SESSION_SALT: &[u8] = b"pct session v1";

/// Trusted-side settings that change what the enclave discloses. They are
/// folded into the measurement, so a client pinned to one policy rejects a
/// server running another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EnclavePolicy {
    pub emit_matched_count: bool,
}

impl EnclavePolicy {
    fn digest_input(&self) -> [u8; 1] {
        [self.emit_matched_count as u8]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Measurement {
    pub code_hash: [u8; 32],
    pub signer_id: [u8; 32],
    pub version: u16,
}

impl Measurement {
    /// Reproducible measurement of this build under `policy`.
    pub fn of_build(policy: &EnclavePolicy, signer: &VerifyingKey) -> Self {
        let mut h = Sha256::new();
        h.update(b"pct-enclave\0");
        h.update(env!("CARGO_PKG_NAME").as_bytes());
        h.update(b"\0");
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update(b"\0");
        h.update(policy.digest_input());
        Measurement {
            code_hash: h.finalize().into(),
            signer_id: Sha256::digest(signer.as_bytes()).into(),
            version: MEASUREMENT_VERSION,
        }
    }

    pub fn to_bytes(&self) -> [u8; MEASUREMENT_LEN] {
        let mut out = [0u8; MEASUREMENT_LEN];
        out[..32].copy_from_slice(&self.code_hash);
        out[32..64].copy_from_slice(&self.signer_id);
        out[64..].copy_from_slice(&self.version.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != MEASUREMENT_LEN {
            return Err(Error::protocol("measurement must be 66 bytes"));
        }
        Ok(Measurement {
            code_hash: b[..32].try_into().unwrap(),
            signer_id: b[32..64].try_into().unwrap(),
            version: u16::from_le_bytes([b[64], b[65]]),
        })
    }
}

/// The static signing key standing in for the enclave's attestation identity.
pub struct AttestationKey(SigningKey);

impl AttestationKey {
    /// The baked-in stub key shared by every server and client of this build.
    pub fn stub() -> Self {
        Self::from_seed(Sha256::digest(STUB_KEY_SEED).into())
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        AttestationKey(SigningKey::from_bytes(&seed))
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.0.verifying_key()
    }

    pub fn sign_response(&self, client_id: u64, contact: bool, timestamp: u64) -> [u8; 64] {
        self.0
            .sign(&response_message(client_id, contact, timestamp))
            .to_bytes()
    }
}

fn response_message(client_id: u64, contact: bool, timestamp: u64) -> Vec<u8> {
    let mut m = Vec::with_capacity(25);
    m.extend_from_slice(b"pct-resp");
    m.extend_from_slice(&client_id.to_le_bytes());
    m.push(contact as u8);
    m.extend_from_slice(&timestamp.to_le_bytes());
    m
}

/// Checks a response tag produced by [`AttestationKey::sign_response`].
pub fn verify_response_tag(key: &VerifyingKey, client_id: u64, contact: bool, timestamp: u64, tag: &[u8; 64]) -> Result<()> {
    key.verify(&response_message(client_id, contact, timestamp), &Signature::from_bytes(tag))
        .map_err(|_| Error::protocol("response attestation tag does not verify"))
}

/// What a client trusts before talking to a server.
#[derive(Debug, Clone)]
pub struct TrustAnchor {
    pub attestation_key: VerifyingKey,
    pub measurement: Measurement,
}

impl TrustAnchor {
    pub fn for_policy(policy: &EnclavePolicy) -> Self {
        let key = AttestationKey::stub().verifying_key();
        TrustAnchor {
            measurement: Measurement::of_build(policy, &key),
            attestation_key: key,
        }
    }
}

impl Default for TrustAnchor {
    fn default() -> Self {
        Self::for_policy(&EnclavePolicy::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientHello {
    pub ephemeral_public: [u8; 32],
}

impl ClientHello {
    pub fn to_bytes(&self) -> [u8; 32] {
        self.ephemeral_public
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        Ok(ClientHello {
            ephemeral_public: b
                .try_into()
                .map_err(|_| Error::protocol("client hello must be 32 bytes"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandshakeResponse {
    pub measurement: Measurement,
    pub server_public: [u8; 32],
    pub session_id: [u8; 16],
    /// Opaque server parameters bound into the signature (the encoded theta).
    pub params: Vec<u8>,
    pub signature: [u8; 64],
}

impl HandshakeResponse {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MEASUREMENT_LEN + 32 + 16 + 2 + self.params.len() + 64);
        out.extend_from_slice(&self.measurement.to_bytes());
        out.extend_from_slice(&self.server_public);
        out.extend_from_slice(&self.session_id);
        out.extend_from_slice(&(self.params.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.params);
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let fixed = MEASUREMENT_LEN + 32 + 16 + 2;
        if b.len() < fixed + 64 {
            return Err(Error::protocol("handshake response too short"));
        }
        let plen = u16::from_le_bytes([b[fixed - 2], b[fixed - 1]]) as usize;
        if b.len() != fixed + plen + 64 {
            return Err(Error::protocol("handshake response length mismatch"));
        }
        Ok(HandshakeResponse {
            measurement: Measurement::from_bytes(&b[..MEASUREMENT_LEN])?,
            server_public: b[MEASUREMENT_LEN..MEASUREMENT_LEN + 32].try_into().unwrap(),
            session_id: b[MEASUREMENT_LEN + 32..MEASUREMENT_LEN + 48].try_into().unwrap(),
            params: b[fixed..fixed + plen].to_vec(),
            signature: b[fixed + plen..].try_into().unwrap(),
        })
    }
}

fn transcript(m: &Measurement, client_public: &[u8; 32], server_public: &[u8; 32], session_id: &[u8; 16], params: &[u8]) -> Vec<u8> {
    let mut t = Vec::with_capacity(16 + MEASUREMENT_LEN + 80 + params.len());
    t.extend_from_slice(b"pct-handshake-v1");
    t.extend_from_slice(&m.to_bytes());
    t.extend_from_slice(client_public);
    t.extend_from_slice(server_public);
    t.extend_from_slice(session_id);
    t.extend_from_slice(params);
    t
}

/// Server side of the handshake.
pub struct Attestor {
    key: AttestationKey,
    measurement: Measurement,
}

impl Attestor {
    pub fn new(key: AttestationKey, policy: &EnclavePolicy) -> Self {
        let measurement = Measurement::of_build(policy, &key.verifying_key());
        Attestor { key, measurement }
    }

    pub fn measurement(&self) -> &Measurement {
        &self.measurement
    }

    pub fn key(&self) -> &AttestationKey {
        &self.key
    }

    pub fn respond(&self, hello: &ClientHello, params: &[u8], ttl_secs: u64) -> Result<(HandshakeResponse, Session)> {
        if params.len() > u16::MAX as usize {
            return Err(Error::protocol("handshake params too long"));
        }
        let secret = EphemeralSecret::random_from_rng(OsRng);
        let server_public = PublicKey::from(&secret).to_bytes();
        let mut session_id = [0u8; 16];
        OsRng.fill_bytes(&mut session_id);
        let t = transcript(&self.measurement, &hello.ephemeral_public, &server_public, &session_id, params);
        let signature = self.key.0.sign(&t).to_bytes();
        let shared = secret.diffie_hellman(&PublicKey::from(hello.ephemeral_public));
        if !shared.was_contributory() {
            return Err(Error::Handshake("non-contributory client key".into()));
        }
        let session = Session::derive(Role::Server, session_id, shared.as_bytes(), &t, ttl_secs);
        Ok((
            HandshakeResponse {
                measurement: self.measurement,
                server_public,
                session_id,
                params: params.to_vec(),
                signature,
            },
            session,
        ))
    }
}

/// Client side of the handshake; one per connection attempt.
pub struct ClientHandshake {
    secret: EphemeralSecret,
    public: [u8; 32],
}

impl ClientHandshake {
    pub fn start() -> (Self, ClientHello) {
        let secret = EphemeralSecret::random_from_rng(OsRng);
        let public = PublicKey::from(&secret).to_bytes();
        (
            ClientHandshake { secret, public },
            ClientHello {
                ephemeral_public: public,
            },
        )
    }

    /// Verifies the server's measurement and transcript signature, then derives the session.
    pub fn finish(self, resp: &HandshakeResponse, anchor: &TrustAnchor, ttl_secs: u64) -> Result<Session> {
        if resp.measurement != anchor.measurement {
            return Err(Error::Handshake("enclave measurement does not match the trusted build".into()));
        }
        let t = transcript(&resp.measurement, &self.public, &resp.server_public, &resp.session_id, &resp.params);
        anchor
            .attestation_key
            .verify(&t, &Signature::from_bytes(&resp.signature))
            .map_err(|_| Error::Handshake("attestation signature does not verify".into()))?;
        let shared = self.secret.diffie_hellman(&PublicKey::from(resp.server_public));
        if !shared.was_contributory() {
            return Err(Error::Handshake("non-contributory server key".into()));
        }
        Ok(Session::derive(Role::Client, resp.session_id, shared.as_bytes(), &t, ttl_secs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

pub fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// An established channel. Keys stay inside this struct; only a
/// fingerprint is exposed.
pub struct Session {
    id: [u8; 16],
    role: Role,
    shared_key: [u8; 32],
    send: ChaCha20Poly1305,
    recv: ChaCha20Poly1305,
    send_counter: u64,
    recv_next: u64,
    established_at: u64,
    ttl_secs: u64,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("id", &hex16(&self.id))
            .field("role", &self.role)
            .field("send_counter", &self.send_counter)
            .finish_non_exhaustive()
    }
}

pub(crate) fn hex16(id: &[u8; 16]) -> String {
    id.iter().map(|b| format!("{b:02x}")).collect()
}

impl Session {
    fn derive(role: Role, id: [u8; 16], dh: &[u8; 32], transcript: &[u8], ttl_secs: u64) -> Self {
        let th = Sha256::digest(transcript);
        let mut shared_key = [0u8; 32];
        Hkdf::<Sha256>::new(Some(SESSION_SALT), dh)
            .expand(&th, &mut shared_key)
            .expect("32 bytes is a valid HKDF length");
        let dir = Hkdf::<Sha256>::new(None, &shared_key);
        let mut c2s = [0u8; 32];
        let mut s2c = [0u8; 32];
        dir.expand(b"client->server", &mut c2s).unwrap();
        dir.expand(b"server->client", &mut s2c).unwrap();
        let (send, recv) = match role {
            Role::Client => (c2s, s2c),
            Role::Server => (s2c, c2s),
        };
        Session {
            id,
            role,
            shared_key,
            send: ChaCha20Poly1305::new(Key::from_slice(&send)),
            recv: ChaCha20Poly1305::new(Key::from_slice(&recv)),
            send_counter: 0,
            recv_next: 0,
            established_at: now_secs(),
            ttl_secs,
        }
    }

    pub fn id(&self) -> [u8; 16] {
        self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Stable per-session client identifier (first 8 bytes of the session id).
    pub fn client_id(&self) -> u64 {
        u64::from_le_bytes(self.id[..8].try_into().unwrap())
    }

    pub fn key_fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.shared_key).into()
    }

    pub fn is_expired_at(&self, now: u64) -> bool {
        now >= self.established_at.saturating_add(self.ttl_secs)
    }

    #[cfg(test)]
    pub(crate) fn set_send_counter(&mut self, c: u64) {
        self.send_counter = c;
    }

    fn nonce(&self, counter: u64) -> [u8; 12] {
        let mut n = [0u8; 12];
        n[..4].copy_from_slice(&self.id[..4]);
        n[4..].copy_from_slice(&counter.to_le_bytes());
        n
    }

    pub fn seal(&mut self, plaintext: &[u8]) -> Result<Vec<u8>> {
        if self.is_expired_at(now_secs()) || self.send_counter == u64::MAX {
            return Err(Error::SessionExpired);
        }
        if plaintext.len() > MAX_FRAME_PAYLOAD {
            return Err(Error::invalid("plaintext exceeds frame limit"));
        }
        let counter = self.send_counter;
        self.send_counter += 1;
        let mut frame = Vec::with_capacity(FRAME_HEADER_LEN + plaintext.len() + TAG_LEN);
        frame.extend_from_slice(&self.id);
        frame.extend_from_slice(&counter.to_le_bytes());
        frame.extend_from_slice(&(plaintext.len() as u32).to_le_bytes());
        frame.extend_from_slice(plaintext);
        let (header, body) = frame.split_at_mut(FRAME_HEADER_LEN);
        let tag = self
            .send
            .encrypt_in_place_detached(Nonce::from_slice(&self.nonce(counter)), header, body)
            .map_err(|_| Error::SealedData("encryption failed".into()))?;
        frame.extend_from_slice(&tag);
        Ok(frame)
    }

    pub fn open(&mut self, frame: &[u8]) -> Result<Vec<u8>> {
        if self.is_expired_at(now_secs()) {
            return Err(Error::SessionExpired);
        }
        let bad = |m: &str| Error::SealedData(m.to_string());
        if frame.len() < FRAME_HEADER_LEN + TAG_LEN {
            return Err(bad("frame too short"));
        }
        let (header, rest) = frame.split_at(FRAME_HEADER_LEN);
        if header[..16] != self.id {
            return Err(bad("frame belongs to another session"));
        }
        let counter = u64::from_le_bytes(header[16..24].try_into().unwrap());
        let len = u32::from_le_bytes(header[24..28].try_into().unwrap()) as usize;
        if rest.len() != len + TAG_LEN {
            return Err(bad("frame length mismatch"));
        }
        if counter < self.recv_next {
            return Err(bad("replayed or reordered frame"));
        }
        let mut body = rest[..len].to_vec();
        let tag = Tag::from_slice(&rest[len..]);
        self.recv
            .decrypt_in_place_detached(Nonce::from_slice(&self.nonce(counter)), header, &mut body, tag)
            .map_err(|_| bad("authentication failed"))?;
        self.recv_next = counter + 1;
        Ok(body)
    }
}

/// Session id of a frame, for routing before it is opened.
pub fn frame_session_id(frame: &[u8]) -> Option<[u8; 16]> {
    frame.get(..16).map(|s| s.try_into().unwrap())
}
