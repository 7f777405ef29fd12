//! Client side: encode locally, attest the server, send one sealed query.

use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use super::protocol::{encode_query, parse_error_payload, read_message, write_message, ErrorCode, MsgType};
use crate::channel::{ClientHandshake, HandshakeResponse, TrustAnchor, DEFAULT_SESSION_TTL_SECS};
use crate::codec::{encode_points, EncodeStats, Theta, TrajectoryPoint};
use crate::error::{Error, Result};
use crate::psi::ContactResponse;

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub anchor: TrustAnchor,
    /// When set, the server's advertised theta must equal this one.
    pub expected_theta: Option<Theta>,
    pub io_timeout: Duration,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            anchor: TrustAnchor::default(),
            expected_theta: None,
            io_timeout: Duration::from_secs(300),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub response: ContactResponse,
    pub theta: Theta,
    pub encode: EncodeStats,
}

fn expect(stream: &mut TcpStream, want: MsgType) -> Result<Vec<u8>> {
    match read_message(stream)? {
        Some((ty, p)) if ty == want => Ok(p),
        Some((MsgType::Error, p)) => {
            let (code, msg) = parse_error_payload(&p);
            Err(match code {
                ErrorCode::Expired => Error::SessionExpired,
                _ => Error::protocol(format!("server error ({code:?}): {msg}")),
            })
        }
        Some((ty, _)) => Err(Error::protocol(format!("expected {want:?}, got {ty:?}"))),
        None => Err(Error::protocol("server closed the connection")),
    }
}

/// Handshake, encode `points` under the server's theta, query, and verify
/// the signed response.
pub fn client_query<A: ToSocketAddrs>(server: A, points: &[TrajectoryPoint], opts: &ClientOptions) -> Result<QueryOutcome> {
    if points.is_empty() {
        return Err(Error::invalid("trajectory is empty"));
    }
    for p in points {
        p.validate()?;
    }
    let mut stream = TcpStream::connect(server)?;
    stream.set_read_timeout(Some(opts.io_timeout))?;
    stream.set_write_timeout(Some(opts.io_timeout))?;
    let _ = stream.set_nodelay(true);

    let (hs, hello) = ClientHandshake::start();
    write_message(&mut stream, MsgType::Handshake, &hello.to_bytes())?;
    let resp = HandshakeResponse::from_bytes(&expect(&mut stream, MsgType::HandshakeResp)?)?;
    let mut session = hs.finish(&resp, &opts.anchor, DEFAULT_SESSION_TTL_SECS)?;
    let theta = Theta::from_bytes(&resp.params).map_err(|e| Error::protocol(format!("server sent bad theta: {e}")))?;
    if let Some(want) = opts.expected_theta {
        if want != theta {
            return Err(Error::config(format!("server theta {theta:?} does not match expected {want:?}")));
        }
    }

    let (keys, encode) = encode_points(points, &theta)?;
    let frame = session.seal(&encode_query(&keys))?;
    drop(keys);
    write_message(&mut stream, MsgType::Query, &frame)?;
    let sealed = expect(&mut stream, MsgType::Response)?;
    let response = ContactResponse::from_bytes(&session.open(&sealed)?)?;
    if response.client_id != session.client_id() {
        return Err(Error::protocol("response addressed to another client"));
    }
    response.verify(&opts.anchor.attestation_key)?;
    Ok(QueryOutcome {
        response,
        theta,
        encode,
    })
}
